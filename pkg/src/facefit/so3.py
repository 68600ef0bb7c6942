"""Axis-angle rotations: exponential map and its derivative."""
import numpy as np

# Below this angle the closed forms lose precision to cancellation; the
# truncated series are exact to double precision there.
_SMALL_ANGLE = 1e-3


def hat(w):
    """Skew-symmetric matrix with ``hat(w) @ v == cross(w, v)``."""
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _coefficients(theta):
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        s, co = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - co) / t2
        c = (theta - s) / (t2 * theta)
    return a, b, c


def exp_so3(w):
    """Rotation matrix for the axis-angle vector ``w`` (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.sqrt(w @ w))
    if theta == 0.0:
        return np.eye(3)
    a, b, _ = _coefficients(theta)
    K = hat(w)
    return np.eye(3) + a * K + b * (K @ K)


def right_jacobian(w):
    """Right Jacobian J with ``exp(w + d) ~= exp(w) @ exp(J @ d)``."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.sqrt(w @ w))
    _, b, c = _coefficients(theta)
    K = hat(w)
    return np.eye(3) - b * K + c * (K @ K)


def rotate_jacobian(w, points):
    """Derivative of ``exp(w) @ p`` with respect to ``w`` for each point.

    Returns an array of shape (M, 3, 3): ``out[i] = -R hat(p_i) J_r(w)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    R = exp_so3(w)
    J = right_jacobian(w)
    # hat(p) @ J == cross(p, J columns)
    hp_J = np.cross(points[:, None, :], J.T[None, :, :]).transpose(0, 2, 1)
    return -np.einsum("ij,mjk->mik", R, hp_J)


def rotate_vjp(w, points, grad_rotated):
    """Pull back gradients on ``exp(w) @ p_i`` to a gradient on ``w``.

    ``sum_i (d(R p_i)/dw)^T g_i = J_r^T sum_i p_i x (R^T g_i)``.
    """
    R = exp_so3(w)
    local = grad_rotated @ R          # rows are R^T g_i
    torque = np.cross(points, local).sum(axis=0)
    return right_jacobian(w).T @ torque
