"""Energy terms and their analytic gradients.

Each loss returns ``(value, gradient)``.  The normal term is differentiated
through the perspective-correct barycentrics and the interpolated vertex
normals; which triangle covers a pixel is held fixed.
"""
import numpy as np

from ._accel import njit, pick
from .errors import DimensionMismatch, IndexOutOfRange
from .maps import require_same_size
from .model import FaceParams


def uv_vertex_loss(corr, projected, visible):
    """Mean L1 pixel distance over accepted and visible vertices."""
    projected = np.asarray(projected, dtype=np.float64)
    grad = np.zeros_like(projected)
    use = np.asarray(corr.accepted, dtype=bool) & np.asarray(visible, dtype=bool)
    use &= np.all(np.isfinite(projected), axis=1)
    count = int(use.sum())
    if count == 0:
        return 0.0, grad
    diff = projected[use] - corr.target_pixel[use]
    grad[use] = np.sign(diff) / count
    return float(np.abs(diff).sum() / count), grad


def landmark_loss(landmarks2d, projected):
    """Mean L1 pixel distance over (vertex_id, pixel) pairs."""
    projected = np.asarray(projected, dtype=np.float64)
    grad = np.zeros_like(projected)
    if landmarks2d is None or len(landmarks2d) == 0:
        return 0.0, grad
    ids = np.array([int(v) for v, _ in landmarks2d], dtype=np.int64)
    target = np.array([np.asarray(p, dtype=np.float64).reshape(2) for _, p in landmarks2d])
    if np.any(ids < 0) or np.any(ids >= projected.shape[0]):
        bad = int(ids[(ids < 0) | (ids >= projected.shape[0])][0])
        raise IndexOutOfRange(f"landmark vertex id {bad} outside [0, {projected.shape[0]})")
    diff = projected[ids] - target
    np.add.at(grad, ids, np.sign(diff) / len(ids))
    return float(np.abs(diff).sum() / len(ids)), grad


def regularization(face, mica=None, lambda_id=0.15, lambda_ex=0.01):
    """``lambda_id |z_id - mica|^2 + lambda_ex |z_ex|^2`` and its gradient."""
    anchor = np.zeros_like(face.z_id) if mica is None else np.asarray(mica, dtype=np.float64)
    if anchor.shape != face.z_id.shape:
        raise DimensionMismatch(f"identity anchor has shape {anchor.shape}, z_id has {face.z_id.shape}")
    d = face.z_id - anchor
    value = lambda_id * float(d @ d) + lambda_ex * float(face.z_ex @ face.z_ex)
    grad = FaceParams(2.0 * lambda_id * d, 2.0 * lambda_ex * face.z_ex, np.zeros(3))
    return value, grad


def normal_residual(pred, rendered):
    """Mean absolute per-channel difference of (P, 3) arrays, and d/d rendered."""
    count = pred.shape[0]
    if count == 0:
        return 0.0, np.zeros_like(rendered)
    diff = rendered - pred
    return float(np.abs(diff).sum() / (3 * count)), np.sign(diff) / (3 * count)


def normal_loss(pred, rendered, mask):
    """L1 normal loss over pixels valid in all three maps.

    Returns the value and the (H, W, 3) gradient with respect to the
    rendered map (zero outside the overlap).
    """
    require_same_size(pred, rendered, mask)
    use = pred.valid & rendered.valid & mask.valid
    grad = np.zeros(rendered.data.shape, dtype=np.float64)
    value, g = normal_residual(pred.data[use].astype(np.float64), rendered.data[use].astype(np.float64))
    grad[use] = g
    return value, grad


# --- rendered-normal backward ---------------------------------------------------

@njit
def _normal_backward_nb(px, py, tid, bary, g_m, X, normals, tris, fl, ppx, ppy):
    N = X.shape[0]
    g_n = np.zeros((N, 3))
    g_X = np.zeros((N, 3))
    g_fl = 0.0
    g_ppx = 0.0
    g_ppy = 0.0
    idx = np.empty(3, dtype=np.int64)
    gb = np.empty(3)
    s = np.empty(3)
    C = np.empty((3, 3))
    for p in range(px.shape[0]):
        f = tid[p]
        for k in range(3):
            idx[k] = tris[f, k]
        for k in range(3):
            v = idx[k]
            gb[k] = normals[v, 0] * g_m[p, 0] + normals[v, 1] * g_m[p, 1] + normals[v, 2] * g_m[p, 2]
            for c in range(3):
                g_n[v, c] += bary[p, k] * g_m[p, c]
        dx = (px[p] - ppx) / fl
        dy = (py[p] - ppy) / fl
        S = 0.0
        for k in range(3):
            a = idx[(k + 2) % 3]
            b = idx[(k + 1) % 3]
            C[k, 0] = X[a, 1] * X[b, 2] - X[a, 2] * X[b, 1]
            C[k, 1] = X[a, 2] * X[b, 0] - X[a, 0] * X[b, 2]
            C[k, 2] = X[a, 0] * X[b, 1] - X[a, 1] * X[b, 0]
            s[k] = dx * C[k, 0] + dy * C[k, 1] + C[k, 2]
            if s[k] < 0.0:
                s[k] = 0.0
            S += s[k]
        if not S > 0.0:
            continue
        mean = bary[p, 0] * gb[0] + bary[p, 1] * gb[1] + bary[p, 2] * gb[2]
        gdx = 0.0
        gdy = 0.0
        for k in range(3):
            if not s[k] > 0.0:
                continue
            gs = (gb[k] - mean) / S
            a = idx[(k + 2) % 3]
            b = idx[(k + 1) % 3]
            # d s / d X_a = X_b x d ; d s / d X_b = d x X_a ; d = (dx, dy, 1)
            g_X[a, 0] += gs * (X[b, 1] - X[b, 2] * dy)
            g_X[a, 1] += gs * (X[b, 2] * dx - X[b, 0])
            g_X[a, 2] += gs * (X[b, 0] * dy - X[b, 1] * dx)
            g_X[b, 0] += gs * (dy * X[a, 2] - X[a, 1])
            g_X[b, 1] += gs * (X[a, 0] - dx * X[a, 2])
            g_X[b, 2] += gs * (dx * X[a, 1] - dy * X[a, 0])
            gdx += gs * C[k, 0]
            gdy += gs * C[k, 1]
        g_fl -= (gdx * dx + gdy * dy) / fl
        g_ppx -= gdx / fl
        g_ppy -= gdy / fl
    return g_n, g_X, np.array([g_fl, g_ppx, g_ppy])


def _normal_backward_np(px, py, tid, bary, g_m, X, normals, tris, fl, ppx, ppy):
    N = X.shape[0]
    g_n = np.zeros((N, 3))
    g_X = np.zeros((N, 3))
    idx = tris[tid]                                   # (P, 3)
    gb = np.einsum("pkc,pc->pk", normals[idx], g_m)
    for k in range(3):
        np.add.at(g_n, idx[:, k], bary[:, k, None] * g_m)
    d = np.column_stack([(px - ppx) / fl, (py - ppy) / fl, np.ones_like(px)])
    a_idx = idx[:, [2, 0, 1]]
    b_idx = idx[:, [1, 2, 0]]
    Xa, Xb = X[a_idx], X[b_idx]                        # (P, 3, 3)
    C = np.cross(Xa, Xb)
    s = np.maximum(np.einsum("pkc,pc->pk", C, d), 0.0)
    S = s.sum(axis=1)
    ok = S > 0.0
    mean = np.einsum("pk,pk->p", bary, gb)
    gs = np.where(ok[:, None] & (s > 0.0), (gb - mean[:, None]) / np.where(ok, S, 1.0)[:, None], 0.0)
    dd = np.broadcast_to(d[:, None, :], Xa.shape)
    ga = gs[:, :, None] * np.cross(Xb, dd)
    gbv = gs[:, :, None] * np.cross(dd, Xa)
    np.add.at(g_X, a_idx.ravel(), ga.reshape(-1, 3))
    np.add.at(g_X, b_idx.ravel(), gbv.reshape(-1, 3))
    g_d = np.einsum("pk,pkc->pc", gs, C)
    g_cam = np.array([-(g_d[:, 0] * d[:, 0] + g_d[:, 1] * d[:, 1]).sum() / fl,
                      -g_d[:, 0].sum() / fl, -g_d[:, 1].sum() / fl])
    return g_n, g_X, g_cam


def shade_pixels(frag, pixels, triangles, normals):
    """Interpolated (unnormalised) normals at (row, col) pixels: (P, 3)."""
    rows, cols = pixels
    tid = frag.triangle_id[rows, cols]
    b = frag.barycentric[rows, cols]
    return np.einsum("pk,pkc->pc", b, normals[triangles[tid]])


def rendered_normal_backward(frag, pixels, grad_m, x_cam, normals, triangles, focal_length, principal_point):
    """Pull d/d(interpolated normal) at pixels back to vertices and intrinsics.

    Returns ``(g_normals (N, 3), g_x_cam (N, 3), g_intrinsics [fl, ppx, ppy])``
    where ``g_x_cam`` is only the part flowing through the barycentrics.
    """
    rows, cols = pixels
    tid = np.ascontiguousarray(frag.triangle_id[rows, cols], dtype=np.int64)
    bary = np.ascontiguousarray(frag.barycentric[rows, cols])
    px = cols.astype(np.float64) + 0.5
    py = rows.astype(np.float64) + 0.5
    kernel = pick(_normal_backward_nb, _normal_backward_np)
    return kernel(px, py, tid, bary, np.ascontiguousarray(grad_m, dtype=np.float64),
                  np.ascontiguousarray(x_cam, dtype=np.float64), np.ascontiguousarray(normals),
                  np.ascontiguousarray(triangles, dtype=np.int64), float(focal_length),
                  float(principal_point[0]), float(principal_point[1]))
