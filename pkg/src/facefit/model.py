"""Parametric head model: identity/expression blendshapes plus a skinned jaw.

Vertices are produced as

    P_i = template_i + id_basis_i @ z_id + ex_basis_i @ z_ex
    V_i = (1 - w_i) P_i + w_i (R(jaw_theta) (P_i - jaw_joint) + jaw_joint)

with ``w_i`` the per-vertex jaw skinning weight.
"""
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import so3
from ._accel import njit, pick
from .errors import DegenerateGeometry, DimensionMismatch, NonFiniteData


@dataclass(frozen=True)
class MorphableModel:
    template_vertices: np.ndarray   # (N, 3) meters
    triangles: np.ndarray           # (F, 3) int
    id_basis: np.ndarray            # (N, 3, K_id)
    ex_basis: np.ndarray            # (N, 3, K_ex)
    jaw_joint: np.ndarray           # (3,)
    jaw_weights: np.ndarray         # (N,)
    vertex_uv: np.ndarray           # (N, 2)
    landmark_vertex_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_id(self):
        return self.id_basis.shape[2]

    @property
    def n_ex(self):
        return self.ex_basis.shape[2]

    def zero_params(self):
        return FaceParams.zeros(self.n_id, self.n_ex)

    def validate(self):
        """Check every structural invariant; raise naming the bad field."""
        N = self.template_vertices.shape[0] if self.template_vertices.ndim == 2 else -1
        if self.template_vertices.shape != (N, 3) or N < 3:
            raise DimensionMismatch(f"template_vertices: expected (N, 3), got {self.template_vertices.shape}")
        checks = [
            ("triangles", self.triangles.ndim == 2 and self.triangles.shape[1] == 3),
            ("id_basis", self.id_basis.ndim == 3 and self.id_basis.shape[:2] == (N, 3)),
            ("ex_basis", self.ex_basis.ndim == 3 and self.ex_basis.shape[:2] == (N, 3)),
            ("jaw_joint", self.jaw_joint.shape == (3,)),
            ("jaw_weights", self.jaw_weights.shape == (N,)),
            ("vertex_uv", self.vertex_uv.shape == (N, 2)),
            ("landmark_vertex_ids", self.landmark_vertex_ids.ndim == 1),
        ]
        for name, ok in checks:
            if not ok:
                raise DimensionMismatch(f"{name}: shape {getattr(self, name).shape} inconsistent with N={N}")
        for name in ("template_vertices", "id_basis", "ex_basis", "jaw_joint", "jaw_weights", "vertex_uv"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteData(f"{name}: contains NaN or inf")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= N):
            raise DimensionMismatch(f"triangles: index out of range [0, {N})")
        if self.landmark_vertex_ids.size and (self.landmark_vertex_ids.min() < 0
                                              or self.landmark_vertex_ids.max() >= N):
            raise DimensionMismatch(f"landmark_vertex_ids: index out of range [0, {N})")
        if np.any(self.jaw_weights < 0) or np.any(self.jaw_weights > 1):
            raise DimensionMismatch("jaw_weights: values outside [0, 1]")
        if np.any(self.vertex_uv < 0) or np.any(self.vertex_uv > 1):
            raise DimensionMismatch("vertex_uv: values outside [0, 1]")
        areas = triangle_areas(self.template_vertices, self.triangles)
        if np.any(areas <= 0):
            bad = int(np.argmax(areas <= 0))
            raise DegenerateGeometry(f"triangles: triangle {bad} has zero area")
        return self


@dataclass
class FaceParams:
    z_id: np.ndarray
    z_ex: np.ndarray
    jaw_theta: np.ndarray

    @classmethod
    def zeros(cls, n_id, n_ex):
        return cls(np.zeros(n_id), np.zeros(n_ex), np.zeros(3))

    def copy(self):
        return FaceParams(self.z_id.copy(), self.z_ex.copy(), self.jaw_theta.copy())

    def to_dict(self):
        return {"z_id": self.z_id.tolist(), "z_ex": self.z_ex.tolist(),
                "jaw_theta": self.jaw_theta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["z_id"], dtype=np.float64),
                   np.asarray(d["z_ex"], dtype=np.float64),
                   np.asarray(d["jaw_theta"], dtype=np.float64))


def load_model(path):
    """Read and validate a P3DM1 model file."""
    from .io import read_p3dm
    return read_p3dm(path).validate()


def default_model_path():
    """Path of the bundled synthetic head (see scripts/make_assets.py)."""
    return str(resources.files("facefit") / "data" / "sphere_head.p3dm")


def load_default_model():
    return load_model(default_model_path())


def _check_params(model, params):
    if params.z_id.shape != (model.n_id,):
        raise DimensionMismatch(f"z_id: expected {model.n_id} coefficients, got {params.z_id.shape}")
    if params.z_ex.shape != (model.n_ex,):
        raise DimensionMismatch(f"z_ex: expected {model.n_ex} coefficients, got {params.z_ex.shape}")
    if np.shape(params.jaw_theta) != (3,):
        raise DimensionMismatch(f"jaw_theta: expected 3-vector, got {np.shape(params.jaw_theta)}")


def shaped_vertices(model, params):
    """Blendshape result before jaw skinning."""
    N = model.n_vertices
    P = model.template_vertices + (model.id_basis.reshape(N * 3, -1) @ params.z_id).reshape(N, 3)
    return P + (model.ex_basis.reshape(N * 3, -1) @ params.z_ex).reshape(N, 3)


def forward(model, params):
    """Posed vertex positions (N, 3)."""
    _check_params(model, params)
    P = shaped_vertices(model, params)
    theta = np.asarray(params.jaw_theta, dtype=np.float64)
    if not np.any(theta):
        return P
    R = so3.exp_so3(theta)
    j = model.jaw_joint
    w = model.jaw_weights[:, None]
    rotated = (P - j) @ R.T + j
    return P + w * (rotated - P)


@dataclass
class ModelJacobian:
    """Per-vertex Jacobian blocks of ``forward``.

    ``d_id[i, :, k] = dV_i / dz_id[k]`` etc.  Vertices with zero jaw weight
    have zero ``d_jaw`` rows, which is where the sparsity lives.
    """
    d_id: np.ndarray    # (N, 3, K_id)
    d_ex: np.ndarray    # (N, 3, K_ex)
    d_jaw: np.ndarray   # (N, 3, 3)

    def dense(self):
        """(3N, K_id + K_ex + 3) matrix in ``[z_id, z_ex, jaw_theta]`` order."""
        N = self.d_id.shape[0]
        return np.concatenate([self.d_id, self.d_ex, self.d_jaw], axis=2).reshape(N * 3, -1)


def _blend_matrices(model, theta):
    """Per-vertex linear map A_i = (1 - w_i) I + w_i R, shape (N, 3, 3)."""
    R = so3.exp_so3(theta)
    w = model.jaw_weights[:, None, None]
    return (1.0 - w) * np.eye(3) + w * R


def forward_jacobian(model, params):
    _check_params(model, params)
    theta = np.asarray(params.jaw_theta, dtype=np.float64)
    A = _blend_matrices(model, theta)
    d_id = np.einsum("nij,njk->nik", A, model.id_basis)
    d_ex = np.einsum("nij,njk->nik", A, model.ex_basis)
    P = shaped_vertices(model, params)
    d_jaw = model.jaw_weights[:, None, None] * so3.rotate_jacobian(theta, P - model.jaw_joint)
    return ModelJacobian(d_id, d_ex, d_jaw)


def forward_vjp(model, params, grad_vertices):
    """Gradient of a scalar w.r.t. (z_id, z_ex, jaw_theta) given dL/dV."""
    theta = np.asarray(params.jaw_theta, dtype=np.float64)
    w = model.jaw_weights
    if np.any(theta):
        R = so3.exp_so3(theta)
        # h_i = A_i^T g_i
        h = (1.0 - w)[:, None] * grad_vertices + w[:, None] * (grad_vertices @ R)
        P = shaped_vertices(model, params)
        g_jaw = so3.rotate_vjp(theta, (P - model.jaw_joint), w[:, None] * grad_vertices)
    else:
        h = grad_vertices
        P = shaped_vertices(model, params)
        g_jaw = np.cross(P - model.jaw_joint, w[:, None] * grad_vertices).sum(axis=0)
    N = model.n_vertices
    g_id = h.reshape(-1) @ model.id_basis.reshape(N * 3, -1)
    g_ex = h.reshape(-1) @ model.ex_basis.reshape(N * 3, -1)
    return FaceParams(g_id, g_ex, g_jaw)


def triangle_areas(vertices, triangles):
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


# --- vertex normals ---------------------------------------------------------

def _accumulate_np(vertices, triangles):
    v = vertices[triangles]
    c = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    acc = np.zeros_like(vertices)
    # ravel order visits triangles in ascending index, matching the loop kernel
    np.add.at(acc, triangles.ravel(), np.repeat(c, 3, axis=0))
    return acc


@njit
def _accumulate_nb(vertices, triangles):
    acc = np.zeros_like(vertices)
    for f in range(triangles.shape[0]):
        i0, i1, i2 = triangles[f, 0], triangles[f, 1], triangles[f, 2]
        ax = vertices[i1, 0] - vertices[i0, 0]
        ay = vertices[i1, 1] - vertices[i0, 1]
        az = vertices[i1, 2] - vertices[i0, 2]
        bx = vertices[i2, 0] - vertices[i0, 0]
        by = vertices[i2, 1] - vertices[i0, 1]
        bz = vertices[i2, 2] - vertices[i0, 2]
        cx = ay * bz - az * by
        cy = az * bx - ax * bz
        cz = ax * by - ay * bx
        for k in range(3):
            i = triangles[f, k]
            acc[i, 0] += cx
            acc[i, 1] += cy
            acc[i, 2] += cz
    return acc


def _normalize_accumulated(acc, triangles):
    norm = np.sqrt(np.einsum("ij,ij->i", acc, acc))
    used = np.zeros(acc.shape[0], dtype=bool)
    used[triangles.ravel()] = True
    bad = used & (norm == 0)
    if np.any(bad):
        raise DegenerateGeometry(f"vertex {int(np.argmax(bad))}: adjacent faces have zero total area")
    safe = np.where(norm > 0, norm, 1.0)
    return acc / safe[:, None], norm


def vertex_normals(vertices, triangles, return_norms=False):
    """Area-weighted unit vertex normals (N, 3).

    Isolated vertices (in no triangle) get a zero vector.
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    acc = pick(_accumulate_nb, _accumulate_np)(vertices, triangles)
    n, norm = _normalize_accumulated(acc, triangles)
    return (n, norm) if return_norms else n


def _normals_vjp_np(vertices, triangles, g_acc):
    v = vertices[triangles]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    g_c = g_acc[triangles].sum(axis=1)
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    per_corner = np.stack([-(g_e1 + g_e2), g_e1, g_e2], axis=1)
    out = np.zeros_like(vertices)
    np.add.at(out, triangles.ravel(), per_corner.reshape(-1, 3))
    return out


@njit
def _normals_vjp_nb(vertices, triangles, g_acc):
    out = np.zeros_like(vertices)
    for f in range(triangles.shape[0]):
        i0, i1, i2 = triangles[f, 0], triangles[f, 1], triangles[f, 2]
        ax = vertices[i1, 0] - vertices[i0, 0]
        ay = vertices[i1, 1] - vertices[i0, 1]
        az = vertices[i1, 2] - vertices[i0, 2]
        bx = vertices[i2, 0] - vertices[i0, 0]
        by = vertices[i2, 1] - vertices[i0, 1]
        bz = vertices[i2, 2] - vertices[i0, 2]
        gx = g_acc[i0, 0] + g_acc[i1, 0] + g_acc[i2, 0]
        gy = g_acc[i0, 1] + g_acc[i1, 1] + g_acc[i2, 1]
        gz = g_acc[i0, 2] + g_acc[i1, 2] + g_acc[i2, 2]
        # d/de1 = e2 x g ; d/de2 = g x e1
        p0 = by * gz - bz * gy
        p1 = bz * gx - bx * gz
        p2 = bx * gy - by * gx
        q0 = gy * az - gz * ay
        q1 = gz * ax - gx * az
        q2 = gx * ay - gy * ax
        out[i0, 0] -= p0 + q0
        out[i0, 1] -= p1 + q1
        out[i0, 2] -= p2 + q2
        out[i1, 0] += p0
        out[i1, 1] += p1
        out[i1, 2] += p2
        out[i2, 0] += q0
        out[i2, 1] += q1
        out[i2, 2] += q2
    return out


def vertex_normals_vjp(vertices, triangles, grad_normals, normals=None, norms=None):
    """Pull dL/dn (N, 3) back to dL/dvertices (N, 3)."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if normals is None or norms is None:
        normals, norms = vertex_normals(vertices, triangles, return_norms=True)
    safe = np.where(norms > 0, norms, np.inf)
    radial = np.einsum("ij,ij->i", normals, grad_normals)
    g_acc = (grad_normals - normals * radial[:, None]) / safe[:, None]
    return pick(_normals_vjp_nb, _normals_vjp_np)(vertices, triangles, np.ascontiguousarray(g_acc))
