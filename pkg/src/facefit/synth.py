"""Synthetic assets and scenes used for self-verification.

``make_sphere_head`` builds a small face-like morphable model on an
icosphere (642 vertices): an ellipsoid with nose, eye sockets and chin,
8 smooth identity modes with the similarity transforms projected out, 4
localized expression modes, a skinned jaw and an azimuthal uv layout
centred on the face.  All arrays are float32-representable so the P3DM
codec round-trips them exactly.

Model space follows the camera convention (+y down, the face looks
towards -z), so a zero rotation camera sees the face frontally.
"""
import numpy as np

from .camera import CameraParams
from .maps import MapImage
from .model import FaceParams, MorphableModel
from .raster import render_maps

RADII = np.array([0.075, 0.095, 0.085])
ID_AMPLITUDE = 0.04     # max displacement (m) of one identity unit
EX_AMPLITUDE = 0.02


def icosphere(subdivisions=3):
    """Unit icosphere with outward (counter-clockwise from outside) faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _bump(dirs, center, width):
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
    return np.exp(-0.5 * (ang / width) ** 2)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _similarity_basis(points):
    """Orthonormal basis (3N, 7) of infinitesimal translations, rotations, scale."""
    c = points - points.mean(axis=0)
    cols = []
    for k in range(3):
        e = np.zeros_like(points)
        e[:, k] = 1.0
        cols.append(e.ravel())
    for k in range(3):
        axis = np.zeros(3)
        axis[k] = 1.0
        cols.append(np.cross(axis, c).ravel())
    cols.append(c.ravel())
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def _normalize_mode(d, amplitude):
    return d * (amplitude / np.max(np.linalg.norm(d, axis=1)))


def make_sphere_head(subdivisions=3):
    dirs, triangles = icosphere(subdivisions)
    x, y, z = dirs.T

    radial = np.zeros(len(dirs))
    radial += 0.024 * _bump(dirs, (0, 0.05, -1), 0.20)          # nose
    radial -= 0.010 * _bump(dirs, (0.38, -0.25, -0.89), 0.14)   # eye sockets
    radial -= 0.010 * _bump(dirs, (-0.38, -0.25, -0.89), 0.14)
    radial += 0.008 * _bump(dirs, (0, 0.62, -0.78), 0.22)       # chin
    radial += 0.005 * _bump(dirs, (0, -0.42, -0.9), 0.25)       # brow ridge
    template = dirs * RADII + dirs * radial[:, None]

    sim = _similarity_basis(template)
    id_fields = [x * x - y * y, 3 * z * z - 1, x * y, y * z, x * z,
                 z * (x * x - y * y), x * y * z, y * (5 * z * z - 1)]
    id_modes = []
    for f in id_fields:
        d = (f[:, None] * dirs).ravel()
        d -= sim @ (sim.T @ d)
        id_modes.append(_normalize_mode(d.reshape(-1, 3), ID_AMPLITUDE))
    id_basis = np.stack(id_modes, axis=2)

    ex_modes = []
    # mouth corners pulled out and up
    d = np.zeros_like(dirs)
    for sx in (1, -1):
        d += _bump(dirs, (sx * 0.35, 0.45, -0.82), 0.2)[:, None] * np.array([sx * 0.6, -0.8, 0.0])
    ex_modes.append(d)
    # lips pushed forward
    ex_modes.append(_bump(dirs, (0, 0.45, -0.89), 0.2)[:, None] * np.array([0.0, 0.0, -1.0]))
    # brows raised
    d = np.zeros_like(dirs)
    for sx in (1, -1):
        d += _bump(dirs, (sx * 0.3, -0.45, -0.84), 0.2)[:, None] * np.array([0.0, -1.0, 0.0])
    ex_modes.append(d)
    # cheeks puffed
    d = np.zeros_like(dirs)
    for sx in (1, -1):
        d += _bump(dirs, (sx * 0.55, 0.2, -0.8), 0.25)[:, None] * dirs
    ex_modes.append(d)
    ex_basis = np.stack([_normalize_mode(m, EX_AMPLITUDE) for m in ex_modes], axis=2)

    jaw_joint = np.array([0.0, 0.01, 0.03])
    jaw_weights = _smoothstep((template[:, 1] - 0.015) / 0.05) * _smoothstep((0.04 - template[:, 2]) / 0.06)

    # azimuthal equidistant layout around the face direction (-z)
    alpha = np.arccos(np.clip(-z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    rho = 0.48 * alpha / np.pi
    vertex_uv = np.column_stack([0.5 + rho * np.cos(phi), 0.5 + rho * np.sin(phi)])

    landmark_dirs = [(0, 0.05, -1), (0, -0.1, -1), (0.38, -0.25, -0.89), (-0.38, -0.25, -0.89),
                     (0.5, -0.25, -0.83), (-0.5, -0.25, -0.83), (0.26, -0.25, -0.93),
                     (-0.26, -0.25, -0.93), (0.3, -0.45, -0.84), (-0.3, -0.45, -0.84),
                     (0.35, 0.45, -0.82), (-0.35, 0.45, -0.82), (0, 0.4, -0.92), (0, 0.5, -0.87),
                     (0, 0.62, -0.78), (0.45, 0.55, -0.7), (-0.45, 0.55, -0.7), (0.7, 0.2, -0.68),
                     (-0.7, 0.2, -0.68), (0.12, 0.15, -0.98), (-0.12, 0.15, -0.98)]
    landmarks = []
    for ld in landmark_dirs:
        ld = np.asarray(ld, dtype=np.float64)
        idx = int(np.argmax(dirs @ (ld / np.linalg.norm(ld))))
        if idx not in landmarks:
            landmarks.append(idx)

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    return MorphableModel(
        template_vertices=f32(template),
        triangles=triangles,
        id_basis=f32(id_basis),
        ex_basis=f32(ex_basis),
        jaw_joint=f32(jaw_joint),
        jaw_weights=f32(np.clip(jaw_weights, 0.0, 1.0)),
        vertex_uv=f32(np.clip(vertex_uv, 0.0, 1.0)),
        landmark_vertex_ids=np.array(landmarks, dtype=np.int64),
    ).validate()


# --- synthetic scenes --------------------------------------------------------------

NOMINAL_FOCAL = 1.8     # focal length in units of image width
NOMINAL_DEPTH = 0.6


def random_face(model, rng, id_scale=0.25, ex_scale=0.5, jaw_max=0.2):
    return FaceParams(
        z_id=rng.uniform(-id_scale, id_scale, model.n_id),
        z_ex=rng.uniform(-ex_scale, ex_scale, model.n_ex),
        jaw_theta=np.array([rng.uniform(0.0, jaw_max), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)]),
    )


def random_camera(rng, width, height, max_angle=0.25, focal_spread=0.12):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    scale = width / 256.0
    return CameraParams(
        rotation=axis * angle,
        translation=[rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02),
                     rng.uniform(0.9, 1.15) * NOMINAL_DEPTH],
        focal_length=NOMINAL_FOCAL * width * rng.uniform(1.0 - focal_spread, 1.0 + focal_spread),
        principal_point=[width / 2.0 + rng.uniform(-4, 4) * scale, height / 2.0 + rng.uniform(-4, 4) * scale],
    )


def render_inputs(model, face, cam, width, height, mica_identity=None, landmarks2d=None):
    """FitInputs whose maps are rendered from known parameters."""
    from .fitter import FitInputs

    maps = render_maps(model, face, cam, width, height)
    return FitInputs(uv_map=maps["uv_map"], normal_map=maps["normal_map"],
                     mask=MapImage.from_mask(maps["uv_map"].valid),
                     mica_identity=mica_identity, landmarks2d=landmarks2d)


def synthetic_landmarks(model, face, cam, rng=None, noise_px=0.0):
    """(vertex_id, pixel) pairs from projecting the model's landmark vertices."""
    from .camera import project
    from .model import forward

    pix, _ = project(forward(model, face)[model.landmark_vertex_ids], cam)
    if rng is not None and noise_px > 0:
        pix = pix + rng.normal(scale=noise_px, size=pix.shape)
    return [(int(v), p) for v, p in zip(model.landmark_vertex_ids, pix)]


def random_sequence(model, rng, n_frames, width, height, ex_amplitude=0.4, max_angle=0.15):
    """Smooth synthetic clip: fixed identity and intrinsics, slowly varying
    expression, jaw and head pose.  Returns ``(faces, cams)``."""
    base_cam = random_camera(rng, width, height, max_angle=0.1)
    z_id = rng.uniform(-0.25, 0.25, model.n_id)
    phase = rng.uniform(0, 2 * np.pi, model.n_ex + 4)
    rot_axis = rng.normal(size=3)
    rot_axis /= np.linalg.norm(rot_axis)
    faces, cams = [], []
    for t in range(n_frames):
        s = t / max(n_frames - 1, 1)
        z_ex = ex_amplitude * np.sin(np.pi * s + phase[:model.n_ex])
        jaw = np.array([0.1 + 0.08 * np.sin(np.pi * s + phase[model.n_ex]), 0.0, 0.0])
        faces.append(FaceParams(z_id.copy(), z_ex, jaw))
        cam = base_cam.copy()
        cam.rotation = base_cam.rotation + max_angle * (s - 0.5) * rot_axis
        cam.translation = base_cam.translation + 0.01 * np.array([np.sin(np.pi * s + phase[-3]),
                                                                   np.sin(np.pi * s + phase[-2]), 0.0])
        cams.append(cam)
    return faces, cams
