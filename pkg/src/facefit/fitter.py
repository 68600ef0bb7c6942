"""Single-image fitting: E = l_uv L_uv + l_n L_n + R, minimised with Adam.

Unknowns live in one flat vector ``[z_id, z_ex, jaw, rotation, translation,
log(fl), pp / W]``.  The focal length is optimised in log space and the
principal point in units of image width so a single camera learning rate
moves all camera coordinates by comparable relative amounts.

The first ``phase1_fraction`` of the steps moves only the camera (uv term
plus optional landmarks); the rest moves everything.  The energy is
piecewise smooth with small jumps (visibility, hard coverage), so plain
Adam iterates jitter near the optimum; the fit returns the best iterate
and ``energy_trace[k]`` is the full energy of the best iterate after step
``k``.
"""
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import losses, so3
from .adam import AdamState, adam_step
from .camera import MIN_DEPTH, CameraParams, project_camera_frame
from .correspond import DEFAULT_DELTA_UV, build_uv_index, find_correspondences
from .errors import DegenerateGeometry, DimensionMismatch, EmptyMask, NoCorrespondences
from .maps import require_same_size
from .model import FaceParams, forward, forward_vjp, vertex_normals, vertex_normals_vjp
from .raster import rasterize_camera_frame, visible_camera_frame

MIN_CORRESPONDENCES = 10


@dataclass
class FitConfig:
    lambda_uv: float = 2000.0
    lambda_n: float = 200.0
    lambda_id: float = 0.15
    lambda_ex: float = 0.01
    lambda_lmk: float = 0.0
    lr_id: float = 0.001
    lr_ex: float = 0.003
    lr_jaw: float = 0.003
    lr_cam: float = 0.001
    steps: int = 500
    delta_uv: float = DEFAULT_DELTA_UV
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    phase1_fraction: float = 0.2
    init_focal: float = 1.8     # initial focal length in units of image width

    def validate(self):
        for name in ("lambda_uv", "lambda_n", "lambda_id", "lambda_ex", "lambda_lmk",
                     "lr_id", "lr_ex", "lr_jaw", "lr_cam", "delta_uv", "adam_eps"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")
        if int(self.steps) != self.steps or self.steps <= 0:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.phase1_fraction <= 1.0:
            raise ValueError("phase1_fraction must lie in [0, 1]")
        if not self.init_focal > 0:
            raise ValueError("init_focal must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = int(v) if names[k].type in (int, "int") else float(v)
        return cls(**kwargs).validate()

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


@dataclass
class FitInputs:
    uv_map: object
    normal_map: object
    mask: object
    mica_identity: np.ndarray = None
    landmarks2d: list = None

    @property
    def width(self):
        return self.uv_map.width

    @property
    def height(self):
        return self.uv_map.height

    def validate(self, model=None):
        require_same_size(self.uv_map, self.normal_map, self.mask)
        if self.uv_map.channels != 2:
            raise DimensionMismatch(f"uv map needs 2 channels, has {self.uv_map.channels}")
        if self.normal_map.channels != 3:
            raise DimensionMismatch(f"normal map needs 3 channels, has {self.normal_map.channels}")
        if model is not None and self.mica_identity is not None:
            if np.shape(self.mica_identity) != (model.n_id,):
                raise DimensionMismatch(f"mica identity has shape {np.shape(self.mica_identity)}, "
                                        f"model has {model.n_id} identity coefficients")
        return self


@dataclass
class FitResult:
    face: FaceParams
    cam: CameraParams
    energy_trace: np.ndarray
    term_breakdown: dict
    best_step: int = -1      # step that produced the returned iterate, -1 = initial
    correspondences: object = field(default=None, repr=False)


class ParamLayout:
    """Slices of the flat unknown vector."""

    def __init__(self, n_id, n_ex, width):
        self.n_id, self.n_ex, self.width = n_id, n_ex, float(width)
        o = 0
        self.id = slice(o, o + n_id); o += n_id
        self.ex = slice(o, o + n_ex); o += n_ex
        self.jaw = slice(o, o + 3); o += 3
        self.rot = slice(o, o + 3); o += 3
        self.trans = slice(o, o + 3); o += 3
        self.logfl = slice(o, o + 1); o += 1
        self.pp = slice(o, o + 2); o += 2
        self.size = o
        self.face = slice(0, self.rot.start)
        self.cam = slice(self.rot.start, o)

    def pack(self, face, cam):
        theta = np.empty(self.size)
        theta[self.id] = face.z_id
        theta[self.ex] = face.z_ex
        theta[self.jaw] = face.jaw_theta
        theta[self.rot] = cam.rotation
        theta[self.trans] = cam.translation
        theta[self.logfl] = np.log(cam.focal_length)
        theta[self.pp] = cam.principal_point / self.width
        return theta

    def unpack(self, theta):
        face = FaceParams(theta[self.id].copy(), theta[self.ex].copy(), theta[self.jaw].copy())
        cam = CameraParams(theta[self.rot], theta[self.trans], float(np.exp(theta[self.logfl][0])),
                           theta[self.pp] * self.width)
        return face, cam

    def learning_rates(self, config, camera_only=False):
        lr = np.zeros(self.size)
        lr[self.cam] = config.lr_cam
        if not camera_only:
            lr[self.id] = config.lr_id
            lr[self.ex] = config.lr_ex
            lr[self.jaw] = config.lr_jaw
        return lr


class ImageProblem:
    """Energy of one image as a function of the flat unknown vector."""

    def __init__(self, model, inputs, config, corr=None):
        self.model, self.inputs, self.config = model, inputs.validate(model), config.validate()
        self.layout = ParamLayout(model.n_id, model.n_ex, inputs.width)
        if corr is None:
            try:
                index = build_uv_index(inputs.uv_map, inputs.mask)
            except EmptyMask:
                raise NoCorrespondences("no valid uv pixels inside the mask") from None
            corr = find_correspondences(model, index, config.delta_uv)
        self.corr = corr
        self.pred_valid = inputs.normal_map.valid & inputs.mask.valid
        self.pred_normals = inputs.normal_map.data.astype(np.float64)
        self.mica = None if inputs.mica_identity is None else np.asarray(inputs.mica_identity, dtype=np.float64)

    def evaluate(self, theta, camera_only=False, need_grad=True):
        """Full energy, flat gradient and per-term values.

        ``camera_only`` restricts the gradient to the camera phase objective
        (uv and landmark terms, camera coordinates); the returned energy is
        always the full one.  Non-finite geometry (points behind the camera, collapsed normals)
        gives an infinite energy so the optimizer backs off.
        """
        L, cfg, model = self.layout, self.config, self.model
        face, cam = L.unpack(theta)
        fl, pp = cam.focal_length, cam.principal_point
        V = forward(model, face)
        R = so3.exp_so3(cam.rotation)
        X = V @ R.T + cam.translation
        terms = {"uv": 0.0, "normal": 0.0, "regularization": 0.0, "landmarks": 0.0}
        grad = np.zeros(L.size)
        if np.any(X[:, 2] <= MIN_DEPTH) or not np.all(np.isfinite(X)):
            terms["total"] = np.inf
            return np.inf, grad, terms

        tris = model.triangles
        frag = rasterize_camera_frame(X, tris, fl, pp, self.inputs.width, self.inputs.height)
        pix = project_camera_frame(X, fl, pp)
        visible = visible_camera_frame(X, tris, fl, pp, frag)
        terms["uv"], g_uv = losses.uv_vertex_loss(self.corr, pix, visible)
        g_pix = cfg.lambda_uv * g_uv
        if self.inputs.landmarks2d and cfg.lambda_lmk > 0:
            terms["landmarks"], g_l = losses.landmark_loss(self.inputs.landmarks2d, pix)
            g_pix += cfg.lambda_lmk * g_l
        energy = cfg.lambda_uv * terms["uv"] + cfg.lambda_lmk * terms["landmarks"]

        g_X = np.zeros_like(X)
        g_fl = 0.0
        g_pp = np.zeros(2)
        if cfg.lambda_n > 0:
            try:
                normals, norms = vertex_normals(X, tris, return_norms=True)
            except DegenerateGeometry:
                terms["total"] = np.inf
                return np.inf, grad, terms
            pixels = np.nonzero(frag.covered & self.pred_valid)
            m = losses.shade_pixels(frag, pixels, tris, normals)
            mn = np.linalg.norm(m, axis=1)
            keep = mn > 0
            pixels = (pixels[0][keep], pixels[1][keep])
            m, mn = m[keep], mn[keep]
            r = m / mn[:, None]
            terms["normal"], g_r = losses.normal_residual(self.pred_normals[pixels], r)
            energy += cfg.lambda_n * terms["normal"]
            if need_grad and not camera_only and len(mn):
                g_r *= cfg.lambda_n
                g_m = (g_r - r * np.einsum("pc,pc->p", r, g_r)[:, None]) / mn[:, None]
                g_n, g_Xb, g_intr = losses.rendered_normal_backward(frag, pixels, g_m, X, normals, tris, fl, pp)
                g_X += g_Xb + vertex_normals_vjp(X, tris, g_n, normals, norms)
                g_fl += g_intr[0]
                g_pp += g_intr[1:]
        terms["regularization"], g_reg = losses.regularization(face, self.mica, cfg.lambda_id, cfg.lambda_ex)
        energy += terms["regularization"]
        terms["total"] = energy
        if not need_grad:
            return energy, grad, terms

        # projection: pix = fl * X_xy / z + pp
        used = np.any(g_pix != 0, axis=1)
        if used.any():
            Xu, gu = X[used], g_pix[used]
            inv_z = 1.0 / Xu[:, 2]
            g_X[used, 0] += fl * gu[:, 0] * inv_z
            g_X[used, 1] += fl * gu[:, 1] * inv_z
            g_X[used, 2] -= fl * (gu[:, 0] * Xu[:, 0] + gu[:, 1] * Xu[:, 1]) * inv_z ** 2
            g_fl += float(np.sum(gu * Xu[:, :2] * inv_z[:, None]))
            g_pp += gu.sum(axis=0)

        grad[L.trans] = g_X.sum(axis=0)
        grad[L.rot] = so3.rotate_vjp(cam.rotation, V, g_X)
        grad[L.logfl] = fl * g_fl
        grad[L.pp] = L.width * g_pp
        if not camera_only:
            g_face = forward_vjp(model, face, g_X @ R)
            grad[L.id] = g_face.z_id + g_reg.z_id
            grad[L.ex] = g_face.z_ex + g_reg.z_ex
            grad[L.jaw] = g_face.jaw_theta
        return energy, grad, terms


def energy_and_gradients(model, face, cam, inputs, config):
    """Full energy and its gradient with respect to every unknown.

    Returns ``(E, face_grad: FaceParams, cam_grad: dict)`` with camera
    gradients in natural units (radians, meters, pixels).
    """
    problem = ImageProblem(model, inputs, config)
    L = problem.layout
    energy, g, terms = problem.evaluate(L.pack(face, cam))
    face_grad = FaceParams(g[L.id].copy(), g[L.ex].copy(), g[L.jaw].copy())
    cam_grad = {"rotation": g[L.rot].copy(), "translation": g[L.trans].copy(),
                "focal_length": float(g[L.logfl][0] / cam.focal_length),
                "principal_point": g[L.pp] / L.width}
    return energy, face_grad, cam_grad


def initial_camera(model, mask, init_focal=1.8):
    """Frontal camera whose template silhouette matches the mask's extent."""
    rows, cols = np.nonzero(mask.valid)
    if rows.size == 0:
        raise NoCorrespondences("mask is empty")
    W, H = mask.width, mask.height
    fl = init_focal * W
    pp = np.array([W / 2.0, H / 2.0])
    lo, hi = model.template_vertices.min(axis=0), model.template_vertices.max(axis=0)
    centre = 0.5 * (lo + hi)
    width_px = cols.max() - cols.min() + 1.0
    z = fl * (hi[0] - lo[0]) / width_px
    box_centre = np.array([0.5 * (cols.min() + cols.max() + 1.0), 0.5 * (rows.min() + rows.max() + 1.0)])
    xy = (box_centre - pp) * z / fl - centre[:2]
    return CameraParams(np.zeros(3), [xy[0], xy[1], z - centre[2]], fl, pp)


def minimize(problem, theta, steps, config, lr_for_step, camera_only_for_step, trace=None):
    """Adam loop that keeps the lowest-energy iterate seen so far.

    Adam itself runs unmodified on the active phase's gradient; the energy
    used to rank iterates is always the full energy.  A phase change
    restarts Adam (fresh moments) from the best iterate.  Returns
    ``(best_theta, best_energy, best_terms, best_step)`` and appends the
    best energy after each step to ``trace``.
    """
    mode = None
    best_step = -1
    for step in range(steps):
        cam_only = camera_only_for_step(step)
        if cam_only != mode:
            mode = cam_only
            if step > 0:
                theta = best_theta
            state = AdamState.zeros(theta.size)
            energy, grad, terms = problem.evaluate(theta, camera_only=mode)
            if step == 0:
                best_theta, best_energy, best_terms = theta, energy, terms
        theta, state = adam_step(theta, state, grad, lr_for_step(step),
                                 config.adam_beta1, config.adam_beta2, config.adam_eps)
        energy, grad, terms = problem.evaluate(theta, camera_only=mode)
        if energy < best_energy:
            best_theta, best_energy, best_terms, best_step = theta, energy, terms, step
        if not np.isfinite(energy):
            # left the valid region: continue from the best iterate
            theta = best_theta
            state = AdamState.zeros(theta.size)
            energy, grad, terms = problem.evaluate(theta, camera_only=mode)
        if trace is not None:
            trace.append(best_energy)
    return best_theta, best_energy, best_terms, best_step


def fit_image(model, inputs, config=None, init=None):
    """Fit face and camera to one image's uv/normal/mask maps.

    ``init`` optionally gives a starting ``(face, cam)``; by default the face
    starts at zero (identity at the MICA anchor when given) and the camera is
    placed frontally from the mask.
    """
    config = (config or FitConfig()).validate()
    problem = ImageProblem(model, inputs, config)
    if problem.corr.n_accepted < MIN_CORRESPONDENCES:
        raise NoCorrespondences(f"only {problem.corr.n_accepted} vertices have a uv match within "
                                f"{config.delta_uv}; at least {MIN_CORRESPONDENCES} are needed")
    L = problem.layout
    if init is None:
        face = model.zero_params()
        if problem.mica is not None:
            face.z_id = problem.mica.copy()
        cam = initial_camera(model, inputs.mask, config.init_focal)
    else:
        face, cam = init[0].copy(), init[1].copy()
    theta = L.pack(face, cam)
    steps = int(config.steps)
    n_cam = int(round(config.phase1_fraction * steps))
    lr_cam = L.learning_rates(config, camera_only=True)
    lr_all = L.learning_rates(config)
    trace = []
    theta, _, terms, best_step = minimize(problem, theta, steps, config,
                                          lambda s: lr_cam if s < n_cam else lr_all,
                                          lambda s: s < n_cam, trace)
    face, cam = L.unpack(theta)
    return FitResult(face, cam, np.array(trace), terms, best_step, problem.corr)
