"""Video tracking: first-frame fit, sequential propagation, batched refinement.

Stage A fits frame 0 with the single-image fitter.  Stage B walks forward
through the sequence, initialising each frame from its predecessor and
optimising only per-frame unknowns (identity, focal length and principal
point stay frozen).  Stage C runs rounds of Adam over random batches of
frames on the summed energies plus temporal smoothness, with identity and
intrinsics shared by all frames.
"""
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import NoCorrespondences
from .fitter import MIN_CORRESPONDENCES, FitConfig, FitInputs, FitResult, ImageProblem, fit_image, minimize
from .io import load_map, load_mask, write_json

MAX_BATCH = 16
CHECKPOINT_STEPS = 50
FRAME_RE = re.compile(r"^frame_(\d{5})\.uv\.pfm$")


@dataclass
class TrackConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    sequential_steps: int = 200
    rounds: int = 5
    round_steps: int = 100
    refine_lr_scale: float = 1.0
    refine_lr_final: float = 1e-4
    smooth_ex: float = 1.0
    smooth_jaw: float = 10.0
    smooth_rot: float = 10.0
    smooth_trans: float = 100.0

    def validate(self):
        self.fit.validate()
        for name in ("sequential_steps", "rounds", "round_steps"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        for name in ("smooth_ex", "smooth_jaw", "smooth_rot", "smooth_trans", "refine_lr_scale",
                     "refine_lr_final"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        own = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__ and k != "fit"}
        fit = FitConfig.from_dict(d.pop("fit", {}) | d)
        kwargs = {k: (int(v) if k in ("sequential_steps", "rounds", "round_steps") else float(v))
                  for k, v in own.items()}
        return cls(fit=fit, **kwargs).validate()


@dataclass
class TrackResult:
    frames: list            # FitResult per frame
    flagged: list           # frame indices that had no usable correspondences
    objective_trace: list   # full-sequence objective after each stage C checkpoint

    @property
    def shared(self):
        r = self.frames[0]
        return {"z_id": r.face.z_id, "focal_length": r.cam.focal_length,
                "principal_point": r.cam.principal_point}


def smoothness_loss(sequence, weight, batch_size=None, centers=None):
    """Temporal smoothness ``(w / 2B) sum_t |P[t-1]-P[t]|^2 + |P[t]-P[t+1]|^2``.

    ``sequence`` is (T, D).  The sum runs over ``centers`` (all frames by
    default); boundary frames use their single neighbour.  Returns the value
    and the (T, D) gradient.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim == 1:
        seq = seq[:, None]
    T = seq.shape[0]
    B = T if batch_size is None else batch_size
    grad = np.zeros_like(seq)
    if T < 2 or weight == 0:
        return 0.0, grad.reshape(np.shape(sequence))
    c = weight / (2.0 * B)
    centers = np.arange(T) if centers is None else np.asarray(centers, dtype=np.int64)
    # each center t contributes the edges (t-1, t) and (t, t+1)
    edge_count = np.zeros(T - 1)
    np.add.at(edge_count, centers[centers > 0] - 1, 1.0)
    np.add.at(edge_count, centers[centers < T - 1], 1.0)
    diff = seq[1:] - seq[:-1]
    value = c * float(np.sum(edge_count * np.sum(diff * diff, axis=1)))
    g_edge = 2.0 * c * edge_count[:, None] * diff
    grad[1:] += g_edge
    grad[:-1] -= g_edge
    return value, grad.reshape(np.shape(sequence))


class _Sequence:
    """Flat-vector view of several frames sharing identity and intrinsics."""

    def __init__(self, problems, config):
        self.problems = problems
        self.config = config
        L = problems[0].layout
        self.L = L
        self.shared_idx = np.r_[np.arange(L.id.start, L.id.stop), L.logfl.start,
                                np.arange(L.pp.start, L.pp.stop)]
        self.local_idx = np.setdiff1d(np.arange(L.size), self.shared_idx)
        self.groups = {
            "ex": (np.arange(L.ex.start, L.ex.stop), config.smooth_ex),
            "jaw": (np.arange(L.jaw.start, L.jaw.stop), config.smooth_jaw),
            "rot": (np.arange(L.rot.start, L.rot.stop), config.smooth_rot),
            "trans": (np.arange(L.trans.start, L.trans.stop), config.smooth_trans),
        }

    def smoothness_grad(self, thetas, batch_size, centers=None):
        grad = np.zeros_like(thetas)
        value = 0.0
        for idx, weight in self.groups.values():
            v, g = smoothness_loss(thetas[:, idx], weight, batch_size, centers)
            value += v
            grad[:, idx] += g
        return value, grad

    def objective(self, thetas, frames, batch_size):
        """Summed energies of ``frames`` plus smoothness over all of them."""
        total = sum(self.problems[t].evaluate(thetas[t], need_grad=False)[0] for t in frames)
        return total + self.smoothness_grad(thetas[frames], batch_size)[0]


def _refine_batched(seq, thetas, active, config, rng, objective_trace):
    """Stage C: rounds of joint Adam steps over random frame batches.

    First moments are kept per frame; second moments of the per-frame
    unknowns are pooled over the frames of each batch, so every frame uses
    the same step scale for the same coordinate.  Frames are exchangeable,
    and with a common scale the smoothness coupling contracts frame-to-frame
    differences instead of being masked by per-frame normalisation.  The
    rate decays geometrically from ``refine_lr_scale`` to ``refine_lr_scale
    * refine_lr_final``.  Every CHECKPOINT_STEPS steps the whole-sequence
    objective is evaluated and the iterate is rolled back if it went up.
    """
    n = len(active)
    B = min(n, MAX_BATCH)
    fit = config.fit
    b1, b2, eps = fit.adam_beta1, fit.adam_beta2, fit.adam_eps
    sh, lo = seq.shared_idx, seq.local_idx
    lr_frame = seq.L.learning_rates(fit)
    lr_sh, lr_lo = lr_frame[sh], lr_frame[lo]
    m_sh, v_sh = np.zeros(sh.size), np.zeros(sh.size)
    m_lo, v_lo = np.zeros((n, lo.size)), np.zeros(lo.size)
    t_adam = 0
    total_steps = config.rounds * config.round_steps
    thetas = thetas.copy()
    full = seq.objective(thetas, active, B)
    objective_trace.append(full)
    checkpoint = (thetas.copy(), full)
    k = 0
    for rnd in range(config.rounds):
        batch = np.sort(rng.choice(n, size=B, replace=False))
        if rnd == 0 and 0 not in batch:
            batch[-1] = 0
            batch = np.sort(batch)
        for _ in range(config.round_steps):
            g_sh = np.zeros(sh.size)
            g_lo = np.zeros((B, lo.size))
            for j, i in enumerate(batch):
                _, g, _ = seq.problems[active[i]].evaluate(thetas[active[i]])
                g_sh += g[sh]
                g_lo[j] = g[lo]
            _, s_grad = seq.smoothness_grad(thetas[active], B, batch)
            g_lo += s_grad[batch][:, lo]

            t_adam += 1
            c1, c2 = 1.0 - b1 ** t_adam, 1.0 - b2 ** t_adam
            scale = config.refine_lr_scale * config.refine_lr_final ** (k / max(total_steps - 1, 1))
            m_sh = b1 * m_sh + (1.0 - b1) * g_sh
            v_sh = b2 * v_sh + (1.0 - b2) * g_sh * g_sh
            m_lo[batch] = b1 * m_lo[batch] + (1.0 - b1) * g_lo
            v_lo = b2 * v_lo + (1.0 - b2) * np.mean(g_lo * g_lo, axis=0)
            shared = thetas[active[0], sh] - scale * lr_sh * (m_sh / c1) / (np.sqrt(v_sh / c2) + eps)
            step = scale * lr_lo * (m_lo[batch] / c1) / (np.sqrt(v_lo / c2) + eps)
            for j, i in enumerate(batch):
                thetas[active[i], lo] -= step[j]
            for t in active:
                thetas[t, sh] = shared
            k += 1
            if k % CHECKPOINT_STEPS == 0 or k == total_steps:
                value = seq.objective(thetas, active, B)
                if value <= checkpoint[1]:
                    checkpoint = (thetas.copy(), value)
                else:
                    thetas = checkpoint[0].copy()
                objective_trace.append(checkpoint[1])
    return checkpoint[0]


def track_sequence(model, frames, config=None):
    """Track a list of FitInputs; returns a TrackResult."""
    config = (config or TrackConfig()).validate()
    fit = config.fit
    T = len(frames)
    if T == 0:
        raise ValueError("empty sequence")
    first = fit_image(model, frames[0], fit)
    problems = [None] * T
    flagged = []
    results = [first]
    problems[0] = ImageProblem(model, frames[0], fit, corr=first.correspondences)
    L = problems[0].layout
    thetas = np.empty((T, L.size))
    thetas[0] = L.pack(first.face, first.cam)
    lr_seq = L.learning_rates(fit)
    lr_seq[L.id] = 0.0
    lr_seq[L.logfl] = 0.0
    lr_seq[L.pp] = 0.0
    for t in range(1, T):
        try:
            problem = ImageProblem(model, frames[t], fit)
            if problem.corr.n_accepted < MIN_CORRESPONDENCES:
                raise NoCorrespondences(f"frame {t}: {problem.corr.n_accepted} correspondences")
        except NoCorrespondences:
            flagged.append(t)
            thetas[t] = thetas[t - 1]
            face, cam = L.unpack(thetas[t])
            results.append(FitResult(face, cam, np.full(max(config.sequential_steps, 1), np.nan),
                                     {"flagged": True}))
            continue
        problems[t] = problem
        trace = []
        theta, _, terms, best_step = minimize(problem, thetas[t - 1].copy(), config.sequential_steps, fit,
                                              lambda s: lr_seq, lambda s: False, trace)
        thetas[t] = theta
        face, cam = L.unpack(theta)
        results.append(FitResult(face, cam, np.array(trace), terms, best_step, problem.corr))

    objective_trace = []
    active = [t for t in range(T) if problems[t] is not None]
    if T > 1 and len(active) > 1 and config.rounds > 0 and config.round_steps > 0:
        seq = _Sequence(problems, config)
        rng = np.random.default_rng(fit.seed)
        thetas = _refine_batched(seq, thetas, active, config, rng, objective_trace)
        # flagged frames keep following their predecessor
        for t in flagged:
            thetas[t] = thetas[t - 1]
        for t in range(T):
            face, cam = L.unpack(thetas[t])
            old = results[t]
            terms = old.term_breakdown
            if problems[t] is not None:
                terms = problems[t].evaluate(thetas[t], need_grad=False)[2]
            results[t] = FitResult(face, cam, old.energy_trace, terms, old.best_step, old.correspondences)
    return TrackResult(results, flagged, objective_trace)


# --- frame directories ------------------------------------------------------------

def list_frames(directory):
    """Sorted frame numbers present in a directory of frame_%05d.* triples."""
    numbers = []
    for name in os.listdir(directory):
        m = FRAME_RE.match(name)
        if m:
            numbers.append(int(m.group(1)))
    return sorted(numbers)


def frame_paths(directory, number):
    stem = os.path.join(directory, f"frame_{number:05d}")
    return stem + ".uv.pfm", stem + ".normal.pfm", stem + ".mask.pgm"


def load_frames(directory):
    frames = []
    for number in list_frames(directory):
        uv, normal, mask = frame_paths(directory, number)
        frames.append(FitInputs(load_map(uv, channels=2), load_map(normal, channels=3), load_mask(mask)))
    if not frames:
        raise FileNotFoundError(f"no frame_%05d.uv.pfm files in {directory}")
    return frames


def write_manifest(path, result, frame_numbers=None):
    numbers = frame_numbers if frame_numbers is not None else list(range(len(result.frames)))
    write_json(path, {
        "frames": [f"frame_{n:05d}" for n in numbers],
        "flagged": [f"frame_{numbers[t]:05d}" for t in result.flagged],
        "shared": {k: np.asarray(v).tolist() for k, v in result.shared.items()},
        "objective_trace": [float(v) for v in result.objective_trace],
    })
