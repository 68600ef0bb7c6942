"""``facefit`` command line: synth, fit, track, eval, plot-overlay.

Exit codes: 0 success, 1 runtime failure, 2 bad usage or unreadable input,
3 no usable uv correspondences (fit).
"""
import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from ._accel import set_threads
from .camera import CameraParams, save_camera
from .errors import (DegenerateLandmarks, DimensionMismatch, EmptyAfterMasking, FaceFitError,
                     IndexOutOfRange, MalformedHeader, NoCorrespondences, NonFiniteData, TruncatedFile)
from .io import load_map, load_mask, load_mesh, load_pointcloud, read_config, read_json, save_map, save_mask, save_mesh, write_json
from .maps import MapImage
from .model import FaceParams, default_model_path, forward, load_model

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_CORRESPONDENCES = 3

_BAD_INPUT = (MalformedHeader, TruncatedFile, DimensionMismatch, NonFiniteData, IndexOutOfRange,
              DegenerateLandmarks, EmptyAfterMasking)

LAMBDA_FLAGS = ("uv", "n", "id", "ex", "lmk")
METRIC_COLUMNS = ("l1_mm", "l2_mm", "nc", "recall_2_5")


class UsageError(Exception):
    pass


# --- shared option handling ---------------------------------------------------

def _add_common(p, fit_options=True):
    p.add_argument("--config", help="JSON or TOML file with config overrides")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: FACEFIT_THREADS or all logical cores)")
    p.add_argument("--model", default=None, help="P3DM model file (default: bundled sphere head)")
    if fit_options:
        p.add_argument("--delta-uv", type=float, default=None, help="uv distance gate for correspondences")
        p.add_argument("--steps", type=int, default=None, help="optimisation steps")
        for name in LAMBDA_FLAGS:
            p.add_argument(f"--lambda-{name}", type=float, default=None, dest=f"lambda_{name}")


def _overrides(args):
    out = {}
    if getattr(args, "delta_uv", None) is not None:
        out["delta_uv"] = args.delta_uv
    if getattr(args, "steps", None) is not None:
        out["steps"] = args.steps
    for name in LAMBDA_FLAGS:
        value = getattr(args, f"lambda_{name}", None)
        if value is not None:
            out[f"lambda_{name}"] = value
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _config_dict(args):
    d = {}
    if args.config:
        try:
            d = dict(read_config(args.config))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    d.update(_overrides(args))
    return d


def _fit_config(args):
    from .fitter import FitConfig
    try:
        return FitConfig.from_dict(_config_dict(args))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _load_model(args):
    return load_model(args.model or default_model_path())


def _read_json_arg(path, what):
    try:
        return read_json(path)
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _face_params(path, model):
    d = _read_json_arg(path, "params")
    try:
        face = FaceParams.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"params {path}: missing or malformed field {exc}") from None
    if face.z_id.shape != (model.n_id,) or face.z_ex.shape != (model.n_ex,) or face.jaw_theta.shape != (3,):
        raise UsageError(f"params {path}: expected z_id[{model.n_id}], z_ex[{model.n_ex}], jaw_theta[3]")
    if not all(np.all(np.isfinite(a)) for a in (face.z_id, face.z_ex, face.jaw_theta)):
        raise UsageError(f"params {path}: non-finite values")
    return face


def _camera(path):
    d = _read_json_arg(path, "camera")
    try:
        return CameraParams.from_dict(d)
    except (DimensionMismatch, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"camera {path}: {exc}") from None


def _landmark_pairs(path, dim):
    """[[vertex_id, [x, y(, z)]], ...] or [{"vertex": id, "point": [...]}, ...]."""
    raw = _read_json_arg(path, "landmarks")
    pairs = []
    try:
        for item in raw:
            if isinstance(item, dict):
                vid, pt = item["vertex"], item["point"]
            else:
                vid, pt = item
            pt = np.asarray(pt, dtype=np.float64)
            if pt.shape != (dim,):
                raise ValueError(f"point {pt.tolist()} is not {dim}-dimensional")
            pairs.append((int(vid), pt))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"landmarks {path}: {exc}") from None
    return pairs


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --- commands -----------------------------------------------------------------

def cmd_synth(args):
    from . import synth
    from .raster import render_maps

    model = _load_model(args)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    face = _face_params(args.params, model) if args.params else synth.random_face(model, rng)
    cam = _camera(args.camera) if args.camera else synth.random_camera(rng, args.width, args.height)
    maps = render_maps(model, face, cam, args.width, args.height)
    out = _ensure_dir(args.out_dir)
    save_map(os.path.join(out, "uv.pfm"), maps["uv_map"])
    save_map(os.path.join(out, "normal.pfm"), maps["normal_map"])
    save_mask(os.path.join(out, "mask.pgm"), maps["uv_map"].valid)
    save_mesh(os.path.join(out, "gt_mesh.obj"), forward(model, face), model.triangles, model.vertex_uv)
    if args.save_truth:
        write_json(os.path.join(out, "gt_params.json"), face.to_dict())
        save_camera(os.path.join(out, "gt_camera.json"), cam)
    return EXIT_OK


def _fit_inputs(args, model):
    from .fitter import FitInputs

    d = args.input_dir
    uv = args.uv or (d and os.path.join(d, "uv.pfm"))
    normal = args.normal or (d and os.path.join(d, "normal.pfm"))
    mask = args.mask or (d and os.path.join(d, "mask.pgm"))
    if not (uv and normal and mask):
        raise UsageError("give --input-dir or all of --uv, --normal, --mask")
    try:
        inputs = FitInputs(load_map(uv, channels=2), load_map(normal, channels=3), load_mask(mask))
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if args.mica:
        raw = _read_json_arg(args.mica, "mica identity")
        raw = raw["z_id"] if isinstance(raw, dict) else raw
        inputs.mica_identity = np.asarray(raw, dtype=np.float64)
    if args.landmarks:
        inputs.landmarks2d = _landmark_pairs(args.landmarks, 2)
    return inputs.validate(model)


def _write_fit(out, result, model, prefix=""):
    write_json(os.path.join(out, f"{prefix}params.json"), result.face.to_dict())
    save_camera(os.path.join(out, f"{prefix}camera.json"), result.cam)
    save_mesh(os.path.join(out, f"{prefix}mesh.obj"), forward(model, result.face), model.triangles, model.vertex_uv)


def cmd_fit(args):
    from .fitter import fit_image

    model = _load_model(args)
    config = _fit_config(args)
    inputs = _fit_inputs(args, model)
    try:
        result = fit_image(model, inputs, config)
    except NoCorrespondences as exc:
        print(f"facefit fit: {exc}", file=sys.stderr)
        return EXIT_NO_CORRESPONDENCES
    out = _ensure_dir(args.out_dir)
    _write_fit(out, result, model)
    with open(os.path.join(out, "trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "energy"])
        for k, e in enumerate(result.energy_trace):
            w.writerow([k, repr(float(e))])
    write_json(os.path.join(out, "summary.json"), {
        "terms": {k: float(v) for k, v in result.term_breakdown.items()},
        "best_step": int(result.best_step),
        "config": config.to_dict(),
    })
    return EXIT_OK


def cmd_track(args):
    from .tracker import TrackConfig, frame_paths, list_frames, load_frames, track_sequence, write_manifest

    model = _load_model(args)
    try:
        config = TrackConfig.from_dict(_config_dict(args))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    try:
        numbers = list_frames(args.frame_dir)
        frames = load_frames(args.frame_dir)
    except (OSError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    result = track_sequence(model, frames, config)
    out = _ensure_dir(args.out_dir)
    for n, r in zip(numbers, result.frames):
        _write_fit(out, r, model, prefix=f"frame_{n:05d}.")
    write_manifest(os.path.join(out, "manifest.json"), result, numbers)
    return EXIT_OK


def _update_aggregate(path, subject, split, record):
    """Upsert one subject's metrics for a split; the last row holds column means."""
    cols = ["subject"] + [f"{s}_{m}" for s in ("neutral", "posed") for m in METRIC_COLUMNS]
    rows = {}
    if os.path.exists(path):
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row["subject"] != "mean":
                    rows[row["subject"]] = row
    row = rows.setdefault(subject, {c: "" for c in cols} | {"subject": subject})
    for m in METRIC_COLUMNS:
        row[f"{split}_{m}"] = repr(float(getattr(record, m)))
    mean = {"subject": "mean"}
    for c in cols[1:]:
        vals = [float(r[c]) for r in rows.values() if r.get(c)]
        mean[c] = repr(float(np.mean(vals))) if vals else ""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for key in sorted(rows):
            w.writerow(rows[key])
        w.writerow(mean)


def cmd_eval(args):
    from .evalbench.metrics import compute_metrics, evaluate

    try:
        mesh = load_mesh(args.pred)
        gt = load_pointcloud(args.gt, scale=args.gt_scale)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if not args.no_align and not args.landmarks:
        raise UsageError("landmarks JSON is required unless --no-align is given")
    labels = None
    if args.mask_labels:
        try:
            labels = [int(s) for s in args.mask_labels.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--mask-labels must be comma separated integers, got {args.mask_labels!r}") from None
    vertices = mesh.vertices * args.pred_scale
    try:
        if args.no_align:
            record = compute_metrics(vertices, mesh.triangles, gt, labels, args.threshold)
        else:
            pairs = [(v, p * args.gt_scale) for v, p in _landmark_pairs(args.landmarks, 3)]
            record = evaluate(vertices, mesh.triangles, gt, pairs, labels, args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        write_json(args.out, record.to_dict())
    else:
        print(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    if args.aggregate:
        _update_aggregate(args.aggregate, args.subject or os.path.splitext(os.path.basename(args.pred))[0],
                          args.split, record)
    return EXIT_OK


def error_map(vertices, triangles, cam, width, height, gt_vertices, gt_triangles, scale=1.0, gt_scale=1.0):
    """Per-pixel distance from the rendered surface point to the GT surface.

    The camera sees ``vertices`` in their own units; distances are taken after
    scaling both meshes (``scale``/``gt_scale``) to a common unit.
    """
    from .evalbench.bvh import build_bvh, query_bvh
    from .raster import interpolate, rasterize

    frag = rasterize(vertices, triangles, cam, width, height)
    covered = frag.covered
    points = interpolate(frag, triangles, np.asarray(vertices, dtype=np.float64))[covered] * scale
    bvh = build_bvh(np.asarray(gt_vertices, dtype=np.float64) * gt_scale, gt_triangles)
    data = np.zeros((height, width, 1), dtype=np.float32)
    if points.shape[0]:
        data[covered, 0] = query_bvh(bvh, points).distance
    return MapImage(data, covered)


def cmd_plot_overlay(args):
    try:
        mesh = load_mesh(args.mesh)
        gt = load_mesh(args.gt)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    cam = _camera(args.camera)
    emap = error_map(mesh.vertices, mesh.triangles, cam, args.width, args.height,
                     gt.vertices, gt.triangles, args.scale, args.gt_scale)
    save_map(args.out, emap)
    if emap.valid.any():
        d = emap.data[emap.valid, 0]
        print(f"covered={int(emap.valid.sum())} mean={d.mean():.6g} max={d.max():.6g}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="facefit", description="Fit and track a parametric head model "
                                 "from dense uv and normal maps, and evaluate reconstructions.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render uv/normal/mask targets from known parameters")
    _add_common(p, fit_options=False)
    p.add_argument("--params", help="FaceParams JSON (default: random from --seed)")
    p.add_argument("--camera", help="camera JSON (default: random from --seed)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--save-truth", action="store_true", help="also write gt_params.json and gt_camera.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit one image")
    _add_common(p)
    p.add_argument("--input-dir", help="directory holding uv.pfm, normal.pfm, mask.pgm")
    p.add_argument("--uv")
    p.add_argument("--normal")
    p.add_argument("--mask")
    p.add_argument("--mica", help="JSON identity anchor (list or {\"z_id\": [...]})")
    p.add_argument("--landmarks", help="JSON [[vertex_id, [x, y]], ...] in pixels")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("track", help="track a directory of frame_%%05d.* triples")
    _add_common(p)
    p.add_argument("frame_dir")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="align a mesh to a GT point cloud and report metrics")
    _add_common(p, fit_options=False)
    p.add_argument("pred", help="predicted mesh (OBJ)")
    p.add_argument("gt", help="ground-truth point cloud (ascii PLY)")
    p.add_argument("landmarks", nargs="?", help="JSON [[vertex_id, [x, y, z]], ...] in GT file units")
    p.add_argument("--no-align", action="store_true", help="score the mesh as given (already aligned)")
    p.add_argument("--mask-labels", help="comma separated region labels to keep")
    p.add_argument("--pred-scale", type=float, default=1.0, help="multiply mesh coordinates to get mm")
    p.add_argument("--gt-scale", type=float, default=1.0, help="multiply GT coordinates to get mm")
    p.add_argument("--threshold", type=float, default=2.5, help="recall threshold in mm")
    p.add_argument("--out", help="metrics JSON (default: stdout)")
    p.add_argument("--aggregate", help="CSV collecting metrics across subjects")
    p.add_argument("--subject", help="row name in the aggregate CSV (default: mesh file stem)")
    p.add_argument("--split", choices=("neutral", "posed"), default="posed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-overlay", help="render a per-pixel distance map against a GT mesh")
    _add_common(p, fit_options=False)
    p.add_argument("mesh")
    p.add_argument("camera")
    p.add_argument("--gt", required=True, help="GT mesh (OBJ)")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--scale", type=float, default=1.0, help="mesh units to output units")
    p.add_argument("--gt-scale", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output PFM (1 channel, NaN off the mesh)")
    p.set_defaults(func=cmd_plot_overlay)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "width", None) is not None and (args.width <= 0 or args.height <= 0):
        ap.error("--width and --height must be positive")
    if args.threads is not None and args.threads <= 0:
        ap.error("--threads must be positive")
    set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"facefit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _BAD_INPUT as exc:
        print(f"facefit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FaceFitError as exc:
        print(f"facefit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
