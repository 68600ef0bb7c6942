import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from facefit import io
from facefit.camera import CameraParams, load_camera, save_camera
from facefit.cli import error_map, main
from facefit.evalbench import PointCloud, build_bvh, query_bvh
from facefit.model import FaceParams, forward
from facefit.raster import interpolate, rasterize

from conftest import visible_rmse
from meshes import sample_surface


def run(*argv):
    return main([str(a) for a in argv])


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "facefit.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "synth" in out.stdout
    for cmd in ("synth", "fit", "track", "eval", "plot-overlay"):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0


def test_synth_writes_four_files(tmp_path, head):
    assert run("synth", "--out-dir", tmp_path, "--width", 64, "--height", 48) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["gt_mesh.obj", "mask.pgm", "normal.pfm", "uv.pfm"]
    assert (tmp_path / "uv.pfm").read_bytes().startswith(b"PF\n64 48\n-1.0\n")
    assert (tmp_path / "normal.pfm").read_bytes().startswith(b"PF\n64 48\n-1.0\n")
    assert (tmp_path / "mask.pgm").read_bytes().startswith(b"P5\n64 48\n255\n")
    assert len(io.load_mesh(tmp_path / "gt_mesh.obj").vertices) == head.n_vertices


def test_synth_is_deterministic_under_seed(tmp_path):
    run("synth", "--out-dir", tmp_path / "a", "--width", 32, "--height", 32, "--seed", 5)
    run("synth", "--out-dir", tmp_path / "b", "--width", 32, "--height", 32, "--seed", 5)
    for name in ("uv.pfm", "normal.pfm", "mask.pgm", "gt_mesh.obj"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_invalid_params(tmp_path, capsys):
    (tmp_path / "p.json").write_text('{"z_id": [1, 2]}')
    assert run("synth", "--params", tmp_path / "p.json", "--out-dir", tmp_path / "o") == 2
    (tmp_path / "q.json").write_text("{not json")
    assert run("synth", "--params", tmp_path / "q.json", "--out-dir", tmp_path / "o") == 2
    assert "params" in capsys.readouterr().err


def test_synth_then_fit_recovers(tmp_path, head, diag):
    d = tmp_path / "in"
    assert run("synth", "--out-dir", d, "--save-truth", "--seed", 1) == 0
    out = tmp_path / "fit"
    assert run("fit", "--input-dir", d, "--out-dir", out) == 0
    for name in ("params.json", "camera.json", "mesh.obj", "trace.csv", "summary.json"):
        assert (out / name).exists()
    face = FaceParams.from_dict(io.read_json(out / "params.json"))
    truth = FaceParams.from_dict(io.read_json(d / "gt_params.json"))
    cam_true = load_camera(d / "gt_camera.json")
    assert visible_rmse(head, face, truth, cam_true, 256, 256) < 0.02 * diag
    assert abs(load_camera(out / "camera.json").focal_length / cam_true.focal_length - 1) < 0.05
    with open(out / "trace.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "energy"] and len(rows) == 501


def test_fit_overrides_and_config(tmp_path):
    d = tmp_path / "in"
    run("synth", "--out-dir", d, "--width", 64, "--height", 64)
    (tmp_path / "c.toml").write_text("steps = 12\nlambda_n = 50.0\n")
    assert run("fit", "--input-dir", d, "--out-dir", tmp_path / "o", "--config", tmp_path / "c.toml",
               "--lambda-uv", 100, "--seed", 2, "--threads", 1) == 0
    cfg = io.read_json(tmp_path / "o" / "summary.json")["config"]
    assert (cfg["steps"], cfg["lambda_n"], cfg["lambda_uv"], cfg["seed"]) == (12, 50.0, 100.0, 2)
    assert len(io.read_json(tmp_path / "o" / "summary.json")["terms"]) >= 4


def test_fit_exit_codes(tmp_path):
    d = tmp_path / "in"
    run("synth", "--out-dir", d, "--width", 64, "--height", 64)
    assert run("fit", "--input-dir", d, "--out-dir", tmp_path / "o", "--delta-uv", 0, "--steps", 5) == 3
    assert run("fit", "--out-dir", tmp_path / "o") == 2
    assert run("fit", "--input-dir", tmp_path / "missing", "--out-dir", tmp_path / "o") == 2
    (d / "mask.pgm").write_bytes(b"P5\n64 64\n255\n\x00")
    assert run("fit", "--input-dir", d, "--out-dir", tmp_path / "o") == 2


def test_bad_threads_flag(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out-dir", str(tmp_path), "--threads", "0"])
    assert e.value.code == 2


def test_track_command(tmp_path, head):
    frames = tmp_path / "frames"
    frames.mkdir()
    for n in range(3):
        d = tmp_path / f"s{n}"
        run("synth", "--out-dir", d, "--width", 64, "--height", 64, "--seed", 7)
        for src, dst in (("uv.pfm", "uv.pfm"), ("normal.pfm", "normal.pfm"), ("mask.pgm", "mask.pgm")):
            (frames / f"frame_{n:05d}.{dst}").write_bytes((d / src).read_bytes())
    (tmp_path / "t.json").write_text(json.dumps({"steps": 20, "sequential_steps": 10, "rounds": 1,
                                                 "round_steps": 10}))
    out = tmp_path / "out"
    assert run("track", frames, "--out-dir", out, "--config", tmp_path / "t.json") == 0
    m = io.read_json(out / "manifest.json")
    assert m["frames"] == ["frame_00000", "frame_00001", "frame_00002"] and m["flagged"] == []
    for n in range(3):
        for ext in ("params.json", "camera.json", "mesh.obj"):
            assert (out / f"frame_{n:05d}.{ext}").exists()
    assert run("track", tmp_path / "nothing", "--out-dir", out) == 2


@pytest.fixture
def eval_case(tmp_path, head):
    V, F = head.template_vertices, head.triangles
    io.save_mesh(tmp_path / "pred.obj", V, F)
    P, N = sample_surface(V * 1000, F, 2000, np.random.default_rng(0))
    lm = [[int(i), (V[i] * 1000).tolist()] for i in head.landmark_vertex_ids[:8]]
    (tmp_path / "lm.json").write_text(json.dumps(lm))
    return tmp_path, P, N


def test_eval_identical_geometry(eval_case):
    d, P, N = eval_case
    io.save_pointcloud(d / "gt.ply", PointCloud(P, N, np.zeros(len(P), int)))
    assert run("eval", d / "pred.obj", d / "gt.ply", d / "lm.json", "--pred-scale", 1000,
               "--out", d / "m.json", "--mask-labels", "0") == 0
    m = io.read_json(d / "m.json")
    assert m["l1_mm"] < 1e-5 and m["l2_mm"] < 1e-5 and m["recall_2_5"] == 1.0 and m["nc"] > 0.999999


def test_eval_offset_and_aggregate(eval_case):
    d, P, N = eval_case
    io.save_pointcloud(d / "gt.ply", PointCloud(P + 3.0 * N, N))
    assert run("eval", d / "pred.obj", d / "gt.ply", d / "lm.json", "--pred-scale", 1000,
               "--out", d / "m.json", "--aggregate", d / "agg.csv", "--subject", "s1", "--split", "neutral") == 0
    m = io.read_json(d / "m.json")
    assert m["recall_2_5"] <= 1.0 and m["l2_mm"] >= m["l1_mm"]
    run("eval", d / "pred.obj", d / "gt.ply", d / "lm.json", "--pred-scale", 1000,
        "--aggregate", d / "agg.csv", "--subject", "s2", "--split", "posed")
    with open(d / "agg.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["subject"] for r in rows] == ["s1", "s2", "mean"]
    assert set(rows[0]) == {"subject"} | {f"{s}_{k}" for s in ("neutral", "posed")
                                          for k in ("l1_mm", "l2_mm", "nc", "recall_2_5")}
    assert float(rows[2]["neutral_l1_mm"]) == float(rows[0]["neutral_l1_mm"])


def test_eval_single_point_three_mm(tmp_path):
    V = np.array([[0, 0, 0], [100, 0, 0], [0, 100, 0], [100, 100, 0]], float)
    F = np.array([[0, 1, 2], [1, 3, 2]])
    io.save_mesh(tmp_path / "p.obj", V, F)
    io.save_pointcloud(tmp_path / "g.ply", PointCloud(np.array([[30.0, 30.0, 3.0]]), np.array([[0, 0, 1.0]])))
    assert run("eval", tmp_path / "p.obj", tmp_path / "g.ply", "--no-align", "--out", tmp_path / "m.json") == 0
    m = io.read_json(tmp_path / "m.json")
    assert m["l1_mm"] == pytest.approx(3.0) and m["l2_mm"] == pytest.approx(3.0) and m["recall_2_5"] == 0
    # without --no-align the landmarks are mandatory
    assert run("eval", tmp_path / "p.obj", tmp_path / "g.ply") == 2


def test_eval_bad_inputs(eval_case):
    d, P, N = eval_case
    io.save_pointcloud(d / "gt.ply", PointCloud(P, N))
    (d / "coll.json").write_text(json.dumps([[0, [0, 0, 0]]] * 3))
    assert run("eval", d / "pred.obj", d / "gt.ply", d / "coll.json") == 2
    assert run("eval", d / "pred.obj", d / "gt.ply", d / "lm.json", "--mask-labels", "1") == 2
    (d / "bad.ply").write_text("ply\nformat ascii 1.0\nend_header\n")
    assert run("eval", d / "pred.obj", d / "bad.ply", d / "lm.json") == 2


def plane(size, z, n=8):
    xs, ys = np.meshgrid(np.linspace(-size, size, n), np.linspace(-size, size, n))
    V = np.column_stack([xs.ravel(), ys.ravel(), np.full(n * n, z)])
    F = [(j * n + i, j * n + i + 1, (j + 1) * n + i + 1) for j in range(n - 1) for i in range(n - 1)]
    F += [(j * n + i, (j + 1) * n + i + 1, (j + 1) * n + i) for j in range(n - 1) for i in range(n - 1)]
    return V, np.array(F)


def overlay(tmp_path, V, F, GV, GF, cam):
    io.save_mesh(tmp_path / "m.obj", V, F)
    io.save_mesh(tmp_path / "g.obj", GV, GF)
    save_camera(tmp_path / "c.json", cam)
    assert run("plot-overlay", tmp_path / "m.obj", tmp_path / "c.json", "--gt", tmp_path / "g.obj",
               "--width", 40, "--height", 30, "--out", tmp_path / "e.pfm") == 0
    return io.load_map(tmp_path / "e.pfm")


CAM = CameraParams(np.zeros(3), [0, 0, 2.0], 30.0, [20.0, 15.0])


def test_overlay_identical_geometry_is_zero(tmp_path):
    V, F = plane(1.0, 0.0)
    e = overlay(tmp_path, V, F, V, F, CAM)
    if not e.valid.any():
        F = F[:, ::-1]
        e = overlay(tmp_path, V, F, V, F, CAM)
    assert e.valid.sum() > 100
    assert np.all(np.abs(e.data[e.valid]) < 1e-6)


def test_overlay_constant_offset(tmp_path):
    V, F = plane(1.0, 0.0)
    if not rasterize(V, F, CAM, 40, 30).covered.any():
        F = F[:, ::-1]
    GV, GF = plane(5.0, 3.0)
    e = overlay(tmp_path, V, F, GV, GF, CAM)
    assert e.valid.sum() > 100
    np.testing.assert_allclose(e.data[e.valid], 3.0, atol=1e-6)


def test_error_map_matches_evalbench(head):
    rng = np.random.default_rng(3)
    V = head.template_vertices
    GV = forward(head, FaceParams(rng.normal(size=head.n_id) * 0.3, rng.normal(size=head.n_ex) * 0.3, np.zeros(3)))
    cam = CameraParams([0.1, 0.2, 0.0], [0, 0, 0.6], 400.0, [64.0, 64.0])
    e = error_map(V, head.triangles, cam, 128, 128, GV, head.triangles, scale=1000, gt_scale=1000)
    frag = rasterize(V, head.triangles, cam, 128, 128)
    pts = interpolate(frag, head.triangles, V)[frag.covered] * 1000
    d = query_bvh(build_bvh(GV * 1000, head.triangles), pts).distance
    assert np.array_equal(e.valid, frag.covered)
    np.testing.assert_allclose(e.data[e.valid, 0], d.astype(np.float32), rtol=0, atol=0)
