import numpy as np
import pytest

from facefit import synth
from facefit.errors import DimensionMismatch, NoCorrespondences
from facefit.fitter import FitConfig, FitInputs, ImageProblem, fit_image, initial_camera
from facefit.maps import MapImage

from conftest import visible_rmse


def scene(head, seed, width=128):
    rng = np.random.default_rng(seed)
    f, c = synth.random_face(head, rng), synth.random_camera(rng, width, width)
    return f, c, synth.render_inputs(head, f, c, width, width)


def test_start_at_truth_trace_non_increasing(head):
    f, c, inputs = scene(head, 0)
    res = fit_image(head, inputs, FitConfig(steps=60), init=(f, c))
    assert len(res.energy_trace) == 60
    assert np.all(np.isfinite(res.energy_trace))
    assert np.all(np.diff(res.energy_trace) <= 1e-6)
    E0 = ImageProblem(head, inputs, FitConfig()).evaluate(
        ImageProblem(head, inputs, FitConfig()).layout.pack(f, c), need_grad=False)[0]
    assert res.energy_trace[-1] <= E0
    assert res.term_breakdown["total"] == res.energy_trace[-1]


def test_fit_is_bit_reproducible(head):
    _, _, inputs = scene(head, 1)
    a = fit_image(head, inputs, FitConfig(steps=40, seed=3))
    b = fit_image(head, inputs, FitConfig(steps=40, seed=3))
    assert np.array_equal(a.energy_trace, b.energy_trace)
    assert np.array_equal(a.face.z_ex, b.face.z_ex)
    assert a.cam.focal_length == b.cam.focal_length


def test_camera_phase_leaves_face_untouched(head):
    _, _, inputs = scene(head, 2)
    res = fit_image(head, inputs, FitConfig(steps=20, phase1_fraction=1.0))
    assert not res.face.z_id.any() and not res.face.z_ex.any() and not res.face.jaw_theta.any()


def test_fit_reduces_error(head, diag):
    f, c, inputs = scene(head, 3)
    res = fit_image(head, inputs, FitConfig(steps=200))
    start = visible_rmse(head, head.zero_params(), f, c, 128, 128)
    end = visible_rmse(head, res.face, f, c, 128, 128)
    assert end < 0.5 * start
    assert end < 0.02 * diag


def test_mica_identity_initialises_and_anchors(head):
    f, c, inputs = scene(head, 4)
    inputs.mica_identity = f.z_id.copy()
    res = fit_image(head, inputs, FitConfig(steps=1, phase1_fraction=1.0))
    np.testing.assert_array_equal(res.face.z_id, f.z_id)


def test_no_correspondences(head):
    _, _, inputs = scene(head, 5)
    with pytest.raises(NoCorrespondences):
        fit_image(head, inputs, FitConfig(steps=5, delta_uv=0.0))
    far = FitInputs(MapImage(np.full((32, 32, 2), 5.0), np.ones((32, 32), bool)),
                    MapImage(np.zeros((32, 32, 3)), np.ones((32, 32), bool)),
                    MapImage.from_mask(np.ones((32, 32), bool)))
    with pytest.raises(NoCorrespondences):
        fit_image(head, far, FitConfig(steps=5))
    empty = FitInputs(inputs.uv_map, inputs.normal_map, MapImage.from_mask(np.zeros((128, 128), bool)))
    with pytest.raises(NoCorrespondences):
        fit_image(head, empty, FitConfig(steps=5))


def test_input_validation(head):
    _, _, inputs = scene(head, 6)
    bad = FitInputs(inputs.uv_map, inputs.normal_map, MapImage.from_mask(np.ones((64, 64), bool)))
    with pytest.raises(DimensionMismatch):
        fit_image(head, bad, FitConfig(steps=1))
    inputs.mica_identity = np.zeros(head.n_id + 1)
    with pytest.raises(DimensionMismatch):
        fit_image(head, inputs, FitConfig(steps=1))


@pytest.mark.parametrize("changes", [dict(lambda_uv=-1), dict(steps=0), dict(steps=2.5),
                                     dict(adam_beta1=1.0), dict(lr_cam=float("nan"))])
def test_config_validation(changes):
    with pytest.raises(ValueError):
        FitConfig(**changes).validate()


def test_config_dict_round_trip():
    cfg = FitConfig(lambda_uv=10, steps=7)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FitConfig.from_dict({"lambda_nope": 1})


def test_config_defaults():
    cfg = FitConfig()
    assert (cfg.lambda_uv, cfg.lambda_n, cfg.lambda_id, cfg.lambda_ex) == (2000, 200, 0.15, 0.01)
    assert (cfg.lr_id, cfg.lr_ex, cfg.steps) == (0.001, 0.003, 500)


def test_initial_camera_frames_the_mask(head):
    f, c, inputs = scene(head, 7)
    cam = initial_camera(head, inputs.mask)
    assert cam.focal_length == pytest.approx(1.8 * 128)
    np.testing.assert_array_equal(cam.rotation, 0)
    from facefit.camera import project
    pix, _ = project(head.template_vertices, cam)
    rows, cols = np.nonzero(inputs.mask.valid)
    assert abs(pix[:, 0].mean() - cols.mean()) < 10
    assert abs(pix[:, 1].mean() - rows.mean()) < 10
