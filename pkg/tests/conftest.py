import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from facefit import raster
from facefit.model import forward, load_default_model

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TESTDATA = os.path.join(os.path.dirname(__file__), "testdata")


@pytest.fixture(scope="session")
def head():
    return load_default_model()


@pytest.fixture(scope="session")
def diag(head):
    return float(np.linalg.norm(np.ptp(head.template_vertices, axis=0)))


def visible_rmse(model, face_fit, face_true, cam_true, width, height):
    """Model-space RMSE over vertices visible in the ground-truth render."""
    _, frag = raster.render_maps(model, face_true, cam_true, width, height, return_fragments=True)
    Vt = forward(model, face_true)
    vis = raster.visible_vertices(model, Vt, cam_true, frag)
    d = forward(model, face_fit) - Vt
    return float(np.sqrt(np.mean(np.sum(d[vis] ** 2, axis=1))))


def central_diff(f, x, h):
    """Central finite-difference Jacobian of f: R^n -> R^m (as (m, n))."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
