import numpy as np
import pytest
from hypothesis import given, strategies as st

from facefit.errors import EmptyAfterMasking
from facefit.evalbench import PointCloud, build_bvh, compute_metrics, evaluate, keep_mask

from meshes import bumpy_grid, random_rotation, sample_surface


def flat_grid(n=20, spacing=1.0):
    xs, ys = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    V = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
    F = []
    for j in range(n - 1):
        for i in range(n - 1):
            a = j * n + i
            F += [(a, a + 1, a + n + 1), (a, a + n + 1, a + n)]
    return V, np.array(F)


def brute_metrics(d, cos, thr=2.5):
    return d.mean(), np.sqrt((d ** 2).mean()), cos.mean(), (d <= thr).mean()


def test_points_on_surface_give_perfect_scores():
    V, F = bumpy_grid()
    P, N = sample_surface(V, F, 2000, np.random.default_rng(0))
    m = compute_metrics(V, F, PointCloud(P, N))
    assert m.l1_mm < 1e-9 and m.l2_mm < 1e-9
    assert m.nc == pytest.approx(1.0, abs=1e-9)
    assert m.recall_2_5 == 1.0


def test_single_point_at_three_mm():
    V, F = flat_grid()
    m = compute_metrics(V, F, PointCloud(np.array([[5.5, 5.5, 3.0]]), np.array([[0, 0, 1.0]])))
    assert m.l1_mm == pytest.approx(3.0) and m.l2_mm == pytest.approx(3.0)
    assert m.recall_2_5 == 0.0


def test_alternating_displacements():
    # interior vertices of a flat grid pushed along the normal by +1, -1, +4, -4 mm
    V, F = flat_grid(n=30)
    inner = np.flatnonzero((V[:, 0] > 5) & (V[:, 0] < 24) & (V[:, 1] > 5) & (V[:, 1] < 24))
    inner = inner[: len(inner) // 4 * 4]
    offs = np.tile([1.0, -1.0, 4.0, -4.0], len(inner) // 4)
    P = V[inner] + offs[:, None] * [0, 0, 1]
    N = np.tile([0, 0, 1.0], (len(P), 1))
    m = compute_metrics(V, F, PointCloud(P, N))
    assert m.l1_mm == pytest.approx(2.5, abs=1e-12)
    assert m.l2_mm == pytest.approx(np.sqrt(8.5), abs=1e-12)
    assert m.recall_2_5 == 0.5
    d = np.abs(offs)
    l1, l2, _, r = brute_metrics(d, np.ones_like(d))
    assert (m.l1_mm, m.recall_2_5) == (pytest.approx(l1), r) and m.l2_mm == pytest.approx(l2)


def test_rigid_invariance():
    V, F = bumpy_grid()
    rng = np.random.default_rng(1)
    P, N = sample_surface(V, F, 3000, rng)
    P = P + rng.normal(scale=2.0, size=P.shape)
    m0 = compute_metrics(V, F, PointCloud(P, N))
    R, t = random_rotation(rng, np.pi), rng.normal(size=3) * 100
    m1 = compute_metrics(V @ R.T + t, F, PointCloud(P, N).transformed(R, t))
    for k in ("l1_mm", "l2_mm", "nc", "recall_2_5"):
        assert abs(getattr(m0, k) - getattr(m1, k)) <= 1e-9


@given(st.integers(0, 2**31 - 1))
def test_l2_at_least_l1_and_recall_monotone(seed):
    rng = np.random.default_rng(seed)
    V, F = bumpy_grid(nx=8, ny=8, seed=seed % 1000)
    P, N = sample_surface(V, F, 200, rng)
    P = P + rng.normal(scale=rng.uniform(0.1, 5), size=P.shape)
    bvh = build_bvh(V, F)
    gt = PointCloud(P, N)
    prev = -1.0
    for thr in np.linspace(0, 10, 11):
        m = compute_metrics(V, F, gt, threshold=thr, bvh=bvh)
        assert m.l2_mm >= m.l1_mm - 1e-12
        assert 0 <= m.recall_2_5 <= 1 and -1 <= m.nc <= 1
        assert m.recall_2_5 >= prev
        prev = m.recall_2_5


def test_region_masking():
    V, F = flat_grid()
    P = np.array([[5.0, 5.0, 1.0], [6.0, 6.0, 10.0]])
    N = np.tile([0, 0, 1.0], (2, 1))
    gt = PointCloud(P, N, labels=np.array([1, 2]))
    assert compute_metrics(V, F, gt, keep_labels=[1]).l1_mm == pytest.approx(1.0)
    with pytest.raises(EmptyAfterMasking):
        compute_metrics(V, F, gt, keep_labels=[7])
    with pytest.raises(ValueError):
        keep_mask(PointCloud(P, N), [1])


def test_evaluate_aligns_then_scores(head):
    V, F = head.template_vertices * 1000, head.triangles
    rng = np.random.default_rng(2)
    P, N = sample_surface(V, F, 3000, rng)
    R, t = random_rotation(rng, np.radians(20)), rng.normal(size=3) * 20
    ids = rng.choice(len(V), 10, replace=False)
    m = evaluate(V @ R.T + t, F, PointCloud(P, N), [(i, V[i]) for i in ids])
    assert m.l1_mm < 1e-6 and m.recall_2_5 == 1.0 and m.n_points == 3000
    d = m.to_dict()
    assert set(d) >= {"l1_mm", "l2_mm", "nc", "recall_2_5", "aligned_transform"}
