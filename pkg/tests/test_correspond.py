import numpy as np
import pytest
from hypothesis import given, strategies as st

from facefit import synth
from facefit.camera import project
from facefit.correspond import (DEFAULT_DELTA_UV, build_uv_index, find_correspondences,
                                nearest_pixels, write_correspondences_csv)
from facefit.errors import DimensionMismatch, EmptyMask
from facefit.maps import MapImage
from facefit.model import forward
from facefit.raster import render_maps, visible_vertices


def exhaustive(uv_map, valid, queries):
    """Brute-force argmin over every valid pixel, smallest row-major index on ties."""
    flat = uv_map.reshape(-1, 2).astype(np.float64)
    ids = np.flatnonzero(valid.ravel())
    out_p, out_d = [], []
    for q in queries:
        d2 = np.sum((flat[ids] - q) ** 2, axis=1)
        k = ids[d2 == d2.min()].min()
        out_p.append(k)
        out_d.append(np.sqrt(d2.min()))
    return np.array(out_p), np.array(out_d)


def test_two_by_two_index_has_one_entry_per_cell():
    uv = np.array([[[0, 0], [1, 0]], [[0, 1], [1, 1]]], np.float32)
    idx = build_uv_index(MapImage(uv, np.ones((2, 2), bool)))
    assert len(idx) == 4
    # resolution is ceil(sqrt(4) / 4) = 1 for four pixels; force 2 cells per axis
    from facefit.correspond import _cell_of
    cells = _cell_of(idx.entry_uv, 2)
    assert len({tuple(c) for c in cells}) == 4


def test_all_invalid_mask_raises():
    uv = MapImage(np.random.default_rng(0).random((8, 8, 2)), np.ones((8, 8), bool))
    with pytest.raises(EmptyMask):
        build_uv_index(uv, MapImage.from_mask(np.zeros((8, 8), bool)))


def test_mask_size_mismatch_raises():
    uv = MapImage(np.zeros((8, 8, 2)), np.ones((8, 8), bool))
    with pytest.raises(DimensionMismatch):
        build_uv_index(uv, MapImage.from_mask(np.ones((8, 9), bool)))
    with pytest.raises(DimensionMismatch):
        build_uv_index(MapImage(np.zeros((8, 8, 3)), np.ones((8, 8), bool)))


def test_every_valid_pixel_indexed_once():
    rng = np.random.default_rng(1)
    valid = rng.random((40, 50)) > 0.3
    idx = build_uv_index(MapImage(rng.random((40, 50, 2)), valid))
    assert np.array_equal(np.sort(idx.entry_pixel), np.flatnonzero(valid.ravel()))
    assert idx.cell_start[-1] == valid.sum()


def test_index_matches_exhaustive_scan_512():
    rng = np.random.default_rng(2)
    uv = rng.random((512, 512, 2)).astype(np.float32)
    valid = rng.random((512, 512)) > 0.2
    idx = build_uv_index(MapImage(uv, valid))
    q = rng.random((1000, 2))
    p, d = nearest_pixels(idx, q)
    p0, d0 = exhaustive(uv, valid, q)
    assert np.array_equal(p, p0)
    np.testing.assert_array_equal(d, d0)


def test_ties_go_to_smallest_pixel_index():
    # quantised uv values produce many exact ties
    rng = np.random.default_rng(3)
    uv = (rng.integers(0, 5, (30, 30, 2)) / 4).astype(np.float32)
    valid = np.ones((30, 30), bool)
    idx = build_uv_index(MapImage(uv, valid))
    q = rng.integers(0, 9, (300, 2)) / 8
    p, _ = nearest_pixels(idx, q)
    p0, _ = exhaustive(uv, valid, q)
    assert np.array_equal(p, p0)


@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_index_equals_exhaustive_property(seed, h, w):
    rng = np.random.default_rng(seed)
    uv = rng.random((h, w, 2)).astype(np.float32)
    valid = rng.random((h, w)) > 0.5
    valid.flat[rng.integers(h * w)] = True
    q = rng.uniform(-0.1, 1.1, (25, 2))
    p, d = nearest_pixels(build_uv_index(MapImage(uv, valid)), q)
    p0, d0 = exhaustive(uv, valid, q)
    assert np.array_equal(p, p0)
    np.testing.assert_array_equal(d, d0)


def test_exact_hit_returns_that_pixel(head):
    rng = np.random.default_rng(4)
    uv = rng.random((32, 32, 2)).astype(np.float32)
    vuv = head.vertex_uv.astype(np.float32)
    uv[10, 7] = vuv[5]
    corr = find_correspondences(vuv, build_uv_index(MapImage(uv, np.ones((32, 32), bool))))
    assert corr.pixel_index[5] == 10 * 32 + 7
    np.testing.assert_array_equal(corr.target_pixel[5], [7.5, 10.5])
    assert corr.uv_distance[5] == 0 and corr.accepted[5]


def test_zero_threshold_accepts_nothing(head):
    maps = render_maps(head, head.zero_params(), synth.random_camera(np.random.default_rng(0), 64, 64), 64, 64)
    corr = find_correspondences(head, build_uv_index(maps["uv_map"]), delta_uv=0.0)
    assert corr.n_accepted == 0


def test_accepted_set_monotone_in_threshold(head):
    rng = np.random.default_rng(5)
    maps = render_maps(head, synth.random_face(head, rng), synth.random_camera(rng, 96, 96), 96, 96)
    corr = find_correspondences(head, build_uv_index(maps["uv_map"]))
    prev = np.zeros(head.n_vertices, bool)
    for d in np.linspace(0, 0.2, 30):
        acc = corr.with_threshold(d).accepted
        assert np.all(acc >= prev)
        assert np.array_equal(acc, corr.uv_distance < d)
        prev = acc


def _round_trip(head, seed, W):
    rng = np.random.default_rng(seed)
    f, c = synth.random_face(head, rng), synth.random_camera(rng, W, W)
    maps, frag = render_maps(head, f, c, W, W, return_fragments=True)
    V = forward(head, f)
    vis = visible_vertices(head, V, c, frag)
    corr = find_correspondences(head, build_uv_index(maps["uv_map"]), DEFAULT_DELTA_UV)
    pix, _ = project(V, c)
    use = corr.accepted & vis
    return np.linalg.norm(corr.target_pixel[use] - pix[use], axis=1), vis, corr


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_accepts_most_visible_vertices(head, seed):
    _, vis, corr = _round_trip(head, seed, 256)
    assert np.mean(corr.accepted[vis]) >= 0.95


def test_self_occluded_vertices_mostly_rejected(head):
    # reported, not a hard bound beyond "most"
    hidden_acc = []
    for seed in range(5):
        _, vis, corr = _round_trip(head, seed, 256)
        hidden_acc.append(np.mean(corr.accepted[~vis]))
    assert np.mean(hidden_acc) < 0.5


def test_correspondence_csv(tmp_path, head):
    maps = render_maps(head, head.zero_params(), synth.random_camera(np.random.default_rng(0), 48, 48), 48, 48)
    corr = find_correspondences(head, build_uv_index(maps["uv_map"]))
    p = tmp_path / "c.csv"
    write_correspondences_csv(p, corr)
    rows = p.read_text().splitlines()
    assert rows[0] == "vertex_id,px,py,uv_dist,accepted"
    assert len(rows) == head.n_vertices + 1
    v, px, py, d, a = rows[1].split(",")
    assert float(px) == corr.target_pixel[0, 0] and int(a) == int(corr.accepted[0])
