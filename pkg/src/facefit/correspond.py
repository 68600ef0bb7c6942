"""Per-vertex pixel targets from a uv map by exact nearest-neighbour search.

For every model vertex the target is the valid pixel whose uv value is
closest (L2 in uv space) to the vertex's template uv, searched over the
whole image.  Ties go to the smallest row-major pixel index.  A uniform
grid over uv space with ring expansion makes the search exact and fast.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit, pick
from .errors import DimensionMismatch, EmptyMask

DEFAULT_DELTA_UV = 0.02


@dataclass
class UvIndex:
    resolution: int
    cell_start: np.ndarray    # (R*R + 1,) offsets into the entry arrays
    entry_pixel: np.ndarray   # (P,) row-major pixel index, ascending within a cell
    entry_uv: np.ndarray      # (P, 2) float64
    width: int
    height: int

    def __len__(self):
        return self.entry_pixel.size

    def pixel_position(self, pixel_index):
        """Pixel-centre coordinates (x, y) for row-major indices."""
        pixel_index = np.asarray(pixel_index)
        return np.stack([pixel_index % self.width + 0.5, pixel_index // self.width + 0.5], axis=-1)


@dataclass
class CorrespondenceSet:
    target_pixel: np.ndarray  # (N, 2) pixel-centre coordinates
    uv_distance: np.ndarray   # (N,)
    accepted: np.ndarray      # (N,) bool
    pixel_index: np.ndarray   # (N,) row-major index of the matched pixel

    @property
    def n_accepted(self):
        return int(self.accepted.sum())

    def with_threshold(self, delta_uv):
        return CorrespondenceSet(self.target_pixel, self.uv_distance,
                                 self.uv_distance < delta_uv, self.pixel_index)


def _cell_of(uv, R):
    c = np.floor(uv * R).astype(np.int64)
    return np.clip(c, 0, R - 1)


def build_uv_index(uv_map, mask=None):
    if uv_map.channels != 2:
        raise DimensionMismatch(f"uv map must have 2 channels, got {uv_map.channels}")
    valid = uv_map.valid.copy()
    if mask is not None:
        if mask.shape != uv_map.shape:
            raise DimensionMismatch(f"mask {mask.shape} does not match uv map {uv_map.shape}")
        valid &= mask.valid
    pixels = np.flatnonzero(valid.ravel())
    if pixels.size == 0:
        raise EmptyMask("no pixel is valid in both the uv map and the mask")
    uv = uv_map.data.reshape(-1, 2)[pixels].astype(np.float64)
    R = int(math.ceil(math.sqrt(pixels.size) / 4.0))
    cells = _cell_of(uv, R)
    cell_id = cells[:, 1] * R + cells[:, 0]
    order = np.argsort(cell_id, kind="stable")   # keeps ascending pixel order per cell
    counts = np.bincount(cell_id, minlength=R * R)
    cell_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return UvIndex(R, cell_start, pixels[order].astype(np.int64), np.ascontiguousarray(uv[order]),
                   uv_map.width, uv_map.height)


@njit
def _query_nb(queries, cell_start, entry_uv, entry_pixel, R):
    M = queries.shape[0]
    best_entry = np.full(M, -1, dtype=np.int64)
    best_d2 = np.full(M, np.inf)
    h = 1.0 / R
    for m in range(M):
        qu = queries[m, 0]
        qv = queries[m, 1]
        cx = min(max(int(math.floor(qu * R)), 0), R - 1)
        cy = min(max(int(math.floor(qv * R)), 0), R - 1)
        bd = np.inf
        be = -1
        bp = np.iinfo(np.int64).max
        for r in range(R + 1):
            y0 = cy - r
            y1 = cy + r
            for gy in range(max(y0, 0), min(y1, R - 1) + 1):
                edge_row = gy == y0 or gy == y1
                step = 1 if edge_row else 2 * r
                gx = cx - r
                while gx <= cx + r:
                    if 0 <= gx < R:
                        c = gy * R + gx
                        for e in range(cell_start[c], cell_start[c + 1]):
                            du = entry_uv[e, 0] - qu
                            dv = entry_uv[e, 1] - qv
                            d2 = du * du + dv * dv
                            if d2 < bd or (d2 == bd and entry_pixel[e] < bp):
                                bd = d2
                                be = e
                                bp = entry_pixel[e]
                    if step == 0:
                        break
                    gx += step
            bound = r * h
            if bd < bound * bound * (1.0 - 1e-12):
                break
        best_entry[m] = be
        best_d2[m] = bd
    return best_entry, best_d2


def _ring_cells(cx, cy, r, R):
    if r == 0:
        return [(cx, cy)]
    cells = []
    for gy in range(cy - r, cy + r + 1):
        if not 0 <= gy < R:
            continue
        xs = range(cx - r, cx + r + 1) if gy in (cy - r, cy + r) else (cx - r, cx + r)
        cells += [(gx, gy) for gx in xs if 0 <= gx < R]
    return cells


def _query_np(queries, cell_start, entry_uv, entry_pixel, R):
    M = queries.shape[0]
    best_entry = np.full(M, -1, dtype=np.int64)
    best_d2 = np.full(M, np.inf)
    h = 1.0 / R
    qcells = _cell_of(queries, R)
    for m in range(M):
        qu, qv = queries[m]
        cx, cy = qcells[m]
        bd, be, bp = np.inf, -1, np.iinfo(np.int64).max
        for r in range(R + 1):
            spans = [np.arange(cell_start[gy * R + gx], cell_start[gy * R + gx + 1])
                     for gx, gy in _ring_cells(cx, cy, r, R)]
            cand = np.concatenate(spans) if spans else np.zeros(0, np.int64)
            if cand.size:
                du = entry_uv[cand, 0] - qu
                dv = entry_uv[cand, 1] - qv
                d2 = du * du + dv * dv
                dmin = d2.min()
                if dmin <= bd:
                    tied = cand[d2 == dmin]
                    e = tied[np.argmin(entry_pixel[tied])]
                    if dmin < bd or entry_pixel[e] < bp:
                        bd, be, bp = dmin, e, entry_pixel[e]
            bound = r * h
            if bd < bound * bound * (1.0 - 1e-12):
                break
        best_entry[m], best_d2[m] = be, bd
    return best_entry, best_d2


def nearest_pixels(index, queries):
    """Nearest valid pixel (row-major index) and uv distance for each query."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 2)
    kernel = pick(_query_nb, _query_np)
    entry, d2 = kernel(queries, index.cell_start, index.entry_uv, index.entry_pixel, index.resolution)
    return index.entry_pixel[entry], np.sqrt(d2)


def find_correspondences(model, index, delta_uv=DEFAULT_DELTA_UV):
    vertex_uv = model.vertex_uv if hasattr(model, "vertex_uv") else model
    pixel, dist = nearest_pixels(index, vertex_uv)
    return CorrespondenceSet(index.pixel_position(pixel), dist, dist < delta_uv, pixel)


def write_correspondences_csv(path, corr):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vertex_id", "px", "py", "uv_dist", "accepted"])
        for v in range(corr.uv_distance.size):
            w.writerow([v, repr(float(corr.target_pixel[v, 0])), repr(float(corr.target_pixel[v, 1])),
                        repr(float(corr.uv_distance[v])), int(corr.accepted[v])])
