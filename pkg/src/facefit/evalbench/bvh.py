"""Exact point-to-mesh distance.

Closest point on a triangle follows the Voronoi-region case analysis from
Ericson's *Real-Time Collision Detection* (face, edge and vertex cases).
Queries walk a median-split AABB tree; the numpy fallback scans every
triangle.  Equal distances resolve to the lowest triangle id.
"""
from dataclasses import dataclass

import numpy as np

from .._accel import HAS_NUMBA, njit, pick
from ..model import vertex_normals

if HAS_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range

LEAF_SIZE = 4
# squared distances this close (relative) count as a tie; a point nearest to a
# shared edge or vertex gets slightly different rounding from each triangle
TIE_RTOL = 1e-12


@njit
def _closest_bary(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Barycentric weights of the closest point of triangle abc to p."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


def closest_bary_np(p, a, b, c):
    """Vectorised version of ``_closest_bary`` over broadcast (..., 3) arrays."""
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda u, v: np.einsum("...i,...i->...", u, v)
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    out = np.zeros(p.shape[:-1] + (3,))
    done = np.zeros(p.shape[:-1], dtype=bool)

    def put(cond, b0, b1, b2):
        sel = cond & ~done
        out[sel, 0] = b0[sel] if np.ndim(b0) else b0
        out[sel, 1] = b1[sel] if np.ndim(b1) else b1
        out[sel, 2] = b2[sel] if np.ndim(b2) else b2
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        put((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v, v, 0.0)
        put((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w, 0.0, w)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - w, w)
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        put(np.ones_like(done), 1.0 - v - w, v, w)
    return out


@dataclass
class MeshBVH:
    vertices: np.ndarray
    triangles: np.ndarray
    node_min: np.ndarray     # (M, 3)
    node_max: np.ndarray
    node_left: np.ndarray    # child index or -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray   # leaf range into tri_order
    node_count: np.ndarray
    tri_order: np.ndarray

    @property
    def n_triangles(self):
        return self.triangles.shape[0]


def build_bvh(vertices, triangles, leaf_size=LEAF_SIZE):
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if triangles.shape[0] == 0:
        raise ValueError("mesh has no triangles")
    corners = vertices[triangles]
    tmin, tmax = corners.min(axis=1), corners.max(axis=1)
    centroid = corners.mean(axis=1)
    order = np.arange(triangles.shape[0])
    mins, maxs, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        ids = order[lo:hi]
        mins.append(tmin[ids].min(axis=0))
        maxs.append(tmax[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(mins) - 1

    root = new_node(0, order.size)
    stack = [(root, 0, order.size)]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= leaf_size:
            continue
        ids = order[lo:hi]
        c = centroid[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps ties in id order, so builds are deterministic
        order[lo:hi] = ids[np.argsort(c[:, axis], kind="stable")]
        mid = (lo + hi) // 2
        l_node = new_node(lo, mid)
        r_node = new_node(mid, hi)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((l_node, lo, mid))
        stack.append((r_node, mid, hi))
    return MeshBVH(vertices, triangles, np.array(mins), np.array(maxs),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   np.array(start, dtype=np.int64), np.array(count, dtype=np.int64), order.astype(np.int64))


@njit
def _box_d2(px, py, pz, lo, hi):
    d = 0.0
    for k, p in ((0, px), (1, py), (2, pz)):
        if p < lo[k]:
            d += (lo[k] - p) ** 2
        elif p > hi[k]:
            d += (p - hi[k]) ** 2
    return d


@njit(parallel=True)
def _query_nb(points, V, tris, nmin, nmax, nleft, nright, nstart, ncount, order):
    P = points.shape[0]
    out_d2 = np.empty(P)
    out_tri = np.empty(P, dtype=np.int64)
    out_bary = np.empty((P, 3))
    for q in prange(P):
        px, py, pz = points[q, 0], points[q, 1], points[q, 2]
        best = np.inf
        best_f = -1
        b0s = 0.0
        b1s = 0.0
        b2s = 0.0
        stack = np.empty(128, dtype=np.int64)
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_d2(px, py, pz, nmin[node], nmax[node]) > best * (1.0 + TIE_RTOL):
                continue
            if nleft[node] < 0:
                for k in range(nstart[node], nstart[node] + ncount[node]):
                    f = order[k]
                    i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
                    b0, b1, b2 = _closest_bary(px, py, pz, V[i0, 0], V[i0, 1], V[i0, 2],
                                               V[i1, 0], V[i1, 1], V[i1, 2], V[i2, 0], V[i2, 1], V[i2, 2])
                    cx = b0 * V[i0, 0] + b1 * V[i1, 0] + b2 * V[i2, 0]
                    cy = b0 * V[i0, 1] + b1 * V[i1, 1] + b2 * V[i2, 1]
                    cz = b0 * V[i0, 2] + b1 * V[i1, 2] + b2 * V[i2, 2]
                    d2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
                    tie = d2 <= best * (1.0 + TIE_RTOL) and d2 >= best * (1.0 - TIE_RTOL)
                    if (d2 < best and not tie) or (tie and f < best_f):
                        best = min(d2, best) if tie else d2
                        best_f = f
                        b0s, b1s, b2s = b0, b1, b2
            else:
                l, r = nleft[node], nright[node]
                dl = _box_d2(px, py, pz, nmin[l], nmax[l])
                dr = _box_d2(px, py, pz, nmin[r], nmax[r])
                # push the farther child first so the nearer is visited first
                if dl <= dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out_d2[q] = best
        out_tri[q] = best_f
        out_bary[q, 0] = b0s
        out_bary[q, 1] = b1s
        out_bary[q, 2] = b2s
    return out_d2, out_tri, out_bary


def _query_np(points, V, tris, *_unused, chunk=256):
    P = points.shape[0]
    out_d2 = np.empty(P)
    out_tri = np.empty(P, dtype=np.int64)
    out_bary = np.empty((P, 3))
    A, B, C = V[tris[:, 0]], V[tris[:, 1]], V[tris[:, 2]]
    for s in range(0, P, chunk):
        p = points[s:s + chunk, None, :]
        bary = closest_bary_np(p, A[None], B[None], C[None])
        closest = bary[..., 0:1] * A + bary[..., 1:2] * B + bary[..., 2:3] * C
        d2 = np.sum((p - closest) ** 2, axis=-1)
        lo = d2.min(axis=1, keepdims=True)
        f = np.argmax(d2 <= lo * (1.0 + TIE_RTOL), axis=1)   # lowest id among ties
        rows = np.arange(f.size)
        out_d2[s:s + chunk] = d2[rows, f]
        out_tri[s:s + chunk] = f
        out_bary[s:s + chunk] = bary[rows, f]
    return out_d2, out_tri, out_bary


@dataclass
class SurfaceQuery:
    distance: np.ndarray     # (P,)
    point: np.ndarray        # (P, 3) nearest surface point
    triangle: np.ndarray     # (P,) containing triangle id
    normal: np.ndarray       # (P, 3) interpolated unit normal at the nearest point
    barycentric: np.ndarray  # (P, 3)


def query_bvh(bvh, points, normals=None):
    """Nearest surface points for (P, 3) query points."""
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    kernel = pick(_query_nb, _query_np)
    d2, tri, bary = kernel(points, bvh.vertices, bvh.triangles, bvh.node_min, bvh.node_max,
                           bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count, bvh.tri_order)
    corners = bvh.triangles[tri]
    point = np.einsum("pk,pkc->pc", bary, bvh.vertices[corners])
    if normals is None:
        normals = vertex_normals(bvh.vertices, bvh.triangles)
    n = np.einsum("pk,pkc->pc", bary, normals[corners])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    # fall back to the face normal where vertex normals cancel
    face = np.cross(bvh.vertices[corners[:, 1]] - bvh.vertices[corners[:, 0]],
                    bvh.vertices[corners[:, 2]] - bvh.vertices[corners[:, 0]])
    face /= np.linalg.norm(face, axis=1, keepdims=True)
    n = np.where(length > 1e-12, n / np.where(length > 1e-12, length, 1.0), face)
    return SurfaceQuery(np.sqrt(d2), point, tri, n, bary)


def point_to_mesh_distance(point, vertices, triangles, bvh=None):
    """Distance, nearest point, triangle id and surface normal for one point."""
    bvh = bvh or build_bvh(vertices, triangles)
    q = query_bvh(bvh, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(q.distance[0]), q.point[0], int(q.triangle[0]), q.normal[0]
