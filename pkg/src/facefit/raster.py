"""Deterministic z-buffer rasterizer and attribute maps.

Pixel (i, j) is sampled at its centre (i + 0.5, j + 0.5).  Coverage uses
screen-space edge functions with the top-left fill rule; attributes use
perspective-correct barycentrics obtained from the pixel ray, so that
``b_k = s_k / sum(s)`` with ``s_0 = d . (X2 x X1)`` (cyclic), ``d`` the
pixel ray in camera space; all ``s_k >= 0`` inside a front face.  Back faces (and triangles with a vertex at
depth <= MIN_DEPTH) are discarded.  Equal depths keep the lower triangle id.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from ._accel import HAS_NUMBA, njit, pick
from .camera import MIN_DEPTH, project_camera_frame
from .maps import MapImage

if HAS_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range

BAND_ROWS = 16


@dataclass
class FragmentBuffer:
    triangle_id: np.ndarray   # (H, W) int32, -1 background
    barycentric: np.ndarray   # (H, W, 3) float64
    depth: np.ndarray         # (H, W) float64, +inf background

    @property
    def height(self):
        return self.triangle_id.shape[0]

    @property
    def width(self):
        return self.triangle_id.shape[1]

    @property
    def covered(self):
        return self.triangle_id >= 0


# --- kernels ------------------------------------------------------------------

@njit
def _is_top_left(ax, ay, bx, by):
    dy = by - ay
    return (dy == 0.0 and bx - ax > 0.0) or dy < 0.0


@njit(parallel=True)
def _raster_nb(q, X, tris, fl, ppx, ppy, width, height):
    tri_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    n_bands = (height + 15) // 16
    F = tris.shape[0]
    for band in prange(n_bands):
        r0 = band * 16
        r1 = min(height, r0 + 16)
        for f in range(F):
            i0 = tris[f, 0]
            i1 = tris[f, 1]
            i2 = tris[f, 2]
            if X[i0, 2] <= 1e-6 or X[i1, 2] <= 1e-6 or X[i2, 2] <= 1e-6:
                continue
            x0 = q[i0, 0]
            y0 = q[i0, 1]
            x1 = q[i1, 0]
            y1 = q[i1, 1]
            x2 = q[i2, 0]
            y2 = q[i2, 1]
            area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            if not area < 0.0:
                continue
            # interior-positive winding: A=v0, B=v2, C=v1
            ax = x0
            ay = y0
            bx = x2
            by = y2
            cx = x1
            cy = y1
            ymin = max(r0, int(math.floor(min(ay, min(by, cy)) - 0.5)))
            ymax = min(r1 - 1, int(math.ceil(max(ay, max(by, cy)) - 0.5)))
            if ymin > ymax:
                continue
            xmin = max(0, int(math.floor(min(ax, min(bx, cx)) - 0.5)))
            xmax = min(width - 1, int(math.ceil(max(ax, max(bx, cx)) - 0.5)))
            if xmin > xmax:
                continue
            tl_ab = _is_top_left(ax, ay, bx, by)
            tl_bc = _is_top_left(bx, by, cx, cy)
            tl_ca = _is_top_left(cx, cy, ax, ay)
            # s_0 = d . (X2 x X1) (cyclic): positive inside a front face
            c0x = X[i2, 1] * X[i1, 2] - X[i2, 2] * X[i1, 1]
            c0y = X[i2, 2] * X[i1, 0] - X[i2, 0] * X[i1, 2]
            c0z = X[i2, 0] * X[i1, 1] - X[i2, 1] * X[i1, 0]
            c1x = X[i0, 1] * X[i2, 2] - X[i0, 2] * X[i2, 1]
            c1y = X[i0, 2] * X[i2, 0] - X[i0, 0] * X[i2, 2]
            c1z = X[i0, 0] * X[i2, 1] - X[i0, 1] * X[i2, 0]
            c2x = X[i1, 1] * X[i0, 2] - X[i1, 2] * X[i0, 1]
            c2y = X[i1, 2] * X[i0, 0] - X[i1, 0] * X[i0, 2]
            c2z = X[i1, 0] * X[i0, 1] - X[i1, 1] * X[i0, 0]
            for j in range(ymin, ymax + 1):
                py = j + 0.5
                for i in range(xmin, xmax + 1):
                    px = i + 0.5
                    e_ab = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                    if e_ab < 0.0 or (e_ab == 0.0 and not tl_ab):
                        continue
                    e_bc = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                    if e_bc < 0.0 or (e_bc == 0.0 and not tl_bc):
                        continue
                    e_ca = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                    if e_ca < 0.0 or (e_ca == 0.0 and not tl_ca):
                        continue
                    dx = (px - ppx) / fl
                    dy = (py - ppy) / fl
                    s0 = dx * c0x + dy * c0y + c0z
                    s1 = dx * c1x + dy * c1y + c1z
                    s2 = dx * c2x + dy * c2y + c2z
                    if s0 < 0.0:
                        s0 = 0.0
                    if s1 < 0.0:
                        s1 = 0.0
                    if s2 < 0.0:
                        s2 = 0.0
                    S = s0 + s1 + s2
                    if not S > 0.0:
                        continue
                    b0 = s0 / S
                    b1 = s1 / S
                    b2 = s2 / S
                    z = b0 * X[i0, 2] + b1 * X[i1, 2] + b2 * X[i2, 2]
                    if z < depth[j, i]:
                        depth[j, i] = z
                        tri_id[j, i] = f
                        bary[j, i, 0] = b0
                        bary[j, i, 1] = b1
                        bary[j, i, 2] = b2
    return tri_id, bary, depth


def _is_top_left_np(ax, ay, bx, by):
    dy = by - ay
    return (dy == 0.0 and bx - ax > 0.0) or dy < 0.0


def _raster_np(q, X, tris, fl, ppx, ppy, width, height):
    tri_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    Xt = X[tris]
    qt = q[tris]
    area = ((qt[:, 1, 0] - qt[:, 0, 0]) * (qt[:, 2, 1] - qt[:, 0, 1])
            - (qt[:, 1, 1] - qt[:, 0, 1]) * (qt[:, 2, 0] - qt[:, 0, 0]))
    in_front = np.all(Xt[:, :, 2] > MIN_DEPTH, axis=1)
    C = np.stack([np.cross(Xt[:, 2], Xt[:, 1]), np.cross(Xt[:, 0], Xt[:, 2]),
                  np.cross(Xt[:, 1], Xt[:, 0])], axis=1)
    for f in np.flatnonzero(in_front & (area < 0.0)):
        (ax, ay), (cx, cy), (bx, by) = qt[f]
        xs = [ax, bx, cx]
        ys = [ay, by, cy]
        ymin = max(0, int(math.floor(min(ys) - 0.5)))
        ymax = min(height - 1, int(math.ceil(max(ys) - 0.5)))
        xmin = max(0, int(math.floor(min(xs) - 0.5)))
        xmax = min(width - 1, int(math.ceil(max(xs) - 0.5)))
        if ymin > ymax or xmin > xmax:
            continue
        py, px = np.mgrid[ymin:ymax + 1, xmin:xmax + 1].astype(np.float64) + 0.5
        inside = np.ones(px.shape, dtype=bool)
        for (ux, uy), (vx, vy) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)), ((cx, cy), (ax, ay))):
            e = (vx - ux) * (py - uy) - (vy - uy) * (px - ux)
            inside &= (e > 0.0) | ((e == 0.0) & _is_top_left_np(ux, uy, vx, vy))
        if not inside.any():
            continue
        jj, ii = np.nonzero(inside)
        pxs, pys = px[inside], py[inside]
        dx = (pxs - ppx) / fl
        dy = (pys - ppy) / fl
        c = C[f]
        s = np.maximum(dx[:, None] * c[:, 0] + dy[:, None] * c[:, 1] + c[:, 2], 0.0)
        S = s[:, 0] + s[:, 1] + s[:, 2]
        ok = S > 0.0
        b = s / np.where(ok, S, 1.0)[:, None]
        z = b[:, 0] * Xt[f, 0, 2] + b[:, 1] * Xt[f, 1, 2] + b[:, 2] * Xt[f, 2, 2]
        rows, cols = jj + ymin, ii + xmin
        win = ok & (z < depth[rows, cols])
        rows, cols = rows[win], cols[win]
        depth[rows, cols] = z[win]
        tri_id[rows, cols] = f
        bary[rows, cols] = b[win]
    return tri_id, bary, depth


# --- public API ----------------------------------------------------------------

def rasterize_camera_frame(x_cam, triangles, focal_length, principal_point, width, height):
    """Rasterize camera-frame vertices (N, 3)."""
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    x_cam = np.ascontiguousarray(x_cam, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.ascontiguousarray(project_camera_frame(x_cam, focal_length, principal_point))
    kernel = pick(_raster_nb, _raster_np)
    tri_id, bary, depth = kernel(q, x_cam, triangles, float(focal_length),
                                 float(principal_point[0]), float(principal_point[1]),
                                 int(width), int(height))
    return FragmentBuffer(tri_id, bary, depth)


def rasterize(vertices, triangles, cam, width, height):
    return rasterize_camera_frame(cam.to_camera(vertices), triangles, cam.focal_length,
                                  cam.principal_point, width, height)


def interpolate(frag, triangles, attributes):
    """Barycentric interpolation of per-vertex attributes (N, C) -> (H, W, C)."""
    covered = frag.covered
    out = np.zeros(frag.triangle_id.shape + (attributes.shape[1],))
    tri = triangles[frag.triangle_id[covered]]
    b = frag.barycentric[covered]
    out[covered] = np.einsum("pk,pkc->pc", b, attributes[tri])
    return out


def render_camera_frame(x_cam, triangles, vertex_uv, focal_length, principal_point, width, height):
    frag = rasterize_camera_frame(x_cam, triangles, focal_length, principal_point, width, height)
    covered = frag.covered
    normals = model_mod.vertex_normals(x_cam, triangles)
    n = interpolate(frag, triangles, normals)
    norm = np.linalg.norm(n, axis=2, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
    uv = interpolate(frag, triangles, vertex_uv)
    depth = np.where(covered, frag.depth, np.inf)
    maps = {
        "normal_map": MapImage(n, covered),
        "uv_map": MapImage(uv, covered),
        "depth_map": MapImage(depth[:, :, None], covered),
    }
    return maps, frag


def render_maps(model, params, cam, width, height, return_fragments=False):
    """Camera-space normal map, uv map and depth map of the posed model.

    Invalid (background) pixels hold zeros in the normal/uv maps and +inf in
    the depth map.
    """
    vertices = model_mod.forward(model, params)
    x_cam = cam.to_camera(vertices)
    maps, frag = render_camera_frame(x_cam, model.triangles, model.vertex_uv,
                                     cam.focal_length, cam.principal_point, width, height)
    return (maps, frag) if return_fragments else maps


def visibility_epsilon(x_cam):
    front = x_cam[:, 2][x_cam[:, 2] > 0]
    scale = float(np.median(front)) if front.size else 1.0
    return 1e-4 * scale


def visible_camera_frame(x_cam, triangles, focal_length, principal_point, frag, eps=None):
    """Per-vertex visibility against a fragment buffer of the same geometry.

    The triangles covering the 5x5 pixels around a vertex's projection are
    the occluder candidates.  A vertex is hidden when its own camera ray
    crosses one of them (not incident to it) more than ``eps`` in front of
    the vertex.  Testing the ray itself, rather than a depth sampled at the
    pixel centre, keeps silhouette and sloped vertices from hiding behind
    their neighbours.
    """
    if eps is None:
        eps = visibility_epsilon(x_cam)
    N = x_cam.shape[0]
    H, W = frag.triangle_id.shape
    z = x_cam[:, 2]
    visible = np.zeros(N, dtype=bool)
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = project_camera_frame(x_cam, focal_length, principal_point)
    inside = front & np.all(np.isfinite(pix), axis=1)
    inside &= (pix[:, 0] >= 0) & (pix[:, 0] < W) & (pix[:, 1] >= 0) & (pix[:, 1] < H)
    idx = np.flatnonzero(inside)
    cols = np.floor(pix[idx, 0]).astype(np.int64)
    rows = np.floor(pix[idx, 1]).astype(np.int64)
    off = np.arange(-2, 3)
    rr = np.clip(rows[:, None, None] + off[None, :, None], 0, H - 1)
    cc = np.clip(cols[:, None, None] + off[None, None, :], 0, W - 1)
    cand = frag.triangle_id[rr, cc].reshape(len(idx), off.size ** 2).astype(np.int64)
    ok = cand >= 0
    corners = triangles[np.where(ok, cand, 0)]                     # (n, 9, 3)
    ok &= ~np.any(corners == idx[:, None, None], axis=2)
    A, B, C = (x_cam[corners[..., k]] for k in range(3))
    d = x_cam[idx][:, None, :]
    # Moller-Trumbore with the ray origin at the camera centre, t = 1 at the vertex
    e1, e2 = B - A, C - A
    h = np.cross(d, e2)
    a = np.einsum("nkj,nkj->nk", e1, h)
    ok &= np.abs(a) > 0
    inv = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = -A
    u = inv * np.einsum("nkj,nkj->nk", s, h)
    q = np.cross(s, e1)
    v = inv * np.einsum("nkj,nkj->nk", d, q)
    t = inv * np.einsum("nkj,nkj->nk", e2, q)
    tol = 1e-9
    hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t > 0)
    hit &= t * z[idx, None] < z[idx, None] - eps
    visible[idx] = ~np.any(hit, axis=1)
    return visible


def visible_vertices(model, vertices, cam, fragbuf, eps=None):
    """Boolean visibility of each vertex given a buffer rendered from them."""
    triangles = model.triangles if hasattr(model, "triangles") else model
    return visible_camera_frame(cam.to_camera(vertices), triangles, cam.focal_length,
                                cam.principal_point, fragbuf, eps)
