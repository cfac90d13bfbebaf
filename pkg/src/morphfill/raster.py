"""Differentiable rasterization and rendering.

Visibility is hard: per pixel, among triangles covering the pixel's sample
point, the one with the smallest camera-space depth wins, ties broken by the
lowest triangle index. Pixel (row i, col j) samples the image plane at the
integer point (x=j, y=i), the same lattice the bilinear texture sampler uses,
so rendering and re-sampling are mutually consistent.

Gradients flow to UV maps, lighting, shape and pose through barycentric
weights, sampling weights and shading normals; the winning triangle per pixel
is treated as locally constant (no gradients across visibility edges).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Tensor
from .facemodel import (FaceModel, PoseParams, project_vertices, suggested_s_ref)
from .illum import EPS_SHADE, sh_basis, vertex_normals
from .uvops import bilinear_sample

__all__ = ["RasterGeom", "rasterize", "rasterize_reference", "visible_triangles",
           "texel_visibility", "face_interior", "reliable_pixels", "render",
           "render_uv_nearest", "render_views", "canonical_pose"]

_BIG_TRI_AREA = 4096  # bbox pixel budget before a triangle takes the slow path


@dataclass
class RasterGeom:
    tri_id: np.ndarray    # (H, W) int64, -1 where uncovered
    bary: np.ndarray      # (H, W, 3) float64, original vertex order
    depth: np.ndarray     # (H, W) float64, +inf where uncovered
    coverage: np.ndarray  # (H, W) bool


def _oriented(xy: np.ndarray, tris: np.ndarray):
    """Per-triangle vertices reordered to positive orientation.

    Returns (a, b, c, swapped, area) where area > 0 for non-degenerate
    triangles and ``swapped`` marks triangles whose 2nd/3rd vertices were
    exchanged (their weights must be un-swapped for original-order output).
    """
    a = xy[tris[:, 0]]
    b = xy[tris[:, 1]]
    c = xy[tris[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    swapped = area < 0
    b2 = np.where(swapped[:, None], c, b)
    c2 = np.where(swapped[:, None], b, c)
    return a, b2, c2, swapped, np.abs(area)


def _top_left(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # boundary ownership for positively oriented triangles on a y-down lattice
    return (dy > 0) | ((dy == 0) & (dx > 0))


def _edge_values(a, b, c, px, py):
    """Edge functions for points (px, py); e0/e1/e2 vanish on the edges
    opposite vertices a/b/c and are positive inside."""
    e0 = (c[..., 0] - b[..., 0]) * (py - b[..., 1]) - (c[..., 1] - b[..., 1]) * (px - b[..., 0])
    e1 = (a[..., 0] - c[..., 0]) * (py - c[..., 1]) - (a[..., 1] - c[..., 1]) * (px - c[..., 0])
    e2 = (b[..., 0] - a[..., 0]) * (py - a[..., 1]) - (b[..., 1] - a[..., 1]) * (px - a[..., 0])
    return e0, e1, e2


def _inside(e0, e1, e2, a, b, c):
    tl0 = _top_left(c[..., 0] - b[..., 0], c[..., 1] - b[..., 1])
    tl1 = _top_left(a[..., 0] - c[..., 0], a[..., 1] - c[..., 1])
    tl2 = _top_left(b[..., 0] - a[..., 0], b[..., 1] - a[..., 1])
    return (((e0 > 0) | ((e0 == 0) & tl0)) &
            ((e1 > 0) | ((e1 == 0) & tl1)) &
            ((e2 > 0) | ((e2 == 0) & tl2)))


def _depth_from_bary(bary, dv):
    # fixed summation order so both rasterizers agree bit for bit
    return bary[..., 0] * dv[..., 0] + bary[..., 1] * dv[..., 1] + bary[..., 2] * dv[..., 2]


def rasterize(model: FaceModel, shape: np.ndarray, pose: PoseParams,
              hw: tuple[int, int]) -> RasterGeom:
    """Z-buffer rasterization of the posed mesh over an H x W pixel grid."""
    h, w = hw
    if h < 1 or w < 1:
        raise ValueError("image size must be at least 1x1")
    xy, depth_v = project_vertices(np.asarray(shape, dtype=np.float64), pose)
    tris = model.triangles
    a, b, c, swapped, area = _oriented(xy, tris)
    dv = depth_v[tris]  # (T, 3)

    x0 = np.maximum(np.ceil(np.minimum(np.minimum(a[:, 0], b[:, 0]), c[:, 0])), 0).astype(np.int64)
    x1 = np.minimum(np.floor(np.maximum(np.maximum(a[:, 0], b[:, 0]), c[:, 0])), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1])), 0).astype(np.int64)
    y1 = np.minimum(np.floor(np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1])), h - 1).astype(np.int64)
    gw = x1 - x0 + 1
    gh = y1 - y0 + 1
    alive = (area > 0) & (gw > 0) & (gh > 0)
    small = alive & (gw * gh <= _BIG_TRI_AREA)
    big = np.nonzero(alive & ~small)[0]

    pix_l, dep_l, tri_l, bar_l = [], [], [], []

    idx = np.nonzero(small)[0]
    if idx.size:
        kw = int(gw[idx].max())
        kh = int(gh[idx].max())
        offx, offy = np.meshgrid(np.arange(kw), np.arange(kh))
        offx = offx.reshape(-1)
        offy = offy.reshape(-1)
        px = x0[idx, None] + offx[None, :]
        py = y0[idx, None] + offy[None, :]
        valid = (px <= x1[idx, None]) & (py <= y1[idx, None])
        ai, bi, ci = a[idx, None, :], b[idx, None, :], c[idx, None, :]
        e0, e1, e2 = _edge_values(ai, bi, ci, px, py)
        inside = _inside(e0, e1, e2, ai, bi, ci) & valid
        if inside.any():
            t_of = np.broadcast_to(idx[:, None], inside.shape)[inside]
            w0 = e0[inside] / area[t_of]
            w1 = e1[inside] / area[t_of]
            w2 = e2[inside] / area[t_of]
            sw = swapped[t_of]
            bary = np.empty((t_of.size, 3))
            bary[:, 0] = w0
            bary[:, 1] = np.where(sw, w2, w1)
            bary[:, 2] = np.where(sw, w1, w2)
            pix_l.append((py[inside] * w + px[inside]).astype(np.int64))
            dep_l.append(_depth_from_bary(bary, dv[t_of]))
            tri_l.append(t_of)
            bar_l.append(bary)

    for t in big:
        px, py = np.meshgrid(np.arange(x0[t], x1[t] + 1), np.arange(y0[t], y1[t] + 1))
        e0, e1, e2 = _edge_values(a[t], b[t], c[t], px, py)
        inside = _inside(e0, e1, e2, a[t], b[t], c[t])
        if not inside.any():
            continue
        w0 = e0[inside] / area[t]
        w1 = e1[inside] / area[t]
        w2 = e2[inside] / area[t]
        bary = np.empty((w0.size, 3))
        bary[:, 0] = w0
        bary[:, 1] = w2 if swapped[t] else w1
        bary[:, 2] = w1 if swapped[t] else w2
        pix_l.append((py[inside] * w + px[inside]).astype(np.int64))
        dep_l.append(_depth_from_bary(bary, dv[t][None, :].repeat(w0.size, 0)))
        tri_l.append(np.full(w0.size, t, dtype=np.int64))
        bar_l.append(bary)

    out = RasterGeom(
        tri_id=np.full((h, w), -1, dtype=np.int64),
        bary=np.zeros((h, w, 3)),
        depth=np.full((h, w), np.inf),
        coverage=np.zeros((h, w), dtype=bool),
    )
    if not pix_l:
        return out
    pix = np.concatenate(pix_l)
    dep = np.concatenate(dep_l)
    tid = np.concatenate(tri_l)
    bar = np.concatenate(bar_l)
    order = np.lexsort((tid, dep, pix))
    pix, dep, tid, bar = pix[order], dep[order], tid[order], bar[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, dep, tid, bar = pix[first], dep[first], tid[first], bar[first]
    rows, cols = pix // w, pix % w
    out.tri_id[rows, cols] = tid
    out.bary[rows, cols] = bar
    out.depth[rows, cols] = dep
    out.coverage[rows, cols] = True
    return out


def rasterize_reference(model: FaceModel, shape: np.ndarray, pose: PoseParams,
                        hw: tuple[int, int], row_chunk: int = 8) -> RasterGeom:
    """Brute-force O(pixels x triangles) rasterizer; the oracle for
    :func:`rasterize`, sharing its edge tests and depth arithmetic."""
    h, w = hw
    xy, depth_v = project_vertices(np.asarray(shape, dtype=np.float64), pose)
    tris = model.triangles
    a, b, c, swapped, area = _oriented(xy, tris)
    dv = depth_v[tris]
    ok = area > 0

    out = RasterGeom(
        tri_id=np.full((h, w), -1, dtype=np.int64),
        bary=np.zeros((h, w, 3)),
        depth=np.full((h, w), np.inf),
        coverage=np.zeros((h, w), dtype=bool),
    )
    cols = np.arange(w, dtype=np.float64)
    for r0 in range(0, h, row_chunk):
        r1 = min(r0 + row_chunk, h)
        py, px = np.meshgrid(np.arange(r0, r1, dtype=np.float64), cols, indexing="ij")
        pxf = px.reshape(-1)[None, :]  # (1, P)
        pyf = py.reshape(-1)[None, :]
        at, bt, ct = a[:, None, :], b[:, None, :], c[:, None, :]
        e0, e1, e2 = _edge_values(at, bt, ct, pxf, pyf)
        inside = _inside(e0, e1, e2, at, bt, ct) & ok[:, None]
        w0 = np.where(inside, e0 / area[:, None], 0.0)
        w1 = np.where(inside, e1 / area[:, None], 0.0)
        w2 = np.where(inside, e2 / area[:, None], 0.0)
        b1 = np.where(swapped[:, None], w2, w1)
        b2 = np.where(swapped[:, None], w1, w2)
        bary = np.stack([w0, b1, b2], axis=-1)  # (T, P, 3)
        depth = _depth_from_bary(bary, dv[:, None, :])
        depth = np.where(inside, depth, np.inf)
        win = np.argmin(depth, axis=0)  # first minimum = lowest triangle index
        pcols = np.arange(depth.shape[1])
        dwin = depth[win, pcols]
        covered = np.isfinite(dwin)
        rows_f = (np.arange(r0, r1)[:, None] * np.ones((1, w), dtype=np.int64)).reshape(-1)
        cols_f = (np.ones((r1 - r0, 1), dtype=np.int64) * np.arange(w)[None, :]).reshape(-1)
        rr, cc = rows_f[covered], cols_f[covered]
        out.tri_id[rr, cc] = win[covered]
        out.depth[rr, cc] = dwin[covered]
        out.bary[rr, cc] = bary[win[covered], pcols[covered]]
        out.coverage[rr, cc] = True
    return out


def visible_triangles(geom: RasterGeom, n_triangles: int) -> np.ndarray:
    """Boolean flag per triangle: appears in the rasterized front layer."""
    vis = np.zeros(n_triangles, dtype=bool)
    ids = geom.tri_id[geom.coverage]
    if ids.size:
        vis[np.unique(ids)] = True
    return vis


def _pixel_uv_map(model: FaceModel, geom: RasterGeom) -> np.ndarray:
    """Per-pixel UV coordinates of the front surface (+inf where uncovered)."""
    h, w = geom.tri_id.shape
    out = np.full((h, w, 2), np.inf)
    cover = geom.coverage
    if cover.any():
        tri = geom.tri_id[cover]
        bary = geom.bary[cover]
        out[cover] = (model.uv_of_vertex[model.triangles[tri]] * bary[:, :, None]).sum(axis=1)
    return out


def texel_visibility(model: FaceModel, shape: np.ndarray, pose: PoseParams,
                     geom: RasterGeom, grazing_cos: float = 0.25,
                     depth_tol: float = 0.05, uv_radius: float = 3.0) -> np.ndarray:
    """Per-texel visibility under a pose.

    A texel is visible when (a) its surface point survives the depth test
    against the rasterized front layer within ``depth_tol`` model units,
    (b) its surface normal faces the camera with margin (grazing texels are
    ill-conditioned to de-shade), and (c) its triangle's vertices sample
    pixels that depict surface within ``uv_radius`` texels of each vertex, so
    neither occluders nor foreshortened rim pile-ups leak into the texture.
    """
    shape = np.asarray(shape, dtype=np.float64)
    h, w = geom.depth.shape
    valid = model.texel_valid
    tri = np.clip(model.tri_of_texel, 0, None)
    verts = model.triangles[tri.reshape(-1)]            # (N, 3)
    bary = model.bary_of_texel.reshape(-1, 3)

    pts = (shape[verts] * bary[:, :, None]).sum(axis=1)  # (N, 3) surface points
    xy, depth = project_vertices(pts, pose)
    xi = np.clip(np.rint(xy[:, 0]).astype(np.int64), 0, w - 1)
    yi = np.clip(np.rint(xy[:, 1]).astype(np.int64), 0, h - 1)
    in_image = (xy[:, 0] >= -0.5) & (xy[:, 0] <= w - 0.5) & \
               (xy[:, 1] >= -0.5) & (xy[:, 1] <= h - 0.5)
    front = depth <= geom.depth[yi, xi] + depth_tol

    vn = vertex_normals(shape, model.triangles)
    vn_rot = vn @ pose.rotation().T
    n = (vn_rot[verts] * bary[:, :, None]).sum(axis=1)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    facing = n[:, 2] >= grazing_cos

    # the texel's texture comes from its triangle's vertices: each vertex's
    # bilinear footprint must lie on rendered coverage AND the vertex must not
    # sit behind what those pixels actually show (else background or an
    # occluding surface bleeds into the sample)
    vxy, vdepth = project_vertices(shape, pose)
    x0 = np.clip(np.floor(vxy[:, 0]).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(vxy[:, 1]).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    cov = geom.coverage
    v_ok = ((vxy[:, 0] >= 0) & (vxy[:, 0] <= w - 1)
            & (vxy[:, 1] >= 0) & (vxy[:, 1] <= h - 1))
    v_ok &= cov[y0, x0] & cov[y0, x1] & cov[y1, x0] & cov[y1, x1]
    # the footprint pixels must depict surface from the vertex's own UV
    # neighbourhood; this rejects occluders and rim pile-ups alike, which sit
    # at deceptively similar depths but map far away in UV
    pix_uv = _pixel_uv_map(model, geom)
    vuv = model.uv_of_vertex
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        duv = pix_uv[yy, xx] - vuv
        v_ok &= np.hypot(duv[:, 0], duv[:, 1]) <= uv_radius
    verts_sampled = v_ok[verts].all(axis=1)

    vis = (in_image & front & facing & verts_sampled).reshape(model.uv_shape)
    return valid & vis


def reliable_pixels(model: FaceModel, geom: RasterGeom,
                    texel_visible: np.ndarray) -> np.ndarray:
    """Covered pixels whose nearest texel carries first-hand (visible) albedo
    evidence; the region where a re-render reproduces the observation up to
    resampling error."""
    h, w = geom.tri_id.shape
    h_uv, w_uv = model.uv_shape
    out = np.zeros((h, w), dtype=bool)
    cover = geom.coverage
    if not cover.any():
        return out
    tri = geom.tri_id[cover]
    bary = geom.bary[cover]
    uv = (model.uv_of_vertex[model.triangles[tri]] * bary[:, :, None]).sum(axis=1)
    u0 = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, w_uv - 1)
    v0 = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, h_uv - 1)
    u1 = np.minimum(u0 + 1, w_uv - 1)
    v1 = np.minimum(v0 + 1, h_uv - 1)
    out[cover] = (texel_visible[v0, u0] & texel_visible[v0, u1]
                  & texel_visible[v1, u0] & texel_visible[v1, u1])
    return out


def face_interior(geom: RasterGeom, erode: int = 2) -> np.ndarray:
    """Rendered coverage eroded by a few pixels; the region where the render
    is trusted when compositing over an input image (silhouette pixels mix
    face and background and are excluded from the differentiability
    contract)."""
    from scipy.ndimage import binary_erosion
    if erode <= 0:
        return geom.coverage.copy()
    return binary_erosion(geom.coverage, iterations=erode, border_value=False)


# -- differentiable rendering ---------------------------------------------------


def _as_t(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _pose_pieces(pose):
    """(PoseParams for geometry, rotation, scale, translation) where the last
    three are Tensors when the pose is differentiable."""
    from .facemodel import PoseTensors  # local import to avoid cycle at module load
    if isinstance(pose, PoseTensors):
        return pose.to_params(), pose.rotation(), pose.scale, pose.t
    r = Tensor(pose.rotation())
    return pose, r, Tensor(np.asarray(pose.scale)), Tensor(pose.translation())


def render(model: FaceModel, shape, albedo_uv, pose, lighting,
           hw: tuple[int, int], geom: RasterGeom | None = None,
           background: float = 0.0):
    """Render shape + UV albedo + pose + lighting into an (H, W, 3) image Tensor.

    ``albedo_uv`` is in the [0, 1] storage convention. ``shape`` may be a
    Tensor (V, 3), ``pose`` a PoseParams or PoseTensors, ``lighting`` a Tensor
    or array of 27 weights.
    """
    h, w = hw
    shape_t = _as_t(shape)
    albedo_t = _as_t(albedo_uv)
    light_t = _as_t(lighting)
    pose_np, rot_t, scale_t, trans_t = _pose_pieces(pose)
    dtype = albedo_t.dtype

    if geom is None:
        geom = rasterize(model, shape_t.numpy(), pose_np, hw)
    cover = geom.coverage
    if not cover.any():
        return Tensor(np.full((h, w, 3), background, dtype=dtype))
    rows, cols = np.nonzero(cover)
    tri = geom.tri_id[cover]
    verts = model.triangles[tri]  # (P, 3)

    geom_diff = ((isinstance(shape, Tensor) and shape.requires_grad)
                 or scale_t.requires_grad or rot_t.requires_grad or trans_t.requires_grad)
    if geom_diff:
        cam = ad.matmul(shape_t, ad.transpose(rot_t, (1, 0)))
        xy_t = ad.add(ad.mul(cam[:, :2], scale_t), ad.reshape(trans_t, (1, 2)))
        pa = ad.take(xy_t, verts[:, 0])
        pb = ad.take(xy_t, verts[:, 1])
        pc = ad.take(xy_t, verts[:, 2])
        px = Tensor(cols.astype(xy_t.dtype))
        py = Tensor(rows.astype(xy_t.dtype))
        bary = _bary_t(pa, pb, pc, px, py)
    else:
        bary = Tensor(geom.bary[cover].astype(dtype))

    uv_verts = model.uv_of_vertex[verts]  # (P, 3, 2) constants
    uv = None
    for k in range(3):
        term = ad.mul(ad.reshape(bary[:, k], (-1, 1)), Tensor(uv_verts[:, k, :].astype(dtype)))
        uv = term if uv is None else ad.add(uv, term)

    albedo_px = bilinear_sample(albedo_t, uv)  # (P, 3)

    vn = vertex_normals(shape_t, model.triangles)
    vn = ad.matmul(vn, ad.transpose(rot_t.astype(vn.dtype) if rot_t.dtype != vn.dtype else rot_t,
                                    (1, 0)))
    n = None
    for k in range(3):
        term = ad.mul(ad.reshape(bary[:, k], (-1, 1)), ad.take(vn, verts[:, k]))
        n = term if n is None else ad.add(n, term)
    norm = ad.sqrt(ad.clip(ad.tsum(ad.mul(n, n), axis=1, keepdims=True), 1e-24, None))
    n = ad.div(n, norm)
    shade_px = ad.matmul(sh_basis(n), ad.transpose(ad.reshape(light_t, (3, 9)), (1, 0)))
    shade_px = ad.clip(shade_px, EPS_SHADE, None)

    out_px = ad.clip(ad.mul(albedo_px, shade_px.astype(dtype) if shade_px.dtype != dtype else shade_px), 0.0, 1.0)
    flat_idx = rows * w + cols
    img = ad.scatter_add(out_px, flat_idx, h * w)
    if background != 0.0:
        bg = np.full((h * w, 1), background, dtype=dtype)
        bg[flat_idx] = 0.0
        img = ad.add(img, Tensor(bg))
    return ad.reshape(img, (h, w, 3))


def _bary_t(pa: Tensor, pb: Tensor, pc: Tensor, px: Tensor, py: Tensor) -> Tensor:
    """Differentiable screen-space barycentrics in original vertex order."""

    def edge(p, q):
        # cross(q - p, s - p) for sample points s
        return ad.sub(ad.mul(ad.sub(q[:, 0], p[:, 0]), ad.sub(py, p[:, 1])),
                      ad.mul(ad.sub(q[:, 1], p[:, 1]), ad.sub(px, p[:, 0])))

    e0 = edge(pb, pc)
    e1 = edge(pc, pa)
    e2 = edge(pa, pb)
    area = ad.add(ad.add(e0, e1), e2)
    return ad.div(ad.transpose(ad.stack([e0, e1, e2]), (1, 0)),
                  ad.reshape(area, (-1, 1)))


def render_uv_nearest(uv_map, model: FaceModel, geom: RasterGeom,
                      hw: tuple[int, int]):
    """Project a UV map to image space by nearest-texel lookup (no shading).

    Used to carry per-texel quantities (e.g. predicted uncertainty) into image
    space through the same visibility as the rendered image.
    """
    h, w = hw
    map_t = _as_t(uv_map)
    h_uv, w_uv = model.uv_shape
    cover = geom.coverage
    c = map_t.shape[-1]
    if not cover.any():
        return Tensor(np.zeros((h, w, c), dtype=map_t.dtype))
    rows, cols = np.nonzero(cover)
    tri = geom.tri_id[cover]
    verts = model.triangles[tri]
    bary = geom.bary[cover]
    uv = (model.uv_of_vertex[verts] * bary[:, :, None]).sum(axis=1)
    ui = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, w_uv - 1)
    vi = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, h_uv - 1)
    texel = vi * w_uv + ui
    vals = ad.take(ad.reshape(map_t, (h_uv * w_uv, c)), texel)
    img = ad.scatter_add(vals, rows * w + cols, h * w)
    return ad.reshape(img, (h, w, c))


def canonical_pose(model: FaceModel, hw: tuple[int, int], yaw: float = 0.0) -> PoseParams:
    """Centered frontal pose at the reference scale, optionally yawed."""
    h, w = hw
    return PoseParams(scale=suggested_s_ref(model, h), yaw=yaw, roll=0.0, pitch=0.0,
                      tx=(w - 1) / 2.0, ty=(h - 1) / 2.0)


def render_views(model: FaceModel, shape, albedo_uv, lighting, yaw_list,
                 hw: tuple[int, int]) -> list[np.ndarray]:
    """One render per yaw angle with the other pose terms held canonical."""
    out = []
    with ad.no_grad():
        for yaw in yaw_list:
            img = render(model, shape, albedo_uv, canonical_pose(model, hw, yaw),
                         lighting, hw)
            out.append(np.asarray(img.numpy(), dtype=np.float64))
    return out
