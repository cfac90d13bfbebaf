"""Per-vertex normals and spherical-harmonics Lambertian shading.

The 9-term basis is the unnormalized polynomial form

    h(n) = [1, nx, ny, nz, nx*ny, nx*nz, ny*nz, nx^2 - ny^2, 3*nz^2 - 1];

fixed normalization constants are absorbed into the learned lighting weights.
Lighting lives in the camera frame: normals are rotated by the pose rotation
before shading. Shade values are clamped from below because the de-shading
step divides by them.
"""

from __future__ import annotations

import numpy as np

from . import ad
from .ad import Tensor
from .facemodel import FaceModel

__all__ = ["EPS_SHADE", "face_cross_products", "vertex_normals", "sh_basis", "shade_uv",
           "texel_normals"]

EPS_SHADE = 1e-3


def face_cross_products(shape, triangles: np.ndarray):
    """Unnormalized face normals (cross products); magnitude is twice the area."""
    i0, i1, i2 = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    if isinstance(shape, Tensor):
        a = ad.take(shape, i0)
        b = ad.take(shape, i1)
        c = ad.take(shape, i2)
        e1 = ad.sub(b, a)
        e2 = ad.sub(c, a)
        return _cross_t(e1, e2)
    a, b, c = shape[i0], shape[i1], shape[i2]
    return np.cross(b - a, c - a)


def _cross_t(u: Tensor, v: Tensor) -> Tensor:
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    cx = ad.sub(ad.mul(uy, vz), ad.mul(uz, vy))
    cy = ad.sub(ad.mul(uz, vx), ad.mul(ux, vz))
    cz = ad.sub(ad.mul(ux, vy), ad.mul(uy, vx))
    return ad.transpose(ad.stack([cx, cy, cz]), (1, 0))


def vertex_normals(shape, triangles: np.ndarray):
    """Area-weighted unit vertex normals.

    Accumulates each face's cross product onto its three vertices (the cross
    product magnitude supplies the area weighting), then normalizes. A vertex
    whose accumulated normal has zero length is an error on the numpy path and
    is epsilon-guarded on the tensor path.
    """
    fn = face_cross_products(shape, triangles)
    v = shape.shape[0]
    if isinstance(shape, Tensor):
        spread = ad.concat([fn, fn, fn], axis=0)
        order = np.concatenate([triangles[:, 0], triangles[:, 1], triangles[:, 2]])
        acc = ad.scatter_add(spread, order, v)
        norm = ad.sqrt(ad.clip(ad.tsum(ad.mul(acc, acc), axis=1, keepdims=True), 1e-24, None))
        return ad.div(acc, norm)
    acc = np.zeros((v, 3), dtype=np.float64)
    np.add.at(acc, triangles[:, 0], fn)
    np.add.at(acc, triangles[:, 1], fn)
    np.add.at(acc, triangles[:, 2], fn)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise ValueError(f"vertex {int(bad[0])} has a zero-length accumulated normal")
    return acc / norms[:, None]


def sh_basis(n):
    """Evaluate the 9 shading basis polynomials at unit normals (..., 3)."""
    if isinstance(n, Tensor):
        nx, ny, nz = n[:, 0], n[:, 1], n[:, 2]
        one = Tensor(np.ones(nx.shape, dtype=n.dtype))
        terms = [
            one, nx, ny, nz,
            ad.mul(nx, ny), ad.mul(nx, nz), ad.mul(ny, nz),
            ad.sub(ad.mul(nx, nx), ad.mul(ny, ny)),
            ad.sub(ad.mul(ad.mul(nz, nz), 3.0), 1.0),
        ]
        return ad.transpose(ad.stack(terms), (1, 0))
    n = np.asarray(n, dtype=np.float64)
    if np.abs(np.linalg.norm(n, axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("sh_basis expects unit normals")
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.ones_like(nx), nx, ny, nz,
        nx * ny, nx * nz, ny * nz,
        nx ** 2 - ny ** 2, 3.0 * nz ** 2 - 1.0,
    ], axis=-1)


def texel_normals(model: FaceModel, vert_normals):
    """Barycentric interpolation of vertex normals onto valid texels,
    re-normalized; returns (N_valid, 3) in texel scan order."""
    valid = model.texel_valid
    tri = model.tri_of_texel[valid]
    bary = model.bary_of_texel[valid]
    verts = model.triangles[tri]  # (N, 3)
    if isinstance(vert_normals, Tensor):
        b = Tensor(bary.astype(vert_normals.dtype))
        n = ad.add(
            ad.add(ad.mul(ad.take(vert_normals, verts[:, 0]), ad.reshape(b[:, 0], (-1, 1))),
                   ad.mul(ad.take(vert_normals, verts[:, 1]), ad.reshape(b[:, 1], (-1, 1)))),
            ad.mul(ad.take(vert_normals, verts[:, 2]), ad.reshape(b[:, 2], (-1, 1))))
        norm = ad.sqrt(ad.clip(ad.tsum(ad.mul(n, n), axis=1, keepdims=True), 1e-24, None))
        return ad.div(n, norm)
    n = (vert_normals[verts] * bary[:, :, None]).sum(axis=1)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return n


def shade_uv(model: FaceModel, shape, lighting, rotation: np.ndarray | None = None):
    """Spherical-harmonics shade map over UV space.

    ``lighting`` is 27 weights, reshaped to (3 channels, 9 bands). Normals are
    rotated by ``rotation`` (camera frame) when given. Invalid texels shade to
    1 so later element-wise division is a no-op there.
    """
    h_uv, w_uv = model.uv_shape
    valid = model.texel_valid
    flat_idx = np.nonzero(valid.reshape(-1))[0]
    tensor_path = isinstance(shape, Tensor) or isinstance(lighting, Tensor)
    vn = vertex_normals(shape, model.triangles)
    if tensor_path:
        light_t = lighting if isinstance(lighting, Tensor) else Tensor(np.asarray(lighting))
        if not isinstance(shape, Tensor):
            vn = Tensor(np.asarray(vn))
        if rotation is not None:
            vn = ad.matmul(vn, Tensor(np.asarray(rotation).T.astype(vn.dtype)))
        tn = texel_normals(model, vn)
        basis = sh_basis(tn)                                   # (N, 9)
        l = ad.reshape(light_t, (3, 9))
        shade = ad.matmul(basis, ad.transpose(l, (1, 0)))      # (N, 3)
        shade = ad.clip(shade, EPS_SHADE, None)
        full = ad.scatter_add(shade, flat_idx, h_uv * w_uv)
        ones_bg = np.ones((h_uv * w_uv, 1), dtype=shade.dtype)
        ones_bg[flat_idx] = 0.0
        full = ad.add(full, Tensor(ones_bg))
        return ad.reshape(full, (h_uv, w_uv, 3))
    if rotation is not None:
        vn = vn @ np.asarray(rotation).T
    tn = texel_normals(model, vn)
    shade = sh_basis(tn) @ np.asarray(lighting, dtype=np.float64).reshape(3, 9).T
    shade = np.maximum(shade, EPS_SHADE)
    out = np.ones((h_uv, w_uv, 3), dtype=np.float64)
    out[valid] = shade
    return out
