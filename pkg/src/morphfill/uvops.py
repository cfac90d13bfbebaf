"""Image <-> UV transport: bilinear sampling, barycentric unwarping,
de-shading, flipping and final blending.

All samplers use the convention that pixel (row i, col j) carries the image
value at the continuous point (x=j, y=i); out-of-image coordinates are clamped
to the border. Functions accept plain arrays or autodiff Tensors and stay on
whichever path they are given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Tensor
from .facemodel import FaceModel, PoseParams, project_vertices
from .illum import EPS_SHADE

__all__ = [
    "UVImage", "MaskedImage", "bilinear_sample", "sample_vertex_texture",
    "unwarp_to_uv", "unwarp_image_to_uv", "unwarp_mask", "deshade", "blend",
    "hflip_uv",
]

UV_KINDS = ("albedo", "texture", "shade", "mask", "uncertainty")


@dataclass
class UVImage:
    """A rectangular texel grid holding per-texel face data."""

    data: np.ndarray   # (H_uv, W_uv, C)
    kind: str
    valid: np.ndarray  # (H_uv, W_uv) bool

    def __post_init__(self):
        if self.kind not in UV_KINDS:
            raise ValueError(f"unknown UV image kind '{self.kind}'")
        if self.kind == "mask":
            d = self.data
            if d.min() < 0 or d.max() > 1:
                raise ValueError("mask UV values must lie in [0, 1]")
        elif self.kind in ("albedo", "texture"):
            if not np.all(np.isfinite(self.data)):
                raise ValueError(f"{self.kind} UV values must be finite")

    def hflip(self) -> "UVImage":
        return UVImage(hflip_uv(self.data), self.kind, hflip_uv(self.valid))


@dataclass
class MaskedImage:
    """An image with its occlusion mask (1 = missing)."""

    image: np.ndarray  # (H, W, 3), already zeroed under the mask when synthesized
    mask: np.ndarray   # (H, W) in {0, 1}

    @classmethod
    def synthesize(cls, image: np.ndarray, mask: np.ndarray) -> "MaskedImage":
        return cls(image * (1.0 - mask[:, :, None]), mask)


def bilinear_sample(image, xy):
    """Sample ``image`` (H, W, C) at continuous points ``xy`` (P, 2).

    Implements sum over the four integer neighbours weighted by
    (1-|x-p|)(1-|y-q|); exact at integer coordinates; coordinates outside the
    image are clamped to the border. Differentiable in both arguments.
    """
    tensor_path = isinstance(image, Tensor) or isinstance(xy, Tensor)
    img_t = image if isinstance(image, Tensor) else None
    xy_vals = xy.numpy() if isinstance(xy, Tensor) else np.asarray(xy, dtype=np.float64)
    img_vals = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    h, w = img_vals.shape[0], img_vals.shape[1]
    c = img_vals.shape[2]

    x = np.clip(xy_vals[:, 0], 0.0, w - 1.0)
    y = np.clip(xy_vals[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.int64) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.int64) if h > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    if not tensor_path:
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        flat = img_vals.reshape(h * w, c)
        return (flat[y0 * w + x0] * (1 - fx) * (1 - fy)
                + flat[y0 * w + x1] * fx * (1 - fy)
                + flat[y1 * w + x0] * (1 - fx) * fy
                + flat[y1 * w + x1] * fx * fy)

    img_t = image if isinstance(image, Tensor) else Tensor(img_vals)
    if isinstance(xy, Tensor):
        xt = ad.clip(xy[:, 0], 0.0, w - 1.0)
        yt = ad.clip(xy[:, 1], 0.0, h - 1.0)
        fx = ad.reshape(ad.sub(xt, Tensor(x0.astype(xy.dtype))), (-1, 1))
        fy = ad.reshape(ad.sub(yt, Tensor(y0.astype(xy.dtype))), (-1, 1))
    else:
        fx = Tensor((x - x0)[:, None].astype(img_t.dtype))
        fy = Tensor((y - y0)[:, None].astype(img_t.dtype))
    one = Tensor(np.ones((), dtype=fx.dtype))
    flat = ad.reshape(img_t, (h * w, c))
    out = ad.mul(ad.take(flat, y0 * w + x0), ad.mul(ad.sub(one, fx), ad.sub(one, fy)))
    out = ad.add(out, ad.mul(ad.take(flat, y0 * w + x1), ad.mul(fx, ad.sub(one, fy))))
    out = ad.add(out, ad.mul(ad.take(flat, y1 * w + x0), ad.mul(ad.sub(one, fx), fy)))
    out = ad.add(out, ad.mul(ad.take(flat, y1 * w + x1), ad.mul(fx, fy)))
    return out


def sample_vertex_texture(image, shape, pose: PoseParams):
    """Per-vertex colors sampled bilinearly at the projected vertex positions."""
    xy, _ = project_vertices(shape, pose)
    return bilinear_sample(image, xy)


def unwarp_to_uv(vertex_values, model: FaceModel):
    """Barycentric transport of per-vertex values onto the UV texel grid.

    Returns (H_uv, W_uv, C); texels without a triangle stay zero (use
    ``model.texel_valid`` to tell them apart).
    """
    h_uv, w_uv = model.uv_shape
    valid = model.texel_valid
    tri = model.tri_of_texel[valid]
    bary = model.bary_of_texel[valid]
    verts = model.triangles[tri]
    flat_idx = np.nonzero(valid.reshape(-1))[0]
    if isinstance(vertex_values, Tensor):
        c = vertex_values.shape[-1]
        acc = None
        for k in range(3):
            wk = Tensor(bary[:, k:k + 1].astype(vertex_values.dtype))
            term = ad.mul(ad.take(vertex_values, verts[:, k]), wk)
            acc = term if acc is None else ad.add(acc, term)
        full = ad.scatter_add(acc, flat_idx, h_uv * w_uv)
        return ad.reshape(full, (h_uv, w_uv, c))
    vertex_values = np.asarray(vertex_values)
    c = vertex_values.shape[-1]
    out = np.zeros((h_uv, w_uv, c), dtype=vertex_values.dtype)
    out[valid] = (vertex_values[verts] * bary[:, :, None]).sum(axis=1)
    return out


def unwarp_image_to_uv(image, model: FaceModel, shape, pose: PoseParams):
    """Image -> per-vertex bilinear sampling -> UV barycentric transport."""
    return unwarp_to_uv(sample_vertex_texture(image, shape, pose), model)


def unwarp_mask(mask: np.ndarray, model: FaceModel, shape, pose: PoseParams,
                texel_visible: np.ndarray | None = None) -> np.ndarray:
    """Unwarp an image mask (1 = missing) to UV space as {0, 1} float32.

    The interpolated mask is thresholded at 0.5. Texels outside
    ``texel_visible`` (self-occluded or grazing under this pose) are marked
    masked, as are texels with no triangle at all.
    """
    mask = np.asarray(mask, dtype=np.float64)
    m_uv = unwarp_image_to_uv(mask[:, :, None], model, np.asarray(shape), pose)[:, :, 0]
    out = (m_uv >= 0.5).astype(np.float32)
    if texel_visible is not None:
        out[~texel_visible] = 1.0
    out[~model.texel_valid] = 1.0
    return out


def deshade(t_uv, c_uv):
    """Element-wise division of texture by shade, clamped into [0, 1]."""
    if isinstance(t_uv, Tensor) or isinstance(c_uv, Tensor):
        t = t_uv if isinstance(t_uv, Tensor) else Tensor(np.asarray(t_uv))
        c = c_uv if isinstance(c_uv, Tensor) else Tensor(np.asarray(c_uv))
        return ad.clip(ad.div(t, ad.clip(c, EPS_SHADE, None)), 0.0, 1.0)
    return np.clip(np.asarray(t_uv) / np.maximum(np.asarray(c_uv), EPS_SHADE), 0.0, 1.0)


def blend(image, rendered, mask):
    """Per-pixel selection: input where visible, rendered where masked.

    Exact on unmasked pixels: the output IS the input value there, bit for bit.
    """
    if isinstance(image, Tensor) or isinstance(rendered, Tensor):
        i = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
        r = rendered if isinstance(rendered, Tensor) else Tensor(np.asarray(rendered))
        if i.shape != r.shape:
            raise ValueError(f"blend shape mismatch: {i.shape} vs {r.shape}")
        m = np.asarray(mask, dtype=bool)
        if m.ndim == i.ndim - 1:
            m = m[..., None] & np.ones(i.shape, dtype=bool)
        return ad.where_mask(m, r, i)
    image = np.asarray(image)
    rendered = np.asarray(rendered)
    if image.shape != rendered.shape:
        raise ValueError(f"blend shape mismatch: {image.shape} vs {rendered.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.ndim == image.ndim - 1:
        m = m[..., None]
    return np.where(m, rendered, image)


def hflip_uv(x):
    """Horizontal UV flip: column u goes to column W-1-u. Involutive, exact."""
    if isinstance(x, Tensor):
        return ad.flip(x, axis=1)
    return np.ascontiguousarray(np.flip(np.asarray(x), axis=1))
