"""License-free synthetic parametric face model.

Builds a half-ellipsoid "face" from a regular parameter grid: columns map to
the horizontal UV direction, rows to the vertical one, so the UV layout is
mirror-symmetric about the vertical centerline by construction. Nose, eye
sockets, brow, mouth and chin are deterministic displacement bumps even in the
horizontal parameter, which keeps the mean shape exactly bilaterally
symmetric. Shape and expression bases are Gaussian-smoothed random vertex
fields, mirror-symmetrized (x odd, y/z even).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .facemodel import FaceModel

__all__ = ["SyntheticModelSpec", "generate_synthetic_model"]

# ellipsoid radii (model units): width, height, depth
_RADII = (0.85, 1.0, 0.75)
# parameter span as a fraction of the half sphere; modest spans keep rim
# normals well away from grazing so UV sampling stays well conditioned
_SPAN_U = 0.80
_SPAN_V = 0.88


@dataclass(frozen=True)
class SyntheticModelSpec:
    vertex_count: int = 2562
    d_shape: int = 16
    d_expr: int = 8
    uv_h: int = 64
    uv_w: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.d_shape < 1 or self.d_expr < 0:
            raise ValueError("need d_shape >= 1 and d_expr >= 0")
        if self.uv_h % 2 or self.uv_w % 2:
            raise ValueError("UV resolution must be even for exact horizontal flips")
        if self.vertex_count < 68:
            raise ValueError("vertex_count too small to place 68 landmarks")


def _grid_dims(target: int) -> tuple[int, int]:
    nu = int(round(np.sqrt(target)))
    if nu % 2 == 0:
        nu += 1  # odd column count gives an exact center column at u = 0
    nv = int(np.ceil(target / nu))
    return nu, max(nv, 4)


def _bump(su, sv, cu, cv, sig, amp):
    return amp * np.exp(-(((np.abs(su) - cu) ** 2) + (sv - cv) ** 2) / sig)


def _feature_amplitude(su, sv):
    """Radial displacement field for facial features; even in su."""
    amp = np.zeros_like(su)
    amp += _bump(su, sv, 0.00, 0.10, 0.025, 0.11)    # nose
    amp += _bump(su, sv, 0.00, 0.30, 0.015, 0.03)    # nose base / philtrum
    amp -= _bump(su, sv, 0.38, -0.22, 0.030, 0.035)  # eye sockets
    amp += _bump(su, sv, 0.30, -0.42, 0.030, 0.020)  # brow ridge
    amp += _bump(su, sv, 0.00, 0.52, 0.025, 0.018)   # upper lip ridge
    amp += _bump(su, sv, 0.00, 0.80, 0.035, 0.040)   # chin
    amp -= _bump(su, sv, 0.55, 0.45, 0.070, 0.025)   # cheek hollows
    return amp


def _grid_positions(nu: int, nv: int) -> np.ndarray:
    ku, kv = (nu - 1) // 2, (nv - 1) / 2.0
    su = (np.arange(nu) - ku) / ku          # exact negation across the mirror column
    sv = (np.arange(nv) - kv) / kv
    sv_g, su_g = np.meshgrid(sv, su, indexing="ij")  # (nv, nu)
    a, b, c = _RADII
    phi = su_g * (np.pi / 2) * _SPAN_U
    theta = sv_g * (np.pi / 2) * _SPAN_V
    x = a * np.sin(phi) * np.cos(theta)
    y = b * np.sin(theta)
    z = c * np.cos(phi) * np.cos(theta)
    pos = np.stack([x, y, z], axis=-1)

    # unit outward direction of the ellipsoid at each point
    n = np.stack([x / a**2, y / b**2, z / c**2], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    pos = pos + _feature_amplitude(su_g, sv_g)[..., None] * n
    return pos.reshape(-1, 3)


def _grid_triangles(nu: int, nv: int) -> np.ndarray:
    """Mirror-consistent triangulation: the diagonal flips across the center
    column and the winding is reversed on the mirrored side so normals stay
    outward on both halves."""
    tris = []
    half = (nu - 1) // 2
    for r in range(nv - 1):
        for c in range(nu - 1):
            v00 = r * nu + c
            v01 = v00 + 1
            v10 = v00 + nu
            v11 = v10 + 1
            if c < half:
                tris.append((v00, v11, v10))
                tris.append((v00, v01, v11))
            else:
                tris.append((v01, v11, v10))
                tris.append((v01, v10, v00))
    return np.asarray(tris, dtype=np.int64)


def _orient_outward(tris: np.ndarray, pos: np.ndarray) -> np.ndarray:
    a, b, c = pos[tris[:, 0]], pos[tris[:, 1]], pos[tris[:, 2]]
    normals = np.cross(b - a, c - a)
    centroid = (a + b + c) / 3.0
    if np.median((normals * centroid).sum(axis=1)) < 0:
        tris = tris[:, [0, 2, 1]]
    return tris


def _smooth_symmetric_bases(rng, nv, nu, count, amp, sigma=5.0):
    """Gaussian-smoothed random displacement fields, x-odd / y,z-even."""
    if count == 0:
        return np.zeros((nv * nu, 3, 0))
    fields = rng.normal(size=(count, nv, nu, 3))
    for k in range(count):
        for ax in range(3):
            fields[k, :, :, ax] = gaussian_filter(fields[k, :, :, ax], sigma, mode="nearest")
    mirrored = fields[:, :, ::-1, :]
    sym = np.empty_like(fields)
    sym[..., 0] = 0.5 * (fields[..., 0] - mirrored[..., 0])
    sym[..., 1] = 0.5 * (fields[..., 1] + mirrored[..., 1])
    sym[..., 2] = 0.5 * (fields[..., 2] + mirrored[..., 2])
    flat = sym.reshape(count, -1, 3)
    rms = np.sqrt((flat ** 2).mean(axis=(1, 2), keepdims=True))
    flat = flat * (amp / np.maximum(rms, 1e-12))
    return np.ascontiguousarray(flat.transpose(1, 2, 0))  # (V, 3, count)


def _texel_tables(tris: np.ndarray, uvs: np.ndarray, uv_h: int, uv_w: int):
    """Assign each integer texel (u, v) the first triangle containing it and
    its barycentric weights (inclusive edge test, so coverage is total)."""
    tri_of = np.full((uv_h, uv_w), -1, dtype=np.int64)
    bary_of = np.zeros((uv_h, uv_w, 3), dtype=np.float64)
    eps = 1e-9
    a = uvs[tris[:, 0]]
    b = uvs[tris[:, 1]]
    c = uvs[tris[:, 2]]
    denom = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    for t in range(len(tris)):
        if abs(denom[t]) < 1e-14:
            continue
        lo_u = max(int(np.ceil(min(a[t, 0], b[t, 0], c[t, 0]) - eps)), 0)
        hi_u = min(int(np.floor(max(a[t, 0], b[t, 0], c[t, 0]) + eps)), uv_w - 1)
        lo_v = max(int(np.ceil(min(a[t, 1], b[t, 1], c[t, 1]) - eps)), 0)
        hi_v = min(int(np.floor(max(a[t, 1], b[t, 1], c[t, 1]) + eps)), uv_h - 1)
        if hi_u < lo_u or hi_v < lo_v:
            continue
        uu, vv = np.meshgrid(np.arange(lo_u, hi_u + 1), np.arange(lo_v, hi_v + 1))
        w0 = ((b[t, 0] - uu) * (c[t, 1] - vv) - (b[t, 1] - vv) * (c[t, 0] - uu)) / denom[t]
        w1 = ((c[t, 0] - uu) * (a[t, 1] - vv) - (c[t, 1] - vv) * (a[t, 0] - uu)) / denom[t]
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        free = tri_of[lo_v:hi_v + 1, lo_u:hi_u + 1] < 0
        put = inside & free
        if not put.any():
            continue
        sub = tri_of[lo_v:hi_v + 1, lo_u:hi_u + 1]
        sub[put] = t
        w = np.stack([w0, w1, w2], axis=-1)
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=-1, keepdims=True)
        bsub = bary_of[lo_v:hi_v + 1, lo_u:hi_u + 1]
        bsub[put] = w[put]
    return tri_of, bary_of


def _pick_landmarks(rng, nu: int, nv: int):
    """68 deterministic landmark vertices: 8 on the center column plus 30
    mirror pairs; returns (indices, mirror permutation over landmark slots)."""
    center_col = (nu - 1) // 2
    rows_center = np.sort(rng.choice(np.arange(2, nv - 2), size=8, replace=False))
    n_pairs = 30
    cells = [(r, c) for r in range(2, nv - 2) for c in range(2, center_col - 1)]
    chosen = rng.choice(len(cells), size=n_pairs, replace=False)
    idx = []
    mirror_slot = np.zeros(68, dtype=np.int64)
    for k, r in enumerate(rows_center):
        idx.append(r * nu + center_col)
        mirror_slot[k] = k
    for k, ci in enumerate(chosen):
        r, c = cells[ci]
        left = 8 + 2 * k
        idx.append(r * nu + c)
        idx.append(r * nu + (nu - 1 - c))
        mirror_slot[left] = left + 1
        mirror_slot[left + 1] = left
    return np.asarray(idx, dtype=np.int64), mirror_slot


def generate_synthetic_model(spec: SyntheticModelSpec) -> FaceModel:
    """Deterministically build the synthetic face model for ``spec``."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    nu, nv = _grid_dims(spec.vertex_count)
    pos = _grid_positions(nu, nv)
    tris = _orient_outward(_grid_triangles(nu, nv), pos)

    cols = np.tile(np.arange(nu), nv)
    rows = np.repeat(np.arange(nv), nu)
    uv = np.stack([
        cols * (spec.uv_w - 1) / (nu - 1),
        rows * (spec.uv_h - 1) / (nv - 1),
    ], axis=1)

    vertex_mirror = (rows * nu + (nu - 1 - cols)).astype(np.int64)

    shape_bases = _smooth_symmetric_bases(rng, nv, nu, spec.d_shape, amp=0.05)
    expr_bases = _smooth_symmetric_bases(rng, nv, nu, spec.d_expr, amp=0.03)

    tri_of, bary_of = _texel_tables(tris, uv, spec.uv_h, spec.uv_w)
    landmarks, mirror_slot = _pick_landmarks(rng, nu, nv)

    model = FaceModel(
        mean_shape=pos,
        shape_bases=shape_bases,
        expr_bases=expr_bases,
        triangles=tris,
        uv_of_vertex=uv,
        tri_of_texel=tri_of,
        bary_of_texel=bary_of,
        landmark_indices=landmarks,
        landmark_mirror=mirror_slot,
        vertex_mirror=vertex_mirror,
        meta={"nu": nu, "nv": nv, "seed": spec.seed},
    )
    model.validate()
    return model
