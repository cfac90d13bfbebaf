"""Occlusion mask generation constrained to the face region.

Rectangular masks are rejection-sampled until the mask-to-face area ratio
lands in the requested bin; the effective mask is the rectangle intersected
with the face region, so containment holds by construction. Half-face masks
split the face along the projected symmetry axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MaskSpec", "MaskInfeasible", "gen_mask", "MAX_RATIO", "ATTEMPT_BUDGET"]

MAX_RATIO = 0.9
ATTEMPT_BUDGET = 10_000


class MaskInfeasible(Exception):
    """The requested ratio bin cannot be satisfied."""


@dataclass(frozen=True)
class MaskSpec:
    kind: str              # "rect" or "half_face"
    ratio_lo: float
    ratio_hi: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rect", "half_face"):
            raise ValueError(f"unknown mask kind '{self.kind}'")
        if not (0.0 <= self.ratio_lo < self.ratio_hi):
            raise ValueError("need 0 <= ratio_lo < ratio_hi")


def gen_mask(face_region: np.ndarray, spec: MaskSpec,
             symmetry_axis: np.ndarray | None = None) -> np.ndarray:
    """Sample a {0,1} float mask over the face region.

    ``face_region`` is the rendered face coverage (the segmented-face stand-in
    for synthetic data). For ``half_face``, ``symmetry_axis`` gives the
    projected symmetry line's x coordinate per image row.
    """
    face = np.asarray(face_region, dtype=bool)
    if spec.ratio_hi > MAX_RATIO + 1e-9:
        raise MaskInfeasible(
            f"ratio bin [{spec.ratio_lo}, {spec.ratio_hi}) exceeds the {MAX_RATIO} cap")
    face_area = int(face.sum())
    if face_area == 0:
        raise MaskInfeasible("empty face region")
    if spec.kind == "half_face":
        return _half_face(face, spec, symmetry_axis)
    return _rect(face, spec)


def _rect(face: np.ndarray, spec: MaskSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    h, w = face.shape
    rows, cols = np.nonzero(face)
    r0, r1 = rows.min(), rows.max()
    c0, c1 = cols.min(), cols.max()
    face_area = face.sum()
    target_mid = 0.5 * (spec.ratio_lo + spec.ratio_hi)
    for _ in range(ATTEMPT_BUDGET):
        # aim for the bin center; scatter size and aspect around it
        area = target_mid * face_area * rng.uniform(0.7, 1.6)
        aspect = rng.uniform(0.5, 2.0)
        rh = int(np.clip(np.sqrt(area * aspect), 1, h))
        rw = int(np.clip(np.sqrt(area / aspect), 1, w))
        top = rng.integers(max(r0 - rh // 2, 0), r1 + 1)
        left = rng.integers(max(c0 - rw // 2, 0), c1 + 1)
        mask = np.zeros((h, w), dtype=bool)
        mask[top:top + rh, left:left + rw] = True
        mask &= face
        ratio = mask.sum() / face_area
        if spec.ratio_lo <= ratio < spec.ratio_hi:
            return mask.astype(np.float32)
    raise MaskInfeasible(
        f"no rectangle hit ratio bin [{spec.ratio_lo}, {spec.ratio_hi}) "
        f"within {ATTEMPT_BUDGET} attempts")


def _half_face(face: np.ndarray, spec: MaskSpec,
               symmetry_axis: np.ndarray | None) -> np.ndarray:
    h, w = face.shape
    rng = np.random.default_rng(spec.seed)
    if symmetry_axis is None:
        # fall back to the face's column centroid per row
        symmetry_axis = np.full(h, np.nan)
        for r in range(h):
            cs = np.nonzero(face[r])[0]
            if cs.size:
                symmetry_axis[r] = cs.mean()
    axis = np.asarray(symmetry_axis, dtype=np.float64)
    fallback = np.nanmean(axis) if np.isfinite(axis).any() else (w - 1) / 2.0
    axis = np.where(np.isfinite(axis), axis, fallback)
    side = 1 if rng.random() < 0.5 else -1
    cols = np.arange(w)[None, :]
    half = (cols - axis[:, None]) * side >= 0
    mask = face & half
    ratio = mask.sum() / max(face.sum(), 1)
    if not (spec.ratio_lo <= ratio < spec.ratio_hi):
        raise MaskInfeasible(
            f"half-face ratio {ratio:.3f} outside bin [{spec.ratio_lo}, {spec.ratio_hi})")
    return mask.astype(np.float32)
