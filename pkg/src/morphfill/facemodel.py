"""Parametric face model: shape assembly, pose decoding, weak-perspective camera.

Coordinate conventions used throughout:
    - model space: +x to the subject's left in the image, +y down-image,
      +z toward the camera (the camera looks along -z from z = +inf)
    - image space: continuous (x, y); pixel (row i, col j) samples at (j, i)
    - rotation order: yaw about y, then pitch about x, then roll about z,
      i.e. R = Rz(roll) @ Rx(pitch) @ Ry(yaw)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import Tensor

__all__ = [
    "FaceModel", "PoseParams", "PoseTensors", "ShapeCoeffs", "LandmarkSet",
    "assemble_shape", "decode_pose", "camera_matrix", "project_landmarks",
    "project_vertices", "rotation_matrix", "rotation_tensor", "quaternion_from_angles",
    "suggested_s_ref",
]


@dataclass
class FaceModel:
    """Mesh topology, linear bases, UV tables and landmark indices."""

    mean_shape: np.ndarray        # (V, 3) float64
    shape_bases: np.ndarray       # (V, 3, d_shape)
    expr_bases: np.ndarray        # (V, 3, d_expr)
    triangles: np.ndarray         # (T, 3) int64
    uv_of_vertex: np.ndarray      # (V, 2) float64, (u, v) texel coordinates
    tri_of_texel: np.ndarray      # (H_uv, W_uv) int64, -1 where empty
    bary_of_texel: np.ndarray     # (H_uv, W_uv, 3) float64
    landmark_indices: np.ndarray  # (68,) int64
    landmark_mirror: np.ndarray   # (68,) int64: index of the mirrored landmark
    vertex_mirror: np.ndarray     # (V,) int64: vertex paired across the x=0 plane
    meta: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def d_shape(self) -> int:
        return self.shape_bases.shape[2]

    @property
    def d_expr(self) -> int:
        return self.expr_bases.shape[2]

    @property
    def uv_shape(self) -> tuple[int, int]:
        return self.tri_of_texel.shape

    @property
    def texel_valid(self) -> np.ndarray:
        return self.tri_of_texel >= 0

    @property
    def bases(self) -> np.ndarray:
        """Concatenated shape+expression bases, (V, 3, d_shape + d_expr)."""
        return np.concatenate([self.shape_bases, self.expr_bases], axis=2)

    def validate(self):
        v = self.n_vertices
        if self.triangles.min() < 0 or self.triangles.max() >= v:
            raise ValueError("triangle index out of range")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= v:
            raise ValueError("landmark index out of range")
        valid = self.texel_valid
        s = self.bary_of_texel[valid].sum(axis=1)
        if valid.any() and (np.abs(s - 1.0).max() > 1e-6 or self.bary_of_texel[valid].min() < -1e-9):
            raise ValueError("texel barycentric weights invalid")

    def to_entries(self) -> dict[str, np.ndarray]:
        return {
            "mean_shape": self.mean_shape,
            "shape_bases": self.shape_bases,
            "expr_bases": self.expr_bases,
            "triangles": self.triangles,
            "uv_of_vertex": self.uv_of_vertex,
            "tri_of_texel": self.tri_of_texel,
            "bary_of_texel": self.bary_of_texel,
            "landmark_indices": self.landmark_indices,
            "landmark_mirror": self.landmark_mirror,
            "vertex_mirror": self.vertex_mirror,
        }

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "FaceModel":
        return cls(**{k: entries[k] for k in (
            "mean_shape", "shape_bases", "expr_bases", "triangles", "uv_of_vertex",
            "tri_of_texel", "bary_of_texel", "landmark_indices", "landmark_mirror",
            "vertex_mirror")})


@dataclass(frozen=True)
class PoseParams:
    """Weak-perspective pose: scale (px per model unit), Euler angles (rad),
    2D translation (px)."""

    scale: float
    yaw: float
    roll: float
    pitch: float
    tx: float
    ty: float

    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.yaw, self.pitch, self.roll)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with canonical sign (w >= 0)."""
        return quaternion_from_angles(self.yaw, self.pitch, self.roll)

    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty], dtype=np.float64)


@dataclass(frozen=True)
class ShapeCoeffs:
    values: np.ndarray  # (d_shape + d_expr,)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("shape coefficients must be finite")


@dataclass
class PoseTensors:
    """Pose pieces kept in the autodiff graph for training."""

    scale: Tensor   # scalar
    yaw: Tensor     # scalar
    roll: Tensor
    pitch: Tensor
    t: Tensor       # (2,)

    @classmethod
    def from_raw(cls, raw6: Tensor, image_size: int, s_ref: float) -> "PoseTensors":
        half_pi = np.pi / 2.0
        scale = ad.mul(ad.add(ad.mul(raw6[0], 0.5), 1.0), s_ref)
        return cls(
            scale=scale,
            yaw=ad.mul(raw6[1], half_pi),
            roll=ad.mul(raw6[2], half_pi),
            pitch=ad.mul(raw6[3], half_pi),
            t=ad.mul(raw6[4:6], float(image_size)),
        )

    def rotation(self) -> Tensor:
        return rotation_tensor(self.yaw, self.pitch, self.roll)

    def to_params(self) -> PoseParams:
        return PoseParams(
            scale=float(self.scale.numpy()),
            yaw=float(self.yaw.numpy()),
            roll=float(self.roll.numpy()),
            pitch=float(self.pitch.numpy()),
            tx=float(self.t.numpy()[0]),
            ty=float(self.t.numpy()[1]),
        )


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (2, 68) pixel coordinates


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def rotation_tensor(yaw: Tensor, pitch: Tensor, roll: Tensor) -> Tensor:
    """Differentiable 3x3 rotation from scalar angle tensors."""
    one = Tensor(np.ones((), dtype=yaw.dtype))
    zero = Tensor(np.zeros((), dtype=yaw.dtype))
    cy, sy = ad.cos(yaw), ad.sin(yaw)
    cp, sp = ad.cos(pitch), ad.sin(pitch)
    cr, sr = ad.cos(roll), ad.sin(roll)

    def mat3(rows):
        return ad.reshape(ad.stack([e for row in rows for e in row]), (3, 3))

    ry = mat3([[cy, zero, sy], [zero, one, zero], [ad.neg(sy), zero, cy]])
    rx = mat3([[one, zero, zero], [zero, cp, ad.neg(sp)], [zero, sp, cp]])
    rz = mat3([[cr, ad.neg(sr), zero], [sr, cr, zero], [zero, zero, one]])
    return ad.matmul(rz, ad.matmul(rx, ry))


def quaternion_from_angles(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Unit quaternion of Rz(roll)Rx(pitch)Ry(yaw), canonicalized to w >= 0."""
    qy = np.array([np.cos(yaw / 2), 0.0, np.sin(yaw / 2), 0.0])
    qx = np.array([np.cos(pitch / 2), np.sin(pitch / 2), 0.0, 0.0])
    qz = np.array([np.cos(roll / 2), 0.0, 0.0, np.sin(roll / 2)])
    q = _quat_mul(qz, _quat_mul(qx, qy))
    q = q / np.linalg.norm(q)
    return _quat_canonical(q)


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_canonical(q: np.ndarray) -> np.ndarray:
    # double cover: q and -q are the same rotation; pick w > 0, break the
    # w == 0 tie on the first nonzero component
    if q[0] < 0:
        return -q
    if q[0] == 0:
        for c in q[1:]:
            if c != 0:
                return q if c > 0 else -q
    return q


def assemble_shape(model: FaceModel, coeffs) -> np.ndarray | Tensor:
    """Mean shape plus the linear combination of shape/expression bases.

    Accepts a plain array or a Tensor of length d_shape + d_expr; the Tensor
    path participates in the autodiff graph.
    """
    d = model.d_shape + model.d_expr
    basis = model.bases.reshape(-1, d)  # (V*3, d)
    if isinstance(coeffs, Tensor):
        if coeffs.shape != (d,):
            raise ValueError(f"expected {d} coefficients, got {coeffs.shape}")
        b = Tensor(basis.astype(coeffs.dtype))
        mean = Tensor(model.mean_shape.astype(coeffs.dtype))
        disp = ad.reshape(ad.matmul(b, coeffs), model.mean_shape.shape)
        return ad.add(mean, disp)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (d,):
        raise ValueError(f"expected {d} coefficients, got {coeffs.shape}")
    return model.mean_shape + (basis @ coeffs).reshape(-1, 3)


def decode_pose(raw6: np.ndarray, image_size: int, s_ref: float) -> PoseParams:
    """Map 6 tanh-range network outputs to pose parameters.

    raw[0] scales around s_ref, raw[1:4] are yaw/roll/pitch normalized by
    pi/2, raw[4:6] are x/y translations normalized by the image size.
    """
    raw = np.asarray(raw6, dtype=np.float64).reshape(6)
    if np.any(np.abs(raw) >= 1.0):
        raise ValueError("raw pose outputs must lie strictly inside (-1, 1)")
    half_pi = np.pi / 2.0
    return PoseParams(
        scale=float(s_ref * (1.0 + 0.5 * raw[0])),
        yaw=float(half_pi * raw[1]),
        roll=float(half_pi * raw[2]),
        pitch=float(half_pi * raw[3]),
        tx=float(image_size * raw[4]),
        ty=float(image_size * raw[5]),
    )


def camera_matrix(pose: PoseParams) -> np.ndarray:
    """2x4 weak-perspective matrix: M [x y z 1]^T = s P R [x y z]^T + t."""
    m = np.zeros((2, 4), dtype=np.float64)
    m[:, :3] = pose.scale * pose.rotation()[:2, :]
    m[:, 3] = (pose.tx, pose.ty)
    return m


def project_vertices(shape, pose: PoseParams):
    """Project (V, 3) vertices; returns ((V, 2) image coords, (V,) depth).

    Depth is -z in camera space, so smaller depth is closer to the camera.
    """
    r = pose.rotation()
    if isinstance(shape, Tensor):
        rt = Tensor(r.T.astype(shape.dtype))
        cam = ad.matmul(shape, rt)
        xy = ad.add(ad.mul(cam[:, :2], pose.scale),
                    Tensor(np.array([pose.tx, pose.ty], dtype=shape.dtype)))
        depth = ad.neg(cam[:, 2])
        return xy, depth
    cam = np.asarray(shape, dtype=np.float64) @ r.T
    xy = pose.scale * cam[:, :2] + np.array([pose.tx, pose.ty])
    return xy, -cam[:, 2]


def project_landmarks(model: FaceModel, shape, pose: PoseParams):
    """Project the 68 landmark vertices; returns a (2, 68) array or Tensor."""
    idx = model.landmark_indices
    if isinstance(shape, Tensor):
        pts = ad.take(shape, idx)
        xy, _ = project_vertices(pts, pose)
        return ad.transpose(xy, (1, 0))
    xy, _ = project_vertices(np.asarray(shape)[idx], pose)
    return xy.T


def suggested_s_ref(model: FaceModel, image_size: int, fill: float = 0.8) -> float:
    """Scale at which the mean face spans ``fill`` of the image height."""
    y = model.mean_shape[:, 1]
    return float(fill * image_size / (y.max() - y.min()))
