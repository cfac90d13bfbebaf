import numpy as np
import pytest

from morphfill import ad
from morphfill.ad import Tensor, gradcheck
from morphfill.facemodel import (PoseParams, PoseTensors, assemble_shape,
                                 camera_matrix, decode_pose, project_landmarks,
                                 project_vertices, quaternion_from_angles,
                                 rotation_matrix)

IDENTITY = PoseParams(scale=1.0, yaw=0.0, roll=0.0, pitch=0.0, tx=0.0, ty=0.0)


def test_assemble_unit_basis(model):
    d = model.d_shape + model.d_expr
    e1 = np.zeros(d)
    e1[0] = 1.0
    got = assemble_shape(model, e1)
    assert np.allclose(got, model.mean_shape + model.shape_bases[:, :, 0], atol=1e-12)


def test_assemble_matches_dense_matmul_oracle(model, rng):
    d = model.d_shape + model.d_expr
    coeffs = rng.normal(size=d)
    got = assemble_shape(model, coeffs)
    # independent brute-force: explicit loop over basis columns
    expect = model.mean_shape.copy()
    for k in range(model.d_shape):
        expect = expect + coeffs[k] * model.shape_bases[:, :, k]
    for k in range(model.d_expr):
        expect = expect + coeffs[model.d_shape + k] * model.expr_bases[:, :, k]
    assert np.abs(got - expect).max() < 1e-6


def test_assemble_linearity(model, rng):
    d = model.d_shape + model.d_expr
    c1, c2 = rng.normal(size=d), rng.normal(size=d)
    a, b = 0.7, -1.3
    lhs = assemble_shape(model, a * c1 + b * c2)
    rhs = (a * assemble_shape(model, c1) + b * assemble_shape(model, c2)
           - (a + b - 1) * model.mean_shape)
    assert np.abs(lhs - rhs).max() < 1e-6


def test_assemble_dimension_mismatch(model):
    with pytest.raises(ValueError, match="coefficients"):
        assemble_shape(model, np.zeros(3))


def test_decode_pose_zero(model):
    p = decode_pose(np.zeros(6), image_size=64, s_ref=10.0)
    assert p.scale == 10.0
    assert p.yaw == p.roll == p.pitch == 0.0
    assert p.tx == p.ty == 0.0


def test_decode_pose_yaw_normalization():
    raw = np.zeros(6)
    raw[1] = 1.0 - 1e-9
    p = decode_pose(raw, image_size=64, s_ref=1.0)
    assert abs(p.yaw - np.pi / 2) < 1e-6


def test_decode_pose_translation():
    raw = np.zeros(6)
    raw[4] = 0.5
    p = decode_pose(raw, image_size=64, s_ref=1.0)
    assert p.tx == 32.0


def test_decode_pose_domain():
    raw = np.zeros(6)
    raw[2] = 1.0
    with pytest.raises(ValueError):
        decode_pose(raw, image_size=64, s_ref=1.0)


def test_camera_identity():
    m = camera_matrix(IDENTITY)
    v = np.array([1.5, -2.0, 7.0, 1.0])
    assert np.allclose(m @ v, [1.5, -2.0])


def test_camera_affine_arithmetic():
    pose = PoseParams(scale=2.0, yaw=0.0, roll=0.0, pitch=0.0, tx=3.0, ty=4.0)
    m = camera_matrix(pose)
    assert np.allclose(m @ np.array([1.0, 1.0, 5.0, 1.0]), [5.0, 6.0])


def test_camera_90deg_yaw():
    pose = PoseParams(scale=1.0, yaw=np.pi / 2, roll=0.0, pitch=0.0, tx=0.0, ty=0.0)
    m = camera_matrix(pose)
    # 90 deg yaw about y maps +x to a z-direction: projected x vanishes
    out = m @ np.array([1.0, 0.0, 0.0, 1.0])
    r = rotation_matrix(np.pi / 2, 0.0, 0.0)
    assert np.allclose(out, (r @ [1, 0, 0])[:2])
    assert abs(out[0]) < 1e-12


def test_project_landmarks_identity(model):
    lm = project_landmarks(model, model.mean_shape, IDENTITY)
    assert lm.shape == (2, 68)
    pts = model.mean_shape[model.landmark_indices]
    assert np.allclose(lm.T, pts[:, :2])


def test_project_landmarks_translation(model):
    pose = PoseParams(scale=1.0, yaw=0.0, roll=0.0, pitch=0.0, tx=5.0, ty=-3.0)
    base = project_landmarks(model, model.mean_shape, IDENTITY)
    moved = project_landmarks(model, model.mean_shape, pose)
    assert np.allclose(moved - base, np.array([[5.0], [-3.0]]))


def test_project_landmarks_matches_per_vertex_oracle(model, rng):
    pose = PoseParams(scale=13.0, yaw=0.3, roll=-0.1, pitch=0.2, tx=31.0, ty=30.0)
    lm = project_landmarks(model, model.mean_shape, pose)
    m = camera_matrix(pose)
    for j, vid in enumerate(model.landmark_indices):
        v = np.append(model.mean_shape[vid], 1.0)
        assert np.allclose(lm[:, j], m @ v, atol=1e-9)


def test_quaternion_unit_norm_and_canonical(rng):
    for _ in range(50):
        yaw, pitch, roll = rng.uniform(-np.pi, np.pi, size=3)
        q = quaternion_from_angles(yaw, pitch, roll)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9
        assert q[0] >= 0.0


def test_quaternion_double_cover(rng):
    # q and -q encode the same rotation and map to one canonical form
    yaw, pitch, roll = 0.4, -0.2, 0.1
    q = quaternion_from_angles(yaw, pitch, roll)
    qneg = -q
    canon = qneg.copy()
    if canon[0] < 0:
        canon = -canon
    assert np.allclose(canon, q)


def test_quaternion_matches_rotation_matrix(rng):
    for _ in range(20):
        yaw, pitch, roll = rng.uniform(-1.2, 1.2, size=3)
        q = quaternion_from_angles(yaw, pitch, roll)
        w, x, y, z = q
        rq = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        assert np.allclose(rq, rotation_matrix(yaw, pitch, roll), atol=1e-9)


def test_gradients_assemble_and_landmarks(model, rng):
    d = model.d_shape + model.d_expr
    coeffs = Tensor(rng.normal(size=d) * 0.5, requires_grad=True, dtype=np.float64)

    def f_coeffs(c):
        s = assemble_shape(model, c)
        return ad.tsum(ad.mul(s, s))

    rep = gradcheck(f_coeffs, [coeffs], tol=1e-4)
    assert rep.passed, str(rep)

    raw = Tensor(rng.uniform(-0.3, 0.3, size=6), requires_grad=True, dtype=np.float64)

    def f_pose(r):
        pt = PoseTensors.from_raw(r, 64, 20.0)
        pts = ad.take(Tensor(model.mean_shape), model.landmark_indices)
        cam = ad.matmul(pts, ad.transpose(pt.rotation(), (1, 0)))
        xy = ad.add(ad.mul(cam[:, :2], pt.scale), ad.reshape(pt.t, (1, 2)))
        return ad.tsum(ad.mul(xy, xy))

    rep = gradcheck(f_pose, [raw], tol=1e-4)
    assert rep.passed, str(rep)


def test_project_vertices_depth_convention():
    # +z toward the camera: larger z must mean smaller depth
    shape = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    _, depth = project_vertices(shape, IDENTITY)
    assert depth[0] < depth[1]
