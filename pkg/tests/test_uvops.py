import numpy as np
import pytest

from morphfill import ad, raster, uvops
from morphfill.ad import Tensor, gradcheck
from morphfill.facemodel import PoseParams
from morphfill.illum import shade_uv
from morphfill.pipeline import sample_face

IDENTITY = PoseParams(scale=1.0, yaw=0.0, roll=0.0, pitch=0.0, tx=0.0, ty=0.0)


def test_bilinear_integer_coordinates_exact(rng):
    img = rng.random((6, 7, 3))
    pts = np.array([[2.0, 3.0], [0.0, 0.0], [6.0, 5.0]])
    got = uvops.bilinear_sample(img, pts)
    assert np.array_equal(got[0], img[3, 2])
    assert np.array_equal(got[1], img[0, 0])
    assert np.array_equal(got[2], img[5, 6])


def test_bilinear_center_of_four_pixels():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
    got = uvops.bilinear_sample(img, np.array([[0.5, 0.5]]))
    assert abs(got[0, 0] - 1.5) < 1e-12


def test_bilinear_matches_direct_formula(rng):
    img = rng.random((5, 5, 2))
    for _ in range(20):
        x, y = rng.uniform(0, 4, size=2)
        got = uvops.bilinear_sample(img, np.array([[x, y]]))[0]
        p0, q0 = int(np.floor(x)), int(np.floor(y))
        expect = np.zeros(2)
        for p in {p0, min(p0 + 1, 4)}:
            for q in {q0, min(q0 + 1, 4)}:
                expect += img[q, p] * (1 - abs(x - p)) * (1 - abs(y - q))
        assert np.abs(got - expect).max() < 1e-12


def test_bilinear_out_of_image_clamped(rng):
    img = rng.random((4, 4, 1))
    got = uvops.bilinear_sample(img, np.array([[-3.0, -5.0], [90.0, 2.0]]))
    assert np.array_equal(got[0], img[0, 0])
    assert np.array_equal(got[1], img[2, 3])


def test_sample_vertex_texture_constant_image(model):
    img = np.full((64, 64, 3), 0.73)
    pose = raster.canonical_pose(model, (64, 64))
    tv = uvops.sample_vertex_texture(img, model.mean_shape, pose)
    assert np.abs(tv - 0.73).max() < 1e-12


def test_unwarp_constant_field(model):
    v = np.full((model.n_vertices, 3), 0.7)
    out = uvops.unwarp_to_uv(v, model)
    assert np.abs(out[model.texel_valid] - 0.7).max() < 1e-9


def test_unwarp_vertex_coincident_texel(model):
    # a texel whose barycentric weight is a pure vertex gets that vertex value
    vals = np.arange(model.n_vertices, dtype=np.float64)[:, None]
    out = uvops.unwarp_to_uv(vals, model)
    hits = np.nonzero(model.bary_of_texel.max(axis=2) > 1 - 1e-12)
    assert len(hits[0]) > 0
    for r, c in zip(*hits):
        tri = model.tri_of_texel[r, c]
        k = int(np.argmax(model.bary_of_texel[r, c]))
        assert abs(out[r, c, 0] - model.triangles[tri][k]) < 1e-6


def test_unwarp_affine_exactness(model, rng):
    # barycentric interpolation reproduces affine functions of position
    coef = rng.normal(size=(3, 2))
    vertex_vals = model.mean_shape @ coef  # affine in vertex position
    out = uvops.unwarp_to_uv(vertex_vals, model)
    valid = model.texel_valid
    tri = model.tri_of_texel[valid]
    bary = model.bary_of_texel[valid]
    pts = (model.mean_shape[model.triangles[tri]] * bary[:, :, None]).sum(1)
    expect = pts @ coef
    assert np.abs(out[valid] - expect).max() < 1e-6


def test_uv_roundtrip_rmse(model, config):
    s = sample_face(model, config, seed=21, index=0)
    with ad.no_grad():
        img = raster.render(model, s.shape, s.albedo_uv, s.pose, s.lighting,
                            config.hw, geom=s.geom).numpy()
    shade = shade_uv(model, s.shape, s.lighting, s.pose.rotation())
    back = uvops.deshade(uvops.unwarp_image_to_uv(img, model, s.shape, s.pose), shade)
    from scipy.ndimage import binary_erosion
    ok = binary_erosion(s.texel_visible, iterations=1)
    rmse = np.sqrt((((back - s.albedo_uv)[ok]) ** 2).mean())
    assert rmse < 0.02


def test_unwarp_mask_empty_and_full(model, config):
    s = sample_face(model, config, seed=22, index=0)
    m0 = uvops.unwarp_mask(np.zeros(config.hw), model, s.shape, s.pose,
                           s.texel_visible)
    assert np.all(m0[s.texel_visible] == 0.0)
    m1 = uvops.unwarp_mask(np.ones(config.hw), model, s.shape, s.pose,
                           s.texel_visible)
    assert np.all(m1[model.texel_valid] == 1.0)


def test_unwarp_mask_half_image(model, config):
    s = sample_face(model, config, seed=23, index=0)
    axis_col = int(round(s.pose.tx))
    mask = np.zeros(config.hw)
    mask[:, axis_col:] = 1.0
    m_uv = uvops.unwarp_mask(mask, model, s.shape, s.pose, s.texel_visible)
    vis = s.texel_visible
    overlap = (m_uv * np.flip(m_uv, axis=1))[vis]
    # masked texels and their mirrors rarely coincide for a half-image mask
    assert (overlap == 0).mean() >= 0.95
    frac = m_uv[vis].mean()
    assert 0.3 < frac < 0.7


def test_deshade_identity_and_scalar():
    t = np.full((4, 4, 3), 0.4)
    assert np.abs(uvops.deshade(t, np.ones((4, 4, 3))) - 0.4).max() < 1e-12
    assert abs(uvops.deshade(np.array([[[0.4]]]), np.array([[[0.8]]]))[0, 0, 0]
               - 0.5) < 1e-12


def test_deshade_matches_loop_oracle_and_inverts(rng):
    t = rng.random((5, 4, 3))
    c = rng.uniform(0.2, 1.2, size=(5, 4, 3))
    got = uvops.deshade(t, c)
    for i in range(5):
        for j in range(4):
            expect = np.clip(t[i, j] / c[i, j], 0, 1)
            assert np.abs(got[i, j] - expect).max() < 1e-12
    a = rng.random((5, 4, 3)) * 0.8
    recovered = uvops.deshade(np.clip(a * c, 0, None), c)
    unclamped = (a * c <= 1.0)
    assert np.abs((recovered - a)[unclamped]).max() < 1e-9


def test_blend_extremes_and_checkerboard(rng):
    i = rng.random((6, 6, 3))
    r = rng.random((6, 6, 3))
    assert np.array_equal(uvops.blend(i, r, np.zeros((6, 6))), i)
    assert np.array_equal(uvops.blend(i, r, np.ones((6, 6))), r)
    m = np.indices((6, 6)).sum(0) % 2
    out = uvops.blend(i, r, m)
    for y in range(6):
        for x in range(6):
            assert np.array_equal(out[y, x], r[y, x] if m[y, x] else i[y, x])


def test_blend_identity_for_any_mask(rng):
    i = rng.random((5, 5, 3))
    m = (rng.random((5, 5)) < 0.5).astype(float)
    assert np.array_equal(uvops.blend(i, i, m), i)


def test_blend_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        uvops.blend(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)), np.zeros((4, 4)))


def test_hflip_symmetric_fixed_point(rng):
    x = rng.random((6, 8, 3))
    sym = 0.5 * (x + x[:, ::-1])
    assert np.array_equal(uvops.hflip_uv(sym), sym)


def test_hflip_single_texel_moves():
    x = np.zeros((4, 6, 1))
    x[1, 2, 0] = 1.0
    flipped = uvops.hflip_uv(x)
    assert flipped[1, 3, 0] == 1.0
    assert flipped.sum() == 1.0


def test_hflip_involution_bit_exact(rng):
    x = rng.random((8, 10, 3))
    assert np.array_equal(uvops.hflip_uv(uvops.hflip_uv(x)), x)


def test_sampling_and_deshade_gradients(rng):
    img = Tensor(rng.random((7, 7, 3)), requires_grad=True, dtype=np.float64)
    pts = Tensor(rng.uniform(0.5, 5.5, size=(6, 2)), requires_grad=True,
                 dtype=np.float64)

    def f_sample(im, p):
        out = uvops.bilinear_sample(im, p)
        return ad.tsum(ad.mul(out, out))

    rep = gradcheck(f_sample, [img, pts], tol=1e-4)
    assert rep.passed, str(rep)

    t = Tensor(rng.random((4, 4, 3)) * 0.5 + 0.1, requires_grad=True, dtype=np.float64)
    c = Tensor(rng.random((4, 4, 3)) * 0.5 + 0.3, requires_grad=True, dtype=np.float64)

    def f_deshade(tt, cc):
        out = uvops.deshade(tt, cc)
        return ad.tsum(ad.mul(out, out))

    rep = gradcheck(f_deshade, [t, c], tol=1e-4)
    assert rep.passed, str(rep)


def test_uvimage_invariants():
    with pytest.raises(ValueError, match="kind"):
        uvops.UVImage(np.zeros((4, 4, 3)), "bogus", np.ones((4, 4), bool))
    with pytest.raises(ValueError, match="mask"):
        uvops.UVImage(np.full((4, 4, 1), 2.0), "mask", np.ones((4, 4), bool))
    img = uvops.UVImage(np.random.default_rng(0).random((4, 6, 3)), "albedo",
                        np.ones((4, 6), bool))
    assert np.array_equal(img.hflip().hflip().data, img.data)


def test_masked_image_synthesis(rng):
    img = rng.random((5, 5, 3))
    m = (rng.random((5, 5)) < 0.4).astype(float)
    mi = uvops.MaskedImage.synthesize(img, m)
    assert np.array_equal(mi.image[m > 0.5], np.zeros_like(mi.image[m > 0.5]))
    assert np.array_equal(mi.image[m < 0.5], img[m < 0.5])
