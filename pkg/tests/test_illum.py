import numpy as np
import pytest

from morphfill import ad
from morphfill.ad import Tensor, gradcheck
from morphfill.illum import EPS_SHADE, sh_basis, shade_uv, vertex_normals


def _lat_long_sphere(n_theta=24, n_phi=48):
    th = np.linspace(0.15, np.pi - 0.15, n_theta)
    ph = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    tg, pg = np.meshgrid(th, ph, indexing="ij")
    pts = np.stack([np.sin(tg) * np.cos(pg), np.sin(tg) * np.sin(pg),
                    np.cos(tg)], -1).reshape(-1, 3)
    tris = []
    for i in range(n_theta - 1):
        for j in range(n_phi):
            a = i * n_phi + j
            b = i * n_phi + (j + 1) % n_phi
            c, d = a + n_phi, b + n_phi
            tris += [(a, d, b), (a, c, d)]  # outward winding
    return pts, np.array(tris)


def test_flat_square_normals():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    n = vertex_normals(verts, tris)
    assert np.allclose(np.abs(n[:, 2]), 1.0)
    assert np.allclose(n[:, :2], 0.0)


def test_sphere_normals_radial_oracle():
    n_theta, n_phi = 24, 48
    pts, tris = _lat_long_sphere(n_theta, n_phi)
    n = vertex_normals(pts, tris)
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    sign = np.sign((n * radial).sum(1)).mean()
    if sign < 0:
        n = -n
    ang = np.degrees(np.arccos(np.clip((n * radial).sum(1), -1, 1)))
    interior = np.ones(len(pts), dtype=bool)
    interior[:n_phi] = interior[-n_phi:] = False  # open-cap rings are one-sided
    assert ang[interior].max() < 2.0


def test_mirrored_mesh_normals_mirror(model):
    n = vertex_normals(model.mean_shape, model.triangles)
    mirrored_shape = model.mean_shape * np.array([-1.0, 1.0, 1.0])
    # mirroring reverses orientation; flip winding to keep normals outward
    tris_m = model.triangles[:, [0, 2, 1]]
    n_m = vertex_normals(mirrored_shape, tris_m)
    assert np.abs(n_m - n * np.array([-1.0, 1.0, 1.0])).max() < 1e-9


def test_degenerate_triangle_contributes_zero():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    base = vertex_normals(verts, np.array([[0, 1, 2]]))
    # adding a zero-area (collinear-repeat) face must not move any normal
    with_degenerate = vertex_normals(verts, np.array([[0, 1, 2], [0, 1, 0]]))
    assert np.array_equal(base, with_degenerate)


def test_zero_normal_error_names_vertex():
    verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 1]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 1, 3]])  # vertex 2 only sees a degenerate face
    with pytest.raises(ValueError, match="vertex 2"):
        vertex_normals(verts, tris)


def test_sh_basis_axis_values():
    assert np.allclose(sh_basis(np.array([0.0, 0.0, 1.0])),
                       [1, 0, 0, 1, 0, 0, 0, 0, 2])
    assert np.allclose(sh_basis(np.array([1.0, 0.0, 0.0])),
                       [1, 1, 0, 0, 0, 0, 0, 1, -1])


def test_sh_basis_symbolic_oracle(rng):
    for _ in range(20):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        got = sh_basis(n)
        x, y, z = n
        expect = np.array([1, x, y, z, x * y, x * z, y * z,
                           x ** 2 - y ** 2, 3 * z ** 2 - 1])
        assert np.allclose(got, expect, atol=1e-12)


def test_sh_basis_rejects_non_unit():
    with pytest.raises(ValueError, match="unit"):
        sh_basis(np.array([1.0, 1.0, 0.0]))


def test_shade_dc_term_is_one(model):
    l = np.zeros(27)
    l[[0, 9, 18]] = 1.0
    c = shade_uv(model, model.mean_shape, l)
    assert np.allclose(c, 1.0)


def test_shade_single_band_is_clamped_nz(model):
    l = np.zeros(27)
    l[[3, 12, 21]] = 1.0  # nz band per channel
    c = shade_uv(model, model.mean_shape, l)
    from morphfill.illum import texel_normals
    vn = vertex_normals(model.mean_shape, model.triangles)
    tn = texel_normals(model, vn)
    expect = np.maximum(tn[:, 2], EPS_SHADE)
    got = c[model.texel_valid]
    assert np.abs(got - expect[:, None]).max() < 1e-12


def test_shade_per_texel_dot_product_oracle(model, rng):
    l = rng.normal(size=27) * 0.3
    l[[0, 9, 18]] += 1.0
    c = shade_uv(model, model.mean_shape, l)
    from morphfill.illum import texel_normals
    vn = vertex_normals(model.mean_shape, model.triangles)
    tn = texel_normals(model, vn)
    lc = l.reshape(3, 9)
    flat_valid = np.nonzero(model.texel_valid.reshape(-1))[0]
    for k in rng.choice(len(flat_valid), size=12, replace=False):
        r, q = divmod(int(flat_valid[k]), model.uv_shape[1])
        expect = np.maximum(sh_basis(tn[k]) @ lc.T, EPS_SHADE)
        assert np.abs(c[r, q] - expect).max() < 1e-12


def test_shade_linear_in_lighting_above_clamp(model, rng):
    base = np.zeros(27)
    base[[0, 9, 18]] = 1.0
    delta = rng.normal(size=27) * 0.05
    c1 = shade_uv(model, model.mean_shape, base + delta)
    c2 = shade_uv(model, model.mean_shape, base - delta)
    c0 = shade_uv(model, model.mean_shape, base)
    unclamped = (c1 > EPS_SHADE) & (c2 > EPS_SHADE)
    assert np.abs(((c1 + c2) / 2 - c0)[unclamped]).max() < 1e-12


def test_shade_symmetric_for_even_lighting(model, rng):
    l = np.zeros((3, 9))
    l[:, 0] = 1.0
    l[:, 2] = 0.3   # ny: even under x-mirror
    l[:, 3] = 0.2   # nz: even
    l[:, 8] = 0.05  # 3nz^2-1: even
    l[:, 7] = 0.04  # nx^2-ny^2: even
    c = shade_uv(model, model.mean_shape, l.reshape(27))
    assert np.abs(c - c[:, ::-1]).max() < 1e-5


def test_shade_gradient_wrt_lighting(model, rng):
    l = Tensor(rng.normal(size=27) * 0.2 + np.r_[1.0, np.zeros(8)].repeat(3)[:27] * 0,
               requires_grad=True, dtype=np.float64)
    l.data[[0, 9, 18]] += 1.0

    def f(light):
        s = shade_uv(model, model.mean_shape, light)
        return ad.tsum(ad.mul(s, s))

    mask = np.zeros(27, dtype=bool)
    mask[[0, 1, 4, 9, 14, 22, 26]] = True
    rep = gradcheck(f, [l], masks=[mask], tol=1e-4)
    assert rep.passed, str(rep)
