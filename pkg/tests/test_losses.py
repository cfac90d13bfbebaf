import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphfill import ad, losses
from morphfill.ad import Tensor
from morphfill.facemodel import PoseParams, quaternion_from_angles


def test_aleatoric_hand_values():
    assert losses.aleatoric(np.array([2.0]), np.array([0.0])).item() == 1.0
    assert losses.aleatoric(np.array([0.0]), np.array([4.0])).item() == 2.0


def test_aleatoric_matches_loop_oracle(rng):
    x = np.abs(rng.normal(size=(3, 5)))
    s = rng.normal(size=(3, 5))
    got = losses.aleatoric(x, s).item()
    expect = np.mean([0.5 * xi * np.exp(-si) + si / 2
                      for xi, si in zip(x.ravel(), s.ravel())])
    assert abs(got - expect) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 20.0))
def test_aleatoric_minimized_at_log_x(x):
    # stationarity in sigma: d/ds [x e^{-s}/2 + s/2] = 0 at s = ln(x)
    s_star = np.log(x)
    best = losses.aleatoric(np.array([x]), np.array([s_star])).item()
    for ds in (-0.3, 0.3):
        assert losses.aleatoric(np.array([x]), np.array([s_star + ds])).item() > best


def test_loss_a_zero_and_constant_residual():
    p = np.full((1, 3, 4, 4), 0.3)
    assert losses.loss_a(p, p, np.zeros((1, 1, 4, 4))).item() == 0.0
    q = p + 0.5
    assert abs(losses.loss_a(q, p, np.zeros((1, 1, 4, 4))).item() - 0.25) < 1e-7


def test_loss_composition_oracle(rng):
    pred = rng.normal(size=(1, 3, 5, 5))
    gt = rng.normal(size=(1, 3, 5, 5))
    sig = rng.normal(size=(1, 1, 5, 5))
    got = losses.loss_a(pred, gt, sig).item()
    r = np.abs(pred - gt)
    expect = (0.5 * r * np.exp(-sig) + sig / 2).mean()
    assert abs(got - expect) < 1e-7


def test_symmetry_loss_symmetric_input_zero(rng):
    a = rng.random((1, 3, 6, 8))
    a_sym = 0.5 * (a + np.flip(a, -1))
    m = (rng.random((1, 1, 6, 8)) < 0.4).astype(float)
    val = losses.symmetry_loss(a_sym, m, np.zeros((1, 1, 6, 8))).item()
    assert val == 0.0


def test_symmetry_loss_vacuous_when_fully_masked(rng):
    a = rng.random((1, 3, 6, 8))
    sig = rng.normal(size=(1, 1, 6, 8))
    assert losses.symmetry_loss(a, np.ones((1, 1, 6, 8)), sig).item() == 0.0


def test_symmetry_loss_single_texel_hand_value():
    a = np.zeros((1, 3, 2, 4))
    a[0, :, 0, 1] = 0.8   # masked texel
    a[0, :, 0, 2] = 0.2   # its visible mirror
    m = np.zeros((1, 1, 2, 4))
    m[0, 0, 0, 1] = 1.0
    sig = np.full((1, 1, 2, 4), 0.3)
    # weight hits (0,1) only; per-channel residual |0.8-0.2|, three channels
    expect = 0.5 * 0.6 * np.exp(-0.3) + 0.3 / 2
    got = losses.symmetry_loss(a, m, sig).item()
    assert abs(got - expect) < 1e-7


def test_symmetry_loss_invariant_under_simultaneous_flip(rng):
    a = rng.random((1, 3, 6, 8))
    m = (rng.random((1, 1, 6, 8)) < 0.4).astype(float)
    sig = rng.normal(size=(1, 1, 6, 8)) * 0.3
    v1 = losses.symmetry_loss(a, m, sig).item()
    v2 = losses.symmetry_loss(np.flip(a, -1).copy(), np.flip(m, -1).copy(),
                              np.flip(sig, -1).copy()).item()
    assert abs(v1 - v2) < 1e-9


def test_hinge_satisfied_and_boundary():
    real = [Tensor(np.full((1, 1, 3, 3), 2.0))] * 4
    fake = [Tensor(np.full((1, 1, 3, 3), -2.0))] * 4
    lg, ld = losses.pyramid_gan_losses(real, fake)
    assert ld.item() == 0.0
    zeros = [Tensor(np.zeros((1, 1, 3, 3)))] * 4
    lg0, ld0 = losses.pyramid_gan_losses(zeros, zeros)
    assert ld0.item() == 2.0
    assert lg0.item() == 0.0


def test_hinge_matches_per_layer_oracle(rng):
    real = [Tensor(rng.normal(size=(2, 1, k, k))) for k in (8, 4, 2, 1)]
    fake = [Tensor(rng.normal(size=(2, 1, k, k))) for k in (8, 4, 2, 1)]
    lg, ld = losses.pyramid_gan_losses(real, fake)
    ld_expect = np.mean([np.maximum(1 - r.numpy(), 0).mean()
                         + np.maximum(1 + f.numpy(), 0).mean()
                         for r, f in zip(real, fake)])
    lg_expect = np.mean([-f.numpy().mean() for f in fake])
    assert abs(ld.item() - ld_expect) < 1e-6
    assert abs(lg.item() - lg_expect) < 1e-6


def test_wgan_gp_constant_and_unit_gradient(rng):
    def const_disc(x):
        return [ad.reshape(ad.mul(ad.tmean(x, axis=(1, 2, 3)), 0.0),
                           (x.shape[0], 1, 1, 1))]

    real = rng.random((2, 3, 6, 6))
    fake = rng.random((2, 3, 6, 6))
    gp = losses.wgan_gp(const_disc, real, fake, u=np.array([0.2, 0.8]))
    assert abs(gp.item() - 1.0) < 1e-6

    w = rng.normal(size=3 * 6 * 6)
    w /= np.linalg.norm(w)

    def lin_disc(x):
        flat = ad.reshape(x, (x.shape[0], -1))
        s = ad.matmul(flat, Tensor(w.reshape(-1, 1)))
        return [ad.reshape(s, (x.shape[0], 1, 1, 1))]

    gp2 = losses.wgan_gp(lin_disc, real, fake, u=np.array([0.4, 0.9]))
    assert gp2.item() < 1e-12


def test_wgan_gp_matches_fd_on_tiny_net(rng):
    from morphfill.ad.nn import Conv2d
    conv = Conv2d(1, 2, 3, 1, 1, rng=np.random.default_rng(30))
    conv.weight.data = conv.weight.data.astype(np.float64)
    conv.bias.data = conv.bias.data.astype(np.float64)

    def disc(x):
        return [ad.leaky_relu(conv(x), 0.2)]

    real = rng.normal(size=(2, 1, 5, 5))
    fake = rng.normal(size=(2, 1, 5, 5))
    u = np.array([0.3, 0.6])
    gp = losses.wgan_gp(disc, real, fake, u=u)
    gp.backward()
    analytic = conv.weight.grad.numpy().copy()

    w0 = conv.weight.data.copy()
    h = 1e-6
    for c in [0, 7, 12]:
        for sgn, store in ((1, "p"), (-1, "m")):
            wv = w0.flatten()
            wv[c] += sgn * h
            conv.weight.data = wv.reshape(w0.shape)
            val = losses.wgan_gp(disc, real, fake, u=u).item()
            if sgn > 0:
                fp = val
            else:
                fm = val
        conv.weight.data = w0
        fd = (fp - fm) / (2 * h)
        assert abs(analytic.flatten()[c] - fd) < 1e-4 * max(1.0, abs(fd))


def test_3dmm_sub_losses_zero_at_truth(model, rng):
    coeffs = rng.normal(size=24)
    assert losses.shape_coeff_loss(Tensor(coeffs), coeffs).item() < 1e-12
    pose = PoseParams(scale=20.0, yaw=0.2, roll=-0.1, pitch=0.05, tx=30.0, ty=31.0)
    q = losses.quaternion_tensor(Tensor(np.array(pose.yaw)),
                                 Tensor(np.array(pose.pitch)),
                                 Tensor(np.array(pose.roll)))
    val = losses.pose_loss(Tensor(np.array(pose.scale)), q,
                           Tensor(np.array([pose.tx, pose.ty])),
                           pose.scale, pose.quaternion(), pose.translation(),
                           t_norm=64.0)
    assert val.item() < 1e-12
    img = rng.random((4, 4, 3))
    assert losses.reconstruction_loss(img, img).item() == 0.0
    assert losses.texture_loss(img, img).item() == 0.0
    lm = rng.random((2, 68))
    assert losses.landmark_loss(lm, lm).item() == 0.0


def test_quaternion_identity_vs_180z():
    q1 = quaternion_from_angles(0.0, 0.0, 0.0)
    q2 = quaternion_from_angles(0.0, 0.0, np.pi)
    assert abs(((q1 - q2) ** 2).sum() - 2.0) < 1e-9


def test_quaternion_tensor_matches_numpy(rng):
    for _ in range(10):
        yaw, pitch, roll = rng.uniform(-1.0, 1.0, size=3)
        qt = losses.quaternion_tensor(Tensor(np.array(yaw)), Tensor(np.array(pitch)),
                                      Tensor(np.array(roll)))
        assert np.allclose(qt.numpy(), quaternion_from_angles(yaw, pitch, roll),
                           atol=1e-9)


def test_constancy_weight_one_at_equal_chroma(rng):
    a = rng.random((1, 3, 4, 4))
    chroma = np.full((4, 4, 3), 0.4)  # constant chromaticity: all weights = 1
    got = losses.albedo_constancy(a, chroma, alpha=15.0, p=2.0, eps=0.0).item()
    d_v = a[:, :, 1:, :] - a[:, :, :-1, :]
    d_h = a[:, :, :, 1:] - a[:, :, :, :-1]
    expect = ((d_v ** 2).sum(axis=1).sum() + (d_h ** 2).sum(axis=1).sum()) / (12 + 12)
    assert abs(got - expect) < 1e-9


def test_constancy_weights_suppress_cross_chroma_edges(rng):
    a = Tensor(rng.random((1, 3, 4, 4)))
    chroma = np.zeros((4, 4, 3))
    chroma[:, :2] = [1.0, 0.0, 0.0]
    chroma[:, 2:] = [0.0, 1.0, 0.0]
    strong = losses.albedo_constancy(a, np.full((4, 4, 3), 0.3), alpha=15.0).item()
    weak = losses.albedo_constancy(a, chroma, alpha=15.0).item()
    assert weak < strong


def test_completion_weight_bookkeeping(rng):
    parts = {
        "l_albedo": Tensor(np.array(0.4)),
        "l_image": Tensor(np.array(0.2)),
        "l_sym": Tensor(np.array(0.1)),
        "l_gan": Tensor(np.array(-0.05)),
    }
    w = losses.CompletionWeights(l_albedo=2.0, l_image=3.0, l_sym=4.0,
                                 l_gan=1.0, l_gp=1.0)
    total = w.total(parts).item()
    assert abs(total - (2 * 0.4 + 3 * 0.2 + 4 * 0.1 + 1 * -0.05)) < 1e-9


def test_completion_weight_calibration():
    w = losses.CompletionWeights.calibrate({"l_albedo": 0.5, "l_image": 0.25,
                                            "l_sym": 0.01})
    assert abs(w.l_albedo - 2.0) < 1e-9
    assert abs(w.l_image - 4.0) < 1e-9
    assert abs(w.l_sym - 1.0 / 0.05) < 1e-9  # floored


def test_psnr_values(rng):
    a = rng.random((16, 16, 3))
    assert losses.psnr(a, a) == 100.0
    base = np.full((16, 16, 3), 0.5)
    assert abs(losses.psnr(base, base + 0.1) - 20.0) < 1e-9
    with pytest.raises(ValueError):
        losses.psnr(a, a[:8])


def test_ssim_identity_and_symmetry(rng):
    a = rng.random((24, 24, 3))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
    assert losses.ssim(a, a) == 1.0
    assert abs(losses.ssim(a, b) - losses.ssim(b, a)) < 1e-12
    assert losses.ssim(a, b) < 1.0


def test_ssim_matches_windowed_loop_oracle(rng):
    a = rng.random((16, 16))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    got = losses.ssim(a, b)
    win = losses._gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(16 - 10):
        for j in range(16 - 10):
            x = a[i:i + 11, j:j + 11]
            y = b[i:i + 11, j:j + 11]
            mx = (x * win).sum()
            my = (y * win).sum()
            vx = (x * x * win).sum() - mx ** 2
            vy = (y * y * win).sum() - my ** 2
            cov = (x * y * win).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                        / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    assert abs(got - np.mean(vals)) < 1e-6
