import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphfill import ad
from morphfill.ad import Tensor, gradcheck, no_grad
from morphfill.ad.nn import (Conv2d, ConvTranspose2d, GroupNorm, Linear,
                             ResUnit, SigGNConv, SpectralConv2d, gated,
                             group_norm, spectral_normalize)
from morphfill.ad.optim import Adam, StepDecay, adam_step


def test_conv_identity_kernel():
    img = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(Tensor(img), Tensor(k), 1, 1)
    assert np.array_equal(out.numpy(), img)


def test_elu_endpoints():
    assert ad.elu(Tensor(np.array(0.0))).item() == 0.0
    assert abs(ad.elu(Tensor(np.array(-30.0))).item() + 1.0) < 1e-9


def test_conv_gradcheck_fd():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True, dtype=np.float64)

    def f(a, b):
        y = ad.conv2d(a, b, 2, 1)
        return ad.tsum(ad.mul(y, y))

    rep = gradcheck(f, [x, w], tol=1e-4)
    assert rep.passed, str(rep)


def test_backward_sum_linearity(rng):
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True, dtype=np.float64)
    f = ad.tsum(ad.mul(x, x))
    g = ad.tsum(ad.exp(ad.mul(x, 0.3)))
    x.grad = None
    ad.add(f, g).backward()
    g_sum = x.grad.numpy().copy()
    x.grad = None
    ad.tsum(ad.mul(x, x)).backward()
    gf = x.grad.numpy().copy()
    x.grad = None
    ad.tsum(ad.exp(ad.mul(x, 0.3))).backward()
    gg = x.grad.numpy().copy()
    assert np.allclose(g_sum, gf + gg, atol=1e-12)


def test_flip_width_involution_and_gradient(rng):
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True, dtype=np.float64)
    assert np.array_equal(ad.flip(ad.flip(x, 1), 1).numpy(), x.numpy())
    y = ad.flip(x, 1)
    seed = rng.normal(size=(2, 5))
    y.backward(Tensor(seed))
    assert np.array_equal(x.grad.numpy(), np.flip(seed, axis=1))


def test_broadcasting_backward(rng):
    a = Tensor(rng.normal(size=(3, 1)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(1, 4)), requires_grad=True, dtype=np.float64)

    def f(x, y):
        return ad.tsum(ad.mul(ad.add(x, y), ad.add(x, y)))

    rep = gradcheck(f, [a, b], tol=1e-6)
    assert rep.passed, str(rep)


def test_no_grad_blocks_graph(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with no_grad():
        y = ad.mul(x, x)
    assert y._parents == () and not y.requires_grad


def test_group_norm_constant_input_zero():
    x = Tensor(np.full((2, 4, 3, 3), 5.0))
    out = group_norm(x, groups=2)
    assert np.abs(out.numpy()).max() < 1e-3


def test_group_norm_groups_equal_channels_is_instance_norm(rng):
    x = Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
    out = group_norm(x, groups=3).numpy()
    for c in range(3):
        assert abs(out[0, c].mean()) < 1e-5
        assert abs(out[0, c].var() - 1.0) < 1e-2


def test_group_norm_moment_oracle(rng):
    x = Tensor(rng.normal(size=(2, 6, 5, 5)).astype(np.float64))
    out = group_norm(x, groups=2).numpy()
    for n in range(2):
        for g in range(2):
            block = out[n, g * 3:(g + 1) * 3]
            assert abs(block.mean()) < 1e-5
            assert abs(block.var() - 1.0) < 1e-4


def test_group_norm_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        group_norm(Tensor(np.zeros((1, 5, 2, 2))), groups=2)


def test_spectral_normalize_diagonal():
    from morphfill.ad.nn import spectral_updates
    w = Tensor(np.diag([3.0, 1.0]).astype(np.float32), requires_grad=True)
    u = np.array([1.0, 0.4], dtype=np.float32)
    u /= np.linalg.norm(u)
    with spectral_updates(True):
        for _ in range(40):
            wn = spectral_normalize(w, u)
    s = np.linalg.svd(wn.numpy(), compute_uv=False)
    assert abs(s[0] - 1.0) < 1e-4


def test_spectral_normalize_orthogonal(rng):
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    w = Tensor(q.astype(np.float32), requires_grad=True)
    u = rng.normal(size=4).astype(np.float32)
    u /= np.linalg.norm(u)
    for _ in range(10):
        wn = spectral_normalize(w, u)
    assert np.abs(wn.numpy() - q).max() < 1e-4


def test_spectral_normalize_zero_matrix():
    w = Tensor(np.zeros((3, 3), dtype=np.float32), requires_grad=True)
    u = np.ones(3, dtype=np.float32) / np.sqrt(3)
    wn = spectral_normalize(w, u)
    assert np.all(np.isfinite(wn.numpy()))
    assert np.abs(wn.numpy()).max() == 0.0


def test_gated_conv_gate_bias_extremes(rng):
    f = Conv2d(2, 3, 3, 1, 1, rng=np.random.default_rng(1))
    g = SigGNConv(2, 3, 3, 1, 1, rng=np.random.default_rng(2))
    x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32))
    g.gn.bias.data[:] = -20.0
    closed = gated(ad.elu(f(x)), g(x))
    assert np.abs(closed.numpy()).max() < 1e-6
    g.gn.bias.data[:] = 20.0
    opened = gated(ad.elu(f(x)), g(x))
    assert np.abs(opened.numpy() - ad.elu(f(x)).numpy()).max() < 1e-6


def test_gated_conv_two_branch_oracle(rng):
    f = Conv2d(2, 3, 3, 1, 1, rng=np.random.default_rng(5))
    g = SigGNConv(2, 3, 3, 1, 1, rng=np.random.default_rng(6))
    x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    got = gated(ad.elu(f(x)), g(x)).numpy()
    feat = ad.elu(f(x)).numpy()
    gate = g(x).numpy()
    assert np.allclose(got, feat * gate, atol=1e-7)


def test_conv_transpose_shape_and_grad(rng):
    deconv = ConvTranspose2d(3, 2, 4, 2, 1, rng=np.random.default_rng(4))
    x = Tensor(rng.normal(size=(1, 3, 5, 6)).astype(np.float32))
    y = deconv(x)
    assert y.shape == (1, 2, 10, 12)

    xt = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    wt = Tensor(rng.normal(size=(2, 3, 4, 4)) * 0.3, requires_grad=True, dtype=np.float64)

    def f(a, w):
        y2 = ad.conv2d_input_grad(a, w, 2, 1, (6, 6))
        return ad.tsum(ad.mul(y2, y2))

    rep = gradcheck(f, [xt, wt], tol=1e-4)
    assert rep.passed, str(rep)


def test_adam_zero_gradient_fixed_point():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = Tensor(np.zeros(2, dtype=np.float32))
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_adam_first_step_hand_value():
    # bias-corrected first step with g=1 moves by about -lr
    p = np.array([0.0])
    m = np.zeros(1)
    v = np.zeros(1)
    adam_step(p, np.array([1.0]), m, v, t=1, lr=0.1)
    expect = -0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(p[0] - expect) < 1e-12


def test_step_decay_schedule():
    p = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=1e-4)
    sched = StepDecay(opt, gamma=0.98)
    sched.epoch_end()
    sched.epoch_end()
    assert abs(opt.lr - 1e-4 * 0.98 ** 2) < 1e-18


def test_determinism_fixed_seed():
    def build_and_run(seed):
        rng = np.random.default_rng(seed)
        conv = Conv2d(2, 2, 3, 1, 1, rng=np.random.default_rng(seed + 1))
        x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
        opt = Adam(conv.parameters(), lr=1e-3)
        vals = []
        for _ in range(5):
            y = ad.tsum(ad.mul(conv(x), conv(x)))
            opt.zero_grad()
            y.backward()
            opt.step()
            vals.append(y.item())
        return vals, conv.weight.data.copy()

    v1, w1 = build_and_run(9)
    v2, w2 = build_and_run(9)
    assert v1 == v2
    assert np.array_equal(w1, w2)


def test_gradcheck_detects_polynomial():
    x = Tensor(np.array(3.0), requires_grad=True, dtype=np.float64)
    rep = gradcheck(lambda t: ad.mul(t, t), [x], tol=1e-9)
    assert rep.passed
    assert abs(x.grad.item() - 6.0) < 1e-9


def test_gradcheck_flags_kink_at_abs_zero():
    x = Tensor(np.array(0.0), requires_grad=True, dtype=np.float64)
    rep = gradcheck(lambda t: ad.absolute(t), [x], tol=1e-9)
    assert rep.kinks == [(0, 0)]
    assert rep.n_checked == 0


def test_gradcheck_nonfinite_raises():
    x = Tensor(np.array(0.0), requires_grad=True, dtype=np.float64)
    with pytest.raises(FloatingPointError):
        gradcheck(lambda t: ad.log(t), [x])


def test_shape_mismatch_diagnostics():
    with pytest.raises(ValueError, match="channel mismatch"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_sigmoid_tanh_softplus_identities(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=7) * 3
    s = ad.sigmoid(Tensor(x)).numpy()
    t = ad.tanh(Tensor(x)).numpy()
    assert np.allclose(t, 2 * ad.sigmoid(Tensor(2 * x)).numpy() - 1, atol=1e-6)
    assert np.all((s > 0) & (s < 1))
    sp = ad.softplus(Tensor(x)).numpy()
    assert np.allclose(np.exp(sp) - 1, np.exp(x), rtol=1e-5)
