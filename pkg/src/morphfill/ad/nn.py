"""Neural layer primitives on top of the tensor engine.

Initialization is Kaiming-uniform for convolution/linear weights, zeros for
normalization shifts, ones for scales. Every module draws from the
``np.random.Generator`` it is given, in construction order, so a fixed seed
reproduces parameters exactly.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Module", "Conv2d", "ConvTranspose2d", "Linear", "GroupNorm",
    "SpectralConv2d", "SpectralLinear", "ResUnit", "SigGNConv", "SigGNDeconv",
    "gated", "group_norm", "spectral_normalize", "spectral_updates",
]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


_spectral_updates = False


@contextlib.contextmanager
def spectral_updates(enabled: bool = True):
    """Enable power-iteration updates of the persistent spectral-norm vectors.

    Updates run inside training loops; outside them the current estimate is
    used as-is, so inference is a pure function of the parameters.
    """
    global _spectral_updates
    prev = _spectral_updates
    _spectral_updates = enabled
    try:
        yield
    finally:
        _spectral_updates = prev


class Module:
    """Minimal parameter container with named traversal."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def walk(prefix, value):
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[prefix] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{prefix}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    walk(f"{prefix}.{i}", item)

        for name, value in vars(self).items():
            walk(name, value)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus persistent buffers, for checkpointing."""
        out = {name: p.data for name, p in self.named_parameters().items()}
        for name, buf in self.named_buffers().items():
            out["buf:" + name] = buf
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        for name, arr in arrays.items():
            if name.startswith("buf:"):
                buf = buffers[name[4:]]
                np.copyto(buf, arr.reshape(buf.shape))
            else:
                p = params[name]
                if p.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: {p.shape} vs {arr.shape}")
                p.data = arr.astype(p.dtype)

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}

        def walk(prefix, value):
            if isinstance(value, Module):
                for sub, b in value.named_buffers().items():
                    out[f"{prefix}.{sub}"] = b
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    walk(f"{prefix}.{i}", item)
            elif isinstance(value, np.ndarray) and prefix.rsplit(".", 1)[-1].endswith("_u"):
                out[prefix] = value

        for name, value in vars(self).items():
            walk(name, value)
        return out

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad

    def forward(self, x):
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y


class ConvTranspose2d(Module):
    """Transposed convolution; weight stored as (cin, cout, k, k)."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 2, pad: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        self.weight = Tensor(_kaiming_uniform(rng, (cin, cout, k, k), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.pad, self.k = stride, pad, k

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        s, k, p = self.stride, self.k, self.pad
        return (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        y = T.conv2d_input_grad(x, self.weight, self.stride, self.pad, self.out_hw(h, w))
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_kaiming_uniform(rng, (fout, fin), fin), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5):
    """Normalize (N,C,H,W) per sample and channel group to zero mean, unit variance."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    xr = T.reshape(x, (n, groups, (c // groups) * h * w))
    mu = T.tmean(xr, axis=2, keepdims=True)
    xc = T.sub(xr, mu)
    var = T.tmean(T.mul(xc, xc), axis=2, keepdims=True)
    xn = T.div(xc, T.sqrt(T.add(var, eps)))
    xn = T.reshape(xn, (n, c, h, w))
    if weight is not None:
        xn = T.mul(xn, T.reshape(weight, (1, -1, 1, 1)))
    if bias is not None:
        xn = T.add(xn, T.reshape(bias, (1, -1, 1, 1)))
    return xn


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, affine: bool = True, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"GroupNorm: {channels} channels, {groups} groups")
        self.groups, self.eps = groups, eps
        if affine:
            self.weight = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
            self.bias = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        else:
            self.weight = self.bias = None

    def forward(self, x):
        return group_norm(x, self.groups, self.weight, self.bias, self.eps)


def spectral_normalize(weight: Tensor, u: np.ndarray, power_iters: int = 1,
                       eps: float = 1e-12) -> Tensor:
    """Divide a weight by its power-iteration top singular value estimate.

    ``u`` is the persistent left singular vector estimate; it is refined in
    place only inside a ``spectral_updates()`` block (training), so inference
    stays a pure function of the parameters. Gradients flow through the
    normalized weight including the estimate, with u, v held constant.
    """
    w2 = weight.data.reshape(weight.shape[0], -1)
    if _spectral_updates:
        for _ in range(power_iters):
            v = w2.T @ u
            v = v / max(np.linalg.norm(v), eps)
            u_new = w2 @ v
            u_new = u_new / max(np.linalg.norm(u_new), eps)
            np.copyto(u, u_new)
    else:
        v = w2.T @ u
        v = v / max(np.linalg.norm(v), eps)
    wt = T.reshape(weight, (weight.shape[0], -1))
    sigma = T.matmul(Tensor(u.astype(weight.dtype)), T.matmul(wt, Tensor(v.astype(weight.dtype))))
    sigma = T.clip(sigma, eps, None)
    return T.reshape(T.div(wt, sigma), weight.shape)


class SpectralConv2d(Module):
    """Conv2d whose weight is spectrally normalized at every forward."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad
        u = rng.normal(size=cout).astype(np.float32)
        self.weight_u = u / max(np.linalg.norm(u), 1e-12)

    def forward(self, x):
        w = spectral_normalize(self.weight, self.weight_u)
        if w.dtype != x.dtype:
            w = w.astype(x.dtype)
        y = T.conv2d(x, w, self.stride, self.pad)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias.astype(x.dtype) if self.bias.dtype != x.dtype
                                   else self.bias, (1, -1, 1, 1)))
        return y


class SpectralLinear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_kaiming_uniform(rng, (fout, fin), fin), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=np.float32), requires_grad=True) if bias else None
        u = rng.normal(size=fout).astype(np.float32)
        self.weight_u = u / max(np.linalg.norm(u), 1e-12)

    def forward(self, x):
        w = spectral_normalize(self.weight, self.weight_u)
        return T.linear(x, w, self.bias)


class ResUnit(Module):
    """Two-conv residual block with group norm and ELU.

    Channel or stride changes are matched on the skip path by a strided 1x1
    convolution. Group count is out_channels // 4 (min 1).
    """

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, pad: int = 1,
                 rng: np.random.Generator | None = None):
        groups = max(cout // 4, 1)
        self.conv1 = Conv2d(cin, cout, k, stride, pad, rng=rng)
        self.gn1 = GroupNorm(groups, cout)
        self.conv2 = Conv2d(cout, cout, k, 1, pad, rng=rng)
        self.gn2 = GroupNorm(groups, cout)
        if cin != cout or stride != 1:
            self.skip = Conv2d(cin, cout, 1, stride, 0, bias=False, rng=rng)
        else:
            self.skip = None

    def forward(self, x):
        h = T.elu(self.gn1(self.conv1(x)))
        h = self.gn2(self.conv2(h))
        s = self.skip(x) if self.skip is not None else x
        return T.elu(T.add(h, s))


class SigGNConv(Module):
    """Convolution followed by group normalization and a sigmoid (gate path)."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, pad: int = 1,
                 rng: np.random.Generator | None = None):
        self.conv = Conv2d(cin, cout, k, stride, pad, rng=rng)
        self.gn = GroupNorm(max(cout // 4, 1), cout)

    def forward(self, x):
        return T.sigmoid(self.gn(self.conv(x)))


class SigGNDeconv(Module):
    """Transposed convolution followed by group normalization and a sigmoid."""

    def __init__(self, cin: int, cout: int, k: int = 4, stride: int = 2, pad: int = 1,
                 rng: np.random.Generator | None = None):
        self.deconv = ConvTranspose2d(cin, cout, k, stride, pad, rng=rng)
        self.gn = GroupNorm(max(cout // 4, 1), cout)

    def forward(self, x):
        return T.sigmoid(self.gn(self.deconv(x)))


def gated(feature: Tensor, gate: Tensor) -> Tensor:
    """Elementwise feature*gate; the core of a gated convolution pairing."""
    return T.mul(feature, gate)
