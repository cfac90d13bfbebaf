"""The four trainable networks at desk scale.

Desk scale keeps the full-scale stride/skip topology with channel widths
divided by four, images at 112x112 and UV maps at 64x48. The inpainter's
first stage runs separate feature/gate branches on the input and on its
horizontal flip; their gated activations are concatenated before the shared
U-Net trunk. Gated convolutions are used in all but the final layer, which is
a plain 1x1 convolution emitting 3 albedo channels (clipped to [-1, 1]) and
one log-uncertainty channel (clamped to [-10, 10]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Tensor
from .ad.nn import (Conv2d, GroupNorm, Module, ResUnit, SigGNConv, SigGNDeconv,
                    SpectralConv2d, SpectralLinear, gated)

__all__ = ["EncoderOutput", "InpainterOutput", "Encoder3DMM", "AlbedoDecoder",
           "SymUNet", "PlainUNet", "PyramidGAN", "SIGMA_CLAMP"]

SIGMA_CLAMP = 10.0


@dataclass
class EncoderOutput:
    pose_raw: Tensor      # (N, 6), tanh range
    illum: Tensor         # (N, 27)
    shape_coeffs: Tensor  # (N, d_shape + d_expr)
    albedo_feats: Tensor  # (N, d_a)


@dataclass
class InpainterOutput:
    albedo: Tensor           # (N, 3, H_uv, W_uv) in [-1, 1]
    log_uncertainty: Tensor  # (N, 1, H_uv, W_uv) in [-SIGMA_CLAMP, SIGMA_CLAMP]


class _SpectralBlock(Module):
    """SpectralConv + GroupNorm + ELU."""

    def __init__(self, cin, cout, k, s, p, rng):
        self.conv = SpectralConv2d(cin, cout, k, s, p, rng=rng)
        self.gn = GroupNorm(max(cout // 4, 1), cout)

    def forward(self, x):
        return ad.elu(self.gn(self.conv(x)))


class Encoder3DMM(Module):
    """Shared convolutional trunk with pose/illumination/shape/albedo heads."""

    TRUNK = [
        # (cin, cout, k, stride, pad)
        (3, 8, 7, 2, 3),
        (8, 16, 3, 1, 1),
        (16, 16, 3, 2, 1),
        (16, 24, 3, 1, 1),
        (24, 32, 3, 1, 1),
        (32, 32, 3, 2, 1),
        (32, 48, 3, 1, 1),
        (48, 64, 3, 1, 1),
        (64, 64, 3, 2, 1),
        (64, 64, 3, 1, 1),
        (64, 64, 3, 1, 1),
        (64, 128, 3, 2, 1),
        (128, 128, 3, 1, 1),
    ]

    def __init__(self, d_shape: int = 16, d_expr: int = 8, image_size: int = 112,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_size = image_size
        self.d_out = d_shape + d_expr
        self.trunk = [_SpectralBlock(*spec, rng) for spec in self.TRUNK]
        self.pose_conv = _SpectralBlock(128, 40, 3, 1, 1, rng)
        self.pose_fc = SpectralLinear(40, 6, rng=rng)
        # bias the translation head toward the image center so even an
        # untrained factorization keeps the face on-screen
        center = 0.5 * (image_size - 1) / image_size
        self.pose_fc.bias.data[4:6] = np.arctanh(center)
        self.illum_conv = _SpectralBlock(128, 40, 3, 1, 1, rng)
        self.illum_fc = SpectralLinear(40, 27, rng=rng)
        # start near unit diffuse light so early de-shading is well behaved
        self.illum_fc.bias.data[[0, 9, 18]] = 1.0
        self.shape_conv1 = _SpectralBlock(128, 128, 3, 1, 1, rng)
        self.shape_conv2 = _SpectralBlock(128, 128, 3, 1, 1, rng)
        self.shape_fc = SpectralLinear(128, self.d_out, rng=rng)
        self.albedo_conv = _SpectralBlock(128, 128, 3, 1, 1, rng)

    def forward(self, x: Tensor) -> EncoderOutput:
        if x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ValueError(f"encoder expects {self.image_size}^2 input, got "
                             f"{x.shape[2]}x{x.shape[3]}")
        h = x
        for block in self.trunk:
            h = block(h)

        def pooled(t):
            return ad.reshape(ad.tmean(t, axis=(2, 3)), (t.shape[0], -1))

        pose = ad.tanh(self.pose_fc(pooled(self.pose_conv(h))))
        illum = self.illum_fc(pooled(self.illum_conv(h)))
        shape = self.shape_fc(pooled(self.shape_conv2(self.shape_conv1(h))))
        feats = pooled(self.albedo_conv(h))
        return EncoderOutput(pose_raw=pose, illum=illum, shape_coeffs=shape,
                             albedo_feats=feats)


class AlbedoDecoder(Module):
    """Upsample-conv stack mapping albedo features to a UV albedo in (-1, 1)."""

    PLAN = [
        # (upsample (sh, sw) or None, [(cin, cout), ...])
        ((4, 3), [(128, 128), (128, 64)]),
        ((2, 2), [(64, 64), (64, 32), (32, 32)]),
        ((2, 2), [(32, 40), (40, 24), (24, 32)]),
        ((2, 2), [(32, 32), (32, 16), (16, 24)]),
        ((2, 2), [(24, 24), (24, 16), (16, 16)]),
    ]

    def __init__(self, d_feats: int = 128, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_feats = d_feats
        self.blocks = []
        for _, convs in self.PLAN:
            self.blocks.append([_SpectralBlock(ci, co, 3, 1, 1, rng) for ci, co in convs])
        self.out_conv = Conv2d(16, 3, 1, 1, 0, rng=rng)

    def forward(self, feats: Tensor) -> Tensor:
        n = feats.shape[0]
        h = ad.reshape(feats, (n, self.d_feats, 1, 1))
        for (scale, _), convs in zip(self.PLAN, self.blocks):
            h = ad.upsample_nearest(h, scale[0], scale[1])
            for conv in convs:
                h = conv(h)
        return ad.tanh(self.out_conv(h))


def _crop_to(x: Tensor, hw: tuple[int, int]) -> Tensor:
    if x.shape[2] == hw[0] and x.shape[3] == hw[1]:
        return x
    return x[:, :, :hw[0], :hw[1]]


class _GatedStage(Module):
    """Feature ResUnit paired with a sigmoid-normalized gate convolution."""

    def __init__(self, cin, cout, k, s, p, rng):
        self.f = ResUnit(cin, cout, k, s, p, rng=rng)
        self.g = SigGNConv(cin, cout, k, s, p, rng=rng)

    def forward(self, x):
        return gated(self.f(x), self.g(x))


class _GatedUpStage(Module):
    """Decoder stage: upsampled features concatenated with the skip feed the
    feature ResUnit; the gate comes from a strided transposed convolution of
    the pre-upsample activations."""

    def __init__(self, cin_cat, cout, c_gate_in, rng):
        self.f = ResUnit(cin_cat, cout, 3, 1, 1, rng=rng)
        self.g = SigGNDeconv(c_gate_in, cout, 4, 2, 1, rng=rng)

    def forward(self, below: Tensor, skip: Tensor | None) -> Tensor:
        hw = (below.shape[2] * 2, below.shape[3] * 2)
        if skip is not None:
            hw = (skip.shape[2], skip.shape[3])
        x = _crop_to(ad.upsample_nearest(below, 2, 2), hw)
        if skip is not None:
            x = ad.concat([x, skip], axis=1)
        return gated(self.f(x), _crop_to(self.g(below), hw))


class _UNetTrunk(Module):
    """Shared gated U-Net below the first stage; input is the concatenated
    first-stage activations (16 channels at half resolution)."""

    def __init__(self, rng):
        self.down2 = _GatedStage(16, 16, 3, 2, 1, rng)
        self.down3 = _GatedStage(16, 32, 3, 2, 1, rng)
        self.down4 = _GatedStage(32, 64, 3, 2, 1, rng)
        self.down5 = _GatedStage(64, 128, 3, 2, 1, rng)
        self.mid = _GatedStage(128, 64, 3, 1, 1, rng)
        self.up4 = _GatedUpStage(64 + 64, 32, 64, rng)
        self.up3 = _GatedUpStage(32 + 32, 16, 32, rng)
        self.up2 = _GatedUpStage(16 + 16, 16, 16, rng)
        self.up1 = _GatedUpStage(16 + 16, 16, 16, rng)
        self.up0 = _GatedUpStage(16, 8, 16, rng)
        self.out_conv = Conv2d(8, 4, 1, 1, 0, rng=rng)

    def forward(self, h1: Tensor) -> Tensor:
        h2 = self.down2(h1)
        h3 = self.down3(h2)
        h4 = self.down4(h3)
        h5 = self.down5(h4)
        m = self.mid(h5)
        d4 = self.up4(m, h4)
        d3 = self.up3(d4, h3)
        d2 = self.up2(d3, h2)
        d1 = self.up1(d2, h1)
        d0 = self.up0(d1, None)
        return self.out_conv(d0)


def _split_output(raw: Tensor) -> InpainterOutput:
    albedo = ad.clip(raw[:, 0:3], -1.0, 1.0)
    sigma = ad.clip(raw[:, 3:4], -SIGMA_CLAMP, SIGMA_CLAMP)
    return InpainterOutput(albedo=albedo, log_uncertainty=sigma)


class SymUNet(Module):
    """Symmetry-aware gated inpainter.

    The first stage has two independent branch pairs: (f1, g1) sees the input
    X = concat(albedo, mask) and (f1', g1') sees hflip(X). Their gated outputs
    concatenate into the shared trunk, so mirrored evidence is available
    everywhere downstream.
    """

    def __init__(self, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.branch_direct = _GatedStage(4, 8, 3, 2, 1, rng)
        self.branch_flip = _GatedStage(4, 8, 3, 2, 1, rng)
        self.trunk = _UNetTrunk(rng)

    def first_stage(self, albedo_m: Tensor, mask: Tensor):
        if albedo_m.shape[3] % 2:
            raise ValueError("odd UV width: horizontal flip is ill-defined")
        x = ad.concat([albedo_m, mask], axis=1)
        h_direct = self.branch_direct(x)
        h_flip = self.branch_flip(ad.flip(x, axis=3))
        return x, h_direct, h_flip

    def forward(self, albedo_m: Tensor, mask: Tensor) -> InpainterOutput:
        _, h_direct, h_flip = self.first_stage(albedo_m, mask)
        return _split_output(self.trunk(ad.concat([h_direct, h_flip], axis=1)))


class PlainUNet(Module):
    """Symmetry-free ablation variant: one 16-channel first stage, same trunk."""

    def __init__(self, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stage1 = _GatedStage(4, 16, 3, 2, 1, rng)
        self.trunk = _UNetTrunk(rng)

    def forward(self, albedo_m: Tensor, mask: Tensor) -> InpainterOutput:
        x = ad.concat([albedo_m, mask], axis=1)
        return _split_output(self.trunk(self.stage1(x)))


class PyramidGAN(Module):
    """Multi-scale patch discriminator: stride-2 spectral convolutions with a
    1-channel score head tapped after each of four stages."""

    def __init__(self, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = SpectralConv2d(3, 8, 4, 2, 1, rng=rng)
        self.stem_gn = GroupNorm(2, 8)
        stages = [(8, 16), (16, 32), (32, 64), (64, 128)]
        self.convs = [SpectralConv2d(ci, co, 4, 2, 1, rng=rng) for ci, co in stages]
        self.gns = [GroupNorm(max(co // 4, 1), co) for _, co in stages]
        self.heads = [SpectralConv2d(co, 1, 1, 1, 0, rng=rng) for _, co in stages]

    def forward(self, img: Tensor) -> list[Tensor]:
        h = ad.leaky_relu(self.stem_gn(self.stem(img)), 0.2)
        outs = []
        for conv, gn, head in zip(self.convs, self.gns, self.heads):
            h = ad.leaky_relu(gn(conv(h)), 0.2)
            outs.append(head(h))
        return outs
