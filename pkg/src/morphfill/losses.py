"""Training losses and image metrics.

Completion losses follow the aleatoric-uncertainty form

    L(x, sigma) = mean_i( x_i * exp(-sigma_i) / 2 + sigma_i / 2 )

applied to per-element L1 residuals, a UV symmetry residual restricted to
masked texels whose mirror is visible, multi-scale hinge GAN terms with equal
weight per scale, and a WGAN gradient penalty. Factorization training adds
supervised coefficient/pose/texture/landmark terms, an L1 reconstruction term
and albedo symmetry/constancy regularizers.

Feature maps are NCHW; masks are {0,1} with 1 = missing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import ad
from .ad import Tensor, as_tensor

__all__ = [
    "aleatoric", "loss_a", "loss_i", "symmetry_loss", "pyramid_gan_losses",
    "pyramid_generator_loss", "wgan_gp", "quaternion_tensor", "pose_loss",
    "shape_coeff_loss",
    "texture_loss", "landmark_loss", "reconstruction_loss",
    "albedo_symmetry_3d", "albedo_constancy", "CompletionWeights",
    "FactorizationWeights", "psnr", "ssim", "PSNR_CAP",
]

PSNR_CAP = 100.0


# -- aleatoric completion losses -------------------------------------------------

def aleatoric(x, sigma) -> Tensor:
    """Uncertainty-attenuated loss over a non-negative residual map.

    ``sigma`` broadcasts against ``x``; the mean runs over all elements of the
    broadcast result.
    """
    x = as_tensor(x)
    sigma = as_tensor(sigma)
    inv = ad.exp(ad.neg(sigma))
    return ad.tmean(ad.add(ad.mul(ad.mul(x, inv), 0.5), ad.mul(sigma, 0.5)))


def loss_a(pred_albedo, gt_albedo, sigma) -> Tensor:
    """Aleatoric L1 loss between predicted and ground-truth UV albedo."""
    return aleatoric(ad.absolute(ad.sub(as_tensor(pred_albedo), as_tensor(gt_albedo))), sigma)


def loss_i(pred_image, gt_image, sigma_image) -> Tensor:
    """Aleatoric L1 loss between rendered and ground-truth images; ``sigma``
    must already live in image space (carried there by the renderer)."""
    return aleatoric(ad.absolute(ad.sub(as_tensor(pred_image), as_tensor(gt_image))), sigma_image)


def symmetry_loss(albedo, mask_uv, sigma) -> Tensor:
    """Albedo mirror-consistency on masked texels whose mirror is visible.

    Weight w = M * (1 - hflip(M)): the texel is missing and its mirror is
    observed. Both the residual and the sigma penalty are restricted to
    weighted texels and normalized by their (broadcast) count; with no
    eligible texel the loss is exactly zero.
    """
    albedo = as_tensor(albedo)
    mask = as_tensor(mask_uv)
    sigma = as_tensor(sigma)
    w = mask.numpy() * (1.0 - np.flip(mask.numpy(), axis=-1))
    r = ad.absolute(ad.sub(albedo, ad.flip(albedo, axis=albedo.ndim - 1)))
    per_elem = ad.add(ad.mul(ad.mul(r, ad.exp(ad.neg(sigma))), 0.5), ad.mul(sigma, 0.5))
    weighted = ad.mul(per_elem, Tensor(w.astype(albedo.dtype)))
    out_shape = np.broadcast_shapes(w.shape, albedo.shape, sigma.shape)
    count = float(np.broadcast_to(w, out_shape).sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=albedo.dtype))
    return ad.div(ad.tsum(weighted), count)


# -- adversarial losses -----------------------------------------------------------

def pyramid_gan_losses(real_maps, fake_maps) -> tuple[Tensor, Tensor]:
    """Average hinge losses over patch score maps, one mean per scale, then
    averaged across scales (equal weight per scale).

    Returns (generator loss, discriminator loss).
    """
    if len(real_maps) != len(fake_maps):
        raise ValueError("real and fake map lists must have equal length")
    n = float(len(real_maps))
    lg = None
    ld = None
    for real, fake in zip(real_maps, fake_maps):
        real, fake = as_tensor(real), as_tensor(fake)
        d_term = ad.add(ad.tmean(ad.relu(ad.sub(1.0, real))),
                        ad.tmean(ad.relu(ad.add(1.0, fake))))
        g_term = ad.neg(ad.tmean(fake))
        ld = d_term if ld is None else ad.add(ld, d_term)
        lg = g_term if lg is None else ad.add(lg, g_term)
    return ad.div(lg, n), ad.div(ld, n)


def pyramid_generator_loss(fake_maps) -> Tensor:
    """Generator side of the multi-scale hinge objective alone."""
    lg = None
    for fake in fake_maps:
        term = ad.neg(ad.tmean(as_tensor(fake)))
        lg = term if lg is None else ad.add(lg, term)
    return ad.div(lg, float(len(fake_maps)))


def wgan_gp(disc_fn, real, fake, u: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> Tensor:
    """Gradient penalty at per-sample random interpolates of real and fake.

    ``disc_fn`` maps an image batch to a list of score maps; the penalized
    scalar is the per-sample mean score averaged over scales. The penalty is
    E[(||grad|| - 1)^2], differentiable w.r.t. the discriminator parameters
    through the double-backward pass.
    """
    real = as_tensor(real)
    fake = as_tensor(fake)
    n = real.shape[0]
    if u is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.random(n)
    u = np.asarray(u, dtype=real.dtype).reshape((n,) + (1,) * (real.ndim - 1))
    x_hat = Tensor(u * real.numpy() + (1.0 - u) * fake.numpy(), requires_grad=True)
    maps = disc_fn(x_hat)
    score = None
    for m in maps:
        term = ad.tsum(ad.tmean(m, axis=tuple(range(1, m.ndim))))
        score = term if score is None else ad.add(score, term)
    score = ad.div(score, float(len(maps)))
    (grad,) = ad.grad_of(score, [x_hat], create_graph=True)
    gnorm = ad.sqrt(ad.clip(ad.tsum(ad.mul(grad, grad), axis=tuple(range(1, real.ndim))),
                            1e-24, None))
    return ad.tmean(ad.pow(ad.sub(gnorm, 1.0), 2.0))


# -- 3D factorization losses -------------------------------------------------------

def quaternion_tensor(yaw, pitch, roll) -> Tensor:
    """Differentiable unit quaternion (w, x, y, z) of Rz(roll)Rx(pitch)Ry(yaw),
    canonicalized to w >= 0 (sign fixed from the values, constant in the graph)."""
    hy, hp, hr = ad.mul(yaw, 0.5), ad.mul(pitch, 0.5), ad.mul(roll, 0.5)
    cy, sy = ad.cos(hy), ad.sin(hy)
    cp, sp = ad.cos(hp), ad.sin(hp)
    cr, sr = ad.cos(hr), ad.sin(hr)
    # q = qz * qx * qy expanded
    w = ad.sub(ad.mul(cr, ad.mul(cp, cy)), ad.mul(sr, ad.mul(sp, sy)))
    x = ad.sub(ad.mul(cr, ad.mul(sp, cy)), ad.mul(sr, ad.mul(cp, sy)))
    y = ad.add(ad.mul(cr, ad.mul(cp, sy)), ad.mul(sr, ad.mul(sp, cy)))
    z = ad.add(ad.mul(sr, ad.mul(cp, cy)), ad.mul(cr, ad.mul(sp, sy)))
    q = ad.stack([w, x, y, z])
    qv = q.numpy().reshape(4)
    sign = 1.0
    if qv[0] < 0:
        sign = -1.0
    elif qv[0] == 0:
        nz = qv[np.nonzero(qv)[0]]
        if nz.size and nz[0] < 0:
            sign = -1.0
    return ad.reshape(ad.mul(q, sign), (4,))


def shape_coeff_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Squared L2 between predicted and true shape+expression coefficients."""
    d = ad.sub(pred, Tensor(np.asarray(gt, dtype=pred.dtype)))
    return ad.tsum(ad.mul(d, d))


def pose_loss(pred_scale, pred_quat, pred_t, gt_scale: float, gt_quat: np.ndarray,
              gt_t: np.ndarray, w_scale: float = 1.0, w_t: float = 1.0,
              w_r: float = 1.0, t_norm: float = 1.0) -> Tensor:
    """Scale, translation and canonical-quaternion rotation terms.

    ``t_norm`` rescales translations (pixels) before squaring so the term's
    magnitude is comparable with the others.
    """
    ds = ad.sub(pred_scale, float(gt_scale))
    term = ad.mul(ad.mul(ds, ds), w_scale / max(t_norm, 1e-9) ** 2)
    dt = ad.mul(ad.sub(pred_t, Tensor(np.asarray(gt_t, dtype=pred_t.dtype))), 1.0 / t_norm)
    term = ad.add(term, ad.mul(ad.tsum(ad.mul(dt, dt)), w_t))
    dq = ad.sub(pred_quat, Tensor(np.asarray(gt_quat, dtype=pred_quat.dtype)))
    return ad.add(term, ad.mul(ad.tsum(ad.mul(dq, dq)), w_r))


def texture_loss(pred_uv, gt_uv, valid: np.ndarray | None = None) -> Tensor:
    """Mean squared error over (valid) UV texels."""
    d = ad.sub(as_tensor(pred_uv), as_tensor(gt_uv))
    sq = ad.mul(d, d)
    if valid is None:
        return ad.tmean(sq)
    w = valid.astype(sq.dtype)
    while w.ndim < sq.ndim:
        w = w[..., None] if w.shape[0] == sq.shape[0] else w[None, ...]
    w = np.broadcast_to(w, sq.shape)
    return ad.div(ad.tsum(ad.mul(sq, Tensor(w))), float(max(w.sum(), 1.0)))


def landmark_loss(pred_landmarks, gt_landmarks, image_size: float = 1.0) -> Tensor:
    """Mean squared 2D landmark error, optionally normalized by image size."""
    d = ad.mul(ad.sub(as_tensor(pred_landmarks), as_tensor(gt_landmarks)),
               1.0 / image_size)
    return ad.tmean(ad.mul(d, d))


def reconstruction_loss(pred_image, gt_image) -> Tensor:
    """Mean absolute error between rendered and ground-truth images."""
    return ad.tmean(ad.absolute(ad.sub(as_tensor(pred_image), as_tensor(gt_image))))


def albedo_symmetry_3d(albedo_uv) -> Tensor:
    """Mean |A - hflip(A)| over a UV albedo (..., W) map."""
    a = as_tensor(albedo_uv)
    return ad.tmean(ad.absolute(ad.sub(a, ad.flip(a, axis=a.ndim - 1))))


def albedo_constancy(albedo_uv, chroma_ref: np.ndarray, alpha: float = 15.0,
                     p: float = 0.8, eps: float = 1e-8) -> Tensor:
    """Piecewise-constancy prior over UV 4-neighborhoods.

    Neighboring texels with similar reference chromaticity (from the observed
    texture, held constant) are pushed toward equal albedo with weight
    exp(-alpha * ||chroma_i - chroma_j||); the pair penalty is the
    eps-smoothed p-th power of the albedo difference norm.
    """
    a = as_tensor(albedo_uv)
    if a.ndim != 4:
        raise ValueError("albedo_constancy expects an NCHW tensor")
    ref = np.asarray(chroma_ref, dtype=np.float64)
    c = ref / np.maximum(ref.sum(axis=-1, keepdims=True), 1e-6)  # (H, W, 3)

    def pair(axis: int):
        if axis == 2:
            d = ad.sub(a[:, :, 1:, :], a[:, :, :-1, :])
            dc = np.linalg.norm(c[1:, :] - c[:-1, :], axis=-1)
        else:
            d = ad.sub(a[:, :, :, 1:], a[:, :, :, :-1])
            dc = np.linalg.norm(c[:, 1:] - c[:, :-1], axis=-1)
        w = np.exp(-alpha * dc).astype(a.dtype)[None, None]
        sq = ad.add(ad.tsum(ad.mul(d, d), axis=1, keepdims=True), eps)
        return ad.tsum(ad.mul(ad.pow(sq, p / 2.0), Tensor(w))), w.size

    v_term, nv = pair(2)
    h_term, nh = pair(3)
    n = a.shape[0]
    return ad.div(ad.add(v_term, h_term), float(n * (nv + nh)))


# -- loss weight bookkeeping --------------------------------------------------------

@dataclass
class CompletionWeights:
    """Weights for the inpainter's total loss; calibrated once at step 0 so
    every term starts with magnitude about 1, then frozen."""

    l_albedo: float = 1.0
    l_image: float = 1.0
    l_sym: float = 1.0
    l_gan: float = 1.0
    l_gp: float = 1.0

    @classmethod
    def calibrate(cls, raw: dict[str, float], floor: float = 0.05) -> "CompletionWeights":
        vals = {}
        for f in fields(cls):
            r = abs(raw.get(f.name, 1.0))
            vals[f.name] = 1.0 / max(r, floor)
        return cls(**vals)

    def total(self, parts: dict[str, Tensor]) -> Tensor:
        out = None
        for f in fields(self):
            if f.name not in parts:
                continue
            term = ad.mul(parts[f.name], getattr(self, f.name))
            out = term if out is None else ad.add(out, term)
        return out


@dataclass
class FactorizationWeights:
    """Weights for the 3DMM module's total loss, same calibration scheme."""

    shape: float = 1.0
    pose: float = 1.0
    texture: float = 1.0
    landmark: float = 1.0
    rec: float = 1.0
    sym3d: float = 1.0
    const: float = 1.0
    supervised: bool = True

    @classmethod
    def calibrate(cls, raw: dict[str, float], floor: float = 0.05) -> "FactorizationWeights":
        vals = {}
        for f in fields(cls):
            if f.name == "supervised":
                continue
            r = abs(raw.get(f.name, 1.0))
            vals[f.name] = 1.0 / max(r, floor)
        return cls(**vals)

    def total(self, parts: dict[str, Tensor]) -> Tensor:
        out = None
        for f in fields(self):
            if f.name == "supervised" or f.name not in parts:
                continue
            term = ad.mul(parts[f.name], getattr(self, f.name))
            out = term if out is None else ad.add(out, term)
        return out


# -- image quality metrics ------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view
    k = win.shape[0]
    sw = sliding_window_view(img, (k, k))
    return np.tensordot(sw, win, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Structural similarity with the standard 11x11 Gaussian window
    (sigma 1.5), C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, averaged over valid
    windows and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValueError("ssim needs images at least 11x11")
    win = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _window_filter(x, win)
        my = _window_filter(y, win)
        mxx = _window_filter(x * x, win)
        myy = _window_filter(y * y, win)
        mxy = _window_filter(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
