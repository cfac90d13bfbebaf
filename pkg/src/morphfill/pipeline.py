"""End-to-end inference and training.

Inference: factorize a masked face into (shape, pose, illumination, partial UV
albedo, UV mask), inpaint the albedo, re-render, blend with the input, and
optionally iterate (the completed image re-enters 3D analysis; the initial UV
mask keeps steering the inpainter).

Training data is self-synthesized: random coefficients, poses, lighting and
procedural albedos rendered through the same forward model, which supplies
exact ground truth for every supervised loss.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ad, losses, nets, raster, uvops
from .ad import Tensor
from .ad.nn import spectral_updates
from .ad.optim import Adam, StepDecay
from .facemodel import (FaceModel, PoseParams, PoseTensors, assemble_shape,
                        decode_pose, project_landmarks, suggested_s_ref)
from .illum import shade_uv
from .synthmodel import SyntheticModelSpec, generate_synthetic_model

__all__ = [
    "PipelineConfig", "FaceSample", "FactorizedFace", "CompletionResult",
    "IterationResult", "TrainingDiverged", "sample_face", "make_dataset",
    "factorize", "complete", "train_3dmm", "train_inpainter",
    "default_model", "OracleFactors", "projected_symmetry_axis",
    "save_checkpoint", "load_encoder_checkpoint", "load_inpainter_checkpoint",
]


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass(frozen=True)
class PipelineConfig:
    image_size: int = 112
    uv_h: int = 64
    uv_w: int = 48
    d_shape: int = 16
    d_expr: int = 8
    model_seed: int = 0
    fill: float = 0.8  # mean face spans this fraction of image height at raw scale 0

    @property
    def hw(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    def s_ref(self, model: FaceModel) -> float:
        return suggested_s_ref(model, self.image_size, self.fill)


def default_model(config: PipelineConfig = PipelineConfig()) -> FaceModel:
    return generate_synthetic_model(SyntheticModelSpec(
        d_shape=config.d_shape, d_expr=config.d_expr,
        uv_h=config.uv_h, uv_w=config.uv_w, seed=config.model_seed))


# -- synthetic data ---------------------------------------------------------------


@dataclass
class FaceSample:
    index: int
    coeffs: np.ndarray        # (d_shape + d_expr,)
    pose: PoseParams
    pose_raw: np.ndarray      # (6,) the raw encoder targets
    lighting: np.ndarray      # (27,)
    albedo_uv: np.ndarray     # (H_uv, W_uv, 3) in [0, 1]
    image: np.ndarray         # (H, W, 3) rendered ground truth
    landmarks: np.ndarray     # (2, 68)
    shape: np.ndarray         # (V, 3)
    geom: raster.RasterGeom
    shade: np.ndarray         # (H_uv, W_uv, 3)
    texture_uv: np.ndarray    # albedo * shade
    texel_visible: np.ndarray  # (H_uv, W_uv) bool
    face_region: np.ndarray   # (H, W) bool rendered coverage


def _smooth_field(rng, hw, sigma, channels=3):
    from scipy.ndimage import gaussian_filter
    f = np.stack([gaussian_filter(rng.normal(size=hw), sigma, mode="nearest")
                  for _ in range(channels)], axis=-1)
    return f / max(np.abs(f).max(), 1e-9)


def _ellipse(uu, vv, cu, cv, ru, rv):
    return np.exp(-(((uu - cu) / ru) ** 2 + ((vv - cv) / rv) ** 2))


def _procedural_albedo(rng, uv_h, uv_w, asym: float) -> np.ndarray:
    """Skin-toned symmetric base with jittered facial features, a per-face
    symmetric detail field, and optional asymmetric detail, in [0.05, 0.95].

    The symmetric detail carries identity information that is unpredictable
    from UV position alone but readable off the mirror half, which is what
    makes symmetry priors worth having.
    """
    vv, uu = np.meshgrid(np.arange(uv_h, dtype=np.float64),
                         np.arange(uv_w, dtype=np.float64), indexing="ij")
    cu = (uv_w - 1) / 2.0
    du = np.abs(uu - cu)  # even in u: symmetric features

    r = rng.uniform(0.45, 0.80)
    tone = np.array([r, r * rng.uniform(0.78, 0.92), r * rng.uniform(0.70, 0.95)])
    alb = np.ones((uv_h, uv_w, 3)) * tone

    detail = _smooth_field(rng, (uv_h, uv_w), sigma=5.0)
    detail = 0.5 * (detail + detail[:, ::-1])
    alb += 0.22 * detail
    broad = _smooth_field(rng, (uv_h, uv_w), sigma=9.0)
    alb += 0.06 * 0.5 * (broad + broad[:, ::-1])

    eye_v = (0.34 + 0.05 * (rng.random() - 0.5)) * uv_h
    eye_u = (0.24 + 0.05 * (rng.random() - 0.5)) * uv_w
    eye_ru = (0.13 + 0.04 * (rng.random() - 0.5)) * uv_w
    eyes = _ellipse(du, vv, eye_u, eye_v, eye_ru, 0.065 * uv_h)
    alb -= (0.16 + 0.10 * rng.random()) * eyes[:, :, None] * np.array([1.0, 1.05, 1.0])
    brows = _ellipse(du, vv, eye_u, eye_v - 0.10 * uv_h,
                     (0.15 + 0.04 * (rng.random() - 0.5)) * uv_w, 0.045 * uv_h)
    alb -= (0.08 + 0.08 * rng.random()) * brows[:, :, None]
    lip_v = (0.70 + 0.04 * (rng.random() - 0.5)) * uv_h
    lips = _ellipse(du, vv, 0.0, lip_v, (0.16 + 0.06 * (rng.random() - 0.5)) * uv_w,
                    0.06 * uv_h)
    lip_tint = np.array([0.11 + 0.07 * rng.random(), -0.04, -0.02])
    alb += lips[:, :, None] * lip_tint
    nos = _ellipse(du, vv, 0.0, 0.52 * uv_h, 0.08 * uv_w, 0.12 * uv_h)
    alb += 0.03 * nos[:, :, None]

    if asym > 0:
        adet = _smooth_field(rng, (uv_h, uv_w), sigma=2.5)
        alb += asym * 0.5 * adet
    alb = np.clip(alb, 0.05, 0.95)
    from scipy.ndimage import gaussian_filter
    for c in range(3):
        alb[:, :, c] = gaussian_filter(alb[:, :, c], 0.8, mode="nearest")
    return np.clip(alb, 0.05, 0.95)


def _sample_lighting(rng) -> np.ndarray:
    l = np.zeros((3, 9))
    l[:, 0] = rng.uniform(0.72, 0.95)
    d = rng.normal(size=3)
    d[2] = abs(d[2]) + 0.6
    d /= np.linalg.norm(d)
    amp = rng.uniform(0.05, 0.28)
    for ch in range(3):
        l[ch, 1:4] = amp * d * rng.uniform(0.9, 1.1)
    l[:, 4:] = rng.normal(scale=0.02, size=(3, 5))
    return l.reshape(27)


def _sample_pose_raw(rng, image_size: int) -> np.ndarray:
    raw = np.zeros(6)
    raw[0] = rng.uniform(-0.25, 0.25)
    raw[1] = rng.uniform(-0.22, 0.22)          # yaw within ~±0.35 rad
    raw[2] = rng.uniform(-0.05, 0.05)          # roll
    raw[3] = rng.uniform(-0.10, 0.10)          # pitch
    center = (image_size - 1) / 2.0 / image_size
    raw[4] = center + rng.uniform(-0.03, 0.03)
    raw[5] = center + rng.uniform(-0.03, 0.03)
    return raw


def sample_face(model: FaceModel, config: PipelineConfig, seed, index: int = 0,
                asym: float = 0.15, coeff_scale: float = 1.0) -> FaceSample:
    """Draw one synthetic face with full ground truth; deterministic in seed."""
    rng = np.random.default_rng((seed, index))
    d = model.d_shape + model.d_expr
    coeffs = rng.normal(scale=coeff_scale, size=d)
    pose_raw = _sample_pose_raw(rng, config.image_size)
    pose = decode_pose(pose_raw, config.image_size, config.s_ref(model))
    lighting = _sample_lighting(rng)
    albedo = _procedural_albedo(rng, config.uv_h, config.uv_w, asym)

    shape = assemble_shape(model, coeffs)
    geom = raster.rasterize(model, shape, pose, config.hw)
    with ad.no_grad():
        image = raster.render(model, shape, albedo, pose, lighting, config.hw).numpy()
    shade = shade_uv(model, shape, lighting, pose.rotation())
    texvis = raster.texel_visibility(model, shape, pose, geom)
    return FaceSample(
        index=index, coeffs=coeffs, pose=pose, pose_raw=pose_raw,
        lighting=lighting, albedo_uv=albedo,
        image=np.asarray(image, dtype=np.float64),
        landmarks=project_landmarks(model, shape, pose),
        shape=shape, geom=geom, shade=shade,
        texture_uv=np.clip(albedo * shade, 0.0, 1.0),
        texel_visible=texvis, face_region=geom.coverage,
    )


def make_dataset(model: FaceModel, config: PipelineConfig, n: int, seed: int,
                 asym: float = 0.15) -> list[FaceSample]:
    return [sample_face(model, config, seed, i, asym=asym) for i in range(n)]


def projected_symmetry_axis(model: FaceModel, shape: np.ndarray, pose: PoseParams,
                            height: int) -> np.ndarray:
    """x coordinate of the projected face symmetry plane per image row (NaN
    where the centerline does not project)."""
    center = np.nonzero(np.abs(model.mean_shape[:, 0]) < 1e-9)[0]
    from .facemodel import project_vertices
    xy, _ = project_vertices(np.asarray(shape)[center], pose)
    order = np.argsort(xy[:, 1])
    ys, xs = xy[order, 1], xy[order, 0]
    rows = np.arange(height, dtype=np.float64)
    axis = np.interp(rows, ys, xs, left=np.nan, right=np.nan)
    return axis


# -- factorization & completion ------------------------------------------------------


@dataclass
class OracleFactors:
    """Ground-truth factors injected in place of the encoder."""

    coeffs: np.ndarray
    pose: PoseParams
    lighting: np.ndarray

    @classmethod
    def from_sample(cls, s: FaceSample) -> "OracleFactors":
        return cls(coeffs=s.coeffs, pose=s.pose, lighting=s.lighting)


@dataclass
class FactorizedFace:
    shape_coeffs: np.ndarray
    pose: PoseParams
    lighting: np.ndarray
    partial_albedo: np.ndarray  # (H_uv, W_uv, 3), zero where masked
    uv_mask: np.ndarray         # (H_uv, W_uv) {0,1}, 1 = missing
    shade: np.ndarray           # (H_uv, W_uv, 3)
    shape: np.ndarray           # (V, 3)
    geom: raster.RasterGeom
    sampled_albedo: np.ndarray | None = None  # deshaded sample before zeroing


@dataclass
class IterationResult:
    albedo_uv: np.ndarray   # completed albedo, [0, 1] storage convention
    rendered: np.ndarray    # raw render of the completed albedo
    blended: np.ndarray     # input outside the mask, render inside
    pose: PoseParams
    psnr_raw: float | None = None
    psnr_blend: float | None = None


@dataclass
class CompletionResult:
    iterations: list[IterationResult] = field(default_factory=list)

    @property
    def final(self) -> IterationResult:
        return self.iterations[-1]


def _encode_single(encoder: nets.Encoder3DMM, image: np.ndarray,
                   config: PipelineConfig, model: FaceModel):
    x = Tensor(np.ascontiguousarray(
        image.transpose(2, 0, 1)[None]).astype(np.float32))
    with ad.no_grad():
        out = encoder(x)
    coeffs = out.shape_coeffs.numpy()[0].astype(np.float64)
    pose = decode_pose(out.pose_raw.numpy()[0], config.image_size, config.s_ref(model))
    lighting = out.illum.numpy()[0].astype(np.float64)
    return coeffs, pose, lighting


def factorize(image: np.ndarray, mask: np.ndarray, encoder, model: FaceModel,
              config: PipelineConfig,
              oracle: OracleFactors | None = None) -> FactorizedFace:
    """Resolve a masked image into 3D factors and a partial UV albedo.

    The encoder sees the mask-zeroed image; texture is sampled from the same
    zeroed image, de-shaded, and zeroed wherever the UV mask marks a texel
    missing (image-masked, self-occluded, or grazing).
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape[:2] != config.hw or mask.shape != config.hw:
        raise ValueError(f"factorize expects {config.hw} inputs, got "
                         f"{image.shape[:2]} and {mask.shape}")
    masked = image * (1.0 - mask[:, :, None])
    if oracle is not None:
        coeffs, pose, lighting = oracle.coeffs, oracle.pose, oracle.lighting
    else:
        coeffs, pose, lighting = _encode_single(encoder, masked, config, model)
    shape = assemble_shape(model, coeffs)
    geom = raster.rasterize(model, shape, pose, config.hw)
    texvis = raster.texel_visibility(model, shape, pose, geom)
    m_uv = uvops.unwarp_mask(mask, model, shape, pose, texvis)
    shade = shade_uv(model, shape, lighting, pose.rotation())
    t_uv = uvops.unwarp_image_to_uv(masked, model, shape, pose)
    sampled = uvops.deshade(t_uv, shade)
    a_uv = sampled * (1.0 - m_uv[:, :, None])
    return FactorizedFace(shape_coeffs=coeffs, pose=pose, lighting=lighting,
                          partial_albedo=a_uv, uv_mask=m_uv, shade=shade,
                          shape=shape, geom=geom, sampled_albedo=sampled)


def _inpaint_albedo(inpainter, fac: FactorizedFace,
                    identity_fill: str = "zero") -> np.ndarray:
    """Run the inpainter on a factorized face; returns completed albedo in
    the [0, 1] storage convention.

    With no inpainter the identity fallback copies visible texels and fills
    masked ones with zero (``identity_fill='zero'``) or with the raw
    de-shaded samples (``'sample'``; pure-resampling round trips).
    """
    if inpainter is None:
        if identity_fill == "sample" and fac.sampled_albedo is not None:
            return fac.sampled_albedo.copy()
        return fac.partial_albedo.copy()
    a = (2.0 * fac.partial_albedo - 1.0) * (1.0 - fac.uv_mask[:, :, None])
    x = Tensor(np.ascontiguousarray(a.transpose(2, 0, 1))[None].astype(np.float32))
    m = Tensor(fac.uv_mask[None, None].astype(np.float32))
    with ad.no_grad():
        out = inpainter(x, m)
    pred = out.albedo.numpy()[0].transpose(1, 2, 0).astype(np.float64)
    return (pred + 1.0) / 2.0


def complete(image: np.ndarray, mask: np.ndarray, encoder, inpainter,
             model: FaceModel, config: PipelineConfig, iters: int = 2,
             oracle: OracleFactors | None = None, gt_image: np.ndarray | None = None,
             reunwarp_mask: bool = False, identity_fill: str = "zero") -> CompletionResult:
    """Iterative analysis-by-synthesis completion.

    Iteration 1 factorizes the masked input; later iterations factorize the
    previous blended output while the initial UV mask keeps defining what the
    inpainter must fill (set ``reunwarp_mask`` to re-derive the UV mask from
    the image mask under each new pose instead).
    """
    if iters < 1:
        raise ValueError("need at least one iteration")
    image = np.asarray(image, dtype=np.float64)
    mask01 = (np.asarray(mask, dtype=np.float64) >= 0.5).astype(np.float64)
    masked_input = image * (1.0 - mask01[:, :, None])

    result = CompletionResult()
    init_uv_mask: np.ndarray | None = None
    current = image
    current_mask = mask01
    for it in range(iters):
        fac = factorize(current, current_mask, encoder, model, config, oracle=oracle)
        if it == 0:
            init_uv_mask = fac.uv_mask
        elif not reunwarp_mask:
            m = np.maximum(init_uv_mask, fac.uv_mask)  # initial mask plus new occlusions
            fac = replace(fac, uv_mask=m,
                          partial_albedo=fac.partial_albedo * (1.0 - m[:, :, None]))
        completed = _inpaint_albedo(inpainter, fac, identity_fill)
        with ad.no_grad():
            rendered = raster.render(model, fac.shape, completed, fac.pose,
                                     fac.lighting, config.hw, geom=fac.geom).numpy()
        rendered = np.asarray(rendered, dtype=np.float64)
        blended = uvops.blend(masked_input, rendered, mask01)
        rec = IterationResult(albedo_uv=completed, rendered=rendered,
                              blended=blended, pose=fac.pose)
        if gt_image is not None:
            rec.psnr_raw = losses.psnr(
                np.where(raster.face_interior(fac.geom, 2)[:, :, None], rendered, gt_image),
                gt_image)
            rec.psnr_blend = losses.psnr(
                np.where(mask01[:, :, None] > 0.5, rendered, gt_image), gt_image)
        result.iterations.append(rec)
        current = blended
        current_mask = np.zeros_like(mask01)
    return result


# -- training: 3D factorization -----------------------------------------------------


@dataclass
class TrainConfig3DMM:
    stage1_steps: int = 300
    stage2_steps: int = 100
    lr: float = 1e-4
    decay_gamma: float = 0.98
    decay_every: int = 50
    batch: int = 8
    mask_ratio: tuple[float, float] = (0.05, 0.45)
    use_rec_stage1: bool = True
    hflip_augment: bool = True
    seed: int = 0
    log_path: str | None = None


def _nchw(images: list[np.ndarray]) -> Tensor:
    arr = np.stack([im.transpose(2, 0, 1) for im in images]).astype(np.float32)
    return Tensor(np.ascontiguousarray(arr))


def _random_rect_mask(rng, face_region: np.ndarray, lo: float, hi: float) -> np.ndarray:
    from .masks import MaskSpec, gen_mask
    spec = MaskSpec(kind="rect", ratio_lo=lo, ratio_hi=hi, seed=int(rng.integers(1 << 31)))
    return gen_mask(face_region, spec)


def _flip_sample_view(s: FaceSample, model: FaceModel, image_size: int):
    """Ground truth for the horizontally flipped image of a sample.

    The mirrored face has identical coefficients (bases are mirror-symmetric),
    negated yaw/roll, mirrored translation/lighting/landmarks and a flipped
    UV albedo/texture.
    """
    img = np.ascontiguousarray(s.image[:, ::-1])
    pose = PoseParams(scale=s.pose.scale, yaw=-s.pose.yaw, roll=-s.pose.roll,
                      pitch=s.pose.pitch, tx=(image_size - 1) - s.pose.tx, ty=s.pose.ty)
    light = s.lighting.reshape(3, 9).copy()
    light[:, [1, 4, 5]] *= -1.0  # odd bands in nx
    lm = s.landmarks.copy()
    lm[0] = (image_size - 1) - lm[0]
    lm = lm[:, model.landmark_mirror]
    return img, pose, light.reshape(27), lm, uvops.hflip_uv(s.texture_uv)


def train_3dmm(dataset: list[FaceSample], model: FaceModel, config: PipelineConfig,
               tcfg: TrainConfig3DMM = TrainConfig3DMM(),
               encoder: nets.Encoder3DMM | None = None):
    """Two-stage 3DMM training: supervised, then self-supervised at lr/10.

    Returns (encoder, decoder, history) where history holds per-step total
    losses and term breakdowns.
    """
    rng = np.random.default_rng(tcfg.seed)
    if encoder is None:
        encoder = nets.Encoder3DMM(d_shape=config.d_shape, d_expr=config.d_expr,
                                   image_size=config.image_size,
                                   rng=np.random.default_rng(tcfg.seed + 1))
    decoder = nets.AlbedoDecoder(rng=np.random.default_rng(tcfg.seed + 2))
    params = encoder.parameters() + decoder.parameters()
    opt = Adam(params, lr=tcfg.lr)
    sched = StepDecay(opt, tcfg.decay_gamma)
    s_ref = config.s_ref(model)
    weights: losses.FactorizationWeights | None = None
    history: list[dict] = []
    log_fh = open(tcfg.log_path, "w") if tcfg.log_path else None

    total_steps = tcfg.stage1_steps + tcfg.stage2_steps
    for step in range(total_steps):
        stage2 = step >= tcfg.stage1_steps
        if step == tcfg.stage1_steps:
            opt.lr = sched.base_lr = opt.lr / 10.0  # cut at the stage boundary
        idx = rng.choice(len(dataset), size=min(tcfg.batch, len(dataset)), replace=False)
        batch = [dataset[i] for i in idx]

        views = []
        for s in batch:
            if tcfg.hflip_augment and rng.random() < 0.5:
                img, pose_gt, light_gt, lm_gt, tex_gt = _flip_sample_view(
                    s, model, config.image_size)
                face_flip = np.ascontiguousarray(s.face_region[:, ::-1])
                views.append((img, s.coeffs, pose_gt, light_gt, lm_gt, tex_gt, face_flip))
            else:
                views.append((s.image, s.coeffs, s.pose, s.lighting, s.landmarks,
                              s.texture_uv, s.face_region))

        inputs = []
        for img, _, _, _, _, _, face in views:
            lo, hi = tcfg.mask_ratio
            msk = _random_rect_mask(rng, face, lo, hi)
            inputs.append(img * (1.0 - msk[:, :, None]))
        x = _nchw(inputs)
        with spectral_updates(True):
            out = encoder(x)
            alb_dec = decoder(out.albedo_feats)  # (N, 3, H_uv, W_uv) in (-1, 1)

        parts_acc: dict[str, Tensor] = {}
        for i, (img, coeffs_gt, pose_gt, light_gt, lm_gt, tex_gt, _) in enumerate(views):
            pt = PoseTensors.from_raw(out.pose_raw[i], config.image_size, s_ref)
            quat = losses.quaternion_tensor(pt.yaw, pt.pitch, pt.roll)
            shape_t = assemble_shape(model, out.shape_coeffs[i].astype(np.float64))
            alb01 = ad.mul(ad.add(ad.transpose(alb_dec[i], (1, 2, 0)), 1.0), 0.5)
            parts: dict[str, Tensor] = {}
            if not stage2:
                parts["shape"] = losses.shape_coeff_loss(out.shape_coeffs[i], coeffs_gt)
                parts["pose"] = losses.pose_loss(
                    pt.scale, quat, pt.t, pose_gt.scale, pose_gt.quaternion(),
                    pose_gt.translation(), t_norm=float(config.image_size))
                shade_t = shade_uv(model, shape_t, out.illum[i].astype(np.float64),
                                   pose_gt.rotation())
                tex_pred = ad.mul(alb01.astype(np.float64), shade_t)
                parts["texture"] = losses.texture_loss(tex_pred, tex_gt, model.texel_valid)
            parts["landmark"] = losses.landmark_loss(
                _project_landmarks_t(model, shape_t, pt), np.asarray(lm_gt),
                image_size=float(config.image_size))
            if tcfg.use_rec_stage1 or stage2:
                img_pred = raster.render(model, shape_t, alb01, pt,
                                         out.illum[i].astype(np.float64), config.hw)
                parts["rec"] = losses.reconstruction_loss(img_pred, img)
            parts["sym3d"] = losses.albedo_symmetry_3d(alb_dec[i])
            parts["const"] = losses.albedo_constancy(
                ad.reshape(alb_dec[i], (1,) + alb_dec[i].shape), tex_gt)
            for k, v in parts.items():
                parts_acc[k] = v if k not in parts_acc else ad.add(parts_acc[k], v)
        n = float(len(views))
        parts_acc = {k: ad.div(v, n) for k, v in parts_acc.items()}

        if weights is None:
            weights = losses.FactorizationWeights.calibrate(
                {k: v.item() for k, v in parts_acc.items()})
        total = weights.total(parts_acc)
        tv = total.item()
        if not np.isfinite(tv):
            raise TrainingDiverged(f"3DMM loss non-finite at step {step}: "
                                   f"{ {k: v.item() for k, v in parts_acc.items()} }")
        opt.zero_grad()
        total.backward()
        opt.step()
        if (step + 1) % tcfg.decay_every == 0:
            sched.epoch_end()
        rec = {"step": step, "stage": 2 if stage2 else 1, "lr": opt.lr, "total": tv,
               **{k: v.item() for k, v in parts_acc.items()}}
        history.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
    if log_fh:
        log_fh.close()
    return encoder, decoder, history


def pt_to_params(pt: PoseTensors) -> PoseParams:
    return pt.to_params()


def _project_landmarks_t(model: FaceModel, shape_t, pt: PoseTensors):
    idx = model.landmark_indices
    pts = ad.take(shape_t, idx)
    rot = pt.rotation().astype(np.float64)
    cam = ad.matmul(pts, ad.transpose(rot, (1, 0)))
    xy = ad.add(ad.mul(cam[:, :2], pt.scale.astype(np.float64)),
                ad.reshape(pt.t.astype(np.float64), (1, 2)))
    return ad.transpose(xy, (1, 0))


# -- training: albedo inpainter ------------------------------------------------------


@dataclass
class TrainConfigInpainter:
    steps: int = 600
    lr_g: float = 1e-4
    lr_d: float = 3e-4
    decay_gamma: float = 0.98
    decay_every: int = 100
    batch: int = 4
    mask_ratio: tuple[float, float] = (0.1, 0.5)
    mask_kind: str = "rect"          # or "half_face"
    use_gan: bool = True
    variant: str = "sym"             # or "plain"
    use_symmetry_loss: bool = True
    seed: int = 0
    log_path: str | None = None


@dataclass
class _PreparedSample:
    sample: FaceSample
    fac: FactorizedFace


def _prepare_factors(dataset, encoder, model, config) -> list[_PreparedSample]:
    """Factorize every sample once with the frozen encoder (oracle factors
    when no encoder is given); masks are re-drawn per step, so only factor
    estimation is cached here."""
    out = []
    zero = np.zeros(config.hw)
    for s in dataset:
        oracle = OracleFactors.from_sample(s) if encoder is None else None
        fac = factorize(s.image, zero, encoder, model, config, oracle=oracle)
        out.append(_PreparedSample(sample=s, fac=fac))
    return out


def train_inpainter(dataset: list[FaceSample], encoder, model: FaceModel,
                    config: PipelineConfig,
                    tcfg: TrainConfigInpainter = TrainConfigInpainter()):
    """Adversarial inpainter training with a frozen (or oracle) factorizer.

    The generator takes every non-GAN loss each step; generator and
    discriminator take alternating adversarial updates at a strict 1:1 ratio.
    Returns (inpainter, discriminator, history).
    """
    from .masks import MaskSpec, gen_mask

    rng = np.random.default_rng(tcfg.seed)
    if tcfg.variant == "sym":
        net = nets.SymUNet(rng=np.random.default_rng(tcfg.seed + 1))
    elif tcfg.variant == "plain":
        net = nets.PlainUNet(rng=np.random.default_rng(tcfg.seed + 1))
    else:
        raise ValueError(f"unknown inpainter variant '{tcfg.variant}'")
    disc = nets.PyramidGAN(rng=np.random.default_rng(tcfg.seed + 2)) if tcfg.use_gan else None

    opt_g = Adam(net.parameters(), lr=tcfg.lr_g)
    sched_g = StepDecay(opt_g, tcfg.decay_gamma)
    opt_d = Adam(disc.parameters(), lr=tcfg.lr_d) if disc else None
    sched_d = StepDecay(opt_d, tcfg.decay_gamma) if disc else None

    prepared = _prepare_factors(dataset, encoder, model, config)
    weights: losses.CompletionWeights | None = None
    history: list[dict] = []
    g_updates = d_updates = 0
    log_fh = open(tcfg.log_path, "w") if tcfg.log_path else None

    for step in range(tcfg.steps):
        idx = rng.choice(len(prepared), size=min(tcfg.batch, len(prepared)), replace=False)
        batch = [prepared[i] for i in idx]

        net_in_a, net_in_m, gt_alb_n, sig_keys = [], [], [], []
        per_sample = []
        for p in batch:
            s, fac = p.sample, p.fac
            axis = None
            if tcfg.mask_kind == "half_face":
                axis = projected_symmetry_axis(model, fac.shape, fac.pose, config.image_size)
            spec = MaskSpec(kind=tcfg.mask_kind, ratio_lo=tcfg.mask_ratio[0],
                            ratio_hi=tcfg.mask_ratio[1],
                            seed=int(rng.integers(1 << 31)))
            msk = gen_mask(s.face_region, spec, symmetry_axis=axis)
            masked_img = s.image * (1.0 - msk[:, :, None])
            texvis = s.texel_visible if encoder is None else None
            if texvis is None:
                texvis = raster.texel_visibility(model, fac.shape, fac.pose, fac.geom)
            m_uv = uvops.unwarp_mask(msk, model, fac.shape, fac.pose, texvis)
            t_uv = uvops.unwarp_image_to_uv(masked_img, model, fac.shape, fac.pose)
            a_uv = uvops.deshade(t_uv, fac.shade) * (1.0 - m_uv[:, :, None])
            net_in_a.append(((2.0 * a_uv - 1.0) * (1.0 - m_uv[:, :, None])).transpose(2, 0, 1))
            net_in_m.append(m_uv[None])
            gt_alb_n.append((2.0 * s.albedo_uv - 1.0).transpose(2, 0, 1))
            per_sample.append((s, fac, msk, m_uv, masked_img))

        a_t = Tensor(np.ascontiguousarray(np.stack(net_in_a)).astype(np.float32))
        m_t = Tensor(np.ascontiguousarray(np.stack(net_in_m)).astype(np.float32))
        gt_t = Tensor(np.ascontiguousarray(np.stack(gt_alb_n)).astype(np.float32))

        out = net(a_t, m_t)
        parts: dict[str, Tensor] = {
            "l_albedo": losses.loss_a(out.albedo, gt_t, out.log_uncertainty),
        }
        if tcfg.use_symmetry_loss:
            parts["l_sym"] = losses.symmetry_loss(out.albedo, m_t, out.log_uncertainty)

        rendered_list, blended_list, gt_imgs = [], [], []
        l_image = None
        for i, (s, fac, msk, m_uv, masked_img) in enumerate(per_sample):
            alb01 = ad.mul(ad.add(ad.transpose(out.albedo[i], (1, 2, 0)), 1.0), 0.5)
            img_pred = raster.render(model, fac.shape, alb01, fac.pose, fac.lighting,
                                     config.hw, geom=fac.geom)
            sig_uv = ad.reshape(ad.transpose(out.log_uncertainty[i], (1, 2, 0)),
                                (config.uv_h, config.uv_w, 1))
            sig_img = raster.render_uv_nearest(sig_uv, model, fac.geom, config.hw)
            term = losses.loss_i(img_pred, Tensor(s.image.astype(np.float32)),
                                 sig_img)
            l_image = term if l_image is None else ad.add(l_image, term)
            blended = uvops.blend(Tensor(masked_img.astype(np.float32)), img_pred, msk)
            rendered_list.append(img_pred)
            blended_list.append(blended)
            gt_imgs.append(s.image)
        parts["l_image"] = ad.div(l_image, float(len(per_sample)))

        if disc is not None:
            fake_batch = ad.stack([ad.transpose(b, (2, 0, 1)) for b in blended_list])
            with spectral_updates(True):
                fake_maps = disc(fake_batch)
            parts["l_gan"] = losses.pyramid_generator_loss(fake_maps)

        if weights is None:
            raw = {k: v.item() for k, v in parts.items() if k.startswith("l_")
                   and k not in ("l_gan", "l_gp")}
            weights = losses.CompletionWeights.calibrate(raw)
            # hinge terms are already O(1); keep their weights at unity
            weights.l_gan = 1.0 if disc is not None else 0.0
            weights.l_gp = 1.0 if disc is not None else 0.0

        total = weights.total(parts)
        tv = total.item()
        if not np.isfinite(tv):
            raise TrainingDiverged(f"inpainter loss non-finite at step {step}")
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
        g_updates += 1

        d_loss_val = None
        if disc is not None:
            with ad.no_grad():
                fake_const = Tensor(fake_batch.numpy().copy())
            real_t = _nchw(gt_imgs)
            with spectral_updates(True):
                f_maps = disc(fake_const)
                r_maps = disc(real_t)
            _, l_d = losses.pyramid_gan_losses(r_maps, f_maps)
            gp = losses.wgan_gp(disc, real_t, fake_const,
                                u=rng.random(real_t.shape[0]))
            d_total = ad.add(l_d, ad.mul(gp, weights.l_gp))
            d_loss_val = d_total.item()
            if not np.isfinite(d_loss_val):
                raise TrainingDiverged(f"discriminator loss non-finite at step {step}")
            opt_d.zero_grad()
            d_total.backward()
            opt_d.step()
            d_updates += 1

        if (step + 1) % tcfg.decay_every == 0:
            sched_g.epoch_end()
            if sched_d:
                sched_d.epoch_end()
        rec = {"step": step, "lr_g": opt_g.lr, "total": tv,
               **{k: v.item() for k, v in parts.items()}}
        if d_loss_val is not None:
            rec["d_total"] = d_loss_val
        history.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
    if log_fh:
        log_fh.close()
    info = {"g_updates": g_updates, "d_updates": d_updates, "weights": weights}
    return net, disc, history, info


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, modules: dict[str, "nets.Module"], meta: dict | None = None):
    """Write named modules (parameters + buffers) and a JSON meta blob."""
    from .store import write_container
    entries: dict[str, np.ndarray] = {}
    meta = dict(meta or {})
    for name, mod in modules.items():
        if mod is None:
            continue
        for k, arr in mod.state_arrays().items():
            entries[f"{name}/{k}"] = arr
    entries["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).copy()
    write_container(path, entries)


def _checkpoint_parts(path):
    from .store import read_container
    cont = read_container(path)
    meta = json.loads(bytes(cont["meta_json"]).decode())
    groups: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in cont.entries:
        if name == "meta_json":
            continue
        head, rest = name.split("/", 1)
        groups.setdefault(head, {})[rest] = arr
    return groups, meta


def load_encoder_checkpoint(path, config: PipelineConfig):
    groups, meta = _checkpoint_parts(path)
    encoder = nets.Encoder3DMM(d_shape=config.d_shape, d_expr=config.d_expr,
                               image_size=config.image_size)
    encoder.load_state_arrays(groups["encoder"])
    decoder = None
    if "decoder" in groups:
        decoder = nets.AlbedoDecoder()
        decoder.load_state_arrays(groups["decoder"])
    return encoder, decoder, meta


def load_inpainter_checkpoint(path):
    groups, meta = _checkpoint_parts(path)
    variant = meta.get("variant", "sym")
    net = nets.SymUNet() if variant == "sym" else nets.PlainUNet()
    net.load_state_arrays(groups["inpainter"])
    disc = None
    if "disc" in groups:
        disc = nets.PyramidGAN()
        disc.load_state_arrays(groups["disc"])
    return net, disc, meta
