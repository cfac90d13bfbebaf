"""Registered finite-difference verification battery.

Covers every differentiable primitive, the composite layers, every training
loss, and the renderer with respect to albedo and lighting. All checks run at
float64 with central differences; declared kinks and visibility edges are
excluded by construction (inputs are sampled away from them, and the harness
flags residual kinks instead of failing).
"""

from __future__ import annotations

import numpy as np

from . import ad, losses, raster
from .ad import Tensor, gradcheck
from .ad.nn import GroupNorm, gated, group_norm
from .facemodel import PoseTensors, assemble_shape, project_landmarks
from .illum import shade_uv, vertex_normals
from .pipeline import PipelineConfig, default_model, sample_face
from .uvops import bilinear_sample, deshade

__all__ = ["run_gradcheck_suite"]


def _t(rng, *shape, scale=1.0, shift=0.0):
    return Tensor(rng.normal(size=shape) * scale + shift,
                  requires_grad=True, dtype=np.float64)


def _scalarize(x):
    # squared sum keeps the target smooth and couples every coordinate
    return ad.tsum(ad.mul(x, x))


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-4,
                        loss_tol: float = 1e-3) -> list:
    """Run every registered check; returns [(name, GradcheckReport), ...]."""
    rng = np.random.default_rng(seed)
    out = []

    def check(name, f, inputs, masks=None, t=tol):
        out.append((name, gradcheck(f, inputs, masks=masks, tol=t)))

    # -- elementwise primitives ----------------------------------------------
    x = _t(rng, 3, 4)
    y = _t(rng, 3, 4)
    check("add", lambda a, b: _scalarize(ad.add(a, b)), [x, y])
    check("sub", lambda a, b: _scalarize(ad.sub(a, b)), [x, y])
    check("mul", lambda a, b: _scalarize(ad.mul(a, b)), [x, y])
    check("div", lambda a, b: _scalarize(ad.div(a, ad.add(ad.mul(b, b), 1.0))), [x, y])
    check("exp", lambda a: _scalarize(ad.exp(a)), [_t(rng, 3, 3, scale=0.5)])
    check("log", lambda a: _scalarize(ad.log(ad.add(ad.mul(a, a), 0.5))), [_t(rng, 3, 3)])
    check("sqrt", lambda a: _scalarize(ad.sqrt(ad.add(ad.mul(a, a), 0.5))), [_t(rng, 3, 3)])
    check("pow", lambda a: _scalarize(ad.pow(ad.add(ad.mul(a, a), 0.5), 0.8)), [_t(rng, 3, 3)])
    check("abs", lambda a: _scalarize(ad.absolute(a)), [_t(rng, 3, 3, shift=2.0)])
    check("sin", lambda a: _scalarize(ad.sin(a)), [_t(rng, 3, 3)])
    check("cos", lambda a: _scalarize(ad.cos(a)), [_t(rng, 3, 3)])
    check("tanh", lambda a: _scalarize(ad.tanh(a)), [_t(rng, 3, 3)])
    check("sigmoid", lambda a: _scalarize(ad.sigmoid(a)), [_t(rng, 3, 3)])
    check("softplus", lambda a: _scalarize(ad.softplus(a)), [_t(rng, 3, 3)])
    check("elu", lambda a: _scalarize(ad.elu(a)), [_t(rng, 3, 3, shift=0.3)])
    check("leaky_relu", lambda a: _scalarize(ad.leaky_relu(a, 0.2)),
          [_t(rng, 3, 3, shift=0.4)])
    check("clip", lambda a: _scalarize(ad.clip(a, -0.8, 0.8)), [_t(rng, 4, 4)])

    # -- shape / reduction / indexing ------------------------------------------
    check("sum", lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=1), ad.tsum(a, axis=1))),
          [_t(rng, 3, 5)])
    check("mean", lambda a: _scalarize(ad.tmean(a, axis=0, keepdims=True)), [_t(rng, 4, 3)])
    check("reshape+transpose",
          lambda a: _scalarize(ad.transpose(ad.reshape(a, (4, 6)), (1, 0))),
          [_t(rng, 2, 3, 4)])
    check("concat", lambda a, b: _scalarize(ad.concat([a, b], axis=1)),
          [_t(rng, 2, 3), _t(rng, 2, 2)])
    check("slice", lambda a: _scalarize(a[1:, :2]), [_t(rng, 4, 4)])
    check("flip-width", lambda a: _scalarize(ad.mul(ad.flip(a, 1), a)), [_t(rng, 3, 4)])
    check("pad2d", lambda a: _scalarize(ad.pad2d(a, 2)), [_t(rng, 1, 2, 3, 3)])
    check("upsample-nearest", lambda a: _scalarize(ad.upsample_nearest(a, 2, 3)),
          [_t(rng, 1, 2, 3, 2)])
    idx = rng.integers(0, 5, size=7)
    check("take", lambda a: _scalarize(ad.take(a, idx)), [_t(rng, 5, 3)])
    check("scatter_add", lambda a: _scalarize(ad.scatter_add(a, idx, 5)), [_t(rng, 7, 3)])
    check("matmul", lambda a, b: _scalarize(ad.matmul(a, b)),
          [_t(rng, 3, 4), _t(rng, 4, 2)])
    check("linear", lambda a, w, b: _scalarize(ad.linear(a, w, b)),
          [_t(rng, 2, 5), _t(rng, 3, 5), _t(rng, 3)])

    # -- convolution family ------------------------------------------------------
    xc = _t(rng, 2, 3, 6, 6, scale=0.7)
    wc = _t(rng, 4, 3, 3, 3, scale=0.3)
    check("conv2d", lambda a, w: _scalarize(ad.conv2d(a, w, 2, 1)), [xc, wc])
    gc = _t(rng, 2, 4, 3, 3, scale=0.5)
    check("conv2d_input_grad",
          lambda g, w: _scalarize(ad.conv2d_input_grad(g, w, 2, 1, (6, 6))), [gc, wc])
    check("conv2d_weight_grad",
          lambda a, g: _scalarize(ad.conv2d_weight_grad(a, g, 2, 1, (3, 3))), [xc, gc])
    check("avg_pool2d", lambda a: _scalarize(ad.avg_pool2d(a, 3)), [_t(rng, 1, 2, 6, 6)])

    # -- composite layers ----------------------------------------------------------
    def gn_fn(a, w, b):
        return _scalarize(group_norm(a, 2, w, b))

    check("group_norm", gn_fn,
          [_t(rng, 2, 4, 3, 3), _t(rng, 4, shift=1.0), _t(rng, 4)])

    def gated_fn(a, wf, wg):
        f = ad.elu(ad.conv2d(a, wf, 1, 1))
        g = ad.sigmoid(group_norm(ad.conv2d(a, wg, 1, 1), 2))
        return _scalarize(gated(f, g))

    check("gated_conv", gated_fn,
          [_t(rng, 1, 2, 5, 5, scale=0.7), _t(rng, 4, 2, 3, 3, scale=0.4),
           _t(rng, 4, 2, 3, 3, scale=0.4)])

    # -- losses ----------------------------------------------------------------------
    res = Tensor(np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.05,
                 requires_grad=True, dtype=np.float64)
    sig = _t(rng, 2, 1, 4, 4, scale=0.5)
    check("aleatoric", lambda r, s: losses.aleatoric(ad.mul(r, r), s), [res, sig],
          t=loss_tol)
    pred = _t(rng, 1, 3, 4, 4, scale=0.4)
    gt = Tensor(rng.normal(size=(1, 3, 4, 4)) * 0.4 + 2.0)
    sig1 = _t(rng, 1, 1, 4, 4, scale=0.5)
    check("loss_a", lambda p, s: losses.loss_a(p, gt, s), [pred, sig1], t=loss_tol)
    m = Tensor((rng.random((1, 1, 4, 4)) < 0.4).astype(np.float64))
    pred_asym = Tensor(rng.normal(size=(1, 3, 4, 4)) * 0.4
                       + np.arange(4)[None, None, None, :] * 1.0,
                       requires_grad=True, dtype=np.float64)
    check("symmetry_loss", lambda p, s: losses.symmetry_loss(p, m, s),
          [pred_asym, sig1], t=loss_tol)
    maps_r = [_t(rng, 2, 1, 3, 3, shift=2.0), _t(rng, 2, 1, 2, 2, shift=2.0)]
    maps_f = [_t(rng, 2, 1, 3, 3, shift=-2.0), _t(rng, 2, 1, 2, 2, shift=-2.0)]

    def hinge_fn(r0, r1, f0, f1):
        lg, ld = losses.pyramid_gan_losses([r0, r1], [f0, f1])
        return ad.add(lg, ld)

    check("pyramid_hinge", hinge_fn, maps_r + maps_f, t=loss_tol)
    check("reconstruction", lambda p: losses.reconstruction_loss(p, gt),
          [_t(rng, 1, 3, 4, 4, shift=3.0)], t=loss_tol)
    check("albedo_symmetry_3d", losses.albedo_symmetry_3d,
          [_t(rng, 1, 3, 4, 4, shift=2.0)], t=loss_tol)
    chroma = np.abs(rng.normal(size=(4, 4, 3))) + 0.3
    check("albedo_constancy", lambda p: losses.albedo_constancy(p, chroma),
          [_t(rng, 1, 3, 4, 4)], t=loss_tol)

    def quat_fn(a, b, c):
        q = losses.quaternion_tensor(a, b, c)
        return ad.tsum(ad.mul(q, ad.mul(q, q)))

    check("quaternion", quat_fn,
          [_t(rng, scale=0.3), _t(rng, scale=0.3), _t(rng, scale=0.3)], t=loss_tol)

    def gp_fn(w):
        def disc(img):
            return [ad.reshape(ad.tmean(ad.mul(img, w), axis=(1, 2, 3)), (2, 1, 1, 1))]
        real = Tensor(rng.normal(size=(2, 1, 3, 3)))
        fake = Tensor(rng.normal(size=(2, 1, 3, 3)))
        return losses.wgan_gp(disc, real, fake, u=np.array([0.3, 0.7]))

    check("wgan_gp(double-backward)", gp_fn, [_t(rng, 1, 1, 3, 3, shift=1.0)], t=loss_tol)

    # -- geometry, shading, sampling ----------------------------------------------
    cfg = PipelineConfig()
    model = default_model(cfg)
    coeffs = _t(rng, model.d_shape + model.d_expr, scale=0.5)
    check("assemble_shape", lambda c: _scalarize(assemble_shape(model, c)), [coeffs])

    raw6 = Tensor(rng.uniform(-0.3, 0.3, size=6), requires_grad=True, dtype=np.float64)

    def landmarks_fn(r):
        pt = PoseTensors.from_raw(r, cfg.image_size, cfg.s_ref(model))
        shape = Tensor(model.mean_shape)
        pts = ad.take(shape, model.landmark_indices)
        cam = ad.matmul(pts, ad.transpose(pt.rotation(), (1, 0)))
        xy = ad.add(ad.mul(cam[:, :2], pt.scale), ad.reshape(pt.t, (1, 2)))
        return ad.tmean(ad.mul(xy, xy))

    check("project_landmarks(pose)", landmarks_fn, [raw6])

    vmask = np.zeros(model.n_vertices, dtype=bool)
    vmask[rng.choice(model.n_vertices, size=6, replace=False)] = True
    shape_in = Tensor(model.mean_shape, requires_grad=True, dtype=np.float64)
    check("vertex_normals(shape)",
          lambda s: _scalarize(vertex_normals(s, model.triangles)),
          [shape_in], masks=[np.repeat(vmask[:, None], 3, 1)])

    light = Tensor(rng.normal(size=27) * 0.1 + np.eye(27)[0] * 0,
                   requires_grad=True, dtype=np.float64)
    light.data[[0, 9, 18]] += 1.0

    def shade_fn(l):
        return _scalarize(shade_uv(model, model.mean_shape, l))

    check("shade_uv(lighting)", shade_fn, [light])

    img = Tensor(rng.random((8, 8, 3)), requires_grad=True, dtype=np.float64)
    pts2 = Tensor(rng.uniform(0.6, 6.4, size=(5, 2)), requires_grad=True, dtype=np.float64)
    check("bilinear_sample", lambda m2, p: _scalarize(bilinear_sample(m2, p)),
          [img, pts2])
    tmap = Tensor(rng.random((4, 4, 3)) * 0.5 + 0.2, requires_grad=True, dtype=np.float64)
    cmap = Tensor(rng.random((4, 4, 3)) * 0.5 + 0.4, requires_grad=True, dtype=np.float64)
    check("deshade", lambda t2, c2: _scalarize(deshade(t2, c2)), [tmap, cmap])

    # -- renderer w.r.t. albedo and lighting -----------------------------------------
    sample = sample_face(model, cfg, seed=seed, index=0)
    albedo = Tensor(sample.albedo_uv, requires_grad=True, dtype=np.float64)
    light_r = Tensor(sample.lighting, requires_grad=True, dtype=np.float64)
    geom = sample.geom
    # probe a handful of texels that are read by stable (non-edge) pixels
    amask = np.zeros((cfg.uv_h, cfg.uv_w, 3), dtype=bool)
    vis = raster.texel_visibility(model, sample.shape, sample.pose, geom)
    vr, vc = np.nonzero(vis)
    pick = rng.choice(len(vr), size=min(6, len(vr)), replace=False)
    amask[vr[pick], vc[pick], rng.integers(0, 3, size=len(pick))] = True

    def render_fn(a, l):
        img_t = raster.render(model, sample.shape, a, sample.pose, l, cfg.hw,
                              geom=geom)
        return ad.tmean(ad.mul(img_t, img_t))

    check("render(albedo)", lambda a: render_fn(a, Tensor(sample.lighting)),
          [albedo], masks=[amask])
    lmask = np.zeros(27, dtype=bool)
    lmask[[0, 2, 3, 9, 13, 20]] = True
    check("render(lighting)", lambda l: render_fn(Tensor(sample.albedo_uv), l),
          [light_r], masks=[lmask])
    return out
