"""Command-line surface.

Exit codes: 0 ok, 1 user error (bad flags, missing or malformed files,
size mismatches), 2 internal error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import raster, store
from .facemodel import FaceModel
from .synthmodel import SyntheticModelSpec, generate_synthetic_model

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _load_config(path: str | None) -> dict:
    """key=value overrides, one per line; '#' comments allowed."""
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file not found: {path}")
    out = {}
    for line in p.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"bad config line (need key=value): {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _pipeline_config(args, overrides: dict) -> pl.PipelineConfig:
    kw = {}
    for key in ("image_size", "uv_h", "uv_w", "d_shape", "d_expr", "model_seed"):
        if key in overrides:
            kw[key] = int(overrides[key])
    return pl.PipelineConfig(**kw)


def _load_model(path: str) -> FaceModel:
    p = Path(path)
    if not p.exists():
        raise UserError(f"model file not found: {path}")
    return FaceModel.from_entries(store.read_container(p).as_dict())


def _load_image(path: str, config: pl.PipelineConfig, what: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {path}")
    try:
        img = store.load_image(p)
    except store.ImageError as exc:
        raise UserError(str(exc)) from exc
    if img.shape[:2] != config.hw:
        raise UserError(f"{what} size {img.shape[1]}x{img.shape[0]} does not match "
                        f"the configured {config.image_size}^2")
    return img[:, :, :3].astype(np.float64)


def _load_mask(path: str | None, config: pl.PipelineConfig) -> np.ndarray:
    if path is None:
        return np.zeros(config.hw)
    img = _load_image(path, config, "mask")
    return (img.mean(axis=2) >= 0.5).astype(np.float64)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key=value override file")
    p.add_argument("--out", default=None, help="output path or prefix")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="morphfill", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-model", help="generate the synthetic face model")
    _add_common(p)
    p.add_argument("--vertex-count", type=int, default=2562)

    p = sub.add_parser("render", help="render a seeded synthetic face to PNG")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("factorize", help="factorize a masked image")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--encoder", required=True)

    p = sub.add_parser("complete", help="inpaint a masked face image")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--inpainter", default=None,
                   help="inpainter checkpoint (identity fill when omitted)")
    p.add_argument("--iters", type=int, default=2)

    p = sub.add_parser("train-3dmm", help="train the factorization module")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--faces", type=int, default=32)
    p.add_argument("--steps1", type=int, default=300)
    p.add_argument("--steps2", type=int, default=100)

    p = sub.add_parser("train-inpainter", help="train the albedo inpainter")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--encoder", default=None,
                   help="frozen encoder checkpoint (oracle factors when omitted)")
    p.add_argument("--faces", type=int, default=32)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--variant", choices=("sym", "plain"), default="sym")
    p.add_argument("--no-gan", action="store_true")

    p = sub.add_parser("eval", help="binned PSNR/SSIM evaluation")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--inpainter", default=None)
    p.add_argument("--n-per-bin", type=int, default=20)
    p.add_argument("--iters", type=int, default=2)

    p = sub.add_parser("gradcheck", help="run the finite-difference check suite")
    _add_common(p)

    p = sub.add_parser("render-views", help="complete, then synthesize yawed views")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--encoder", required=True)
    p.add_argument("--inpainter", default=None)
    p.add_argument("--yaws", default="-30,0,30", help="comma-separated degrees")
    return ap


def _cmd_gen_model(args, overrides):
    cfg = _pipeline_config(args, overrides)
    spec = SyntheticModelSpec(vertex_count=args.vertex_count, d_shape=cfg.d_shape,
                              d_expr=cfg.d_expr, uv_h=cfg.uv_h, uv_w=cfg.uv_w,
                              seed=args.seed)
    model = generate_synthetic_model(spec)
    out = args.out or "facemodel.af3d"
    store.write_container(out, model.to_entries())
    print(f"wrote {out}: {model.n_vertices} vertices, {model.n_triangles} triangles, "
          f"UV {model.uv_shape[0]}x{model.uv_shape[1]}")
    return EXIT_OK


def _cmd_render(args, overrides):
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    s = pl.sample_face(model, cfg, seed=args.seed, index=args.index)
    out = args.out or f"face_{args.seed}_{args.index}.png"
    store.save_image(out, s.image)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_factorize(args, overrides):
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    image = _load_image(args.image, cfg, "image")
    mask = _load_mask(args.mask, cfg)
    encoder, _, _ = pl.load_encoder_checkpoint(args.encoder, cfg)
    fac = pl.factorize(image, mask, encoder, model, cfg)
    prefix = args.out or "factorized"
    store.save_image(f"{prefix}_albedo.png", fac.partial_albedo)
    store.save_image(f"{prefix}_uvmask.png", fac.uv_mask)
    store.save_image(f"{prefix}_shade.png", np.clip(fac.shade, 0, 1))
    store.write_container(f"{prefix}.af3d", {
        "shape_coeffs": fac.shape_coeffs,
        "lighting": fac.lighting,
        "pose": np.array([fac.pose.scale, fac.pose.yaw, fac.pose.roll,
                          fac.pose.pitch, fac.pose.tx, fac.pose.ty]),
        "partial_albedo": fac.partial_albedo,
        "uv_mask": fac.uv_mask.astype(np.float64),
    })
    print(f"wrote {prefix}_albedo.png, {prefix}_uvmask.png, {prefix}_shade.png, {prefix}.af3d")
    return EXIT_OK


def _cmd_complete(args, overrides):
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    image = _load_image(args.image, cfg, "image")
    mask = _load_mask(args.mask, cfg)
    encoder, _, _ = pl.load_encoder_checkpoint(args.encoder, cfg)
    inpainter = None
    if args.inpainter:
        inpainter, _, _ = pl.load_inpainter_checkpoint(args.inpainter)
    if args.iters < 1:
        raise UserError("--iters must be at least 1")
    res = pl.complete(image, mask, encoder, inpainter, model, cfg, iters=args.iters)
    out = args.out or "completed.png"
    store.save_image(out, res.final.blended)
    print(f"wrote {out} after {len(res.iterations)} iteration(s)")
    return EXIT_OK


def _cmd_train_3dmm(args, overrides):
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    ds = pl.make_dataset(model, cfg, args.faces, seed=args.seed)
    tcfg = pl.TrainConfig3DMM(stage1_steps=args.steps1, stage2_steps=args.steps2,
                              seed=args.seed)
    encoder, decoder, history = pl.train_3dmm(ds, model, cfg, tcfg)
    out = args.out or "encoder.ckpt"
    pl.save_checkpoint(out, {"encoder": encoder, "decoder": decoder},
                       {"kind": "3dmm", "seed": args.seed})
    print(f"wrote {out}; final loss {history[-1]['total']:.4f}")
    return EXIT_OK


def _cmd_train_inpainter(args, overrides):
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    encoder = None
    if args.encoder:
        encoder, _, _ = pl.load_encoder_checkpoint(args.encoder, cfg)
    ds = pl.make_dataset(model, cfg, args.faces, seed=args.seed)
    tcfg = pl.TrainConfigInpainter(steps=args.steps, variant=args.variant,
                                   use_gan=not args.no_gan, seed=args.seed)
    net, disc, history, info = pl.train_inpainter(ds, encoder, model, cfg, tcfg)
    out = args.out or "inpainter.ckpt"
    pl.save_checkpoint(out, {"inpainter": net, "disc": disc},
                       {"kind": "inpainter", "variant": args.variant,
                        "seed": args.seed})
    print(f"wrote {out}; G/D updates {info['g_updates']}/{info['d_updates']}, "
          f"final loss {history[-1]['total']:.4f}")
    return EXIT_OK


def _cmd_eval(args, overrides):
    from .evalbin import eval_binned
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    encoder = inpainter = None
    if args.encoder:
        encoder, _, _ = pl.load_encoder_checkpoint(args.encoder, cfg)
    if args.inpainter:
        inpainter, _, _ = pl.load_inpainter_checkpoint(args.inpainter)
    prefix = args.out or "eval"
    report = eval_binned(model, cfg, encoder, inpainter, n_per_bin=args.n_per_bin,
                         seed=args.seed, iters=args.iters, out_prefix=prefix,
                         oracle_factors=encoder is None)
    print(f"wrote {prefix}.csv, {prefix}_baseline.csv, {prefix}.png")
    print(f"overall: PSNR {report.overall_psnr:.2f} dB, SSIM {report.overall_ssim:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args, overrides):
    from .checksuite import run_gradcheck_suite
    reports = run_gradcheck_suite(seed=args.seed)
    worst = 0.0
    ok = True
    for name, rep in reports:
        status = "pass" if rep.passed else "FAIL"
        print(f"{status}  {name}: max rel err {rep.max_rel_err:.2e} "
              f"({rep.n_checked} coords)")
        worst = max(worst, rep.max_rel_err)
        ok &= rep.passed
    print(f"{'all checks passed' if ok else 'FAILURES'}; worst rel err {worst:.2e}")
    return EXIT_OK if ok else EXIT_INTERNAL


def _cmd_render_views(args, overrides):
    cfg = _pipeline_config(args, overrides)
    model = _load_model(args.model)
    image = _load_image(args.image, cfg, "image")
    mask = _load_mask(args.mask, cfg)
    encoder, _, _ = pl.load_encoder_checkpoint(args.encoder, cfg)
    inpainter = None
    if args.inpainter:
        inpainter, _, _ = pl.load_inpainter_checkpoint(args.inpainter)
    try:
        yaws = [float(v) for v in args.yaws.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UserError(f"bad --yaws list: {args.yaws!r}") from exc
    res = pl.complete(image, mask, encoder, inpainter, model, cfg, iters=2,
                      identity_fill="sample")
    fac = pl.factorize(res.final.blended, np.zeros(cfg.hw), encoder, model, cfg)
    views = raster.render_views(model, fac.shape, res.final.albedo_uv,
                                fac.lighting, [np.deg2rad(v) for v in yaws], cfg.hw)
    prefix = args.out or "view"
    for yaw_deg, img in zip(yaws, views):
        store.save_image(f"{prefix}_{yaw_deg:+.0f}.png", img)
    print(f"wrote {len(views)} view(s) to {prefix}_*.png")
    return EXIT_OK


_COMMANDS = {
    "gen-model": _cmd_gen_model,
    "render": _cmd_render,
    "factorize": _cmd_factorize,
    "complete": _cmd_complete,
    "train-3dmm": _cmd_train_3dmm,
    "train-inpainter": _cmd_train_inpainter,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "render-views": _cmd_render_views,
}


def main(argv=None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    try:
        args = build_parser().parse_args(argv)
        overrides = _load_config(args.config)
        return _COMMANDS[args.cmd](args, overrides)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (store.ContainerError, store.ImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
