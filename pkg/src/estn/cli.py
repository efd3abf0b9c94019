"""``estn`` command line: train, infer, eval, lam, inspect, check.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import selfcheck
from .attribution import lam, render_heatmap
from .config import MODEL_KEYS, model_config_from_dict, read_kv_file, split_known
from .imageio import ImageError, list_images, read_image, to_uint8, write_image
from .metrics import PEAK, PSNR_CAP, psnr, ssim
from .network import ConfigError, ModelConfig, build_model, count_params, flop_breakdown, forward
from .resample import bicubic_resize
from .serialize import (CorruptWeightsError, WeightShapeError, atomic_write_bytes, load_weights, read_config,
                        save_weights)
from .tensor import NonFiniteError, Tensor, no_grad
from .training import (TRAIN_KEYS, DataError, NumericalAbort, degrade, load_dataset, mod_crop,
                       train_config_from_dict, train_loop)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("estn")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _file_config(args) -> Tuple[Dict[str, str], Dict[str, str]]:
    if not getattr(args, "config", None):
        return {}, {}
    model_kv, train_kv = split_known(read_kv_file(args.config), [MODEL_KEYS, TRAIN_KEYS])
    return model_kv, train_kv


def _model_config(args, model_kv: Dict[str, str]) -> ModelConfig:
    if getattr(args, "scale", None) is not None:
        model_kv = {**model_kv, "scale": args.scale}
    return model_config_from_dict(model_kv)


def _parse_region(text: str) -> Tuple[int, int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise ConfigError(f"--region expects x,y,w,h integers, got {text!r}")
    return vals


def _weights_config(path, scale: Optional[int]) -> ModelConfig:
    """Config stored next to a weights file, checked against an explicit ``--scale``."""
    if not Path(path).is_file():
        raise ConfigError(f"weights file not found: {path}")
    cfg = read_config(path)
    if scale is not None and scale != cfg.scale:
        raise ConfigError(f"--scale {scale} does not match the weights (scale {cfg.scale})")
    return cfg


def _super_resolve(w, lr: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward(w, Tensor(lr)).data


@contextlib.contextmanager
def _thread_limit():
    raw = os.environ.get("ESTN_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"ESTN_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    model_kv, train_kv = _file_config(args)
    overrides = {k: v for k, v in (("seed", args.seed), ("iterations", args.iters), ("batch_size", args.batch),
                                   ("patch_size", args.patch), ("lr", args.lr),
                                   ("checkpoint_every", args.checkpoint_every)) if v is not None}
    if args.milestones is not None:
        overrides["milestones"] = args.milestones
    tcfg = train_config_from_dict({**train_kv, **overrides})
    mcfg = _model_config(args, model_kv)
    if not args.data:
        raise DataError("--data is required")
    data = load_dataset(args.data, mcfg.scale)
    small = [p for p in data if min(p.lr.shape[1:]) < tcfg.patch_size]
    if small:
        raise DataError(f"{len(small)} training image(s) give LR smaller than patch {tcfg.patch_size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = build_model(mcfg, seed=tcfg.seed)

    def report(it, lr, loss):
        if it % max(1, args.log_every) == 0 or it == tcfg.iterations - 1:
            log.info("iter %d lr %.3g loss %.6g", it, lr, loss)

    res = train_loop(w, data, tcfg, [report], out_dir=out)
    save_weights(w, out / "model.estn")
    if res.losses:
        first, last = res.losses[0][2], res.losses[-1][2]
        print(f"initial loss {first:.6g}  final loss {last:.6g}  ratio {last / first:.4f}")
    print(f"wrote {out / 'model.estn'} and {len(res.checkpoints)} checkpoint(s)")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _weights_config(args.weights, args.scale)
    lr = read_image(args.input)
    if min(lr.shape[1:]) < 2:
        raise DataError(f"input {args.input} must be at least 2x2")
    w = load_weights(args.weights, cfg)
    write_image(args.out, _super_resolve(w, lr))
    print(f"wrote {args.out} ({lr.shape[2] * cfg.scale}x{lr.shape[1] * cfg.scale})")
    return EXIT_OK


def _pair_dirs(sr_dir, hr_dir) -> List[Tuple[str, Path, Path]]:
    sr = {p.stem: p for p in list_images(sr_dir)}
    hr = {p.stem: p for p in list_images(hr_dir)}
    if not hr:
        raise DataError(f"no images in {hr_dir}")
    if set(sr) != set(hr):
        missing = sorted(set(sr) ^ set(hr))
        raise DataError(f"unpaired images: {', '.join(missing[:5])}")
    return [(k, sr[k], hr[k]) for k in sorted(hr)]


def eval_rows(pairs, border: int, ssim_mode: str) -> List[Tuple[str, float, float]]:
    rows = []
    for name, sr, hr in pairs:
        sr8, hr8 = to_uint8(sr).astype(np.float64), to_uint8(hr).astype(np.float64)
        if sr8.shape != hr8.shape:
            raise DataError(f"{name}: SR {sr8.shape[:2]} vs HR {hr8.shape[:2]}")
        sr8, hr8 = sr8.transpose(2, 0, 1), hr8.transpose(2, 0, 1)
        b = border if 2 * border < min(hr8.shape[1:]) else 0
        rows.append((name, min(psnr(sr8, hr8, b), PSNR_CAP), ssim(sr8, hr8, ssim_mode, b)))
    return rows


def eval_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["image", "psnr_db", "ssim"])
    for name, p, s in rows:
        wr.writerow([name, repr(float(p)), repr(float(s))])
    wr.writerow(["mean", repr(float(np.mean([r[1] for r in rows]))), repr(float(np.mean([r[2] for r in rows])))])
    return buf.getvalue()


def cmd_eval(args) -> int:
    if not args.hr:
        raise ConfigError("--hr is required")
    modes = [m for m in (args.sr, args.weights, args.method) if m]
    if len(modes) != 1:
        raise ConfigError("give exactly one of --sr DIR, --weights FILE, --method bicubic")
    if args.method and args.method != "bicubic":
        raise ConfigError(f"unknown --method {args.method!r}")
    if args.sr:
        named = _pair_dirs(args.sr, args.hr)
        scale = args.scale or 0
        pairs = [(k, read_image(s), read_image(h)) for k, s, h in named]
    else:
        hr_paths = list_images(args.hr)
        if not hr_paths:
            raise DataError(f"no images in {args.hr}")
        cfg = _weights_config(args.weights, args.scale) if args.weights else None
        scale = cfg.scale if cfg else (args.scale or 4)
        hrs = [(p.stem, mod_crop(read_image(p), scale)) for p in hr_paths]
        for name, hr in hrs:
            if min(hr.shape[1:]) < 2 * scale:
                raise DataError(f"{name} too small for scale {scale}")
        if cfg:
            w = load_weights(args.weights, cfg)
            up = lambda lr, hr: _super_resolve(w, lr)  # noqa: E731
        else:
            up = lambda lr, hr: bicubic_resize(lr, size=hr.shape[1:])  # noqa: E731
        pairs = []
        for name, hr in hrs:
            lr = to_uint8(degrade(hr, scale)).transpose(2, 0, 1).astype(np.float32) / PEAK
            pairs.append((name, up(lr, hr), hr))
    border = args.border if args.border is not None else scale
    text = eval_csv(eval_rows(pairs, border, args.ssim_mode))
    if args.out:
        atomic_write_bytes(args.out, text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_lam(args) -> int:
    region = _parse_region(args.region)
    if args.steps < 1 or args.sigma < 0:
        raise ConfigError("--steps must be >= 1 and --sigma >= 0")
    cfg = _weights_config(args.weights, args.scale)
    lr = read_image(args.input)
    x, y, rw, rh = region
    sh, sw = lr.shape[1] * cfg.scale, lr.shape[2] * cfg.scale
    if rw < 1 or rh < 1 or x < 0 or y < 0 or x + rw > sw or y + rh > sh:
        raise ConfigError(f"region {args.region} outside the {sw}x{sh} SR image")
    w = load_weights(args.weights, cfg)
    amap = lam(w, lr, region, steps=args.steps, sigma=args.sigma)
    out = Path(args.out)
    img_path, csv_path = render_heatmap(amap, out)
    meta = {"region": {"x": x, "y": y, "w": rw, "h": rh}, "steps": amap.steps, "sigma": amap.sigma,
            "readout_input": amap.readout_input, "readout_baseline": amap.readout_baseline,
            "attribution_sum": amap.total, "completeness_residual": amap.completeness_residual,
            "heatmap": str(img_path), "values_csv": str(csv_path)}
    atomic_write_bytes(out.with_suffix(".json"), (json.dumps(meta, indent=2) + "\n").encode())
    print(f"completeness residual {amap.completeness_residual:.3e} "
          f"(sum {amap.total:.6g}, readout gap {amap.readout_input - amap.readout_baseline:.6g})")
    return EXIT_OK


def inspect_report(cfg: ModelConfig, resolution=(1280, 720), convention: str = "mac") -> dict:
    w = build_model(cfg, seed=0)
    parts = flop_breakdown(cfg, resolution, convention)
    return {"scale": cfg.scale, "channels": cfg.channels, "blocks": cfg.blocks, "params": count_params(w),
            "flops": sum(parts.values()), "flops_g": sum(parts.values()) / 1e9, "convention": convention,
            "output_resolution": list(resolution), "breakdown": parts}


def cmd_inspect(args) -> int:
    if args.weights:
        cfg = _weights_config(args.weights, args.scale)
    else:
        model_kv, _ = _file_config(args)
        cfg = _model_config(args, model_kv)
    rep = inspect_report(cfg, tuple(args.resolution), args.convention)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
    else:
        print(f"scale x{rep['scale']}  C={rep['channels']}  I={rep['blocks']}")
        print(f"params {rep['params']:,}")
        print(f"FLOPs at {args.resolution[0]}x{args.resolution[1]} output: {rep['flops_g']:.2f}G ({args.convention})")
        for k, v in sorted(rep["breakdown"].items(), key=lambda kv: -kv[1]):
            print(f"  {k:<16} {v / 1e9:8.3f}G")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.sabotage and args.sabotage not in selfcheck.SABOTAGE:
        raise ConfigError(f"--sabotage must be one of {sorted(selfcheck.SABOTAGE)}")
    chosen = selfcheck.select(args.filter)
    if not chosen:
        raise ConfigError(f"no checks match {args.filter!r}")
    failed = 0
    with selfcheck.sabotaged(args.sabotage):
        for c in chosen:
            r = selfcheck.run_check(c, range(args.seeds))
            failed += not r.passed
            print(r.line(), flush=True)
    print(f"{len(chosen) - failed}/{len(chosen)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _int_list(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="estn", description="Lightweight swin-style super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=False):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--scale", type=int, help="upscale factor (2, 3 or 4)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file or directory")
        if weights:
            sp.add_argument("--weights", help="model .estn file (config read from its .cfg sidecar)")
        return sp

    t = common(sub.add_parser("train", help="train on a directory of HR images"))
    t.add_argument("--data", help="directory of HR images")
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--milestones", type=_int_list, help="comma-separated schedule units where lr halves")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train, out="runs/train")

    i = common(sub.add_parser("infer", help="super-resolve one image"), weights=True)
    i.add_argument("--input", required=True)
    i.set_defaults(func=cmd_infer)

    e = common(sub.add_parser("eval", help="Y-channel PSNR/SSIM table"), weights=True)
    e.add_argument("--hr", help="directory of HR ground truth")
    e.add_argument("--sr", help="directory of SR images paired by file stem")
    e.add_argument("--method", help="'bicubic' to score bicubic upscaling of degraded HR")
    e.add_argument("--data", dest="hr", help="alias of --hr")
    e.add_argument("--border", type=int, help="pixels cropped at each edge (default: scale)")
    e.add_argument("--ssim-mode", choices=("windowed", "global"), default="windowed")
    e.set_defaults(func=cmd_eval)

    a = common(sub.add_parser("lam", help="local attribution map for an SR region"), weights=True)
    a.add_argument("--input", required=True)
    a.add_argument("--region", required=True, help="x,y,w,h in SR pixels")
    a.add_argument("--steps", type=int, default=50, help="path integration steps M")
    a.add_argument("--sigma", type=float, default=2.0, help="Gaussian blur of the baseline")
    a.set_defaults(func=cmd_lam, out="lam.png")

    n = common(sub.add_parser("inspect", help="parameter count and FLOP estimate"), weights=True)
    n.add_argument("--json", action="store_true")
    n.add_argument("--resolution", type=int, nargs=2, default=(1280, 720), metavar=("W", "H"))
    n.add_argument("--convention", choices=("mac", "2mac"), default="mac", help="count a multiply-add as 1 or 2 FLOPs")
    n.set_defaults(func=cmd_inspect)

    c = sub.add_parser("check", help="run the invariant suite")
    c.add_argument("--filter", help="tag (gradient, attention, ...) or name substring")
    c.add_argument("--sabotage", help="inject a known fault: softmax, gelu or pixel_shuffle")
    c.add_argument("--seeds", type=int, default=2, help="random seeds per check")
    c.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, CorruptWeightsError, WeightShapeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, ImageError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericalAbort, NonFiniteError) as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
