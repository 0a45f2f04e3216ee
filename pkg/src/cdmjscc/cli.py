"""Command-line entry point: ``cdmjscc {train,transmit,eval,gradcheck,selftest}``.

Exit codes: 0 success, 1 validation error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import link
from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config, load_config
from .errors import FormatError
from .imageio import ImageFormatError, center_crop_multiple_of_4, load_images, read_pnm, write_ppm
from .numerics import RngStream
from .transforms import ModelConfig

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _snr_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty SNR list")
    return values


def _u32(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 32:
        raise argparse.ArgumentTypeError(f"{text} is not a u32")
    return value


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"{text} is not a u64")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdmjscc", description="Rate-adaptive diffusion JSCC image link at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=_u64)
        p.add_argument("--precision", type=int, choices=(32, 64))

    p = sub.add_parser("train", help="run one or all training stages")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="input checkpoint for --stage 2 or 3")
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--steps", type=_u32, help="override the step count of every stage run")
    common(p)

    p = sub.add_parser("transmit", help="send one image over the simulated channel")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--snr", type=_snr_list, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame")
    p.add_argument("--n-test", type=_u32)
    common(p)

    p = sub.add_parser("eval", help="SNR sweep over a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--snr", type=_snr_list, required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--n-test", type=_u32)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    p = sub.add_parser("selftest", help="run the acceptance suite")
    return parser


def _echo(cfg: TrainConfig, model_cfg: ModelConfig, out) -> None:
    out.write("# resolved config\n")
    out.write(dump_config(cfg, model_cfg))


def _overrides(args, cfg: TrainConfig) -> TrainConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        changes["precision"] = args.precision
    if getattr(args, "n_test", None) is not None:
        changes["n_test"] = args.n_test
    if getattr(args, "steps", None) is not None:
        changes.update(steps_stage1=args.steps, steps_stage2=args.steps, steps_stage3=args.steps)
    return cfg.replace(**changes)


def _cmd_train(args, out) -> int:
    from . import pipeline

    if args.config:
        cfg, model_cfg = load_config(args.config)
    else:
        cfg, model_cfg = TrainConfig(), ModelConfig()
    ckpt = None
    if args.stage in ("2", "3"):
        if not args.ckpt:
            raise UsageError(f"--stage {args.stage} needs --ckpt")
        ckpt = load_checkpoint(args.ckpt)
        if not args.config:
            cfg, model_cfg = ckpt.config, ckpt.model_config
        if model_cfg != ckpt.model_config:
            raise UsageError("config model.* keys differ from the checkpoint's architecture")
    cfg = _overrides(args, cfg)
    _echo(cfg, model_cfg, out)
    if args.stage == "all":
        result = pipeline.train_all(cfg, model_cfg)[-1]
    elif args.stage == "1":
        result = pipeline.train_stage1(cfg, model_cfg)
    elif args.stage == "2":
        result = pipeline.train_stage2(cfg, ckpt)
    else:
        result = pipeline.train_stage3(cfg, ckpt)
    save_checkpoint(result, args.out)
    out.write(f"wrote stage-{result.stage} checkpoint {args.out}\n")
    return EXIT_OK


def _load_for_inference(args, out):
    ckpt = load_checkpoint(args.ckpt)
    cfg = _overrides(args, ckpt.config)
    ckpt.config = cfg
    _echo(cfg, ckpt.model_config, out)
    nm.set_precision(cfg.precision)
    return ckpt, cfg


def _cmd_transmit(args, out) -> int:
    from .pipeline import transmit

    if len(args.snr) != 1:
        raise UsageError("transmit takes a single --snr value")
    ckpt, cfg = _load_for_inference(args, out)
    image = center_crop_multiple_of_4(read_pnm(args.input)).astype(nm.get_dtype())
    model = ckpt.build_model()
    tx = transmit(model, image, cfg, args.snr[0], RngStream(cfg.seed), cfg.n_test)
    write_ppm(args.out, tx.reconstruction)
    if args.frame:
        frame = tx.frame
        if frame is None:
            order = link.checkerboard_order(image.shape[1] // 4, image.shape[2] // 4)
            frame = link.SymbolFrame(np.zeros(0, complex), tx.rate_map, order,
                                     ckpt.model_config.latent_channels, 0.0, 0.0)
        Path(args.frame).write_bytes(link.encode_frame(frame))
    out.write(f"k_total={tx.rate_map.k_total} cbr={tx.cbr:.6f} rate_bits={tx.rate_bits:.2f}\n")
    return EXIT_OK


def _cmd_eval(args, out) -> int:
    from .pipeline import evaluate, write_csv

    ckpt, cfg = _load_for_inference(args, out)
    names, images = load_images(args.images)
    images = [center_crop_multiple_of_4(im) for im in images]
    rows = evaluate(ckpt, images, args.snr, cfg.seed, names, cfg.n_test)
    write_csv(rows, args.csv)
    summary = rows[-1]
    out.write(f"{len(rows) - 1} rows; mean psnr {summary['psnr_db']:.3f} dB, mean cbr {summary['cbr']:.5f}\n")
    return EXIT_OK


def _cmd_gradcheck(args, out) -> int:
    from .gradcheck import run_all

    results = run_all()
    for r in results:
        out.write(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} seed={r.seed}  err={r.error:.3e}\n")
    failed = sum(not r.passed for r in results)
    out.write(f"{len(results) - failed}/{len(results)} checks passed\n")
    return EXIT_OK if failed == 0 else EXIT_INVALID


def _cmd_selftest(args, out) -> int:
    from .acceptance import run_suite

    results = run_suite()
    for r in results:
        out.write(f"{'PASS' if r.passed else 'FAIL'}  criterion {r.number:>2}  {r.title}: {r.detail}\n")
    failed = sum(not r.passed for r in results)
    out.write(f"{len(results) - failed}/{len(results)} criteria passed\n")
    return EXIT_OK if failed == 0 else EXIT_INVALID


COMMANDS = {"train": _cmd_train, "transmit": _cmd_transmit, "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck, "selftest": _cmd_selftest}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except (OSError, FormatError, ImageFormatError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_IO
    except (ValueError, ArithmeticError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
