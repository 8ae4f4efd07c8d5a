"""Command-line entry point.

Settings resolve as built-in defaults, then the ``--config`` JSON file, then
explicit flags.  The config file may hold any of the sections ``denoiser``,
``schedule``, ``losses``, ``train`` and ``inference``; keys match the fields
of the corresponding dataclasses.

Exit codes: 0 success, 1 usage error, 2 data or model error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import generate_synthetic, load_dataset, load_sample_file, save_dataset, write_pgm
from .errors import DataError, InvariantError, ModelError
from .losses import LossWeights
from .metrics import evaluate
from .sampler import MODES, InferenceConfig, case_rng, predict_mask
from .schedule import ScheduleSpec, build_sigmoid_schedule, format_table
from .trainer import TrainConfig, Trainer, load_checkpoint, new_model

log = logging.getLogger("sdpm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train.log"

DENOISER_DEFAULTS = {"base_channels": 16, "depth": 2, "time_embed_dim": 32, "attention_at": None, "seed": 0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return dims[0], dims[1]


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        conf = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(conf, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(conf) - {"denoiser", "schedule", "losses", "train", "inference"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    return conf


def _merge(defaults: dict, section: dict | None, flags: dict) -> dict:
    """defaults < config section < flags that were given explicitly."""
    out = dict(defaults)
    for src in (section or {}, {k: v for k, v in flags.items() if v is not None}):
        unknown = set(src) - set(defaults)
        if unknown:
            raise UsageError(f"unknown settings {sorted(unknown)}")
        out.update(src)
    return out


def _inference_config(args, conf: dict, T: int) -> InferenceConfig:
    defaults = InferenceConfig().to_dict()
    flags = {"T_i": args.ti, "d_i": args.di, "nu": args.nu, "N_sal": args.n, "N_infer": args.n,
             "threshold": args.tau, "seed": args.seed}
    try:
        cfg = InferenceConfig(**_merge(defaults, conf.get("inference"), flags))
        cfg.validate(T)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _echo(kind: str, **config) -> dict:
    return {"tool": "sdpm", "tool_version": __version__, "kind": kind, "config": config}


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    try:
        ds = generate_synthetic(args.n, size=args.size, contrast=args.contrast, rng=args.seed,
                                lesion_free_frac=args.lesion_free_frac, prefix=args.prefix)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(ds, args.out, extra=_echo("dataset", **ds.generator, prefix=args.prefix))
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _read_config(args.config)
    out = Path(args.out)
    ckpt_path = out / CHECKPOINT_NAME
    data = load_dataset(args.data)
    flags = {"i_max": args.iters, "batch_size": args.batch, "seed": args.seed,
             "lr_init": args.lr_init, "lr_min": args.lr_min, "checkpoint_every": args.checkpoint_every}
    try:
        tdefaults = TrainConfig().to_dict()
        tcfg = TrainConfig.from_dict(_merge(tdefaults, conf.get("train"), flags))
        if args.resume and ckpt_path.exists():
            trainer = load_checkpoint(ckpt_path).trainer(data.samples, tcfg)
            trainer.model.train()
            log.info("resuming from iteration %d", trainer.iteration)
        else:
            s = _merge(asdict(ScheduleSpec()), conf.get("schedule"), {"T": args.t_steps})
            sched = build_sigmoid_schedule(ScheduleSpec(**s))
            weights = LossWeights(**_merge(LossWeights().to_dict(), conf.get("losses"), {}))
            d = _merge(DENOISER_DEFAULTS, conf.get("denoiser"), {})
            d["attention_at"] = None if d["attention_at"] is None else set(d["attention_at"])
            model = new_model(data.shape, sched.T, **d)
            trainer = Trainer(model, sched, weights, tcfg, data.samples)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    trainer.run_config = {"data": str(args.data), "n_samples": len(data), "data_generator": data.generator}
    out.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume and trainer.iteration else "w"
    with open(out / LOG_NAME, mode) as f:
        trainer.run(log_file=f, checkpoint_path=ckpt_path)
    trainer.save(ckpt_path)
    print(f"trained to iteration {trainer.iteration}; checkpoint {ckpt_path}")
    return EXIT_OK


def _load_inputs(paths) -> list:
    samples = []
    for p in map(Path, paths):
        if p.is_dir():
            samples.extend(load_dataset(p).samples)
        elif p.is_file():
            samples.append(load_sample_file(p))
        else:
            raise DataError(f"input not found: {p}")
    return samples


def _map(fn, n: int, workers: int) -> list:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def cmd_infer(args) -> int:
    conf = _read_config(args.config)
    ck = load_checkpoint(args.model)
    cfg = _inference_config(args, conf, ck.sched.T)
    samples = _load_inputs(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = _echo("mask", mode=args.mode, inference=cfg.to_dict(ck.sched.T), model=str(args.model),
                 model_config=ck.header["config"])

    def run(i):
        s = samples[i]
        mask = predict_mask(ck.model, ck.sched, s.image, args.mode, cfg, case_rng(cfg.seed, i))
        meta = {**echo, "input_id": s.id, "index": i, "positive_pixels": int(mask.sum())}
        write_pgm(out / f"{s.id}.pgm", mask, comment=f"sdpm {__version__} mode={args.mode} id={s.id}")
        (out / f"{s.id}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return s.id

    ids = _map(run, len(samples), args.workers)
    print(f"wrote {len(ids)} masks to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    conf = _read_config(args.config)
    ck = load_checkpoint(args.model)
    cfg = _inference_config(args, conf, ck.sched.T)
    data = load_dataset(args.data)
    if data.shape != tuple(ck.model.config.input_size):
        raise ModelError(f"dataset images {data.shape} do not match model input {ck.model.config.input_size}")
    config = _echo("report", mode=args.mode, inference=cfg.to_dict(ck.sched.T), model=str(args.model),
                   data=str(args.data), model_config=ck.header["config"])

    def predictor(i, s):
        return predict_mask(ck.model, ck.sched, s.image, args.mode, cfg, case_rng(cfg.seed, i))

    report = evaluate(predictor, data, config=config, workers=args.workers)
    if args.out_report:
        report.write(args.out_report)
    print(report.table())
    print(f"digest {report.digest()}")
    return EXIT_OK


def cmd_inspect_schedule(args) -> int:
    try:
        sched = build_sigmoid_schedule(T=args.t_steps, beta_min=args.beta_min, beta_max=args.beta_max,
                                       sharpness=args.sharpness)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(format_table(sched))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_inference_flags(p):
    p.add_argument("--mode", choices=MODES, default="all", help="estimator (default: all)")
    p.add_argument("--ti", type=int, help="start time of the reverse chain and salient window (default: T // 2)")
    p.add_argument("--di", type=float, help="label-chain noise damping in [0, 1) (default: 0.5)")
    p.add_argument("--nu", type=float, help="salience exponent > 1 (default: 2)")
    p.add_argument("--n", type=int, help="repeat count for sal and infer modes (default: 100 sal, 50 infer)")
    p.add_argument("--tau", type=float, help="binarization threshold (default: 0.5)")
    p.add_argument("--seed", type=int, help="inference seed (default: 0)")
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.add_argument("--workers", type=int, default=1, help="concurrent cases (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdpm", description="Shared-noise diffusion segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"sdpm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic lesion dataset")
    p.add_argument("--n", type=int, default=200, help="number of samples (default: 200)")
    p.add_argument("--size", type=_size, default=(64, 64), help="N or HxW (default: 64)")
    p.add_argument("--contrast", type=float, default=0.3, help="lesion intensity offset (default: 0.3)")
    p.add_argument("--lesion-free-frac", type=float, default=0.2, help="share of empty cases (default: 0.2)")
    p.add_argument("--prefix", default="case", help="sample id prefix (default: case)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help=f"output directory for {CHECKPOINT_NAME} and {LOG_NAME}")
    p.add_argument("--iters", type=int, help="total iterations (default: 2000)")
    p.add_argument("--batch", type=int, help="batch size (default: 8)")
    p.add_argument("--seed", type=int, help="training seed (default: 0)")
    p.add_argument("--t-steps", type=int, help="diffusion steps T (default: 500)")
    p.add_argument("--lr-init", type=float, help="initial learning rate (default: 1e-4)")
    p.add_argument("--lr-min", type=float, help="final learning rate (default: 6e-5)")
    p.add_argument("--checkpoint-every", type=int, help="save every k iterations, 0 = only at the end")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint in --out")
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict masks for images")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, nargs="+", help="sample files or dataset directories")
    p.add_argument("--out", required=True, help="output directory for .pgm masks and .json sidecars")
    _add_inference_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a model on a labelled dataset")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out-report", help="JSON report path (a .txt table is written alongside)")
    _add_inference_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-schedule", help="print the noise schedule table")
    p.add_argument("--t-steps", type=int, default=500, help="diffusion steps T (default: 500)")
    p.add_argument("--beta-min", type=float, default=1e-4, help="(default: 1e-4)")
    p.add_argument("--beta-max", type=float, default=0.02, help="(default: 0.02)")
    p.add_argument("--sharpness", type=float, default=6.0, help="sigmoid steepness k (default: 6)")
    p.set_defaults(func=cmd_inspect_schedule)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
