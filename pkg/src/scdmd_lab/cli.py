"""Command-line entry point: ``scdmd-lab <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .ar import eval_long_rollout, init_ar_state, rollout_sequence
from .dmd import init_state
from .harness import checkpoint
from .harness.config import ConfigError, RunConfig, config_hash, load, resolved_grids
from .harness.metrics import encode
from .harness.runner import OUT_ENV, RunError, default_out, run, run_name
from .schedule import make_grid
from .teacher import get_path
from .transport import path_average_defect, path_defects, sample_k_steps

logger = logging.getLogger("scdmd_lab")

TRAIN_KIND = {"train-nonar": "nonar", "train-ar": "ar"}


def _config(args, kind: str) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig(kind=kind)
    if cfg.kind != kind:
        raise ConfigError("kind", f"{args.command} needs a {kind!r} config, got {cfg.kind!r}")
    return cfg


def _seeds(args, cfg: RunConfig) -> List[int]:
    return list(args.seeds) if args.seeds else list(cfg.seeds)


def _out(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.out_dir) if cfg.out_dir else default_out()


def _dry_run(cfg: RunConfig, seeds, out: Path):
    print(json.dumps({"kind": cfg.kind, "config_hash": config_hash(cfg), "run_dir": str(out / run_name(cfg)),
                      "seeds": seeds, "grids": resolved_grids(cfg)}, indent=2))


def cmd_train(args) -> int:
    cfg = _config(args, TRAIN_KIND[args.command])
    seeds, out = _seeds(args, cfg), _out(args, cfg)
    if args.dry_run:
        _dry_run(cfg, seeds, out)
        return 0
    results = run(cfg, out, seeds, Path(args.resume) if args.resume else None)
    for seed, res in results.items():
        print(f"seed {seed}: {res.directory}")
        print(encode(res.summary["eval"]))
    return 0


def _config_for_checkpoint(path: Path) -> RunConfig:
    for parent in path.resolve().parents:
        echo = parent / "config.echo.json"
        if echo.exists():
            return load(echo)
    raise RunError(f"no config.echo.json above {path}; pass --config")


def _load_state(args):
    if not args.checkpoint:
        raise RunError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    cfg = load(args.config) if args.config else _config_for_checkpoint(ckpt)
    header, _ = checkpoint.read(ckpt)
    cfg = cfg.with_seed(cfg.seeds[0])
    path = get_path(cfg.teacher.path)
    if cfg.kind == "ar":
        state = init_ar_state(cfg.distill, cfg.mixed, cfg.process, path)
    else:
        state = init_state(cfg.distill, cfg.teacher.build().dim, path)
    state, _ = checkpoint.load_into(ckpt, state)
    return cfg, state, header


def _emit(args, name: str, payload: dict):
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def cmd_eval_defect(args) -> int:
    cfg, state, header = _load_state(args)
    if cfg.kind == "ar":
        raise RunError("eval-defect takes a non-AR checkpoint")
    noise = np.random.default_rng(args.eval_seed).standard_normal((args.samples, state.generator.dim))
    rows = path_defects(state.generator, cfg.distill.grid_infer, cfg.distill.grid_train, noise)
    _emit(args, "defect.json", {"checkpoint_step": header["step"], "config_hash": header["config_hash"],
                                "path_average": path_average_defect(rows),
                                "intervals": [r.to_row() for r in rows]})
    return 0


def cmd_eval_long(args) -> int:
    cfg, state, header = _load_state(args)
    if cfg.kind != "ar":
        raise RunError("eval-long takes an AR checkpoint")
    n_long = args.horizon * cfg.process.n_chunks
    curve = eval_long_rollout(state.generator, cfg.process, n_long, args.k, args.samples, args.eval_seed,
                              cfg.distill.shift)
    _emit(args, "drift.json", {"checkpoint_step": header["step"], "config_hash": header["config_hash"],
                               "k": args.k, "n_chunks": n_long, "slope": curve.slope,
                               "per_chunk": curve.per_chunk})
    return 0


def cmd_sample(args) -> int:
    cfg, state, _ = _load_state(args)
    rng = np.random.default_rng(args.eval_seed)
    grid = make_grid(args.k, cfg.distill.shift)
    if cfg.kind == "ar":
        p = cfg.process
        chunks, _, _ = rollout_sequence(state.generator, p, grid, rng.standard_normal((args.samples, p.n_chunks,
                                                                                       p.chunk_dim)))
        samples = chunks.reshape(args.samples, -1)
    else:
        samples = sample_k_steps(state.generator, grid, rng.standard_normal((args.samples, state.generator.dim))).final
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / f"samples_k{args.k}.csv", samples, delimiter=",", fmt="%.10g")
        print(out / f"samples_k{args.k}.csv")
    else:
        np.savetxt(sys.stdout, samples, delimiter=",", fmt="%.10g")
    return 0


def cmd_report(args) -> int:
    from .harness.acceptance import ACCEPTANCE_SEEDS, run_acceptance
    from .harness.report import write_report

    out = Path(args.out) if args.out else default_out()
    if args.dry_run:
        print(json.dumps({"out": str(out), "suite": args.suite}, indent=2))
        return 0
    results = None
    if args.suite == "acceptance":
        only = [int(c) for c in args.criteria.split(",")] if args.criteria else None
        results = run_acceptance(out, only, args.seeds or ACCEPTANCE_SEEDS)
    path = write_report(out, results)
    print(path)
    return 0 if results is None or all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scdmd-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="JSON or YAML run config")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved grids, no compute")
        if seeds:
            p.add_argument("--seeds", "--seed", type=int, nargs="+", help="override the config's seed list")

    for name, text in (("train-nonar", "distill a 2-D mixture teacher"), ("train-ar", "train on the toy AR process")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--resume", help="checkpoint to resume from (one seed)")
        p.set_defaults(func=cmd_train)

    for name, func, text in (("eval-defect", cmd_eval_defect, "path defect of a non-AR checkpoint"),
                             ("eval-long", cmd_eval_long, "long-rollout drift of an AR checkpoint"),
                             ("sample", cmd_sample, "draw samples from a checkpoint")):
        p = sub.add_parser(name, help=text)
        common(p, seeds=False)
        p.add_argument("--checkpoint", help="checkpoint file (config.echo.json is found next to its run)")
        p.add_argument("--samples", type=int, default=2048 if name != "eval-long" else 512)
        p.add_argument("--eval-seed", type=int, default=12345)
        p.add_argument("--k", type=int, default=4, help="sampler step count")
        p.add_argument("--horizon", type=int, default=4, help="eval-long: multiple of the training horizon")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate runs under --out into report.json and plots")
    common(p)
    p.add_argument("--suite", choices=("none", "acceptance"), default="none",
                   help="'acceptance' runs criteria 1-10 first")
    p.add_argument("--criteria", help="comma-separated subset of criteria ids")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "dry_run", False) and args.command not in TRAIN_KIND and args.command != "report":
            if not (args.config or args.checkpoint):
                raise RunError("--dry-run needs --config or --checkpoint")
            cfg = load(args.config) if args.config else _config_for_checkpoint(Path(args.checkpoint))
            _dry_run(cfg, list(cfg.seeds), Path(args.out) if args.out else default_out())
            return 0
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RunError, checkpoint.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
