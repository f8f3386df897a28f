"""Run orchestration: one directory per run, one subdirectory per seed.

Layout::

    <out>/<run_name>/config.echo.json
    <out>/<run_name>/seed_<k>/metrics.jsonl
    <out>/<run_name>/seed_<k>/checkpoints/step_<n>.ckpt
    <out>/<run_name>/seed_<k>/final.ckpt
    <out>/<run_name>/seed_<k>/summary.json

``metrics.jsonl`` holds a header record, one record per iteration and a final
record with the evaluation block.  Nothing in it depends on wall time, so
identical config and seed give identical bytes.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from ..ar import ar_streams, init_ar_state, train_ar
from ..dmd import init_state, rng_streams, train_nonar
from ..teacher import get_path
from . import checkpoint
from .config import RunConfig, config_hash, dumps
from .evaluate import evaluate_ar, evaluate_nonar
from .metrics import METRICS_VERSION, MetricsWriter, encode, truncate_after

logger = logging.getLogger(__name__)

OUT_ENV = "SCDMD_LAB_OUT"
DEFAULT_OUT = "runs"


class RunError(RuntimeError):
    pass


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def run_name(config: RunConfig) -> str:
    return f"{config.kind}-{config_hash(config)[:8]}"


def run_id(config: RunConfig, seed: int) -> str:
    return f"{run_name(config)}-s{seed}"


@dataclass
class SeedResult:
    seed: int
    directory: Path
    summary: dict


def _writable(directory: Path):
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RunError(f"output directory {directory} is not writable: {exc}") from None


def _checkpoint_path(seed_dir: Path, step: int) -> Path:
    return seed_dir / "checkpoints" / f"step_{step:07d}.ckpt"


def train_seed(config: RunConfig, seed: int, run_dir: Path, resume: Optional[Path] = None) -> SeedResult:
    """Train and evaluate one seed; returns the summary written to ``summary.json``."""
    if config.kind not in ("nonar", "ar"):
        raise RunError(f"cannot train a {config.kind!r} config")
    cfg = config.with_seed(seed)
    chash = config_hash(config)
    rid = run_id(config, seed)
    seed_dir = run_dir / f"seed_{seed}"
    _writable(seed_dir)
    path = get_path(cfg.teacher.path)
    metrics_path = seed_dir / "metrics.jsonl"

    if cfg.kind == "nonar":
        gmm = cfg.teacher.build()
        state = init_state(cfg.distill, gmm.dim, path)
        streams = rng_streams(seed)
    else:
        state = init_ar_state(cfg.distill, cfg.mixed, cfg.process, path)
        streams = ar_streams(seed)

    if resume is not None:
        state, streams = checkpoint.load_into(resume, state, expected_hash=chash)
        if streams is None:
            raise RunError(f"{resume} carries no RNG state and cannot be resumed")
        truncate_after(metrics_path, state.step)
        logger.info("resuming %s from step %d", rid, state.step)
    elif metrics_path.exists():
        metrics_path.unlink()

    writer = MetricsWriter(metrics_path, rid, chash)
    if state.step == 0:
        writer.write({"metrics_version": METRICS_VERSION, "seed": seed, "kind": cfg.kind}, kind="header")

    def callback(st, rec, live_streams):
        writer.write(rec)
        every = cfg.checkpoint_every
        if every and st.step % every == 0 and st.step < cfg.distill.iterations:
            checkpoint.save(_checkpoint_path(seed_dir, st.step), st, chash, live_streams)

    with writer:
        if cfg.kind == "nonar":
            state, _ = train_nonar(cfg.distill, gmm, path, callback, state, streams)
            ev = evaluate_nonar(state, gmm, cfg.eval.n_samples, cfg.eval.n_projections,
                                cfg.eval.step_counts, cfg.eval.seed)
        else:
            state, _ = train_ar(cfg.distill, cfg.mixed, cfg.process, path, callback, state, streams)
            ev = evaluate_ar(state, cfg.process, min(cfg.eval.n_samples, 512),
                             tuple(k for k in cfg.eval.step_counts if k > 1), cfg.eval.long_horizon, cfg.eval.seed)
        writer.write({"iter": state.step, "eval": ev}, kind="final")
    checkpoint.save(seed_dir / "final.ckpt", state, chash)
    summary = {"run_id": rid, "config_hash": chash, "seed": seed, "kind": cfg.kind,
               "iterations": state.step, "eval": ev}
    (seed_dir / "summary.json").write_text(encode(summary) + "\n")
    return SeedResult(seed, seed_dir, summary)


def run(config: RunConfig, out: Optional[Path] = None, seeds: Optional[List[int]] = None,
        resume: Optional[Path] = None) -> Dict[int, SeedResult]:
    """Seed sweep for one config, seeds run one after another."""
    out = Path(out) if out is not None else Path(config.out_dir) if config.out_dir else default_out()
    run_dir = out / run_name(config)
    _writable(run_dir)
    (run_dir / "config.echo.json").write_text(dumps(config) + "\n")
    seeds = list(seeds if seeds is not None else config.seeds)
    if resume is not None and len(seeds) != 1:
        raise RunError("--resume takes exactly one seed")
    return {s: train_seed(config, s, run_dir, resume) for s in seeds}


def load_summaries(out: Path) -> Dict[str, List[dict]]:
    """``{run_name: [summary per seed]}`` for every finished seed under ``out``."""
    found: Dict[str, List[dict]] = {}
    for path in sorted(Path(out).glob("*/seed_*/summary.json")):
        found.setdefault(path.parent.parent.name, []).append(json.loads(path.read_text()))
    for runs in found.values():
        runs.sort(key=lambda s: s["seed"])
    return found
