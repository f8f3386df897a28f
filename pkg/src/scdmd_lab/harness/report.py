"""Aggregate finished runs into ``report.json`` and plot data.

Every plot is written twice: ``plots/<name>.csv`` holds the data and
``plots/<name>.png`` a rendering of it.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import plain, read_records  # noqa: E402
from .runner import load_summaries  # noqa: E402

REPORT_VERSION = 1
CRITERIA_IDS = tuple(range(1, 11))
LOSS_KEYS = ("loss_critic", "loss_dmd", "loss_sc", "loss_align")


def _write_csv(path: Path, rows: List[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _line_plot(path: Path, rows: List[dict], x: str, y: str, group: Sequence[str], title: str,
               logy: bool = False):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = sorted({tuple(r[g] for g in group) for r in rows})
    for key in keys:
        pts = sorted((r[x], r[y]) for r in rows if tuple(r[g] for g in group) == key and r[y] is not None)
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o" if len(xs) < 40 else None, ms=3, lw=1,
                    label=", ".join(f"{g}={k}" for g, k in zip(group, key)))
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title, fontsize=9)
    if logy:
        ax.set_yscale("log")
    if len(keys) > 1:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _emit(plots: Path, name: str, rows: List[dict], x: str, y: str, group: Sequence[str], logy: bool = False):
    if not rows:
        return []
    _write_csv(plots / f"{name}.csv", rows)
    _line_plot(plots / f"{name}.png", rows, x, y, group, name, logy)
    return [f"{name}.csv", f"{name}.png"]


def _loss_rows(run_dir: Path, seeds: Sequence[int], stride: int) -> List[dict]:
    rows = []
    for s in seeds:
        path = run_dir / f"seed_{s}" / "metrics.jsonl"
        if not path.exists():
            continue
        for rec in read_records(path, "iter"):
            if rec["iter"] % stride:
                continue
            for key in LOSS_KEYS:
                if key in rec:
                    rows.append({"seed": s, "iter": rec["iter"], "loss": key, "value": rec[key]})
    return rows


def _stats(values: List[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0,
            "per_seed": [float(v) for v in a]}


def summarize_run(name: str, summaries: List[dict], run_dir: Path, plots: Path) -> dict:
    seeds = [s["seed"] for s in summaries]
    evals = [s["eval"] for s in summaries]
    kind = summaries[0]["kind"]
    files: List[str] = []
    agg: Dict[str, dict] = {}
    if kind == "nonar":
        agg["defect_path_average"] = _stats([e["defect_path_average"] for e in evals])
        agg["cross_step_consistency"] = _stats([e["cross_step_consistency"] for e in evals])
        for k in evals[0]["sliced_wasserstein"]:
            agg[f"sliced_wasserstein_k{k}"] = _stats([e["sliced_wasserstein"][k] for e in evals])
        sw = [{"seed": s, "k": int(k), "sliced_wasserstein": v}
              for s, e in zip(seeds, evals) for k, v in e["sliced_wasserstein"].items()]
        files += _emit(plots, f"{name}_sw_vs_k", sw, "k", "sliced_wasserstein", ("seed",))
        dr = [{"seed": s, "t_s": r["interval"][0], "t_e": r["interval"][1], "t_m": r["t_m"],
               "defect_mean": r["defect_mean"], "defect_stderr": r["defect_stderr"]}
              for s, e in zip(seeds, evals) for r in e["defect_intervals"]]
        files += _emit(plots, f"{name}_defect_intervals", dr, "t_m", "defect_mean", ("seed",), logy=True)
    else:
        for k in evals[0]["energy_mean"]:
            agg[f"energy_mean_k{k}"] = _stats([e["energy_mean"][k] for e in evals])
        agg["drift_slope_k4"] = _stats([e["drift_slope_k4"] for e in evals])
        ed = [{"seed": s, "k": int(k), "chunk": i, "energy_distance": v}
              for s, e in zip(seeds, evals) for k, curve in e["energy_per_chunk"].items() for i, v in enumerate(curve)]
        files += _emit(plots, f"{name}_energy_per_chunk", ed, "chunk", "energy_distance", ("k", "seed"))
        drift = [{"seed": s, "chunk": i, "energy_distance": v}
                 for s, e in zip(seeds, evals) for i, v in enumerate(e["drift_k4"])]
        files += _emit(plots, f"{name}_drift_k4", drift, "chunk", "energy_distance", ("seed",))
    iters = max(s["iterations"] for s in summaries)
    losses = _loss_rows(run_dir, seeds, max(1, iters // 200))
    files += _emit(plots, f"{name}_losses", losses, "iter", "value", ("loss", "seed"), logy=True)
    return {"kind": kind, "config_hash": summaries[0]["config_hash"], "seeds": seeds, "metrics": agg,
            "plots": files}


def write_report(out: Path, results: Optional[list] = None) -> Path:
    """Write ``<out>/report.json`` and ``<out>/plots``; ``results`` are acceptance results if any."""
    out = Path(out)
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    runs = {name: summarize_run(name, sums, out / name, plots) for name, sums in load_summaries(out).items()}
    report = {"report_version": REPORT_VERSION, "runs": runs}
    if results is not None:
        by_id = {r.id: r.to_dict() for r in results}
        report["criteria"] = [by_id.get(i, {"id": i, "passed": None, "summary": "not run"}) for i in CRITERIA_IDS]
        report["all_passed"] = all(by_id.get(i, {}).get("passed") is True for i in CRITERIA_IDS)
    path = out / "report.json"
    path.write_text(json.dumps(plain(report), indent=2, sort_keys=True) + "\n")
    return path
