"""Euler transport, K-step samplers and the local semigroup-defect diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .schedule import TimestepGrid, adjacent_triples
from .teacher import RECTIFIED, NoisePath

DEFECT_EPS = 1e-8


@dataclass
class RolloutTrace:
    timesteps: List[float]
    states: List[np.ndarray]
    solver: str = "euler"
    features: Optional[List[np.ndarray]] = None
    context: Optional[object] = None

    def __post_init__(self):
        if len(self.timesteps) != len(self.states):
            raise ValueError("timesteps and states must have equal length")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _check_order(t_from: float, t_to: float):
    if not t_from > t_to >= 0.0:
        raise ValueError(f"Euler transport needs t_from > t_to >= 0, got {t_from} -> {t_to}")


def euler_step(v: Callable, x: np.ndarray, t_from: float, t_to: float, c=None) -> np.ndarray:
    _check_order(t_from, t_to)
    return x - (t_from - t_to) * v(x, t_from, c)


def cm_step(v: Callable, x, t_from: float, t_to: float, eps, c=None, path: NoisePath = RECTIFIED):
    """Predict the clean point with the rectified readout, then re-noise to ``t_to`` with ``eps``."""
    _check_order(t_from, t_to)
    x0_hat = x - t_from * v(x, t_from, c)
    return path.alpha(t_to) * x0_hat + path.sigma(t_to) * eps


def predicted_noise(v: Callable, x, t, c=None, path: NoisePath = RECTIFIED):
    """Noise implied by the velocity on the rectified path (``x = (1-t) x0 + t eps``)."""
    x0_hat = x - t * v(x, t, c)
    return (x - path.alpha(t) * x0_hat) / path.sigma(t)


def _evaluate(v, x, t, c, want_features):
    if want_features and hasattr(v, "forward"):
        cache = v.forward(x, t, c)
        return cache.output, cache.features
    return v(x, t, c), None


def sample_k_steps(
    v: Callable,
    grid: TimestepGrid,
    noise: np.ndarray,
    c=None,
    solver: str = "euler",
    rng: Optional[np.random.Generator] = None,
    record_features: bool = False,
    path: NoisePath = RECTIFIED,
) -> RolloutTrace:
    """Run the K-point sampler from ``noise`` at ``grid[0]``.

    Steps move between consecutive grid points; the last evaluation, at
    ``grid[-1]``, reads out the clean prediction ``x - t v``.  The trace has
    ``K + 1`` states, the last one at ``t = 0``.
    """
    if solver not in ("euler", "cm"):
        raise ValueError(f"unknown solver {solver!r}")
    if solver == "cm" and rng is None:
        raise ValueError("the cm solver needs an rng for re-noising")
    pts = grid.with_terminal()
    x = np.array(noise, dtype=np.float64)
    states, feats = [x], []
    for t_from, t_to in zip(pts, pts[1:]):
        vel, f = _evaluate(v, x, t_from, c, record_features)
        if f is not None:
            feats.append(f)
        x0_hat = x - t_from * vel
        if t_to == 0.0:
            x = x0_hat
        elif solver == "euler":
            x = x - (t_from - t_to) * vel
        else:
            x = path.alpha(t_to) * x0_hat + path.sigma(t_to) * rng.standard_normal(x.shape)
        states.append(x)
    return RolloutTrace(list(pts), states, solver, feats if record_features else None, c)


def endpoints(v: Callable, x_s, t_s, t_m, t_e, c=None):
    """Direct one-step and composed two-step Euler endpoints from ``t_s`` to ``t_e``."""
    v_s = v(x_s, t_s, c)
    x1 = x_s - (t_s - t_e) * v_s
    y = x_s - (t_s - t_m) * v_s
    x2 = y - (t_m - t_e) * v(y, t_m, c)
    return x1, x2


def semigroup_defects(v, x_batch, t_s, t_m, t_e, c=None, epsilon_reg: float = DEFECT_EPS) -> np.ndarray:
    """Per-sample displacement-normalized defect."""
    if not t_s > t_m > t_e:
        raise ValueError(f"need t_s > t_m > t_e, got {(t_s, t_m, t_e)}")
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    if x_batch.shape[0] == 0:
        raise ValueError("empty batch")
    x1, x2 = endpoints(v, x_batch, t_s, t_m, t_e, c)
    num = ((x1 - x2) ** 2).sum(axis=1)
    den = ((x1 - x_batch) ** 2).sum(axis=1) + epsilon_reg
    return num / den


def local_semigroup_defect(v, x_batch, t_s, t_m, t_e, c=None, epsilon_reg: float = DEFECT_EPS) -> float:
    return float(semigroup_defects(v, x_batch, t_s, t_m, t_e, c, epsilon_reg).mean())


@dataclass
class IntervalDefect:
    interval: tuple
    t_m: float
    defect_mean: float
    defect_stderr: float
    n: int

    def to_row(self) -> dict:
        return {
            "interval": list(self.interval),
            "t_m": self.t_m,
            "defect_mean": self.defect_mean,
            "defect_stderr": self.defect_stderr,
            "n": self.n,
        }


def path_defects(
    v,
    grid_infer: TimestepGrid,
    grid_train: TimestepGrid,
    noise: np.ndarray,
    c=None,
    epsilon_reg: float = DEFECT_EPS,
) -> List[IntervalDefect]:
    """Defect on every adjacent interval of the Euler inference path.

    States at each ``t_s`` come from the student's own rollout.  When several
    training points fall inside an interval each is evaluated separately and
    reported as its own row; intervals with no interior training point are
    skipped.
    """
    trace = sample_k_steps(v, grid_infer, noise, c)
    rows = []
    for k, ((t_s, t_e), mids) in enumerate(adjacent_triples(grid_infer, grid_train)):
        x_s = trace.states[k]
        for t_m in mids:
            d = semigroup_defects(v, x_s, t_s, t_m, t_e, c, epsilon_reg)
            rows.append(IntervalDefect((t_s, t_e), t_m, float(d.mean()),
                                       float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0,
                                       int(len(d))))
    return rows


def path_average_defect(rows: List[IntervalDefect]) -> float:
    """Mean over intervals, each interval first averaged over its t_m choices."""
    by_interval = {}
    for r in rows:
        by_interval.setdefault(tuple(r.interval), []).append(r.defect_mean)
    if not by_interval:
        return float("nan")
    return float(np.mean([np.mean(v) for v in by_interval.values()]))
