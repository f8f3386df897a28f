"""Shifted timestep grids and shortcut-triple sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

TRAIN_GRID_POINTS = 8
DEFAULT_SHIFT = 12.0


@dataclass(frozen=True)
class TimestepGrid:
    points: tuple
    kind: str = "inference"
    shift: float = 1.0

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        if not pts:
            raise ValueError("grid must contain at least one point")
        if pts[0] != 1.0:
            raise ValueError(f"grid must start at t=1.0, got {pts[0]}")
        if any(p <= 0.0 for p in pts) or any(a <= b for a, b in zip(pts, pts[1:])):
            raise ValueError(f"grid points must be strictly decreasing and positive: {pts}")
        if self.kind not in ("training", "inference"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points)

    def with_terminal(self) -> tuple:
        """Grid points followed by the clean endpoint 0."""
        return self.points + (0.0,)


def shift_time(u, shift: float):
    return shift * u / (1.0 + (shift - 1.0) * u)


def make_grid(n_points: int, shift: float = DEFAULT_SHIFT, kind: str = "inference") -> TimestepGrid:
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if shift <= 0:
        raise ValueError("shift must be positive")
    u = 1.0 - np.arange(n_points) / n_points
    t = shift_time(u, shift)
    t[0] = 1.0
    return TimestepGrid(tuple(t.tolist()), kind=kind, shift=float(shift))


@dataclass(frozen=True)
class ShortcutTriple:
    t_s: float
    t_m: float
    t_e: float

    def __post_init__(self):
        if not self.t_s > self.t_m > self.t_e:
            raise ValueError(f"need t_s > t_m > t_e, got {self}")


def candidate_sets(t_s: float, grid_train: TimestepGrid, grid_infer: TimestepGrid, include_terminal: bool = False):
    """All admissible ``(t_e, [t_m, ...])`` pairs for a start time ``t_s``."""
    ends = grid_infer.with_terminal() if include_terminal else grid_infer.points
    out = []
    for t_e in ends:
        if t_e >= t_s:
            continue
        mids = [t for t in grid_train.points if t_e < t < t_s]
        out.append((t_e, mids))
    return out


def sample_triple(
    rng: np.random.Generator,
    t_s: float,
    grid_train: TimestepGrid,
    grid_infer: TimestepGrid,
    include_terminal: bool = False,
) -> Optional[ShortcutTriple]:
    """Draw ``t_e`` uniformly from inference points below ``t_s``, then ``t_m``
    uniformly from training points strictly between. ``None`` when either set is empty.

    ``include_terminal`` adds the clean endpoint ``t=0`` to the inference candidates.
    """
    if t_s not in grid_train.points:
        raise ValueError(f"t_s={t_s} is not a training grid point")
    cands = candidate_sets(t_s, grid_train, grid_infer, include_terminal)
    if not cands:
        return None
    t_e, mids = cands[rng.integers(len(cands))]
    if not mids:
        return None
    t_m = mids[rng.integers(len(mids))]
    return ShortcutTriple(t_s, t_m, t_e)


def triple_law(t_s: float, grid_train: TimestepGrid, grid_infer: TimestepGrid, include_terminal: bool = False):
    """Exact probabilities of each (t_e, t_m) pair under :func:`sample_triple`,
    plus the probability of returning ``None``."""
    cands = candidate_sets(t_s, grid_train, grid_infer, include_terminal)
    law, p_empty = {}, 0.0
    for t_e, mids in cands:
        p_e = 1.0 / len(cands)
        if not mids:
            p_empty += p_e
        for t_m in mids:
            law[(t_e, t_m)] = p_e / len(mids)
    if not cands:
        p_empty = 1.0
    return law, p_empty


def adjacent_triples(grid_infer: TimestepGrid, grid_train: TimestepGrid, include_terminal: bool = True):
    """Every (interval, [t_m ...]) on the inference path, t_m from the training grid."""
    pts = grid_infer.with_terminal() if include_terminal else grid_infer.points
    out = []
    for t_s, t_e in zip(pts, pts[1:]):
        mids = [t for t in grid_train.points if t_e < t < t_s]
        out.append(((t_s, t_e), mids))
    return out


def sample_step_count(rng: np.random.Generator, counts: Sequence[int], probs: Sequence[float]) -> int:
    return int(counts[rng.choice(len(counts), p=np.asarray(probs, dtype=np.float64))])
