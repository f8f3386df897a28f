"""Two-sample statistics and cross-step consistency."""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from ..schedule import TimestepGrid, make_grid
from ..transport import sample_k_steps


def _pair(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both samples must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def energy_distance(a, b) -> float:
    """V-statistic ``2 E|X-Y| - E|X-X'| - E|Y-Y'|``; zero for identical sets."""
    a, b = _pair(a, b)
    ab = cdist(a, b).mean()
    aa = cdist(a, a).mean()
    bb = cdist(b, b).mean()
    return float(max(2.0 * ab - aa - bb, 0.0))


def energy_permutation_test(a, b, n_permutations: int = 200, rng: Optional[np.random.Generator] = None):
    """``(statistic, p_value)`` of the energy distance under label permutation."""
    a, b = _pair(a, b)
    rng = rng or np.random.default_rng(0)
    pooled = np.concatenate([a, b])
    n, m = a.shape[0], b.shape[0]
    total = n + m

    # column 0 is the observed labelling; each column is an indicator of group A
    masks = np.zeros((total, n_permutations + 1))
    masks[:n, 0] = 1.0
    for k in range(1, n_permutations + 1):
        masks[rng.permutation(total)[:n], k] = 1.0

    # block over rows so the pooled distance matrix is never held in full
    s_aa = np.zeros(n_permutations + 1)
    s_all = np.zeros(n_permutations + 1)
    d_total = 0.0
    for lo in range(0, total, 1024):
        block = cdist(pooled[lo : lo + 1024], pooled)
        dm = block @ masks
        s_aa += (masks[lo : lo + 1024] * dm).sum(axis=0)
        s_all += dm.sum(axis=0)
        d_total += block.sum()
    s_ab = s_all - s_aa
    s_bb = d_total - 2.0 * s_ab - s_aa
    stats = 2.0 * s_ab / (n * m) - s_aa / n**2 - s_bb / m**2
    hits = int((stats[1:] >= stats[0]).sum())
    return float(stats[0]), (1 + hits) / (1 + n_permutations)


def wasserstein_1d(u, v, p: int = 2) -> float:
    """Exact ``W_p`` between two empirical 1-D distributions (quantile coupling)."""
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    v = np.sort(np.asarray(v, dtype=np.float64).ravel())
    if len(u) == len(v):
        return float(np.mean(np.abs(u - v) ** p) ** (1.0 / p))
    levels = np.union1d(np.arange(1, len(u) + 1) / len(u), np.arange(1, len(v) + 1) / len(v))
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - 0.5 * widths
    qu = u[np.minimum((mids * len(u)).astype(int), len(u) - 1)]
    qv = v[np.minimum((mids * len(v)).astype(int), len(v) - 1)]
    return float((widths * np.abs(qu - qv) ** p).sum() ** (1.0 / p))


def random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    th = rng.standard_normal((n, dim))
    return th / np.linalg.norm(th, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_projections: int = 128, rng: Optional[np.random.Generator] = None) -> float:
    """Mean over random unit directions of the 1-D ``W_2`` between projections."""
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    a, b = _pair(a, b)
    rng = rng or np.random.default_rng(0)
    dirs = random_directions(rng, n_projections, a.shape[1])
    pa, pb = a @ dirs.T, b @ dirs.T
    if a.shape[0] == b.shape[0]:
        w = np.sqrt(((np.sort(pa, axis=0) - np.sort(pb, axis=0)) ** 2).mean(axis=0))
        return float(w.mean())
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))


def cross_step_consistency(
    generator,
    grids: Sequence[TimestepGrid],
    noises: np.ndarray,
    c=None,
) -> float:
    """Mean pairwise L2 distance between final outputs of the K-step samplers
    started from the same noises."""
    if len(grids) < 2:
        raise ValueError("need at least two step counts")
    outs = [sample_k_steps(generator, g, noises, c).final for g in grids]
    dists = [
        np.linalg.norm(outs[i] - outs[j], axis=1).mean()
        for i in range(len(outs))
        for j in range(i + 1, len(outs))
    ]
    return float(np.mean(dists))


def step_count_grids(counts: Iterable[int] = (2, 4, 8), shift: float = 12.0) -> Dict[int, TimestepGrid]:
    return {k: make_grid(k, shift) for k in counts}
