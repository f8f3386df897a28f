"""End-of-run evaluation summaries for trained students."""

from __future__ import annotations

from typing import Dict

import numpy as np

from ..ar import ToyProcessSpec, eval_long_rollout, per_chunk_energy, rollout_sequence, sample_ground_truth
from ..schedule import make_grid
from ..teacher import GaussianMixture
from ..transport import path_average_defect, path_defects, sample_k_steps
from .stats import cross_step_consistency, sliced_wasserstein, step_count_grids


def evaluate_nonar(state, gmm: GaussianMixture, n_samples: int = 4096, n_projections: int = 128,
                   step_counts=(1, 2, 4, 8), seed: int = 12345) -> Dict:
    """Path defect on the inference grid, SW per step count and cross-step consistency."""
    cfg = state.config
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_samples, gmm.dim))
    target = gmm.sample(rng, n_samples)
    rows = path_defects(state.generator, cfg.grid_infer, cfg.grid_train, noise[:2048])
    sw = {}
    for k in step_counts:
        out = sample_k_steps(state.generator, make_grid(k, cfg.shift), noise).final
        sw[str(k)] = sliced_wasserstein(out, target, n_projections, np.random.default_rng(seed + 1))
    grids = list(step_count_grids((2, 4, 8), cfg.shift).values())
    return {
        "defect_path_average": path_average_defect(rows),
        "defect_intervals": [r.to_row() for r in rows],
        "sliced_wasserstein": sw,
        "cross_step_consistency": cross_step_consistency(state.generator, grids, noise),
    }


def evaluate_ar(state, process: ToyProcessSpec, n_samples: int = 512, step_counts=(2, 4, 8),
                long_horizon: int = 4, seed: int = 12345) -> Dict:
    """Per-chunk energy distance to ground truth for each K, plus the long-rollout drift at K=4."""
    rng = np.random.default_rng(seed)
    noises = rng.standard_normal((n_samples, process.n_chunks, process.chunk_dim))
    truth = sample_ground_truth(process, rng, n_samples)
    per_k = {}
    for k in step_counts:
        chunks, _, _ = rollout_sequence(state.generator, process, make_grid(k, state.config.shift), noises)
        per_k[str(k)] = per_chunk_energy(chunks, truth)
    drift = eval_long_rollout(state.generator, process, long_horizon * process.n_chunks, 4,
                              n=n_samples, seed=seed + 1, shift=state.config.shift)
    return {
        "energy_per_chunk": per_k,
        "energy_mean": {k: float(np.mean(v)) for k, v in per_k.items()},
        "drift_k4": drift.per_chunk,
        "drift_slope_k4": drift.slope,
    }
