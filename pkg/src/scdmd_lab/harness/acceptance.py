"""Acceptance criteria 1-10 as runnable checks.

Each ``criterion_<n>`` returns a :class:`CriterionResult`.  The training
criteria go through :mod:`runner`, so their run directories, metrics and
checkpoints are kept under ``out``.  Criteria 4, 5 and 6 share one sweep.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..ar import MixedStepConfig, ToyProcessSpec, init_ar_state, train_ar
from ..autodiff import MlpParams, MlpSpec, mlp_backward, mlp_forward
from ..dmd import DistillConfig, dmd_cotangent, dmd_generator_grad, init_state, train_nonar
from ..gradcheck import central_difference, max_relative_error
from ..losses import align_loss, relation_matrices, sc_loss
from ..networks import FieldNet, ScoreNet
from ..schedule import make_grid, sample_step_count, sample_triple, triple_law
from ..teacher import (
    RECTIFIED,
    GaussianMixture,
    diffused_gmm,
    gmm_log_density,
    gmm_score,
    oracle_flow_map,
    two_mode_gmm,
)
from . import checkpoint
from .config import EvalSpec, RunConfig, TeacherSpec, config_hash
from .runner import run, run_name
from .stats import energy_distance

N_SEEDS = 5
ACCEPTANCE_SEEDS = tuple(range(N_SEEDS))


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    summary: str
    details: Dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.id:2d} {'PASS' if self.passed else 'FAIL'} {self.name}: {self.summary}"

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "passed": self.passed, "summary": self.summary,
                "details": self.details, "seconds": round(self.seconds, 3)}


def _timed(fn: Callable[..., CriterionResult]):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# configurations

def nonar_config(variant: str, seeds: Sequence[int] = ACCEPTANCE_SEEDS, **distill) -> RunConfig:
    """Two-mode 2-D teacher, 2k iterations, backward-simulated generator inputs."""
    d = DistillConfig(**{"variant": variant, "iterations": 2000, "batch_size": 256,
                         "backward_simulation": True, **distill})
    return RunConfig(kind="nonar", teacher=TeacherSpec(), distill=d, seeds=list(seeds), checkpoint_every=1000)


AR_VARIANTS = {
    # fixed K=4 with the shortcut term on every iteration, no alignment
    "naive": dict(fixed_k=4, sc_mode="always", lambda_align=0.0),
    # mixed step counts, shortcut term only when K=8
    "mixed_sc": dict(lambda_align=0.0),
    # mixed step counts, gated shortcut term and reference alignment; at the
    # default tolerance the hinge never opens on this toy, so it is dropped
    "full": dict(align_delta=0.0),
}


def ar_config(variant: str, seeds: Sequence[int] = ACCEPTANCE_SEEDS, **distill) -> RunConfig:
    d = DistillConfig(**{"iterations": 3000, "batch_size": 32, "backward_simulation": True,
                         "lr_generator": 2e-3, "lr_critic": 2e-3, **distill})
    return RunConfig(kind="ar", distill=d, mixed=MixedStepConfig(**AR_VARIANTS[variant]), process=ToyProcessSpec(),
                     eval=EvalSpec(n_samples=512, step_counts=[2, 4, 8]), seeds=list(seeds), checkpoint_every=1000)


# ---------------------------------------------------------------------------
# 1: gradients

class _TimeOnly:
    """``v(x, t) = g(t)``, with no parameters; enough for the closed-form shortcut loss."""

    class _Cache:
        def __init__(self, out):
            self.output = out

    def __init__(self, g):
        self.g = g

    def forward(self, x, t, c=None):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return self._Cache(np.stack([self.g(ti) for ti in t]))

    def __call__(self, x, t, c=None):
        return self.forward(np.atleast_2d(x), t, c).output

    def backward(self, cache, cot, feature_cotangent=None):
        return np.zeros(1), np.zeros_like(cot)


def _random_net(rng, cls=FieldNet, **kw):
    hidden = tuple(int(h) for h in rng.integers(3, 9, size=rng.integers(1, 3)))
    act = ("silu", "tanh")[rng.integers(2)]
    return cls.create(2, hidden, rng, activation=act, **kw)


def _with(net, flat):
    return net.with_params(MlpParams(net.spec, flat))


def _check_mlp(rng) -> float:
    dims = rng.integers(2, 6, size=3)
    spec = MlpSpec(int(dims[0]), (int(dims[1]),), int(dims[2]), ("silu", "tanh")[rng.integers(2)])
    params = MlpParams(spec, rng.uniform(-1, 1, spec.n_params))
    x, cot = rng.uniform(-2, 2, spec.input_dim), rng.normal(size=spec.output_dim)
    pg, ig = mlp_backward(spec, params, x, cot)
    fp = central_difference(lambda p: float(mlp_forward(spec, MlpParams(spec, p), x)[0] @ cot), params.flat)
    fx = central_difference(lambda z: float(mlp_forward(spec, params, z)[0] @ cot), x)
    return max(max_relative_error(pg, fp), max_relative_error(ig, fx))


def _check_sc(rng) -> float:
    net = _random_net(rng)
    b = 4
    t = np.sort(rng.uniform(0.05, 1.0, size=(b, 3)), axis=1)[:, ::-1]
    ts, tm, te = t[:, 0], t[:, 1], t[:, 2] * rng.integers(0, 2, size=b)
    x = rng.normal(size=(b, 2))
    detach = ("none", "direct", "composed")[rng.integers(3)]
    _, grad = sc_loss(net, x, ts, tm, te, detach=detach)

    def f(flat):
        live = _with(net, flat)
        d_net = net if detach == "direct" else live
        c_net = net if detach == "composed" else live
        x1 = x - (ts - te)[:, None] * d_net(x, ts)
        y = x - (ts - tm)[:, None] * c_net(x, ts)
        x2 = y - (tm - te)[:, None] * c_net(y, tm)
        return float(((x1 - x2) ** 2).sum(axis=1).mean())

    return max_relative_error(grad, central_difference(f, net.params.flat))


def _check_align(rng) -> float:
    shape = tuple(int(s) for s in rng.integers(2, 5, size=3))
    if rng.random() < 0.5:
        shape = (2,) + shape
    z_low, z_ref = rng.normal(size=shape), rng.normal(size=shape)
    delta = float(rng.uniform(0.0, 0.2))
    _, grad = align_loss(z_low, z_ref, delta)
    return max_relative_error(grad, central_difference(lambda z: align_loss(z, z_ref, delta)[0], z_low))


def _check_dmd(rng) -> float:
    gmm = two_mode_gmm()
    gen = _random_net(rng)
    critic = _random_net(rng, ScoreNet, path=RECTIFIED)
    b = 6
    x_in, t_in = rng.normal(size=(b, 2)), rng.choice(make_grid(8, kind="training").as_array(), size=b)
    t_d, eps = rng.uniform(0.05, 1.0, b), rng.normal(size=(b, 2))
    normalize = bool(rng.integers(2))
    real = lambda x, t: np.stack([gmm_score(diffused_gmm(gmm, RECTIFIED, ti), xi) for ti, xi in zip(t, x)])  # noqa: E731
    terms = dmd_generator_grad(gen, critic, real, x_in, t_in, t_d, eps, normalize=normalize)
    a = RECTIFIED.alpha(t_d)
    x0 = x_in - t_in[:, None] * gen(x_in, t_in)
    x_t = a[:, None] * x0 + RECTIFIED.sigma(t_d)[:, None] * eps
    target = x0 - dmd_cotangent(critic(x_t, t_d), real(x_t, t_d), a, normalize)  # held constant

    def surrogate(flat):
        out = x_in - t_in[:, None] * _with(gen, flat)(x_in, t_in)
        return 0.5 * float(((out - target) ** 2).sum(axis=1).mean())

    return max_relative_error(terms.grad, central_difference(surrogate, gen.params.flat))


@_timed
def criterion_1(n_checks: int = 100, seed: int = 1) -> CriterionResult:
    """Random finite-difference checks for each hand-written gradient; max relative error < 1e-4."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, check in (("mlp_backward", _check_mlp), ("sc_loss", _check_sc),
                        ("align_loss", _check_align), ("dmd_surrogate", _check_dmd)):
        worst[name] = max(check(rng) for _ in range(n_checks))
    ok = all(v < 1e-4 for v in worst.values())
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CriterionResult(1, "gradient suite", ok, f"max rel err {summary} ({n_checks} checks each)",
                           {"max_relative_error": worst, "n_checks": n_checks})


# ---------------------------------------------------------------------------
# 2: analytic teacher

@_timed
def criterion_2(seed: int = 2) -> CriterionResult:
    rng = np.random.default_rng(seed)
    gmm = GaussianMixture(np.array([0.4, 0.6]), np.array([[1.0, 0.0], [-1.0, 0.5]]), np.array([0.3, 0.6]))
    score_err = 0.0
    for x in rng.normal(size=(50, 2)) * 1.5:
        fd = central_difference(lambda z: gmm_log_density(gmm, z), x)
        score_err = max(score_err, float(np.abs(gmm_score(gmm, x) - fd).max()))

    # diffused means scale by alpha, variances become alpha^2 var + sigma^2; t=0.5 is exact in binary
    d = diffused_gmm(GaussianMixture(np.array([1.0]), np.array([[2.0, -1.0]]), np.array([0.25])), RECTIFIED, 0.5)
    conv_exact = bool(np.array_equal(d.means, [[1.0, -0.5]]) and np.array_equal(d.variances, [0.3125]))

    two = two_mode_gmm()
    x = rng.normal(size=(64, 2))
    direct = oracle_flow_map(two, RECTIFIED, x, 0.9, 0.1, 4096)
    mid = oracle_flow_map(two, RECTIFIED, x, 0.9, 0.5, 4096)
    residual = float(np.abs(direct - oracle_flow_map(two, RECTIFIED, mid, 0.5, 0.1, 4096)).max())
    ref = oracle_flow_map(two, RECTIFIED, x, 0.9, 0.1, 8192)
    e_coarse = float(np.abs(oracle_flow_map(two, RECTIFIED, x, 0.9, 0.1, 128) - ref).max())
    e_fine = float(np.abs(oracle_flow_map(two, RECTIFIED, x, 0.9, 0.1, 256) - ref).max())
    ratio = e_coarse / e_fine
    ok = score_err < 1e-6 and conv_exact and residual < 1e-3 and 1.6 <= ratio <= 2.4
    return CriterionResult(2, "analytic-oracle suite", ok,
                           f"score err {score_err:.1e}, convolution exact {conv_exact}, "
                           f"semigroup residual {residual:.1e}, halving ratio {ratio:.2f}",
                           {"score_fd_error": score_err, "convolution_exact": conv_exact,
                            "semigroup_residual": residual, "halving_ratio": ratio})


# ---------------------------------------------------------------------------
# 3: loss oracles

def _energy_double_loop(a, b) -> float:
    # row-by-row pairwise sums; each inner loop is a vectorised row
    def mean_dist(p, q):
        return sum(float(np.sqrt(((q - p[i]) ** 2).sum(axis=1)).sum()) for i in range(len(p))) / (len(p) * len(q))
    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


@_timed
def criterion_3(seed: int = 3, n_energy: int = 4096) -> CriterionResult:
    rng = np.random.default_rng(seed)

    def g(t):
        return np.array([np.cos(2 * t), t**3 - 1])

    x = rng.normal(size=(8, 2))
    t_s, t_m, t_e = 0.95, 0.7, 0.3
    loss, _ = sc_loss(_TimeOnly(g), x, t_s, t_m, t_e)
    sc_err = abs(loss - (t_m - t_e) ** 2 * float(((g(t_s) - g(t_m)) ** 2).sum()))

    z = rng.normal(size=(2, 4, 3))
    r = relation_matrices(z)
    rel_err = 0.0
    for f in range(z.shape[0]):
        for i in range(z.shape[1]):
            for j in range(z.shape[1]):
                u, v = z[f, i], z[f, j]
                cos = 1.0 if i == j else float(u @ v / (np.sqrt(u @ u) * np.sqrt(v @ v)))
                rel_err = max(rel_err, abs(r[f, i, j] - cos))

    def pair(c):
        return np.array([[[1.0, 0.0], [c, np.sqrt(1 - c**2)]]])

    hand = align_loss(pair(0.9), pair(0.1), delta=0.3)[0]

    a = rng.normal(size=(n_energy, 2))
    b = rng.normal(size=(n_energy, 2)) + np.array([3.0, 0.0])
    ed_err = abs(energy_distance(a, b) - _energy_double_loop(a, b))
    ok = sc_err < 1e-10 and rel_err < 1e-12 and abs(hand - 0.25) < 1e-12 and ed_err < 1e-10
    return CriterionResult(3, "loss-oracle suite", ok,
                           f"sc closed form {sc_err:.1e}, relations {rel_err:.1e}, align hand {hand:.15f}, "
                           f"energy {ed_err:.1e}",
                           {"sc_time_only_error": sc_err, "relation_error": rel_err, "align_hand": hand,
                            "energy_distance_error": ed_err})


# ---------------------------------------------------------------------------
# 4, 5, 6: non-AR sweep

@dataclass
class NonarSweep:
    dmd: List[dict]
    scdmd: List[dict]
    seconds: float


def nonar_sweep(out: Path, seeds: Sequence[int] = ACCEPTANCE_SEEDS) -> NonarSweep:
    t0 = time.perf_counter()
    res = {}
    for variant in ("dmd", "scdmd"):
        runs = run(nonar_config(variant, seeds), out)
        res[variant] = [runs[s].summary["eval"] for s in seeds]
    return NonarSweep(res["dmd"], res["scdmd"], time.perf_counter() - t0)


def _wins(xs: Sequence[bool]) -> int:
    return int(sum(bool(x) for x in xs))


def criterion_4(sweep: NonarSweep) -> CriterionResult:
    d = [e["defect_path_average"] for e in sweep.dmd]
    s = [e["defect_path_average"] for e in sweep.scdmd]
    wins = _wins(b < a for a, b in zip(d, s))
    ok = wins >= 4 and sweep.seconds < 15 * 60
    return CriterionResult(4, "defect ordering", ok,
                           f"SC-DMD lower defect on {wins}/{len(d)} seeds (mean {np.mean(s):.4f} vs "
                           f"{np.mean(d):.4f}), sweep {sweep.seconds / 60:.1f} min",
                           {"dmd": d, "scdmd": s, "wins": wins, "sweep_seconds": sweep.seconds}, sweep.seconds)


def criterion_5(sweep: NonarSweep) -> CriterionResult:
    d = [e["cross_step_consistency"] for e in sweep.dmd]
    s = [e["cross_step_consistency"] for e in sweep.scdmd]
    wins = _wins(b < a for a, b in zip(d, s))
    return CriterionResult(5, "cross-step consistency", wins >= 4,
                           f"SC-DMD more consistent on {wins}/{len(d)} seeds (mean {np.mean(s):.3f} vs {np.mean(d):.3f})",
                           {"dmd": d, "scdmd": s, "wins": wins})


def criterion_6(sweep: NonarSweep) -> CriterionResult:
    def sw(evals, k):
        return [e["sliced_wasserstein"][str(k)] for e in evals]

    d4, d8, s4, s8 = sw(sweep.dmd, 4), sw(sweep.dmd, 8), sw(sweep.scdmd, 4), sw(sweep.scdmd, 8)
    dmd_deficit = _wins(b >= a for a, b in zip(d4, d8))
    sc_ok = _wins(b <= 1.1 * a for a, b in zip(s4, s8))
    ok = dmd_deficit >= 3 and sc_ok >= 4
    return CriterionResult(6, "compositionality deficit", ok,
                           f"DMD 8-step not better than 4-step on {dmd_deficit}/{len(d4)} seeds, "
                           f"SC-DMD 8-step within 10% of 4-step on {sc_ok}/{len(s4)}",
                           {"dmd_sw4": d4, "dmd_sw8": d8, "scdmd_sw4": s4, "scdmd_sw8": s8,
                            "dmd_deficit_seeds": dmd_deficit, "scdmd_ok_seeds": sc_ok})


# ---------------------------------------------------------------------------
# 7: AR ablation

@_timed
def criterion_7(out: Path, seeds: Sequence[int] = ACCEPTANCE_SEEDS) -> CriterionResult:
    t0 = time.perf_counter()
    ed = {}
    for variant in AR_VARIANTS:
        runs = run(ar_config(variant, seeds), out)
        ed[variant] = {k: [runs[s].summary["eval"]["energy_mean"][k] for s in seeds] for k in ("2", "4")}
    seconds = time.perf_counter() - t0
    a_wins = _wins(m < n for m, n in zip(ed["mixed_sc"]["4"], ed["naive"]["4"]))
    b_wins = _wins(f < m for f, m in zip(ed["full"]["2"], ed["mixed_sc"]["2"]))
    n = len(seeds)
    ok = a_wins >= (n // 2 + 1) and b_wins >= 3 and seconds < 30 * 60
    return CriterionResult(7, "AR ablation ordering", ok,
                           f"(a) mixed+SC beats naive SC at K=4 on {a_wins}/{n} seeds "
                           f"(mean {np.mean(ed['mixed_sc']['4']):.3f} vs {np.mean(ed['naive']['4']):.3f}); "
                           f"(b) alignment helps at K=2 on {b_wins}/{n} "
                           f"(mean {np.mean(ed['full']['2']):.3f} vs {np.mean(ed['mixed_sc']['2']):.3f}); "
                           f"{seconds / 60:.1f} min",
                           {"energy_mean": ed, "a_wins": a_wins, "b_wins": b_wins, "sweep_seconds": seconds})


# ---------------------------------------------------------------------------
# 8: sampler laws

def _within(counts: Dict, probs: Dict, n: int, z: float = 3.0) -> float:
    """Largest standardised deviation of observed counts from their binomial expectation."""
    worst = 0.0
    for key, p in probs.items():
        sd = np.sqrt(n * p * (1 - p))
        dev = abs(counts.get(key, 0) - n * p)
        worst = max(worst, dev / sd if sd > 0 else (np.inf if dev else 0.0))
    return worst


@_timed
def criterion_8(n_draws: int = 100_000, seed: int = 8) -> CriterionResult:
    rng = np.random.default_rng(seed)
    mixed = MixedStepConfig()
    counts: Dict[int, int] = {}
    for _ in range(n_draws):
        k = sample_step_count(rng, mixed.step_counts, mixed.step_probs)
        counts[k] = counts.get(k, 0) + 1
    k_z = _within(counts, dict(zip(mixed.step_counts, mixed.step_probs)), n_draws)

    grid_train, grid_infer = make_grid(8, kind="training"), make_grid(4)
    triple_z = 0.0
    per_point = n_draws // len(grid_train)
    for t_s in grid_train.points:
        law, p_empty = triple_law(t_s, grid_train, grid_infer, include_terminal=True)
        probs = dict(law)
        probs[None] = p_empty
        seen: Dict = {}
        for _ in range(per_point):
            tr = sample_triple(rng, t_s, grid_train, grid_infer, include_terminal=True)
            key = None if tr is None else (tr.t_e, tr.t_m)
            if key not in probs:
                triple_z = np.inf
            seen[key] = seen.get(key, 0) + 1
        triple_z = max(triple_z, _within(seen, probs, per_point))
    ok = k_z <= 3.0 and triple_z <= 3.0
    return CriterionResult(8, "statistical conformance", ok,
                           f"K frequencies max {k_z:.2f} sigma, triples max {triple_z:.2f} sigma",
                           {"k_counts": {str(k): v for k, v in sorted(counts.items())}, "k_max_sigma": k_z,
                            "triple_max_sigma": triple_z, "n_draws": n_draws})


# ---------------------------------------------------------------------------
# 9: determinism

def _tiny_nonar() -> RunConfig:
    d = DistillConfig(iterations=40, batch_size=32, hidden=(16, 16), critic_hidden=(16, 16),
                      critic_updates_per_gen_update=2, backward_simulation=True)
    return RunConfig(kind="nonar", distill=d, eval=EvalSpec(n_samples=256, n_projections=16), checkpoint_every=20)


def _tiny_ar() -> RunConfig:
    d = DistillConfig(iterations=24, batch_size=8, hidden=(16,), critic_hidden=(16,),
                      critic_updates_per_gen_update=1, backward_simulation=True)
    mixed = MixedStepConfig(align_warmup_iters=4, align_apply_prob=1.0, sc_mode="always")
    return RunConfig(kind="ar", distill=d, mixed=mixed, eval=EvalSpec(n_samples=64, step_counts=[2, 4], long_horizon=1),
                     checkpoint_every=12)


def _forward_identical(cfg: RunConfig, ckpt: Path, original) -> bool:
    if cfg.kind == "nonar":
        fresh = init_state(cfg.distill, 2)
        x, c = np.random.default_rng(0).normal(size=(64, 2)), None
    else:
        fresh = init_ar_state(cfg.distill, cfg.mixed, cfg.process)
        p = cfg.process
        x = np.random.default_rng(0).normal(size=(16, p.chunk_dim))
        c = np.random.default_rng(1).normal(size=(16, p.context_dim))
    loaded, _ = checkpoint.load_into(ckpt, fresh, config_hash(cfg))
    t = np.full(x.shape[0], 0.7)
    return (loaded.generator(x, t, c).tobytes() == original.generator(x, t, c).tobytes()
            and loaded.critic(x, t, c).tobytes() == original.critic(x, t, c).tobytes())


@_timed
def criterion_9(out: Path) -> CriterionResult:
    checks = {}
    for label, cfg in (("nonar", _tiny_nonar()), ("ar", _tiny_ar())):
        name = run_name(cfg)
        first = run(cfg, out / "determinism_a")[0].directory / "metrics.jsonl"
        second = run(cfg, out / "determinism_b")[0].directory / "metrics.jsonl"
        checks[f"{label}_metrics_identical"] = first.read_bytes() == second.read_bytes()

        # resume from the mid-run checkpoint and compare with the uninterrupted log
        seed_dir = out / "determinism_c" / name / "seed_0"
        run(cfg, out / "determinism_c")
        mid = sorted((seed_dir / "checkpoints").glob("step_*.ckpt"))[0]
        run(cfg, out / "determinism_c", resume=mid)
        checks[f"{label}_resume_identical"] = (seed_dir / "metrics.jsonl").read_bytes() == first.read_bytes()

        # the final checkpoint reproduces the forward pass of the trained networks
        if label == "nonar":
            state, _ = train_nonar(cfg.distill, cfg.teacher.build())
        else:
            state, _ = train_ar(cfg.distill, cfg.mixed, cfg.process)
        checks[f"{label}_checkpoint_bit_exact"] = _forward_identical(cfg, first.parent / "final.ckpt", state)
    ok = all(checks.values())
    return CriterionResult(9, "determinism", ok,
                           ", ".join(f"{k} {v}" for k, v in checks.items()), checks)


# ---------------------------------------------------------------------------
# 10: ablation identities

@_timed
def criterion_10() -> CriterionResult:
    base = dict(iterations=30, batch_size=32, hidden=(16, 16), critic_hidden=(16, 16),
                critic_updates_per_gen_update=2, backward_simulation=True)
    gmm = two_mode_gmm()
    s0, log0 = train_nonar(DistillConfig(variant="scdmd", lambda_sc=0.0, **base), gmm)
    s1, log1 = train_nonar(DistillConfig(variant="dmd", **base), gmm)
    nonar_ok = s0.generator.params.flat.tobytes() == s1.generator.params.flat.tobytes() and log0 == log1

    ar_base = dict(iterations=16, batch_size=8, hidden=(16,), critic_hidden=(16,), critic_updates_per_gen_update=1,
                   backward_simulation=True)
    proc = ToyProcessSpec()
    a0, alog0 = train_ar(DistillConfig(**ar_base), MixedStepConfig(fixed_k=4, lambda_sc=0.0, lambda_align=0.0,
                                                                   sc_mode="always", align_warmup_iters=0), proc)
    a1, alog1 = train_ar(DistillConfig(**ar_base), MixedStepConfig(fixed_k=4, sc_mode="off", lambda_align=0.0), proc)
    ar_ok = a0.generator.params.flat.tobytes() == a1.generator.params.flat.tobytes() and alog0 == alog1
    return CriterionResult(10, "ablation identities", nonar_ok and ar_ok,
                           f"non-AR lambda_sc=0 identical {nonar_ok}, AR zero-weight fixed-K identical {ar_ok}",
                           {"nonar_identical": nonar_ok, "ar_identical": ar_ok})


# ---------------------------------------------------------------------------

def run_acceptance(out: Path, only: Optional[Sequence[int]] = None,
                   seeds: Sequence[int] = ACCEPTANCE_SEEDS) -> List[CriterionResult]:
    """Run the selected criteria (all by default), printing one line each."""
    out = Path(out)
    wanted = set(only or range(1, 11))
    results: List[CriterionResult] = []

    def emit(res: CriterionResult):
        print(res.line(), flush=True)
        results.append(res)

    for cid, fn in ((1, criterion_1), (2, criterion_2), (3, criterion_3)):
        if cid in wanted:
            emit(fn())
    if wanted & {4, 5, 6}:
        sweep = nonar_sweep(out, seeds)
        for cid, fn in ((4, criterion_4), (5, criterion_5), (6, criterion_6)):
            if cid in wanted:
                emit(fn(sweep))
    if 7 in wanted:
        emit(criterion_7(out, seeds))
    if 8 in wanted:
        emit(criterion_8())
    if 9 in wanted:
        emit(criterion_9(out))
    if 10 in wanted:
        emit(criterion_10())
    return results
