"""Distribution matching distillation with the shortcut self-consistency term.

The student is a velocity field ``v(x, t)``; its clean prediction from a state
at level ``t_in`` is ``x - t_in v``.  The critic is a score network trained by
denoising score matching on student outputs.  Each generator update uses the
score-difference direction against the analytic teacher plus, for the
``scdmd`` variant, ``lambda_sc`` times the gradient of the endpoint loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import AdamWState, adamw_step, global_norm
from .losses import sc_loss
from .networks import FieldNet, ScoreNet
from .schedule import TimestepGrid, make_grid, sample_triple
from .teacher import RECTIFIED, GaussianMixture, NoisePath, diffused_score
from .transport import path_average_defect, path_defects

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class DistillConfig:
    variant: str = "scdmd"  # "scdmd" or "dmd"
    lambda_sc: float = 1.0
    critic_updates_per_gen_update: int = 5
    backward_simulation: bool = False
    train_points: int = 8
    infer_points: int = 4
    shift: float = 12.0
    batch_size: int = 256
    iterations: int = 2000
    seed: int = 0
    lr_generator: float = 1e-3
    lr_critic: float = 2e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    hidden: Tuple[int, ...] = (64, 64)
    critic_hidden: Tuple[int, ...] = (64, 64)
    activation: str = "silu"
    dmd_normalize: bool = True
    sc_detach: str = "none"
    sc_terminal: bool = True
    t_jitter: float = 0.0
    dmd_t_sampling: str = "uniform"  # "uniform" on [dmd_t_min, 1] or "grid"
    dmd_t_min: float = 0.02
    critic_weighting: str = "sigma2"  # "sigma2" or "none"
    eval_every: int = 0
    eval_samples: int = 512

    def __post_init__(self):
        if self.variant not in ("scdmd", "dmd"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.critic_updates_per_gen_update < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("counts must be >= 1")
        if self.dmd_t_sampling not in ("uniform", "grid"):
            raise ValueError(f"unknown dmd_t_sampling {self.dmd_t_sampling!r}")
        if self.critic_weighting not in ("sigma2", "none"):
            raise ValueError(f"unknown critic_weighting {self.critic_weighting!r}")
        if self.lambda_sc < 0:
            raise ValueError("lambda_sc must be non-negative")
        self.betas = tuple(self.betas)
        self.hidden = tuple(self.hidden)
        self.critic_hidden = tuple(self.critic_hidden)

    @property
    def grid_train(self) -> TimestepGrid:
        return make_grid(self.train_points, self.shift, "training")

    @property
    def grid_infer(self) -> TimestepGrid:
        return make_grid(self.infer_points, self.shift, "inference")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["hidden"] = list(self.hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d


@dataclass
class DistillState:
    generator: FieldNet
    critic: ScoreNet
    gen_opt: AdamWState
    critic_opt: AdamWState
    config: DistillConfig
    step: int = 0


def init_state(config: DistillConfig, dim: int, path: NoisePath = RECTIFIED, context_dim: int = 0) -> DistillState:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    gen = FieldNet.create(dim, config.hidden, rng, context_dim, config.activation)
    critic = ScoreNet.create(dim, config.critic_hidden, rng, context_dim, config.activation, path)
    hyper = dict(betas=config.betas, weight_decay=config.weight_decay)
    return DistillState(
        gen, critic,
        AdamWState.zeros(gen.spec.n_params, learning_rate=config.lr_generator, **hyper),
        AdamWState.zeros(critic.spec.n_params, learning_rate=config.lr_critic, **hyper),
        config,
    )


def teacher_score(gmm: GaussianMixture, path: NoisePath, x: np.ndarray, t) -> np.ndarray:
    """Score of the t-diffused mixture, ``t`` scalar or one value per row."""
    return diffused_score(gmm, path, np.atleast_2d(x), t)


def sample_grid_times(rng: np.random.Generator, grid: TimestepGrid, n: int, jitter: float = 0.0) -> np.ndarray:
    t = grid.as_array()[rng.integers(len(grid), size=n)]
    if jitter > 0:
        t = np.clip(t + jitter * rng.uniform(-1.0, 1.0, size=n), 1e-3, 1.0)
    return t


def sample_dmd_times(rng: np.random.Generator, config: "DistillConfig", n: int) -> np.ndarray:
    if config.dmd_t_sampling == "grid":
        return sample_grid_times(rng, config.grid_train, n, config.t_jitter)
    return rng.uniform(config.dmd_t_min, 1.0, size=n)


def clean_prediction(gen, x_in, t_in, c=None) -> np.ndarray:
    return x_in - np.asarray(t_in)[:, None] * gen(x_in, t_in, c)


def critic_dsm_loss(critic, x0_batch, path: NoisePath, rng: np.random.Generator, t=None, c=None,
                    grid: Optional[TimestepGrid] = None, jitter: float = 0.0, weighting: str = "none"):
    """Denoising score matching on student samples; returns ``(loss, grad)``.

    Per-sample loss is ``||s(x_t, t) + eps / sigma(t)||^2``, multiplied by
    ``sigma(t)^2`` when ``weighting == "sigma2"``.  ``t`` defaults to uniform
    draws over ``grid`` points.
    """
    x0_batch = np.atleast_2d(x0_batch)
    b = x0_batch.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if t is None:
        t = sample_grid_times(rng, grid, b, jitter)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
    eps = rng.standard_normal(x0_batch.shape)
    sig = path.sigma(t)
    if np.any(sig <= 0):
        raise ValueError("critic noise level must be > 0")
    x_t = path.alpha(t)[:, None] * x0_batch + sig[:, None] * eps
    cache = critic.forward(x_t, t, c)
    resid = cache.output + eps / sig[:, None]
    lam = sig**2 if weighting == "sigma2" else np.ones(b)
    loss = float((lam * (resid**2).sum(axis=1)).mean())
    grad, _ = critic.backward(cache, 2.0 * lam[:, None] * resid / b)
    return loss, grad


@dataclass
class DmdTerms:
    grad: np.ndarray
    loss: float
    score_gap: float


def dmd_cotangent(s_fake, s_real, alpha_t, normalize: bool = True) -> np.ndarray:
    """Per-sample cotangent on the clean prediction."""
    diff = s_fake - s_real
    if not np.all(np.isfinite(diff)):
        raise TrainingError("non-finite score difference in DMD gradient")
    w = alpha_t[:, None] * diff
    if normalize:
        d = diff.shape[1]
        w = w * (d / (np.abs(diff).sum(axis=1, keepdims=True) + 1e-6))
    return w


def dmd_generator_grad(gen, critic, real_score: Callable, x_in, t_in, t_dmd, eps, path: NoisePath = RECTIFIED,
                       c=None, normalize: bool = True) -> DmdTerms:
    """DMD direction for the generator parameters.

    ``real_score(x_t, t)`` is the teacher score.  The score difference is a
    constant w.r.t. the generator; it is pulled back through the clean
    prediction ``x_in - t_in v(x_in, t_in)``.
    """
    x_in = np.atleast_2d(x_in)
    b = x_in.shape[0]
    t_in = np.broadcast_to(np.asarray(t_in, dtype=np.float64), (b,))
    t_dmd = np.broadcast_to(np.asarray(t_dmd, dtype=np.float64), (b,))
    cache = gen.forward(x_in, t_in, c)
    x0 = x_in - t_in[:, None] * cache.output
    a = path.alpha(t_dmd)
    x_t = a[:, None] * x0 + path.sigma(t_dmd)[:, None] * eps
    s_fake = critic(x_t, t_dmd, c)
    s_real = real_score(x_t, t_dmd)
    w = dmd_cotangent(s_fake, s_real, np.broadcast_to(a, (b,)), normalize)
    # d x0 / d v = -t_in
    grad, _ = gen.backward(cache, -t_in[:, None] * w / b)
    loss = 0.5 * float((w**2).sum(axis=1).mean())
    gap = float(np.abs(s_fake - s_real).sum(axis=1).mean())
    return DmdTerms(grad, loss, gap)


def backward_simulate(gen, grid_train: TimestepGrid, noise, c=None, stop_index: int = 0,
                      rng: Optional[np.random.Generator] = None, solver: str = "euler") -> np.ndarray:
    """Run the student sampler from noise and stop at ``grid_train[stop_index]``.

    ``stop_index == len(grid_train)`` returns the final clean readout. No
    gradient flows through the returned state.
    """
    k = len(grid_train)
    if not 0 <= stop_index <= k:
        raise ValueError(f"stop_index {stop_index} outside [0, {k}]")
    if solver == "cm" and rng is None:
        raise ValueError("the cm solver needs an rng for re-noising")
    pts = grid_train.with_terminal()
    x = np.array(noise, dtype=np.float64)
    for t_from, t_to in zip(pts[:stop_index], pts[1 : stop_index + 1]):
        v = gen(x, t_from, c)
        if t_to == 0.0:
            x = x - t_from * v
        elif solver == "euler":
            x = x - (t_from - t_to) * v
        else:
            x0 = x - t_from * v
            x = (1.0 - t_to) * x0 + t_to * rng.standard_normal(x.shape)
    return x


def generator_inputs(state: DistillState, gmm: GaussianMixture, path: NoisePath, rng: np.random.Generator,
                     n: int, c=None) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs ``(x_in, t_in)`` with ``t_in`` uniform over the training grid."""
    cfg = state.config
    grid = cfg.grid_train
    idx = rng.integers(len(grid), size=n)
    t_in = grid.as_array()[idx]
    eps = rng.standard_normal((n, gmm.dim))
    if not cfg.backward_simulation:
        x0 = gmm.sample(rng, n)
        return path.alpha(t_in)[:, None] * x0 + path.sigma(t_in)[:, None] * eps, t_in
    x_in = np.empty_like(eps)
    for k in np.unique(idx):
        rows = idx == k
        x_in[rows] = backward_simulate(state.generator, grid, eps[rows], c, int(k), rng)
    return x_in, t_in


def _sc_batch(state: DistillState, gmm, path, rng, n):
    """Rows with a valid triple: ``(x_s, t_s, t_m, t_e)``."""
    cfg = state.config
    grid_train, grid_infer = cfg.grid_train, cfg.grid_infer
    t_s_all = grid_train.as_array()[rng.integers(len(grid_train), size=n)]
    trip = [sample_triple(rng, float(t), grid_train, grid_infer, cfg.sc_terminal) for t in t_s_all]
    keep = np.array([tr is not None for tr in trip])
    ts = np.array([tr.t_s for tr in trip if tr is not None])
    tm = np.array([tr.t_m for tr in trip if tr is not None])
    te = np.array([tr.t_e for tr in trip if tr is not None])
    m = int(keep.sum())
    eps = rng.standard_normal((m, gmm.dim))
    if cfg.backward_simulation:
        x_s = np.empty_like(eps)
        pts = list(grid_train.points)
        for tv in np.unique(ts):
            rows = ts == tv
            x_s[rows] = backward_simulate(state.generator, grid_train, eps[rows], None, pts.index(tv), rng)
    else:
        x0 = gmm.sample(rng, m)
        x_s = path.alpha(ts)[:, None] * x0 + path.sigma(ts)[:, None] * eps
    return x_s, ts, tm, te


def critic_step(state: DistillState, gmm, path, rng) -> float:
    cfg = state.config
    x_in, t_in = generator_inputs(state, gmm, path, rng, cfg.batch_size)
    x0 = clean_prediction(state.generator, x_in, t_in)
    t = sample_dmd_times(rng, cfg, cfg.batch_size)
    loss, grad = critic_dsm_loss(state.critic, x0, path, rng, t=t, weighting=cfg.critic_weighting)
    state.critic_opt, params = adamw_step(state.critic_opt, state.critic.params, grad)
    state.critic = state.critic.with_params(params)
    return loss


def generator_step(state: DistillState, gmm, path, rng, sc_rng) -> Dict[str, float]:
    cfg = state.config
    x_in, t_in = generator_inputs(state, gmm, path, rng, cfg.batch_size)
    t_dmd = sample_dmd_times(rng, cfg, cfg.batch_size)
    eps = rng.standard_normal(x_in.shape)
    terms = dmd_generator_grad(state.generator, state.critic, lambda x, t: teacher_score(gmm, path, x, t),
                               x_in, t_in, t_dmd, eps, path, normalize=cfg.dmd_normalize)
    grad = terms.grad
    out = {"loss_dmd": terms.loss, "score_gap": terms.score_gap, "grad_norm_dmd": global_norm([terms.grad])}
    if cfg.variant == "scdmd" and cfg.lambda_sc > 0:
        x_s, ts, tm, te = _sc_batch(state, gmm, path, sc_rng, cfg.batch_size)
        if len(ts):
            loss_sc, g_sc = sc_loss(state.generator, x_s, ts, tm, te, detach=cfg.sc_detach)
            loss_sc *= len(ts) / cfg.batch_size
            g_sc = g_sc * (len(ts) / cfg.batch_size)
        else:
            loss_sc, g_sc = 0.0, np.zeros_like(grad)
        grad = grad + cfg.lambda_sc * g_sc
        out["loss_sc"] = loss_sc
        out["grad_norm_sc"] = global_norm([g_sc])
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite generator gradient at step {state.step}")
    state.gen_opt, params = adamw_step(state.gen_opt, state.generator.params, grad)
    state.generator = state.generator.with_params(params)
    out["grad_norm_gen"] = global_norm([grad])
    return out


def rng_streams(seed: int):
    """Independent streams for the DMD/critic path, the SC term and evaluation."""
    ss = np.random.SeedSequence([seed, 1])
    main, sc, ev = ss.spawn(3)
    return np.random.default_rng(main), np.random.default_rng(sc), np.random.default_rng(ev)


def evaluate_defect(state: DistillState, gmm: GaussianMixture, n: int, seed: int = 12345):
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, gmm.dim))
    rows = path_defects(state.generator, state.config.grid_infer, state.config.grid_train, noise)
    return rows, path_average_defect(rows)


def train_nonar(config: DistillConfig, gmm: GaussianMixture, path: NoisePath = RECTIFIED,
                callback: Optional[Callable[[DistillState, dict, tuple], None]] = None,
                state: Optional[DistillState] = None,
                streams: Optional[tuple] = None) -> Tuple[DistillState, List[dict]]:
    """Alternating critic/generator optimization; returns the final state and metrics records.

    To resume, pass the saved ``state`` together with the ``streams`` that were
    live when it was saved (see :func:`rng_streams`).  ``callback(state, record,
    streams)`` runs after every iteration.
    """
    if state is None:
        state = init_state(config, gmm.dim, path)
    if streams is None:
        if state.step > 0:
            raise TrainingError("resuming a run needs the saved RNG streams")
        streams = rng_streams(config.seed)
    rng, sc_rng = streams[0], streams[1]
    log: List[dict] = []
    while state.step < config.iterations:
        closs = [critic_step(state, gmm, path, rng) for _ in range(config.critic_updates_per_gen_update)]
        rec = {"iter": state.step, "loss_critic": float(np.mean(closs))}
        rec.update(generator_step(state, gmm, path, rng, sc_rng))
        state.step += 1
        if config.eval_every and state.step % config.eval_every == 0:
            rows, avg = evaluate_defect(state, gmm, config.eval_samples)
            rec["defect_eval"] = {"path_average": avg, "intervals": [r.to_row() for r in rows]}
        for k, v in rec.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise TrainingError(f"non-finite {k} at iteration {rec['iter']}")
        log.append(rec)
        if callback is not None:
            callback(state, rec, streams)
    return state, log
