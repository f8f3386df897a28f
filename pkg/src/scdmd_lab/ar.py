"""Toy autoregressive chunk process and mixed-step rollout distillation.

A point travels round the unit circle, one angular step ``delta`` per frame,
in a direction drawn once per sequence.  Each frame shows ``S`` tokens at the
corners of a small square that turns with the heading, and each chunk holds
``F`` frames.  The next chunk is generated conditioned on a buffer of the last
``M`` chunks, the stand-in for a key-value cache.  At the start of a sequence
the buffer is empty and both directions are possible; afterwards the buffer
reveals the heading and direction and the next chunk is a single Gaussian.

The student sees the buffer through its context input, so errors in
self-generated chunks propagate exactly as they would through a real cache.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .autodiff import AdamWState, adamw_step, global_norm
from .dmd import (
    DistillConfig,
    DistillState,
    TrainingError,
    backward_simulate,
    critic_dsm_loss,
    dmd_generator_grad,
    sample_dmd_times,
)
from .harness.stats import energy_distance
from .losses import align_loss, sc_loss
from .networks import TokenFieldNet
from .schedule import TimestepGrid, make_grid, sample_step_count, sample_triple
from .teacher import RECTIFIED, GaussianMixture, NoisePath
from .transport import RolloutTrace, sample_k_steps


@dataclass(frozen=True)
class ToyProcessSpec:
    n_chunks: int = 8
    frames: int = 2
    tokens: int = 4
    channels: int = 2
    buffer_chunks: int = 2
    delta: float = np.pi / 8
    obs_noise: float = 0.05
    square_side: float = 0.2

    def __post_init__(self):
        if self.channels != 2:
            raise ValueError("the toy process lives in the plane (channels=2)")
        if self.tokens not in (1, 2, 3, 4):
            raise ValueError("tokens take distinct square corners, so 1 <= tokens <= 4")
        if min(self.n_chunks, self.frames, self.buffer_chunks) < 1:
            raise ValueError("n_chunks, frames and buffer_chunks must be >= 1")
        if self.obs_noise <= 0:
            raise ValueError("obs_noise must be positive")

    @property
    def chunk_dim(self) -> int:
        return self.frames * self.tokens * self.channels

    @property
    def context_dim(self) -> int:
        # flattened buffer plus one validity flag per slot
        return self.buffer_chunks * (self.chunk_dim + 1)

    def offsets(self) -> np.ndarray:
        h = self.square_side / 2
        corners = np.array([[h, h], [-h, h], [-h, -h], [h, -h]])
        return corners[: self.tokens]

    def to_dict(self) -> dict:
        return asdict(self)


def frame_layout(spec: ToyProcessSpec, angles) -> np.ndarray:
    """Token positions ``(..., S, 2)`` for frames whose centre sits at ``angles``."""
    a = np.asarray(angles, dtype=np.float64)[..., None]
    centre = np.stack([np.cos(a), np.sin(a)], axis=-1)
    off = spec.offsets()
    rot = np.stack([np.cos(a) * off[:, 0] - np.sin(a) * off[:, 1],
                    np.sin(a) * off[:, 0] + np.cos(a) * off[:, 1]], axis=-1)
    return centre + rot


def chunk_layout(spec: ToyProcessSpec, last_angle, direction) -> np.ndarray:
    """Flattened mean chunk continuing from ``last_angle`` in ``direction``."""
    last = np.asarray(last_angle, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    steps = np.arange(1, spec.frames + 1) * spec.delta
    angles = last[..., None] + d[..., None] * steps
    return frame_layout(spec, angles).reshape(*np.shape(last), spec.chunk_dim)


@dataclass
class ChunkContext:
    """Buffer of the last ``M`` chunks, oldest first, zero-padded at the start.

    ``buffer`` is ``(B, M, chunk_dim)``; every row shares ``chunk_index``.
    """

    buffer: np.ndarray
    chunk_index: int = 0

    def __post_init__(self):
        self.buffer = np.asarray(self.buffer, dtype=np.float64)
        if self.buffer.ndim != 3:
            raise ValueError("buffer must be (batch, M, chunk_dim)")
        if self.chunk_index < 0:
            raise ValueError("chunk_index must be >= 0")

    @classmethod
    def empty(cls, spec: ToyProcessSpec, batch: int) -> "ChunkContext":
        return cls(np.zeros((batch, spec.buffer_chunks, spec.chunk_dim)), 0)

    @property
    def n_valid(self) -> int:
        return min(self.chunk_index, self.buffer.shape[1])

    def valid_mask(self) -> np.ndarray:
        m = self.buffer.shape[1]
        return (np.arange(m) >= m - self.n_valid).astype(np.float64)

    def embed(self) -> np.ndarray:
        b = self.buffer.shape[0]
        mask = np.broadcast_to(self.valid_mask(), (b, self.buffer.shape[1]))
        return np.concatenate([self.buffer.reshape(b, -1), mask], axis=1)

    def push(self, chunk: np.ndarray) -> "ChunkContext":
        buf = np.concatenate([self.buffer[:, 1:], np.asarray(chunk, dtype=np.float64)[:, None]], axis=1)
        return ChunkContext(buf, self.chunk_index + 1)

    def take(self, rows) -> "ChunkContext":
        return ChunkContext(self.buffer[rows], self.chunk_index)

    @classmethod
    def from_embedding(cls, spec: ToyProcessSpec, c) -> "ChunkContext":
        """Inverse of :meth:`embed`; the chunk index is recovered up to ``M`` (all that the mask shows)."""
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        m, d = spec.buffer_chunks, spec.chunk_dim
        n_valid = int(round(float(c[0, m * d :].sum())))
        return cls(c[:, : m * d].reshape(-1, m, d), n_valid)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def read_heading(spec: ToyProcessSpec, context: ChunkContext):
    """Per-row ``(last_angle, direction)``; direction is 0 while still unknown."""
    n = context.n_valid
    b = context.buffer.shape[0]
    if n == 0:
        return np.zeros(b), np.zeros(b)
    frames = context.buffer[:, -n:].reshape(b, n * spec.frames, spec.tokens, spec.channels)
    centres = frames.mean(axis=2) if spec.tokens == 4 else _frame_centres(spec, frames)
    angles = np.arctan2(centres[..., 1], centres[..., 0])
    last = angles[:, -1]
    if angles.shape[1] < 2:
        return last, np.zeros(b)
    step = _wrap(last - angles[:, -2])
    return last, np.where(step < 0, -1.0, 1.0)


def _frame_centres(spec, frames):
    # with fewer than four corners the token mean is off-centre; undo the rotated offset mean
    mean_off = spec.offsets().mean(axis=0)
    approx = frames.mean(axis=2)
    a = np.arctan2(approx[..., 1], approx[..., 0])
    rot = np.stack([np.cos(a) * mean_off[0] - np.sin(a) * mean_off[1],
                    np.sin(a) * mean_off[0] + np.cos(a) * mean_off[1]], axis=-1)
    return approx - rot


@dataclass
class ConditionalMixture:
    """Per-row mixtures sharing weights and an isotropic variance."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (B, K, dim)
    variance: float

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        b, k, d = self.means.shape
        comp = rng.choice(k, size=b, p=self.weights)
        return self.means[np.arange(b), comp] + np.sqrt(self.variance) * rng.standard_normal((b, d))

    def score(self, x_t, t, path: NoisePath = RECTIFIED) -> np.ndarray:
        """Score of the mixture diffused to level ``t`` (scalar or per row)."""
        x_t = np.atleast_2d(x_t)
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        a, s = path.alpha(t), path.sigma(t)
        var = a**2 * self.variance + s**2
        centred = a[:, None, None] * self.means - x_t[:, None, :]
        logits = np.log(self.weights)[None] - 0.5 * (centred**2).sum(-1) / var[:, None]
        r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return (r[..., None] * centred).sum(axis=1) / var[:, None]

    def posterior_mean(self, x_t, t, path: NoisePath = RECTIFIED) -> np.ndarray:
        """``E[x0 | x_t]`` under the mixture, for a scalar ``t``."""
        x_t = np.atleast_2d(x_t)
        a, s = float(path.alpha(t)), float(path.sigma(t))
        var = a**2 * self.variance + s**2
        resid = x_t[:, None, :] - a * self.means
        logits = np.log(self.weights)[None] - 0.5 * (resid**2).sum(-1) / var
        r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        x0_k = self.means + (a * self.variance / var) * resid
        return (r[..., None] * x0_k).sum(axis=1)

    def row(self, i: int) -> GaussianMixture:
        k = len(self.weights)
        return GaussianMixture(self.weights.copy(), self.means[i].copy(), np.full(k, self.variance))


def conditional_mixture(spec: ToyProcessSpec, context: ChunkContext) -> ConditionalMixture:
    last, direction = read_heading(spec, context)
    var = spec.obs_noise**2
    if not direction.any():
        b = context.buffer.shape[0]
        means = np.stack([chunk_layout(spec, last, np.ones(b)), chunk_layout(spec, last, -np.ones(b))], axis=1)
        return ConditionalMixture(np.array([0.5, 0.5]), means, var)
    return ConditionalMixture(np.array([1.0]), chunk_layout(spec, last, direction)[:, None], var)


def toy_conditional_teacher(spec: ToyProcessSpec, context: ChunkContext) -> GaussianMixture:
    """Next-chunk distribution for a single-row context."""
    if context.buffer.shape[0] != 1:
        raise ValueError("toy_conditional_teacher takes one context; use conditional_mixture for batches")
    return conditional_mixture(spec, context).row(0)


class ConditionalTeacherField:
    """Exact velocity of the conditional teacher, usable wherever a student field is.

    The context embedding is decoded back into a buffer, so the field sees
    exactly what a student would.
    """

    def __init__(self, spec: ToyProcessSpec, path: NoisePath = RECTIFIED, t_min: float = 1e-3):
        self.spec, self.path, self.t_min = spec, path, t_min

    def __call__(self, x, t, c=None):
        t = float(np.asarray(t).ravel()[0])
        ctx = ChunkContext.from_embedding(self.spec, c)
        mixture = conditional_mixture(self.spec, ctx)
        te = max(t, self.t_min)
        x0 = mixture.posterior_mean(x, te, self.path)
        eps = (np.atleast_2d(x) - self.path.alpha(te) * x0) / self.path.sigma(te)
        return self.path.dalpha(te) * x0 + self.path.dsigma(te) * eps


def sample_ground_truth(spec: ToyProcessSpec, rng: np.random.Generator, n: int,
                        n_chunks: Optional[int] = None) -> np.ndarray:
    """``(n, n_chunks, chunk_dim)`` sequences drawn chunk by chunk from the teacher."""
    n_chunks = n_chunks or spec.n_chunks
    ctx = ChunkContext.empty(spec, n)
    out = np.empty((n, n_chunks, spec.chunk_dim))
    for i in range(n_chunks):
        out[:, i] = conditional_mixture(spec, ctx).sample(rng)
        ctx = ctx.push(out[:, i])
    return out


def rollout_chunk(generator, context: ChunkContext, grid: TimestepGrid, noise: np.ndarray,
                  rng: Optional[np.random.Generator] = None, solver: str = "euler",
                  record_features: bool = False) -> Tuple[np.ndarray, RolloutTrace]:
    trace = sample_k_steps(generator, grid, noise, context.embed(), solver, rng, record_features)
    trace.context = context
    return trace.final, trace


def rollout_sequence(generator, spec: ToyProcessSpec, grid: TimestepGrid, noises: np.ndarray,
                     stop: Optional[int] = None):
    """Roll out chunks ``0..stop`` (inclusive); returns ``(chunks, contexts, traces)``.

    ``contexts[i]`` is the buffer chunk ``i`` was generated from and
    ``traces[i]`` its sampler trace.
    """
    b, n_chunks, _ = noises.shape
    stop = n_chunks - 1 if stop is None else stop
    ctx = ChunkContext.empty(spec, b)
    chunks, contexts, traces = [], [], []
    for i in range(stop + 1):
        contexts.append(ctx)
        chunk, trace = rollout_chunk(generator, ctx, grid, noises[:, i])
        chunks.append(chunk)
        traces.append(trace)
        ctx = ctx.push(chunk)
    return np.stack(chunks, axis=1), contexts, traces


@dataclass
class MixedStepConfig:
    step_counts: Tuple[int, ...] = (2, 4, 8)
    step_probs: Tuple[float, ...] = (0.2, 0.4, 0.4)
    fixed_k: Optional[int] = None
    lambda_sc: float = 1.0
    sc_mode: str = "k8"  # "k8": only when K=8; "always"; "off"
    lambda_align: float = 0.5
    align_delta: float = 0.05
    align_warmup_iters: Optional[int] = None  # None: 25% of the run
    align_apply_prob: float = 0.5

    def __post_init__(self):
        self.step_counts = tuple(int(k) for k in self.step_counts)
        self.step_probs = tuple(float(p) for p in self.step_probs)
        if len(self.step_counts) != len(self.step_probs):
            raise ValueError("step_counts and step_probs differ in length")
        if abs(sum(self.step_probs) - 1.0) > 1e-9 or min(self.step_probs) < 0:
            raise ValueError("step_probs must be a probability vector")
        if self.sc_mode not in ("k8", "always", "off"):
            raise ValueError(f"unknown sc_mode {self.sc_mode!r}")
        if self.lambda_sc < 0 or self.lambda_align < 0 or self.align_delta < 0:
            raise ValueError("loss weights and margin must be non-negative")
        if not 0.0 <= self.align_apply_prob <= 1.0:
            raise ValueError("align_apply_prob must lie in [0, 1]")

    def warmup(self, iterations: int) -> int:
        return self.align_warmup_iters if self.align_warmup_iters is not None else iterations // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_counts"], d["step_probs"] = list(self.step_counts), list(self.step_probs)
        return d


@dataclass
class ArState(DistillState):
    mixed: Optional[MixedStepConfig] = None
    process: Optional[ToyProcessSpec] = None


def init_ar_state(config: DistillConfig, mixed: MixedStepConfig, process: ToyProcessSpec,
                  path: NoisePath = RECTIFIED) -> ArState:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    p = process
    gen = TokenFieldNet.create(p.frames, p.tokens, p.channels, p.context_dim, config.hidden, rng, config.activation)
    critic = TokenFieldNet.create(p.frames, p.tokens, p.channels, p.context_dim, config.critic_hidden, rng,
                                  config.activation, score=True, path=path)
    hyper = dict(betas=config.betas, weight_decay=config.weight_decay)
    return ArState(gen, critic,
                   AdamWState.zeros(gen.spec.n_params, learning_rate=config.lr_generator, **hyper),
                   AdamWState.zeros(critic.spec.n_params, learning_rate=config.lr_critic, **hyper),
                   config, 0, mixed, process)


def ar_streams(seed: int):
    """Streams for rollouts/DMD, step counts, the SC term and the alignment term."""
    ss = np.random.SeedSequence([seed, 2])
    return tuple(np.random.default_rng(s) for s in ss.spawn(4))


def _sc_rows(gen, grid_train, grid_infer, noise, c, rng, include_terminal):
    b = noise.shape[0]
    t_s_all = grid_train.as_array()[rng.integers(len(grid_train), size=b)]
    trip = [sample_triple(rng, float(t), grid_train, grid_infer, include_terminal) for t in t_s_all]
    keep = np.array([tr is not None for tr in trip])
    if not keep.any():
        return None
    ts = np.array([tr.t_s for tr in trip if tr is not None])
    tm = np.array([tr.t_m for tr in trip if tr is not None])
    te = np.array([tr.t_e for tr in trip if tr is not None])
    c = c[keep]
    x_s = np.empty((int(keep.sum()), noise.shape[1]))
    pts = list(grid_train.points)
    for tv in np.unique(ts):
        rows = ts == tv
        x_s[rows] = backward_simulate(gen, grid_train, noise[keep][rows], c[rows], pts.index(tv))
    return x_s, ts, tm, te, c, int(keep.sum())


def align_terms(gen, x_last, t_last: float, c, x0_ref, t_f: float, eps, delta: float,
                path: NoisePath = RECTIFIED):
    """Relation alignment between the low-step output and a detached reference.

    Both clean outputs are re-noised to ``t_f`` with the same ``eps`` and the
    student's token features there are compared.  The gradient reaches the
    parameters through the feature evaluation and through the final readout
    ``x_last - t_last v`` of the low-step branch; ``x0_ref`` is a constant.
    """
    cache_r = gen.forward(x_last, t_last, c)
    x0_low = x_last - t_last * cache_r.output
    a, s = path.alpha(t_f), path.sigma(t_f)
    cache_f = gen.forward(a * x0_low + s * eps, t_f, c)
    z_ref = gen.forward(a * x0_ref + s * eps, t_f, c).features
    loss, g_z = align_loss(cache_f.features, z_ref, delta)
    g_out = np.zeros_like(x_last)
    p_f, x_grad = gen.backward(cache_f, g_out, g_z)
    p_r, _ = gen.backward(cache_r, -t_last * a * x_grad)
    return loss, p_f + p_r


def _critic_update(state: ArState, x0, c, mixture_rng):
    cfg = state.config
    t = sample_dmd_times(mixture_rng, cfg, x0.shape[0])
    loss, grad = critic_dsm_loss(state.critic, x0, RECTIFIED, mixture_rng, t=t, c=c,
                                 weighting=cfg.critic_weighting)
    state.critic_opt, params = adamw_step(state.critic_opt, state.critic.params, grad)
    state.critic = state.critic.with_params(params)
    return loss


def ar_iteration(state: ArState, streams, path: NoisePath = RECTIFIED) -> dict:
    """One critic phase and one generator update; returns the metrics record."""
    cfg, mixed, proc = state.config, state.mixed, state.process
    rng, k_rng, sc_rng, al_rng = streams
    k = mixed.fixed_k or sample_step_count(k_rng, mixed.step_counts, mixed.step_probs)
    grid = make_grid(k, cfg.shift)
    b = cfg.batch_size

    # chunks after j cannot influence chunk j, so the rollout stops there
    j = int(rng.integers(proc.n_chunks))
    noises = rng.standard_normal((b, j + 1, proc.chunk_dim))
    _, contexts, traces = rollout_sequence(state.generator, proc, grid, noises, stop=j)
    ctx, trace = contexts[j], traces[j]
    c = ctx.embed()
    mixture = conditional_mixture(proc, ctx)

    # backward simulation: the generator input is its own state at a random step of the
    # rollout, and the clean prediction from there is the sample both players see
    exit_k = int(rng.integers(k))
    x_in, t_in = trace.states[exit_k], np.full(b, grid.points[exit_k])
    x0 = x_in - t_in[:, None] * state.generator(x_in, t_in, c)
    closs = [_critic_update(state, x0, c, rng) for _ in range(cfg.critic_updates_per_gen_update)]

    t_dmd = sample_dmd_times(rng, cfg, b)
    eps = rng.standard_normal(x_in.shape)
    terms = dmd_generator_grad(state.generator, state.critic, lambda x, t: mixture.score(x, t, path),
                               x_in, t_in, t_dmd, eps, path, c, cfg.dmd_normalize)
    grad = terms.grad
    rec = {"iter": state.step, "k": k, "chunk": j, "exit_step": exit_k, "loss_critic": float(np.mean(closs)),
           "loss_dmd": terms.loss, "score_gap": terms.score_gap, "grad_norm_dmd": global_norm([terms.grad]),
           "sc_active": False, "align_active": False}

    use_sc = mixed.lambda_sc > 0 and (mixed.sc_mode == "always" or (mixed.sc_mode == "k8" and k == 8))
    if use_sc:
        rows = _sc_rows(state.generator, cfg.grid_train, grid, noises[:, j], c, sc_rng, cfg.sc_terminal)
        if rows is not None:
            x_s, ts, tm, te, c_sc, m = rows
            loss_sc, g_sc = sc_loss(state.generator, x_s, ts, tm, te, c=c_sc, detach=cfg.sc_detach)
            grad = grad + mixed.lambda_sc * (m / b) * g_sc
            rec.update(sc_active=True, loss_sc=loss_sc * m / b)

    use_align = (mixed.lambda_align > 0 and k in (2, 4) and state.step >= mixed.warmup(cfg.iterations)
                 and al_rng.random() < mixed.align_apply_prob)
    if use_align:
        # the reference branch shares the initial noise and the prefix context
        ref_grid = make_grid(2 * k, cfg.shift)
        x0_ref, _ = rollout_chunk(state.generator, ctx, ref_grid, noises[:, j])
        t_f = float(ref_grid.points[1 + al_rng.integers(len(ref_grid) - 1)])
        loss_al, g_al = align_terms(state.generator, trace.states[-2], grid.points[-1], c, x0_ref, t_f,
                                    al_rng.standard_normal(x0_ref.shape), mixed.align_delta, path)
        grad = grad + mixed.lambda_align * g_al
        rec.update(align_active=True, loss_align=loss_al, t_f=t_f)

    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite generator gradient at step {state.step}")
    state.gen_opt, params = adamw_step(state.gen_opt, state.generator.params, grad)
    state.generator = state.generator.with_params(params)
    rec["grad_norm_gen"] = global_norm([grad])
    return rec


def train_ar(config: DistillConfig, mixed: MixedStepConfig, process: ToyProcessSpec,
             path: NoisePath = RECTIFIED, callback: Optional[Callable] = None,
             state: Optional[ArState] = None, streams: Optional[tuple] = None) -> Tuple[ArState, List[dict]]:
    """Mixed-step rollout distillation on the toy process.

    Each iteration draws K, rolls a batch of sequences up to a random chunk
    with self-generated contexts, trains the critic on that chunk, and updates
    the generator with DMD plus the gated shortcut and alignment terms.
    """
    if state is None:
        state = init_ar_state(config, mixed, process, path)
    if streams is None:
        if state.step > 0:
            raise TrainingError("resuming a run needs the saved RNG streams")
        streams = ar_streams(config.seed)
    log: List[dict] = []
    while state.step < config.iterations:
        rec = ar_iteration(state, streams, path)
        state.step += 1
        for key, v in rec.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise TrainingError(f"non-finite {key} at iteration {rec['iter']}")
        log.append(rec)
        if callback is not None:
            callback(state, rec, streams)
    return state, log


@dataclass
class DriftCurve:
    k: int
    per_chunk: List[float]
    slope: float
    n: int

    def to_rows(self) -> List[dict]:
        return [{"chunk": i, "k": self.k, "energy_distance": d, "n": self.n} for i, d in enumerate(self.per_chunk)]


def per_chunk_energy(generated: np.ndarray, reference: np.ndarray) -> List[float]:
    return [energy_distance(generated[:, i], reference[:, i]) for i in range(generated.shape[1])]


def eval_long_rollout(generator, spec: ToyProcessSpec, n_chunks_long: int, k: int, n: int = 512,
                      seed: int = 0, shift: float = 12.0) -> DriftCurve:
    """Per-chunk energy distance between student rollouts and ground truth."""
    if n_chunks_long < spec.n_chunks:
        raise ValueError("n_chunks_long must be at least the training horizon")
    rng = np.random.default_rng(seed)
    noises = rng.standard_normal((n, n_chunks_long, spec.chunk_dim))
    generated, _, _ = rollout_sequence(generator, spec, make_grid(k, shift), noises)
    truth = sample_ground_truth(spec, rng, n, n_chunks_long)
    curve = per_chunk_energy(generated, truth)
    slope = float(np.polyfit(np.arange(n_chunks_long), curve, 1)[0])
    return DriftCurve(k, curve, slope, n)


def self_calibration_curve(spec: ToyProcessSpec, n_chunks: int, n: int = 512, seed: int = 0) -> List[float]:
    """Per-chunk energy distance between two independent ground-truth samples."""
    rng = np.random.default_rng(seed)
    return per_chunk_energy(sample_ground_truth(spec, rng, n, n_chunks), sample_ground_truth(spec, rng, n, n_chunks))
