"""Small dense MLPs with hand-written reverse-mode gradients and AdamW.

Parameters live in one flat float64 vector; per-layer weights and biases are
reshaped views into it, so flattening is free and the optimizer works on the
flat vector directly.

Shapes: inputs are ``(B, input_dim)`` or a single ``(input_dim,)`` vector.
Hidden layers use the configured activation; the output layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    pass


class OptimizerError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    feature_layer_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ShapeError(f"all dims must be >= 1, got {self}")
        if self.activation not in ("tanh", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.feature_layer_index is None:
            object.__setattr__(self, "feature_layer_index", max(len(self.hidden_dims) - 1, 0))
        if self.hidden_dims and not 0 <= self.feature_layer_index < len(self.hidden_dims):
            raise ShapeError("feature_layer_index must index a hidden layer")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "feature_layer_index": self.feature_layer_index,
        }


@dataclass
class MlpParams:
    """Flat parameter vector plus per-layer (out, in) weight and bias views."""

    spec: MlpSpec
    flat: np.ndarray
    weights: List[np.ndarray] = field(init=False, repr=False)
    biases: List[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ShapeError(f"expected {self.spec.n_params} parameters, got {self.flat.shape}")
        self.weights, self.biases = [], []
        pos = 0
        for out_dim, in_dim in self.spec.layer_shapes:
            self.weights.append(self.flat[pos : pos + out_dim * in_dim].reshape(out_dim, in_dim))
            pos += out_dim * in_dim
            self.biases.append(self.flat[pos : pos + out_dim])
            pos += out_dim

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())


def flatten_params(params: MlpParams) -> np.ndarray:
    return params.flat.copy()


def unflatten_params(spec: MlpSpec, vector: np.ndarray) -> MlpParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != spec.n_params:
        raise ShapeError(f"vector of length {vector.shape} does not match P={spec.n_params}")
    return MlpParams(spec, vector.copy())


def init_params(spec: MlpSpec, rng: np.random.Generator, output_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``output_scale`` shrinks the last layer."""
    params = MlpParams(spec, np.zeros(spec.n_params))
    n_layers = len(spec.layer_shapes)
    for k, (out_dim, in_dim) in enumerate(spec.layer_shapes):
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        if k == n_layers - 1:
            w *= output_scale
        params.weights[k][...] = w
    return params


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    return a / (1.0 + np.exp(-a))


def _act_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    sig = 1.0 / (1.0 + np.exp(-a))
    return sig * (1.0 + a * (1.0 - sig))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: List[np.ndarray]
    post: List[np.ndarray]
    squeeze: bool

    @property
    def output(self) -> np.ndarray:
        out = self.post[-1]
        return out[0] if self.squeeze else out

    @property
    def features(self) -> np.ndarray:
        return self._feat

    _feat: np.ndarray = None


def _as_batch(spec: MlpSpec, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim={spec.input_dim}")
    return x, squeeze


def forward_cached(spec: MlpSpec, params: MlpParams, x: np.ndarray) -> ForwardCache:
    x, squeeze = _as_batch(spec, x)
    pre, post = [], [x]
    h = x
    n_layers = len(params.weights)
    for k in range(n_layers):
        a = h @ params.weights[k].T + params.biases[k]
        pre.append(a)
        h = a if k == n_layers - 1 else _act(spec.activation, a)
        post.append(h)
    cache = ForwardCache(x, pre, post, squeeze)
    if spec.hidden_dims:
        feat = post[spec.feature_layer_index + 1]
    else:
        feat = post[-1]
    cache._feat = feat[0] if squeeze else feat
    return cache


def backward_cached(
    spec: MlpSpec,
    params: MlpParams,
    cache: ForwardCache,
    output_cotangent: Optional[np.ndarray],
    feature_cotangent: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Pull back cotangents on the output (and optionally the feature layer)."""
    batch = cache.inputs.shape[0]
    n_layers = len(params.weights)

    def _lift(c, width, what):
        c = np.asarray(c, dtype=np.float64)
        if cache.squeeze and c.ndim == 1:
            c = c[None, :]
        if c.shape != (batch, width):
            raise ShapeError(f"{what} cotangent shape {c.shape} != {(batch, width)}")
        return c

    if output_cotangent is None:
        g = np.zeros((batch, spec.output_dim))
    else:
        g = _lift(output_cotangent, spec.output_dim, "output")
    feat_layer = spec.feature_layer_index + 1 if spec.hidden_dims else n_layers
    gfeat = None
    if feature_cotangent is not None:
        width = spec.hidden_dims[spec.feature_layer_index] if spec.hidden_dims else spec.output_dim
        gfeat = _lift(feature_cotangent, width, "feature")
        if feat_layer == n_layers:
            g = g + gfeat

    grad = MlpParams(spec, np.zeros(spec.n_params))
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            if gfeat is not None and k + 1 == feat_layer:
                g = g + gfeat
            g = g * _act_grad(spec.activation, cache.pre[k], cache.post[k + 1])
        grad.weights[k][...] = g.T @ cache.post[k]
        grad.biases[k][...] = g.sum(axis=0)
        g = g @ params.weights[k]
    input_grad = g[0] if cache.squeeze else g
    return grad.flat, input_grad


def mlp_forward(spec: MlpSpec, params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(output, features)``; features are the post-activation values
    of hidden layer ``spec.feature_layer_index``."""
    cache = forward_cached(spec, params, x)
    return cache.output, cache.features


def mlp_backward(
    spec: MlpSpec,
    params: MlpParams,
    x: np.ndarray,
    output_cotangent: np.ndarray,
    feature_cotangent: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(cotangent * output)`` w.r.t. the flat params and the input.

    Batched inputs accumulate (sum) the parameter gradient over the batch.
    """
    cache = forward_cached(spec, params, x)
    return backward_cached(spec, params, cache, output_cotangent, feature_cotangent)


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, n_params: int, **hyper) -> "AdamWState":
        return cls(np.zeros(n_params), np.zeros(n_params), **hyper)

    def copy(self) -> "AdamWState":
        return AdamWState(
            self.m.copy(), self.v.copy(), self.step, self.learning_rate,
            tuple(self.betas), self.epsilon, self.weight_decay,
        )


def adamw_step(state: AdamWState, params: MlpParams, grad: np.ndarray) -> Tuple[AdamWState, MlpParams]:
    """One AdamW update with decoupled weight decay. Inputs are not mutated."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.flat.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient passed to adamw_step")
    b1, b2 = state.betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    lr = state.learning_rate
    flat = params.flat * (1.0 - lr * state.weight_decay)
    flat = flat - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamWState(m, v, step, lr, tuple(state.betas), state.epsilon, state.weight_decay)
    return new_state, MlpParams(params.spec, flat)


def global_norm(vectors: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.dot(v, v)) for v in vectors)))
