"""Velocity and score networks built on :mod:`scdmd_lab.autodiff`.

Both wrappers expose the same small protocol used by the transport and loss
code:

* ``net(x, t, c)`` -> velocity (or score) with the shape of ``x``
* ``net.forward(x, t, c)`` -> cache with ``.output`` and ``.features``
* ``net.backward(cache, cotangent, feature_cotangent=None)`` -> ``(param_grad, x_grad)``

``t`` may be a scalar or one value per batch row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import MlpParams, MlpSpec, backward_cached, forward_cached, init_params

N_TIME_FEATURES = 4


def time_features(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[:, None]
    return np.concatenate([t, np.cos(np.pi * t), np.sin(np.pi * t), np.cos(2 * np.pi * t)], axis=1)


def _rows(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(n, float(t))
    return t.reshape(n)


@dataclass
class _Cache:
    inner: object
    squeeze: bool
    extra: Optional[np.ndarray] = None

    @property
    def output(self):
        out = self.inner.post[-1]
        if self.extra is not None:
            out = out * self.extra[:, None]
        return out[0] if self.squeeze else out

    @property
    def features(self):
        f = self.inner.features
        return f[0] if self.squeeze else f


class FieldNet:
    """``f(x, t, c)`` as an MLP on ``[x, time_features(t), c]``."""

    def __init__(self, spec: MlpSpec, params: MlpParams, dim: int, context_dim: int = 0):
        if spec.input_dim != dim + N_TIME_FEATURES + context_dim:
            raise ValueError("MlpSpec.input_dim must equal dim + time features + context_dim")
        if spec.output_dim != dim:
            raise ValueError("MlpSpec.output_dim must equal dim")
        self.spec, self.params = spec, params
        self.dim, self.context_dim = dim, context_dim

    @classmethod
    def create(cls, dim, hidden, rng, context_dim=0, activation="silu", output_scale=1.0):
        spec = MlpSpec(dim + N_TIME_FEATURES + context_dim, tuple(hidden), dim, activation)
        return cls(spec, init_params(spec, rng, output_scale), dim, context_dim)

    def with_params(self, params: MlpParams) -> "FieldNet":
        return type(self)(self.spec, params, self.dim, self.context_dim)

    def _inputs(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        n = xb.shape[0]
        parts = [xb, time_features(_rows(t, n))]
        if self.context_dim:
            if c is None:
                raise ValueError("this network needs a conditioning context")
            cb = np.atleast_2d(np.asarray(c, dtype=np.float64))
            if cb.shape[0] == 1 and n > 1:
                cb = np.broadcast_to(cb, (n, cb.shape[1]))
            parts.append(cb)
        return np.concatenate(parts, axis=1), squeeze

    def _scale(self, t, n):
        return None

    def forward(self, x, t, c=None) -> _Cache:
        inp, squeeze = self._inputs(x, t, c)
        return _Cache(forward_cached(self.spec, self.params, inp), squeeze, self._scale(t, inp.shape[0]))

    def __call__(self, x, t, c=None) -> np.ndarray:
        return self.forward(x, t, c).output

    def backward(self, cache: _Cache, cotangent, feature_cotangent=None):
        cot = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
        if cache.extra is not None:
            cot = cot * cache.extra[:, None]
        fcot = None if feature_cotangent is None else np.atleast_2d(feature_cotangent)
        pgrad, igrad = backward_cached(self.spec, self.params, cache.inner, cot, fcot)
        xgrad = igrad[:, : self.dim]
        return pgrad, (xgrad[0] if cache.squeeze else xgrad)


class ScoreNet(FieldNet):
    """Score model parameterized through a noise prediction: ``s = -eps_hat / sigma(t)``."""

    def __init__(self, spec, params, dim, context_dim=0, path=None):
        super().__init__(spec, params, dim, context_dim)
        from .teacher import RECTIFIED

        self.path = path or RECTIFIED

    def with_params(self, params):
        return ScoreNet(self.spec, params, self.dim, self.context_dim, self.path)

    @classmethod
    def create(cls, dim, hidden, rng, context_dim=0, activation="silu", path=None, output_scale=1.0):
        spec = MlpSpec(dim + N_TIME_FEATURES + context_dim, tuple(hidden), dim, activation)
        return cls(spec, init_params(spec, rng, output_scale), dim, context_dim, path)

    def _scale(self, t, n):
        sig = self.path.sigma(_rows(t, n))
        return -1.0 / sig


class TokenFieldNet:
    """Per-token network over a chunk of ``F*S`` tokens with ``D`` channels.

    Each token row sees the whole chunk state, a one-hot position code, the
    time features and the flattened context buffer, so every token reads the
    same state and the rows differ only through their position.  The hidden
    layer named by ``feature_layer_index`` gives per-token features of shape
    ``(B, F, S, H)``.
    """

    def __init__(self, spec: MlpSpec, params: MlpParams, frames: int, tokens: int, channels: int,
                 context_dim: int, output_sign: float = 1.0, path=None):
        self.frames, self.tokens, self.channels = frames, tokens, channels
        self.n_tok = frames * tokens
        self.dim = self.n_tok * channels
        self.context_dim = context_dim
        expected = self.dim + self.n_tok + N_TIME_FEATURES + context_dim
        if spec.input_dim != expected or spec.output_dim != channels:
            raise ValueError(f"TokenFieldNet expects input_dim={expected}, output_dim={channels}")
        self.spec, self.params = spec, params
        self.output_sign = output_sign
        self.path = path
        self._eye = np.eye(self.n_tok)

    @classmethod
    def create(cls, frames, tokens, channels, context_dim, hidden, rng, activation="silu",
               score=False, path=None, output_scale=1.0):
        n_tok = frames * tokens
        spec = MlpSpec(n_tok * channels + n_tok + N_TIME_FEATURES + context_dim,
                       tuple(hidden), channels, activation)
        return cls(spec, init_params(spec, rng, output_scale), frames, tokens, channels, context_dim,
                   output_sign=-1.0 if score else 1.0, path=path)

    def with_params(self, params):
        return TokenFieldNet(self.spec, params, self.frames, self.tokens, self.channels,
                             self.context_dim, self.output_sign, self.path)

    @property
    def is_score(self) -> bool:
        return self.output_sign < 0

    def _inputs(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        b, n = xb.shape[0], self.n_tok
        whole = np.broadcast_to(xb[:, None, :], (b, n, self.dim))
        pos = np.broadcast_to(self._eye[None], (b, n, n))
        tf = np.broadcast_to(time_features(_rows(t, b))[:, None, :], (b, n, N_TIME_FEATURES))
        parts = [whole, pos, tf]
        if self.context_dim:
            cb = np.atleast_2d(np.asarray(c, dtype=np.float64))
            if cb.shape[0] == 1 and b > 1:
                cb = np.broadcast_to(cb, (b, cb.shape[1]))
            parts.append(np.broadcast_to(cb[:, None, :], (b, n, self.context_dim)))
        inp = np.concatenate(parts, axis=2).reshape(b * n, self.spec.input_dim)
        return inp, squeeze, b

    def _scale(self, t, b):
        if not self.is_score:
            return None
        sig = self.path.sigma(_rows(t, b))
        return np.repeat(-1.0 / sig, self.n_tok)

    def forward(self, x, t, c=None):
        inp, squeeze, b = self._inputs(x, t, c)
        inner = forward_cached(self.spec, self.params, inp)
        return _TokenCache(inner, squeeze, b, self, self._scale(t, b))

    def __call__(self, x, t, c=None):
        return self.forward(x, t, c).output

    def backward(self, cache: "_TokenCache", cotangent, feature_cotangent=None):
        b, n = cache.batch, self.n_tok
        cot = np.asarray(cotangent, dtype=np.float64).reshape(b * n, self.channels)
        if cache.extra is not None:
            cot = cot * cache.extra[:, None]
        fcot = None
        if feature_cotangent is not None:
            fcot = np.asarray(feature_cotangent, dtype=np.float64).reshape(b * n, -1)
        pgrad, igrad = backward_cached(self.spec, self.params, cache.inner, cot, fcot)
        igrad = igrad.reshape(b, n, -1)
        xgrad = igrad[:, :, : self.dim].sum(axis=1)
        return pgrad, (xgrad[0] if cache.squeeze else xgrad)


@dataclass
class _TokenCache:
    inner: object
    squeeze: bool
    batch: int
    net: TokenFieldNet
    extra: Optional[np.ndarray] = None

    @property
    def output(self):
        out = self.inner.post[-1]
        if self.extra is not None:
            out = out * self.extra[:, None]
        out = out.reshape(self.batch, self.net.dim)
        return out[0] if self.squeeze else out

    @property
    def features(self):
        f = self.inner.features.reshape(self.batch, self.net.frames, self.net.tokens, -1)
        return f[0] if self.squeeze else f
