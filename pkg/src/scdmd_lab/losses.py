"""Shortcut self-consistency loss and relation-matrix alignment loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

NORM_FLOOR = 1e-12


def _times(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)


def sc_loss(
    net,
    x_s: np.ndarray,
    t_s,
    t_m,
    t_e,
    c=None,
    detach: str = "none",
    weights: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """Mean squared gap between the direct and the composed Euler endpoints.

    ``t_s, t_m, t_e`` are scalars or per-row arrays.  ``weights`` (per row)
    masks rows whose triple was empty; the mean still divides by the full batch.
    ``detach`` is ``"none"``, ``"direct"`` or ``"composed"`` and stops the
    gradient through that branch.

    Returns ``(loss, grad)`` with ``grad`` the gradient w.r.t. ``net.params.flat``.
    """
    if detach not in ("none", "direct", "composed"):
        raise ValueError(f"unknown detach mode {detach!r}")
    x_s = np.atleast_2d(np.asarray(x_s, dtype=np.float64))
    b = x_s.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    ts, tm, te = _times(t_s, b), _times(t_m, b), _times(t_e, b)
    if not (np.all(ts > tm) and np.all(tm > te)):
        raise ValueError("need t_s > t_m > t_e on every row")
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)

    cache_s = net.forward(x_s, ts, c)
    v_s = cache_s.output
    x1 = x_s - (ts - te)[:, None] * v_s
    y = x_s - (ts - tm)[:, None] * v_s
    cache_m = net.forward(y, tm, c)
    x2 = y - (tm - te)[:, None] * cache_m.output

    diff = x1 - x2
    per_row = (diff**2).sum(axis=1)
    loss = float((w * per_row).sum() / b)

    g = 2.0 * w[:, None] * diff / b  # dL/dx1; dL/dx2 = -g
    g1 = np.zeros_like(g) if detach == "direct" else g
    g2 = np.zeros_like(g) if detach == "composed" else -g
    # x2 = y - (tm - te) v(y, tm)
    p_m, gy_extra = net.backward(cache_m, -(tm - te)[:, None] * g2)
    gy = g2 + gy_extra
    # x1 and y both read v(x_s, t_s)
    cot_s = -(ts - te)[:, None] * g1 - (ts - tm)[:, None] * gy
    p_s, _ = net.backward(cache_s, cot_s)
    return loss, p_s + p_m


def sc_loss_value(v, x_s, t_s, t_m, t_e, c=None) -> float:
    x_s = np.atleast_2d(np.asarray(x_s, dtype=np.float64))
    v_s = v(x_s, t_s, c)
    x1 = x_s - (t_s - t_e) * v_s
    y = x_s - (t_s - t_m) * v_s
    x2 = y - (t_m - t_e) * v(y, t_m, c)
    return float(((x1 - x2) ** 2).sum(axis=1).mean())


@dataclass
class FeatureBlock:
    z: np.ndarray  # (F, S, D) or batched (B, F, S, D)
    t_f: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim not in (3, 4) or min(self.z.shape) < 1:
            raise ValueError(f"feature block must be (F, S, D) or (B, F, S, D), got {self.z.shape}")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("feature block has non-finite entries")


def _normalize(z: np.ndarray):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    ok = norms >= NORM_FLOOR
    zbar = np.where(ok, z / np.where(ok, norms, 1.0), 0.0)
    return zbar, norms, ok


def relation_matrices(z) -> np.ndarray:
    """Per-frame cosine-similarity matrices ``(..., F, S, S)``.

    Tokens with norm below 1e-12 get a zero row/column and a unit diagonal.
    """
    if isinstance(z, FeatureBlock):
        z = z.z
    zbar, _, _ = _normalize(np.asarray(z, dtype=np.float64))
    r = zbar @ np.swapaxes(zbar, -1, -2)
    s = r.shape[-1]
    idx = np.arange(s)
    r[..., idx, idx] = 1.0
    return r


def align_loss(z_low, z_ref, delta: float = 0.05) -> Tuple[float, np.ndarray]:
    """Margin-relaxed relation alignment; returns ``(loss, d loss / d z_low)``.

    ``z_ref`` is a constant.  Batched ``(B, F, S, D)`` inputs average over the batch.
    """
    if isinstance(z_low, FeatureBlock):
        if isinstance(z_ref, FeatureBlock) and z_low.t_f != z_ref.t_f:
            raise ValueError("feature blocks extracted at different noise levels")
        z_low = z_low.z
    if isinstance(z_ref, FeatureBlock):
        z_ref = z_ref.z
    z_low = np.asarray(z_low, dtype=np.float64)
    z_ref = np.asarray(z_ref, dtype=np.float64)
    if z_low.shape != z_ref.shape:
        raise ValueError(f"shape mismatch {z_low.shape} vs {z_ref.shape}")
    batched = z_low.ndim == 4
    zl = z_low if batched else z_low[None]
    zr = z_ref if batched else z_ref[None]
    b, f, s, _ = zl.shape

    zbar, norms, ok = _normalize(zl)
    r_low = relation_matrices(zl)
    r_ref = relation_matrices(zr)
    delta_r = r_low - r_ref
    excess = np.abs(delta_r) - delta
    active = excess > 0
    scale = 1.0 / (b * f * s * s)
    loss = float(np.where(active, excess, 0.0).sum() * scale)

    g_r = np.where(active, np.sign(delta_r), 0.0) * scale
    idx = np.arange(s)
    g_r[..., idx, idx] = 0.0  # diagonal is pinned to 1
    g_zbar = (g_r + np.swapaxes(g_r, -1, -2)) @ zbar
    radial = (g_zbar * zbar).sum(-1, keepdims=True)
    g_z = np.where(ok, (g_zbar - radial * zbar) / np.where(ok, norms, 1.0), 0.0)
    return loss, (g_z if batched else g_z[0])
