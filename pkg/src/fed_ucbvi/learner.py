"""Numeric update rules: confidence widths, empirical kernels, local Q
estimates, pooled variance, Bernstein bonus and count-weighted aggregation.

Scalar functions (``combined_variance``, ``bonus``, ``aggregate_q``) follow
the per-cell rules literally; the ``*_layer`` variants apply the same
arithmetic to a whole ``(S, A)`` layer and are what the server runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fed_ucbvi.errors import InputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfidenceParams:
    delta: float
    S: int
    A: int
    H: int
    M: int = 1
    T: int = 1

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise InputError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def _log_sah(self) -> float:
        return math.log(6 * self.S * self.A * self.H / self.delta)

    def beta_kl(self, n: float) -> float:
        _nonneg(n, "n")
        return self._log_sah + math.log(math.e * (1 + n))

    def beta_c(self, n: float) -> float:
        _nonneg(n, "n")
        return self._log_sah + math.log(6 * math.e * (2 * n + 1))

    def beta_star(self) -> float:
        return math.log(12 * self.S * self.A * self.H / self.delta)

    def beta_var(self, t: float) -> float:
        _nonneg(t, "t")
        return math.log(24 * math.e * (2 * self.M * t + 1) / self.delta)

    def beta_plain(self) -> float:
        return math.log(48 * self.H / self.delta)


def _nonneg(x: float, name: str) -> None:
    if x < 0:
        raise InputError(f"{name} must be nonnegative, got {x}")


@dataclass(frozen=True)
class LocalQReport:
    """One agent's step-h statistics, each an ``(S, A)`` array."""

    n: np.ndarray
    q: np.ndarray
    pv: np.ndarray
    pv2: np.ndarray


def empirical_kernel_row(n3_row: np.ndarray, n: int, S: int | None = None) -> np.ndarray:
    """Transition frequencies, or the uniform row when ``n == 0``."""
    n3_row = np.asarray(n3_row)
    S = n3_row.size if S is None else S
    if n3_row.sum() != n:
        raise InputError(f"count {n} does not match transition counts (sum {n3_row.sum()})")
    if n == 0:
        return np.full(S, 1.0 / S)
    return n3_row / n


def empirical_kernel(n3: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Row-wise ``empirical_kernel_row`` over leading axes of ``n3``."""
    S = n3.shape[-1]
    visited = n > 0
    out = np.full(n3.shape, 1.0 / S)
    out[visited] = n3[visited] / n[visited][:, None]
    return out


def local_q(n: np.ndarray, n3: np.ndarray, r_hat: np.ndarray, V_next: np.ndarray) -> LocalQReport:
    """Local Q estimate for one step from one agent's counts and rewards."""
    p_hat = empirical_kernel(n3, n)
    pv = p_hat @ V_next
    pv2 = p_hat @ (V_next * V_next)
    return LocalQReport(n.copy(), r_hat + pv, pv, pv2)


def client_local_q(cs, h: int, V_next: np.ndarray) -> LocalQReport:
    return local_q(cs.n[h], cs.n3[h], cs.r_hat[h], np.asarray(V_next, dtype=np.float64))


def _clamp_variance(var):
    if np.any(var < 0):
        log.debug("clamping pooled variance %s to 0", np.min(var))
    return np.maximum(var, 0.0)


def combined_variance(reports: Sequence[LocalQReport], s: int, a: int) -> float:
    """Pooled second moment minus squared pooled mean, clamped at 0."""
    counts = [int(rep.n[s, a]) for rep in reports]
    N = sum(counts)
    if N == 0:
        raise InputError("combined variance needs at least one visit")
    mean = sum(c / N * rep.pv[s, a] for c, rep in zip(counts, reports))
    second = sum(c / N * rep.pv2[s, a] for c, rep in zip(counts, reports))
    return float(_clamp_variance(np.float64(second - mean * mean)))


def bonus(N: int, V: float, cp: ConfidenceParams) -> float:
    if N < 0 or V < 0:
        raise InputError(f"bonus needs N >= 0 and V >= 0, got N={N}, V={V}")
    if N <= 1:
        return float(cp.H)
    b_star = cp.beta_star()
    return (28 * b_star * cp.H + 11 * cp.beta_c(N)) / N + math.sqrt(8 * b_star / N * V)


def aggregate_q(reports: Sequence[LocalQReport], cp: ConfidenceParams, s: int, a: int, H: int) -> float:
    counts = [int(rep.n[s, a]) for rep in reports]
    N = sum(counts)
    if N == 0:
        return float(H)
    weighted = sum(c / N * rep.q[s, a] for c, rep in zip(counts, reports))
    return min(weighted + bonus(N, combined_variance(reports, s, a), cp), float(H))


def greedy(q_row) -> tuple[float, int]:
    """Max and lowest maximising index."""
    q_row = np.asarray(q_row)
    a = int(np.argmax(q_row))
    return float(q_row[a]), a


def aggregation_weights(counts: np.ndarray) -> np.ndarray:
    """``n_i / N`` along axis 0; cells with ``N == 0`` get weight 0."""
    N = counts.sum(axis=0)
    safe = np.where(N > 0, N, 1)
    return counts / safe


def bonus_layer(N: np.ndarray, V: np.ndarray, cp: ConfidenceParams) -> np.ndarray:
    b_star = cp.beta_star()
    Nf = np.maximum(N, 2).astype(np.float64)
    # scalar math.log keeps results identical to ``bonus``
    beta_c = np.array([cp.beta_c(n) for n in Nf.ravel()]).reshape(Nf.shape)
    # same operation order as ``bonus``
    b = (28 * b_star * cp.H + 11 * beta_c) / Nf + np.sqrt(8 * b_star / Nf * V)
    return np.where(N <= 1, float(cp.H), b)


def aggregate_layer(reports: Sequence[LocalQReport], cp: ConfidenceParams, H: int):
    """Server update for one step. Returns ``(N, Q)`` over ``(S, A)``."""
    counts = np.stack([rep.n for rep in reports])
    N = counts.sum(axis=0)
    w = aggregation_weights(counts)
    weighted = _ordered_sum(w, [rep.q for rep in reports])
    mean = _ordered_sum(w, [rep.pv for rep in reports])
    second = _ordered_sum(w, [rep.pv2 for rep in reports])
    var = _clamp_variance(second - mean * mean)
    Q = np.minimum(weighted + bonus_layer(N, var, cp), float(H))
    return N, np.where(N > 0, Q, float(H))


def _ordered_sum(w: np.ndarray, tables: Sequence[np.ndarray]) -> np.ndarray:
    # left-to-right accumulation, matching the scalar path bit for bit
    total = np.zeros_like(tables[0], dtype=np.float64)
    for wi, t in zip(w, tables):
        total = total + wi * t
    return total
