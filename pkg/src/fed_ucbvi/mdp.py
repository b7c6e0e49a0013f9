"""Finite-horizon tabular MDPs, exact planning oracles and trajectory sampling.

Steps are 0-based throughout: ``h`` ranges over ``0..H-1`` and value tables
carry one extra terminal row ``V[H] = 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from fed_ucbvi.errors import InputError

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Step-indexed kernel ``kernel[h, s, a, s']`` and reward ``reward[h, s, a]``."""

    kernel: np.ndarray
    reward: np.ndarray
    start_state: int = 0

    def __post_init__(self):
        kernel = np.array(self.kernel, dtype=np.float64)
        reward = np.array(self.reward, dtype=np.float64)
        if kernel.ndim != 4 or kernel.shape[1] != kernel.shape[3]:
            raise InputError(f"kernel must have shape (H, S, A, S), got {kernel.shape}")
        if reward.shape != kernel.shape[:3]:
            raise InputError(f"reward shape {reward.shape} does not match kernel {kernel.shape[:3]}")
        if min(kernel.shape) < 1:
            raise InputError("H, S and A must be positive")
        kernel.setflags(write=False)
        reward.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "start_state", int(self.start_state))

    @property
    def H(self) -> int:
        return self.kernel.shape[0]

    @property
    def S(self) -> int:
        return self.kernel.shape[1]

    @property
    def A(self) -> int:
        return self.kernel.shape[2]

    @cached_property
    def cumulative_kernel(self) -> np.ndarray:
        cum = np.cumsum(self.kernel, axis=-1)
        cum.setflags(write=False)
        return cum


@dataclass(frozen=True)
class ValueTables:
    V: np.ndarray  # (H + 1, S)
    Q: np.ndarray  # (H, S, A)


class Step(NamedTuple):
    h: int
    s: int
    a: int
    r: float
    s_next: int


@dataclass(frozen=True)
class MDPReport:
    ok: bool
    where: tuple[int, int, int] | None = None
    message: str = ""


def validate_mdp(mdp: TabularMDP) -> MDPReport:
    """Check stochasticity, reward range and the start state.

    Returns a report naming the first offending ``(h, s, a)`` in row-major
    order. Never raises.
    """
    if not 0 <= mdp.start_state < mdp.S:
        return MDPReport(False, None, f"start_state {mdp.start_state} outside [0, {mdp.S})")
    bad_kernel = (
        (np.abs(mdp.kernel.sum(axis=-1) - 1.0) > ROW_SUM_TOL)
        | (mdp.kernel < 0).any(axis=-1)
        | ~np.isfinite(mdp.kernel).all(axis=-1)
    )
    bad_reward = ~((mdp.reward >= 0.0) & (mdp.reward <= 1.0))
    bad = bad_kernel | bad_reward
    if not bad.any():
        return MDPReport(True)
    where = tuple(int(x) for x in np.argwhere(bad)[0])
    if bad_kernel[where]:
        row = mdp.kernel[where]
        msg = f"kernel row at (h, s, a)={where} is not a probability vector (sum={row.sum():.12g})"
    else:
        msg = f"reward at (h, s, a)={where} is {mdp.reward[where]!r}, outside [0, 1]"
    return MDPReport(False, where, msg)


def _require_valid(mdp: TabularMDP) -> None:
    report = validate_mdp(mdp)
    if not report.ok:
        raise InputError(report.message)


def _check_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.shape != (mdp.H, mdp.S):
        raise InputError(f"policy must have shape {(mdp.H, mdp.S)}, got {policy.shape}")
    if not np.issubdtype(policy.dtype, np.integer):
        raise InputError("policy entries must be integers")
    if policy.size and (policy.min() < 0 or policy.max() >= mdp.A):
        raise InputError(f"policy actions must lie in [0, {mdp.A})")
    return policy


def optimal_values(mdp: TabularMDP) -> tuple[ValueTables, np.ndarray]:
    """Backward induction. Ties in the argmax go to the lowest action index."""
    _require_valid(mdp)
    H, S, A = mdp.H, mdp.S, mdp.A
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    policy = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.reward[h] + mdp.kernel[h] @ V[h + 1]
        policy[h] = np.argmax(Q[h], axis=1)
        V[h] = Q[h].max(axis=1)
    return ValueTables(V, Q), policy


def evaluate_policy(mdp: TabularMDP, policy: np.ndarray) -> ValueTables:
    """Exact value of a deterministic policy."""
    _require_valid(mdp)
    policy = _check_policy(mdp, policy)
    H, S, A = mdp.H, mdp.S, mdp.A
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    states = np.arange(S)
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.reward[h] + mdp.kernel[h] @ V[h + 1]
        V[h] = Q[h][states, policy[h]]
    return ValueTables(V, Q)


def sample_episode(mdp: TabularMDP, policy: np.ndarray, rng: np.random.Generator) -> list[Step]:
    """Roll out one episode from ``start_state``. Consumes exactly H uniforms."""
    cum = mdp.cumulative_kernel
    reward = mdp.reward
    last = mdp.S - 1
    u = rng.random(mdp.H)
    s = mdp.start_state
    steps = []
    for h in range(mdp.H):
        a = int(policy[h][s])
        s_next = int(np.searchsorted(cum[h, s, a], u[h], side="right"))
        # guard against the cumulative row ending a hair below 1
        if s_next > last:
            s_next = last
        steps.append(Step(h, s, a, float(reward[h, s, a]), s_next))
        s = s_next
    return steps


def mdp_to_dict(mdp: TabularMDP) -> dict:
    return {
        "H": mdp.H,
        "S": mdp.S,
        "A": mdp.A,
        "start_state": mdp.start_state,
        "kernel": mdp.kernel.tolist(),
        "reward": mdp.reward.tolist(),
    }


def mdp_from_dict(data: dict) -> TabularMDP:
    try:
        mdp = TabularMDP(np.asarray(data["kernel"]), np.asarray(data["reward"]), data["start_state"])
    except KeyError as exc:
        raise InputError(f"missing MDP field {exc.args[0]!r}") from None
    for key in ("H", "S", "A"):
        if key in data and data[key] != getattr(mdp, key):
            raise InputError(f"declared {key}={data[key]} does not match tables ({getattr(mdp, key)})")
    _require_valid(mdp)
    return mdp


def dumps_mdp(mdp: TabularMDP) -> str:
    return json.dumps(mdp_to_dict(mdp))


def loads_mdp(text: str) -> TabularMDP:
    return mdp_from_dict(json.loads(text))
