"""Heterogeneous agent fleets and the benchmark environments.

Agent ``i`` moves with the mixture kernel
``(1 - eps_p) * P_common + eps_p * P_individual[i]`` and earns its own reward
table; the common MDP pairs ``P_common`` with the agent-averaged reward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from fed_ucbvi import rng as rngs
from fed_ucbvi.errors import InputError
from fed_ucbvi.mdp import ROW_SUM_TOL, TabularMDP, mdp_from_dict, mdp_to_dict, validate_mdp

GRID_ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right
GRID_INTENDED_PROB = 0.8


@dataclass(frozen=True, eq=False)
class Fleet:
    common: TabularMDP
    individual_kernels: np.ndarray  # (M, H, S, A, S)
    agent_rewards: np.ndarray  # (M, H, S, A)
    eps_p: float
    eps_r: float

    def __post_init__(self):
        ind = np.array(self.individual_kernels, dtype=np.float64)
        rew = np.array(self.agent_rewards, dtype=np.float64)
        ind.setflags(write=False)
        rew.setflags(write=False)
        object.__setattr__(self, "individual_kernels", ind)
        object.__setattr__(self, "agent_rewards", rew)
        if not 0.0 <= self.eps_p < 1.0:
            raise InputError(f"eps_p must lie in [0, 1), got {self.eps_p}")
        if not 0.0 <= self.eps_r < 1.0:
            raise InputError(f"eps_r must lie in [0, 1), got {self.eps_r}")
        shape = self.common.kernel.shape
        if ind.ndim != 5 or ind.shape[1:] != shape or ind.shape[0] < 1:
            raise InputError(f"individual_kernels must have shape (M, *{shape}), got {ind.shape}")
        if rew.shape != (ind.shape[0],) + shape[:3]:
            raise InputError(f"agent_rewards shape {rew.shape} does not match (M, H, S, A)")
        report = validate_mdp(self.common)
        if not report.ok:
            raise InputError(f"common MDP: {report.message}")
        bad = np.abs(ind.sum(axis=-1) - 1.0) > ROW_SUM_TOL
        bad |= (ind < 0).any(axis=-1)
        if bad.any():
            i, h, s, a = (int(x) for x in np.argwhere(bad)[0])
            raise InputError(f"individual kernel of agent {i} at (h, s, a)={(h, s, a)} is not stochastic")
        if ((rew < 0) | (rew > 1)).any():
            raise InputError("agent rewards must lie in [0, 1]")
        if reward_spread(rew) > self.eps_r + 1e-12:
            raise InputError(f"agent rewards spread {reward_spread(rew):.6g} exceeds eps_r={self.eps_r}")
        if np.abs(self.common.reward - rew.mean(axis=0)).max() > 1e-12:
            raise InputError("common reward must equal the agent-averaged reward")

    @property
    def M(self) -> int:
        return self.individual_kernels.shape[0]

    @cached_property
    def agent_mdps(self) -> tuple[TabularMDP, ...]:
        return tuple(self._mix(i) for i in range(self.M))

    def _mix(self, i: int) -> TabularMDP:
        kernel = (1.0 - self.eps_p) * self.common.kernel + self.eps_p * self.individual_kernels[i]
        return TabularMDP(kernel, self.agent_rewards[i], self.common.start_state)


class MixtureDraw(NamedTuple):
    next_state: int
    used_individual: bool


def build_fleet(
    common_kernel: np.ndarray,
    individual_kernels: np.ndarray,
    agent_rewards: np.ndarray,
    eps_p: float,
    eps_r: float,
    start_state: int = 0,
) -> Fleet:
    """Assemble a fleet; the common reward is the mean of the agent rewards."""
    agent_rewards = np.asarray(agent_rewards, dtype=np.float64)
    common = TabularMDP(common_kernel, agent_rewards.mean(axis=0), start_state)
    return Fleet(common, individual_kernels, agent_rewards, float(eps_p), float(eps_r))


def agent_mdp(fleet: Fleet, i: int) -> TabularMDP:
    if not 0 <= i < fleet.M:
        raise InputError(f"agent index {i} outside [0, {fleet.M})")
    return fleet.agent_mdps[i]


def sample_mixture_transition(
    fleet: Fleet, i: int, h: int, s: int, a: int, rng: np.random.Generator
) -> MixtureDraw:
    """Two-stage draw: pick the mixture component, then the next state."""
    used_individual = bool(rng.random() < fleet.eps_p)
    if used_individual:
        row = fleet.individual_kernels[i, h, s, a]
    else:
        row = fleet.common.kernel[h, s, a]
    s_next = min(int(np.searchsorted(np.cumsum(row), rng.random(), side="right")), row.size - 1)
    return MixtureDraw(s_next, used_individual)


def kernel_l1_gaps(fleet: Fleet) -> np.ndarray:
    """``||P_common(.|s,a) - P_i(.|s,a)||_1`` for every (i, h, s, a)."""
    mixed = np.stack([m.kernel for m in fleet.agent_mdps])
    return np.abs(mixed - fleet.common.kernel[None]).sum(axis=-1)


def reward_spread(agent_rewards: np.ndarray) -> float:
    """``max_{i,j,h,s,a} |r_i - r_j|``."""
    agent_rewards = np.asarray(agent_rewards)
    return float((agent_rewards.max(axis=0) - agent_rewards.min(axis=0)).max())


def _simplex(rng: np.random.Generator, shape: tuple[int, ...], k: int) -> np.ndarray:
    # Dirichlet(1, ..., 1) via normalised standard exponentials
    e = rng.standard_exponential(size=shape + (k,))
    return e / e.sum(axis=-1, keepdims=True)


def make_synthetic(
    S: int = 5,
    A: int = 5,
    H: int = 5,
    M: int = 1,
    eps_p: float = 0.0,
    eps_r: float = 0.0,
    seed: int = 0,
) -> Fleet:
    """Random-simplex kernels and uniform rewards.

    Base rewards are drawn on ``[eps_r/2, 1 - eps_r/2]`` and each agent adds an
    offset from ``[-eps_r/2, eps_r/2]``, which keeps every reward in [0, 1] and
    every pairwise gap within ``eps_r`` without clipping.
    """
    for name, value in (("S", S), ("A", A), ("H", H), ("M", M)):
        if value < 1:
            raise InputError(f"{name} must be >= 1, got {value}")
    if not 0.0 <= eps_r < 1.0:
        raise InputError(f"eps_r must lie in [0, 1), got {eps_r}")
    common_rng = rngs.common_env_stream(seed)
    common_kernel = _simplex(common_rng, (H, S, A), S)
    half = eps_r / 2.0
    base = common_rng.uniform(half, 1.0 - half, size=(H, S, A))
    individual = np.empty((M, H, S, A, S))
    rewards = np.empty((M, H, S, A))
    for i in range(M):
        agent_rng = rngs.agent_env_stream(seed, i)
        individual[i] = _simplex(agent_rng, (H, S, A), S)
        rewards[i] = base + agent_rng.uniform(-half, half, size=(H, S, A))
    # guard the open interval against float rounding at the ends
    np.clip(rewards, 0.0, 1.0, out=rewards)
    return build_fleet(common_kernel, individual, rewards, eps_p, eps_r, start_state=0)


def _grid_layout(rows, cols, walls, start, target):
    walls = {tuple(w) for w in walls}
    cells = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in walls]
    index = {cell: k for k, cell in enumerate(cells)}
    for name, cell in (("start", tuple(start)), ("target", tuple(target))):
        if cell not in index:
            raise InputError(f"{name} {cell} is a wall or outside the {rows}x{cols} grid")
    if len(cells) < 2:
        raise InputError("grid needs at least two accessible cells")
    return cells, index


def _neighbours(cell, index):
    r, c = cell
    out = []
    for dr, dc in GRID_ACTIONS:
        nb = (r + dr, c + dc)
        if nb in index:
            out.append(index[nb])
    return out


def make_gridworld(
    rows: int = 3,
    cols: int = 3,
    walls=((1, 1),),
    start=(0, 0),
    target=(2, 2),
    H: int = 10,
    M: int = 1,
    eps_p: float = 0.0,
    eps_r: float = 0.0,
    seed: int = 0,
) -> Fleet:
    """GridWorld with a slippery common kernel and per-agent neighbour kernels.

    States are the non-wall cells in row-major order. The intended move
    succeeds with probability 0.8; a blocked move keeps that mass on the
    current cell. The remaining 0.2 is spread evenly over the other
    accessible neighbours (or kept in place if there are none). Reward is 1
    in every step spent on the target. Agents' individual kernels are
    Dirichlet(1) draws over the accessible neighbours of each cell.
    ``eps_r`` is accepted for interface symmetry; all agents share rewards.
    """
    if rows < 1 or cols < 1 or H < 1 or M < 1:
        raise InputError("rows, cols, H and M must be positive")
    cells, index = _grid_layout(rows, cols, walls, start, target)
    S, A = len(cells), len(GRID_ACTIONS)
    row_kernel = np.zeros((S, A, S))
    for s, (r, c) in enumerate(cells):
        nbs = _neighbours((r, c), index)
        for a, (dr, dc) in enumerate(GRID_ACTIONS):
            intended = index.get((r + dr, c + dc))
            dest = s if intended is None else intended
            row_kernel[s, a, dest] += GRID_INTENDED_PROB
            others = [n for n in nbs if n != intended]
            if others:
                for n in others:
                    row_kernel[s, a, n] += (1.0 - GRID_INTENDED_PROB) / len(others)
            else:
                row_kernel[s, a, s] += 1.0 - GRID_INTENDED_PROB
    common_kernel = np.broadcast_to(row_kernel, (H, S, A, S)).copy()

    reward = np.zeros((H, S, A))
    reward[:, index[tuple(target)], :] = 1.0

    individual = np.zeros((M, H, S, A, S))
    for i in range(M):
        agent_rng = rngs.agent_env_stream(seed, i)
        for s, cell in enumerate(cells):
            nbs = _neighbours(cell, index)
            if not nbs:
                individual[i, :, s, :, s] = 1.0
                continue
            individual[i, :, s, :, nbs] = np.moveaxis(_simplex(agent_rng, (H, A), len(nbs)), -1, 0)
    rewards = np.broadcast_to(reward, (M, H, S, A)).copy()
    return build_fleet(common_kernel, individual, rewards, eps_p, eps_r, start_state=index[tuple(start)])


def _two_state_kernel(H: int, p: float) -> np.ndarray:
    kernel = np.zeros((H, 2, 1, 2))
    kernel[:, 0, 0] = (1.0 - p, p)
    kernel[:, 1, 0, 1] = 1.0
    return kernel


def _two_state_reward(H: int) -> np.ndarray:
    reward = np.zeros((H, 2, 1))
    reward[:, 0, 0] = 1.0
    return reward


def make_lower_bound_mdp(H: int, eps: float) -> tuple[TabularMDP, TabularMDP]:
    """Two-state, one-action pair whose values differ by order ``eps * H**2``.

    State 0 pays 1 per step, state 1 is a zero-reward sink. The first MDP
    never leaves state 0; the second leaks into the sink with probability
    ``eps`` per step.
    """
    if H < 1:
        raise InputError(f"H must be >= 1, got {H}")
    if not 0.0 < eps < 2.0 / H:
        raise InputError(f"eps must lie in (0, 2/H) = (0, {2.0 / H:g}), got {eps}")
    reward = _two_state_reward(H)
    return TabularMDP(_two_state_kernel(H, 0.0), reward, 0), TabularMDP(_two_state_kernel(H, eps), reward, 0)


def make_lower_bound_fleet(H: int, M: int = 1, eps_p: float = 0.0) -> Fleet:
    """Fleet whose common MDP is the leak-free variant and whose agents all see
    the ``eps_p``-leak variant (individual kernels jump straight to the sink)."""
    if H < 1 or M < 1:
        raise InputError("H and M must be positive")
    individual = np.zeros((M, H, 2, 1, 2))
    individual[..., 1] = 1.0
    rewards = np.broadcast_to(_two_state_reward(H), (M, H, 2, 1)).copy()
    return build_fleet(_two_state_kernel(H, 0.0), individual, rewards, eps_p, 0.0, start_state=0)


def fleet_to_dict(fleet: Fleet) -> dict:
    return {
        "M": fleet.M,
        "eps_p": fleet.eps_p,
        "eps_r": fleet.eps_r,
        "common": mdp_to_dict(fleet.common),
        "individual_kernels": fleet.individual_kernels.tolist(),
        "agent_rewards": fleet.agent_rewards.tolist(),
    }


def fleet_from_dict(data: dict) -> Fleet:
    try:
        common = mdp_from_dict(data["common"])
        fleet = Fleet(
            common,
            np.asarray(data["individual_kernels"]),
            np.asarray(data["agent_rewards"]),
            float(data["eps_p"]),
            float(data["eps_r"]),
        )
    except KeyError as exc:
        raise InputError(f"missing fleet field {exc.args[0]!r}") from None
    if "M" in data and data["M"] != fleet.M:
        raise InputError(f"declared M={data['M']} does not match tables ({fleet.M})")
    return fleet


def dumps_fleet(fleet: Fleet) -> str:
    return json.dumps(fleet_to_dict(fleet))


def loads_fleet(text: str) -> Fleet:
    return fleet_from_dict(json.loads(text))
