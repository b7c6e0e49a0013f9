"""Experiment execution: fleet construction, protocol run, exact common regret,
communication accounting and CSV output."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fed_ucbvi import rng as rngs
from fed_ucbvi.envs import Fleet, make_gridworld, make_lower_bound_fleet, make_synthetic
from fed_ucbvi.errors import ConfigError, InputError, InvariantError
from fed_ucbvi.mdp import evaluate_policy, optimal_values
from fed_ucbvi.protocol import ALGORITHMS, CONCURRENT, FED_UCBVI, Simulation, compute_nu

log = logging.getLogger(__name__)

ENVS = ("gridworld", "synthetic", "lower_bound")
CSV_HEADER = "episode,cum_common_regret,round,comm_rounds,messages,bytes"
REGRET_CLAMP = 1e-9


@dataclass
class ExperimentConfig:
    env: str = "synthetic"
    S: int = 5
    A: int = 5
    H: int = 5
    M: int = 1
    T: int = 1000
    eps_p: float = 0.0
    eps_r: float = 0.0
    delta: float = 0.1
    algorithm: str = FED_UCBVI
    seed: int = 0
    sync_strict: bool = True
    output_path: str = "run.csv"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env not in ENVS:
            raise ConfigError("env", f"must be one of {ENVS}, got {self.env!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("S", "A", "H", "M", "T", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(name, f"must be an integer, got {value!r}")
        for name in ("S", "A", "H", "M", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be a 64-bit unsigned integer, got {self.seed}")
        for name in ("eps_p", "eps_r", "delta"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(name, f"must be a number, got {value!r}")
            setattr(self, name, float(value))
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta", f"must lie in (0, 1), got {self.delta}")
        for name in ("eps_p", "eps_r"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, f"must lie in [0, 1), got {getattr(self, name)}")
        if not isinstance(self.sync_strict, bool):
            raise ConfigError("sync_strict", f"must be a boolean, got {self.sync_strict!r}")
        if not isinstance(self.output_path, str):
            raise ConfigError("output_path", f"must be a string, got {self.output_path!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown config field")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a JSON config. I/O errors propagate as ``OSError``."""
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON in {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunMetrics:
    config: ExperimentConfig
    cum_regret: list[float] = field(default_factory=list)
    round_index: list[int] = field(default_factory=list)
    comm_rounds: list[int] = field(default_factory=list)
    messages: list[int] = field(default_factory=list)
    bytes: list[int] = field(default_factory=list)
    total_rounds: int = 0
    nu: float = math.nan
    r_max: float = math.nan
    v_star: float = math.nan
    value_trace: list[float] = field(default_factory=list)  # V_hat[0][start] at each round start
    clamped_increments: int = 0
    wall_time: float = 0.0

    @property
    def final_regret(self) -> float:
        return self.cum_regret[-1] if self.cum_regret else 0.0

    @property
    def optimistic_all_rounds(self) -> bool:
        return all(v >= self.v_star for v in self.value_trace)

    @property
    def rounds_within_bound(self) -> bool:
        return self.total_rounds <= self.r_max

    def summary(self) -> dict:
        cfg = self.config
        return {
            "env": cfg.env,
            "algorithm": cfg.algorithm,
            "M": cfg.M,
            "T": cfg.T,
            "eps_p": cfg.eps_p,
            "eps_r": cfg.eps_r,
            "seed": cfg.seed,
            "final_regret": self.final_regret,
            "comm_rounds": self.total_rounds,
            "messages": self.messages[-1] if self.messages else 0,
            "bytes": self.bytes[-1] if self.bytes else 0,
            "nu": self.nu,
            "r_max": self.r_max,
            "v_star": self.v_star,
            "wall_time": round(self.wall_time, 3),
        }


def build_fleet(cfg: ExperimentConfig) -> Fleet:
    if cfg.env == "synthetic":
        return make_synthetic(cfg.S, cfg.A, cfg.H, cfg.M, cfg.eps_p, cfg.eps_r, seed=cfg.seed)
    if cfg.env == "gridworld":
        return make_gridworld(H=cfg.H, M=cfg.M, eps_p=cfg.eps_p, eps_r=cfg.eps_r, seed=cfg.seed)
    return make_lower_bound_fleet(cfg.H, cfg.M, cfg.eps_p)


def r_max_bound(cfg: ExperimentConfig, nu: float, S: int | None = None, A: int | None = None) -> float:
    """Round cap implied by the two doubling rules.

    ``S``/``A`` default to the config; pass the fleet's sizes for envs whose
    geometry fixes them.
    """
    if nu <= 1:
        raise InputError(f"nu must exceed 1, got {nu}")
    S = cfg.S if S is None else S
    A = cfg.A if A is None else A
    sah = S * A * cfg.H
    local = cfg.M * sah * math.log2(nu)
    tail = max(0.0, math.log(cfg.T * cfg.M / nu)) / math.log(8 / 7)
    return local + sah * tail


def best_shared_value_estimate(fleet: Fleet) -> tuple[float, np.ndarray]:
    """Lower bound on the best agent-averaged start value of a single policy.

    Searches only the common-optimal policy and each agent's own optimal
    policy.
    """
    start = fleet.common.start_state
    candidates = [optimal_values(fleet.common)[1]]
    candidates += [optimal_values(m)[1] for m in fleet.agent_mdps]
    best, best_pi = -math.inf, candidates[0]
    for pi in candidates:
        value = float(np.mean([evaluate_policy(m, pi).V[0, start] for m in fleet.agent_mdps]))
        if value > best:
            best, best_pi = value, pi
    return best, best_pi


def run_experiment(
    cfg: ExperimentConfig,
    *,
    fleet: Fleet | None = None,
    initial_policy: np.ndarray | None = None,
    freeze_policy: bool = False,
    check_invariants: bool = True,
) -> RunMetrics:
    """Run the protocol for ``cfg.T`` episodes per agent and measure common regret.

    The round policy is fixed within a round, so its exact value in the common
    MDP is computed once per round and charged to every episode of the round.
    """
    cfg.validate()
    t0 = time.perf_counter()
    fleet = build_fleet(cfg) if fleet is None else fleet
    common = fleet.common
    start = common.start_state
    v_star = float(optimal_values(common)[0].V[0, start])
    streams = [rngs.agent_stream(cfg.seed, i) for i in range(fleet.M)]
    sim = Simulation(
        fleet,
        cfg.T,
        cfg.delta,
        streams,
        algorithm=cfg.algorithm,
        sync_strict=cfg.sync_strict,
        initial_policy=initial_policy,
        freeze_policy=freeze_policy,
        check_invariants=check_invariants,
    )
    metrics = RunMetrics(cfg, nu=sim.server.nu, v_star=v_star)
    metrics.r_max = r_max_bound(cfg, sim.server.nu, common.S, common.A)
    cum = 0.0
    while not sim.done:
        metrics.value_trace.append(float(sim.server.V_hat[0, start]))
        round_index = sim.server.r
        msgs, nbytes = sim.transport.messages, sim.transport.bytes
        outcome = sim.run_round()
        gap = v_star - float(evaluate_policy(common, outcome.policy).V[0, start])
        if gap < 0:
            if gap < -REGRET_CLAMP:
                raise InvariantError(f"round {round_index}: policy value exceeds the optimum by {-gap:.3g}")
            log.debug("clamping regret increment %.3g to 0", gap)
            metrics.clamped_increments += 1
            gap = 0.0
        metrics.total_rounds += 1
        for k in range(outcome.episodes_run):
            cum += gap
            last = k == outcome.episodes_run - 1
            metrics.cum_regret.append(cum)
            metrics.round_index.append(round_index)
            metrics.comm_rounds.append(metrics.total_rounds if last else metrics.total_rounds - 1)
            metrics.messages.append(sim.transport.messages if last else msgs)
            metrics.bytes.append(sim.transport.bytes if last else nbytes)
    sim.finish()
    metrics.value_trace.append(float(sim.server.V_hat[0, start]))
    if cfg.algorithm == CONCURRENT and metrics.total_rounds != cfg.T:
        raise InvariantError(f"concurrent mode ran {metrics.total_rounds} rounds for T={cfg.T}")
    if cfg.algorithm == FED_UCBVI and not metrics.rounds_within_bound:
        log.warning("communication rounds %d exceed R_max %.1f", metrics.total_rounds, metrics.r_max)
    metrics.wall_time = time.perf_counter() - t0
    return metrics


def format_csv(metrics: RunMetrics) -> str:
    lines = [CSV_HEADER]
    for k in range(len(metrics.cum_regret)):
        lines.append(
            f"{k + 1},{metrics.cum_regret[k]:.10g},{metrics.round_index[k]},"
            f"{metrics.comm_rounds[k]},{metrics.messages[k]},{metrics.bytes[k]}"
        )
    return "\n".join(lines) + "\n"


def write_csv(metrics: RunMetrics, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(format_csv(metrics))
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc.strerror or exc}") from exc


def oracle_report(cfg: ExperimentConfig) -> dict:
    """Optimal values and policy of the common MDP (plus both two-state
    variants for ``lower_bound``)."""
    fleet = build_fleet(cfg)

    def describe(mdp):
        values, policy = optimal_values(mdp)
        return {
            "V_star": values.V.tolist(),
            "policy": policy.tolist(),
            "start_state": mdp.start_state,
            "V_star_start": float(values.V[0, mdp.start_state]),
        }

    out = {"env": cfg.env, "S": fleet.common.S, "A": fleet.common.A, "H": fleet.common.H, "common": describe(fleet.common)}
    if cfg.env == "lower_bound":
        out["eps_variant"] = describe(fleet.agent_mdps[0])
    return out
