"""Invariant battery behind ``fed-ucbvi check``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from fed_ucbvi.envs import Fleet, kernel_l1_gaps, reward_spread
from fed_ucbvi.errors import InputError, InvariantError
from fed_ucbvi.harness import ExperimentConfig, build_fleet, run_experiment
from fed_ucbvi.mdp import TabularMDP, evaluate_policy, optimal_values, validate_mdp

BRUTE_FORCE_LIMIT = 4096
CHECK_T = 200
OPTIMISM_RUNS = 20


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool | None  # None = skipped
    detail: str = ""

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]
        return f"{status} {self.name}: {self.detail}"


def brute_force_optimal(mdp: TabularMDP) -> np.ndarray:
    """``max_pi V^pi[0]`` over every deterministic policy, per start state."""
    n_policies = (mdp.A**mdp.S) ** mdp.H
    if n_policies > BRUTE_FORCE_LIMIT:
        raise InputError(f"{n_policies} policies exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    best = np.full(mdp.S, -np.inf)
    for flat in itertools.product(range(mdp.A), repeat=mdp.S * mdp.H):
        policy = np.array(flat, dtype=np.int64).reshape(mdp.H, mdp.S)
        best = np.maximum(best, evaluate_policy(mdp, policy).V[0])
    return best


def check_mdps(fleet: Fleet) -> CheckResult:
    for label, mdp in [("common", fleet.common)] + [(f"agent {i}", m) for i, m in enumerate(fleet.agent_mdps)]:
        report = validate_mdp(mdp)
        if not report.ok:
            return CheckResult("stochasticity", False, f"{label}: {report.message}")
    return CheckResult("stochasticity", True, f"common + {fleet.M} agent MDPs valid")


def check_kernel_gap(fleet: Fleet) -> CheckResult:
    """Mixture gap: ||P_c - P_i||_1 = eps_p ||P_c - P_ind||_1, hence TV <= eps_p."""
    bad = validate_mdp(fleet.common)
    if not bad.ok:
        return CheckResult("kernel_tv", False, f"common MDP: {bad.message}")
    gaps = kernel_l1_gaps(fleet)
    ind_gaps = np.abs(fleet.individual_kernels - fleet.common.kernel[None]).sum(axis=-1)
    identity = np.abs(gaps - fleet.eps_p * ind_gaps).max()
    worst = float(gaps.max())
    ok = worst <= 2 * fleet.eps_p + 1e-12 and identity <= 1e-12
    return CheckResult("kernel_tv", ok, f"max L1 gap {worst:.6g} (TV {worst / 2:.6g}) vs eps_p={fleet.eps_p}")


def check_rewards(fleet: Fleet) -> CheckResult:
    spread = reward_spread(fleet.agent_rewards)
    mean_ok = np.abs(fleet.common.reward - fleet.agent_rewards.mean(axis=0)).max() <= 1e-12
    ok = spread <= fleet.eps_r + 1e-12 and mean_ok
    return CheckResult("reward_spread", ok, f"max |r_i - r_j| {spread:.6g} vs eps_r={fleet.eps_r}")


def check_oracles(fleet: Fleet) -> CheckResult:
    mdp = fleet.common
    values, policy = optimal_values(mdp)
    diff = np.abs(evaluate_policy(mdp, policy).V - values.V).max()
    bounds = np.arange(mdp.H, -1, -1)[:, None]
    in_range = (values.V >= 0).all() and (values.V <= bounds + 1e-12).all()
    detail = f"|V^pi* - V*| = {diff:.2e}"
    ok = diff <= 1e-12 and in_range
    if (mdp.A**mdp.S) ** mdp.H <= BRUTE_FORCE_LIMIT:
        bf = np.abs(brute_force_optimal(mdp) - values.V[0]).max()
        detail += f", brute force diff {bf:.2e}"
        ok = ok and bf <= 1e-12
    else:
        detail += ", brute force skipped (too many policies)"
    return CheckResult("oracle_equivalence", ok, detail)


def check_protocol(cfg: ExperimentConfig, fleet: Fleet) -> CheckResult:
    small = cfg.replace(T=min(cfg.T, CHECK_T), M=fleet.M, H=fleet.common.H)
    try:
        metrics = run_experiment(small, fleet=fleet, check_invariants=True)
    except InvariantError as exc:
        return CheckResult("counter_conservation", False, str(exc))
    ok = metrics.rounds_within_bound or cfg.algorithm != "fed_ucbvi"
    return CheckResult(
        "counter_conservation",
        ok,
        f"T={small.T}: {metrics.total_rounds} rounds (R_max {metrics.r_max:.1f}), counters consistent",
    )


def check_optimism(cfg: ExperimentConfig) -> CheckResult:
    if cfg.eps_p != 0 or cfg.eps_r != 0:
        return CheckResult("optimism", None, "only defined for homogeneous fleets")
    hits = 0
    for k in range(OPTIMISM_RUNS):
        run = cfg.replace(T=min(cfg.T, CHECK_T), seed=(cfg.seed + k) % 2**64)
        hits += run_experiment(run).optimistic_all_rounds
    frac = hits / OPTIMISM_RUNS
    return CheckResult("optimism", frac >= 1 - cfg.delta, f"{hits}/{OPTIMISM_RUNS} runs optimistic at every round")


def run_checks(cfg: ExperimentConfig, fleet: Fleet | None = None) -> list[CheckResult]:
    """Run the battery. A supplied ``fleet`` replaces the config's environment
    (used to inspect hand-built or deliberately broken fleets)."""
    custom = fleet is not None
    fleet = build_fleet(cfg) if fleet is None else fleet
    results = [check_mdps(fleet), check_kernel_gap(fleet), check_rewards(fleet)]
    if not all(r.passed for r in results):
        return results
    results.append(check_oracles(fleet))
    results.append(check_protocol(cfg, fleet))
    if custom:
        results.append(CheckResult("optimism", None, "not run for a supplied fleet"))
    else:
        results.append(check_optimism(cfg))
    return results
