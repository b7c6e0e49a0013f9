import itertools
import math

import numpy as np
import pytest

from fed_ucbvi.mdp import TabularMDP


def random_mdp(rng, S, A, H, start_state=0):
    kernel = rng.dirichlet(np.ones(S), size=(H, S, A))
    reward = rng.random((H, S, A))
    return TabularMDP(kernel, reward, start_state)


def forward_policy_value(mdp, policy):
    """Start-state values by pushing occupancy measures forward in time.

    Shares no code with the backward recursions in the library.
    """
    values = np.zeros(mdp.S)
    for s0 in range(mdp.S):
        occ = np.zeros(mdp.S)
        occ[s0] = 1.0
        total = 0.0
        for h in range(mdp.H):
            nxt = np.zeros(mdp.S)
            for s in range(mdp.S):
                a = policy[h][s]
                total += occ[s] * mdp.reward[h, s, a]
                nxt += occ[s] * mdp.kernel[h, s, a]
            occ = nxt
        values[s0] = total
    return values


def enumerate_optimum(mdp):
    best = np.full(mdp.S, -np.inf)
    for flat in itertools.product(range(mdp.A), repeat=mdp.S * mdp.H):
        policy = np.array(flat).reshape(mdp.H, mdp.S)
        best = np.maximum(best, forward_policy_value(mdp, policy))
    return best


class ReferenceUCBVI:
    """Plain single-agent UCBVI with a Bernstein bonus, written from the update
    rules without touching the federated code path."""

    def __init__(self, mdp, T, delta):
        self.mdp, self.T, self.delta = mdp, T, delta
        H, S, A = mdp.H, mdp.S, mdp.A
        self.counts = np.zeros((H, S, A, S), dtype=np.int64)
        self.reward = np.zeros((H, S, A))
        self.policy = np.zeros((H, S), dtype=np.int64)
        self.Q = np.full((H, S, A), float(H))

    def bonus(self, n, var):
        H, S, A = self.mdp.H, self.mdp.S, self.mdp.A
        if n <= 1:
            return float(H)
        log_sah = math.log(6 * S * A * H / self.delta)
        b_c = log_sah + math.log(6 * math.e * (2 * n + 1))
        b_star = math.log(12 * S * A * H / self.delta)
        return (28 * b_star * H + 11 * b_c) / n + math.sqrt(8 * b_star / n * var)

    def episode(self, rng):
        mdp = self.mdp
        u = rng.random(mdp.H)
        s = mdp.start_state
        for h in range(mdp.H):
            a = self.policy[h, s]
            cdf = np.cumsum(mdp.kernel[h, s, a])
            s_next = min(int(np.searchsorted(cdf, u[h], side="right")), mdp.S - 1)
            self.counts[h, s, a, s_next] += 1
            self.reward[h, s, a] = mdp.reward[h, s, a]
            s = s_next

    def plan(self):
        H, S, A = self.mdp.H, self.mdp.S, self.mdp.A
        V = np.zeros(S)
        for h in range(H - 1, -1, -1):
            n = self.counts[h].sum(axis=-1)
            p_hat = np.full((S, A, S), 1.0 / S)
            seen = n > 0
            p_hat[seen] = self.counts[h][seen] / n[seen][:, None]
            pv = p_hat @ V
            pv2 = p_hat @ (V * V)
            for s in range(S):
                for a in range(A):
                    if n[s, a] == 0:
                        self.Q[h, s, a] = H
                        continue
                    var = max(pv2[s, a] - pv[s, a] * pv[s, a], 0.0)
                    q = self.reward[h, s, a] + pv[s, a]
                    self.Q[h, s, a] = min(q + self.bonus(int(n[s, a]), var), float(H))
            self.policy[h] = np.argmax(self.Q[h], axis=1)
            V = self.Q[h].max(axis=1)


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
