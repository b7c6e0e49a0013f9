"""Client/server state machines and lockstep round orchestration.

A round runs in three phases. First every agent plays episodes with the
frozen round policy. All M agents finish episode t before any trigger is
examined. Second, the first agent (in index order, then step order) whose
local or globally estimated doubling condition fires ends the round. Third,
clients and server run the backward H-step policy update over the transport.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from fed_ucbvi import learner
from fed_ucbvi.envs import Fleet
from fed_ucbvi.errors import InputError, InvariantError
from fed_ucbvi.mdp import sample_episode

HEADER_BYTES = 16
CELL_BYTES = 8

FED_UCBVI = "fed_ucbvi"
CONCURRENT = "concurrent_ucbvi"
ALGORITHMS = (FED_UCBVI, CONCURRENT)


# --- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class PolicyBroadcast:
    policy: np.ndarray
    N: np.ndarray
    r: int
    t: int


@dataclass(frozen=True)
class SyncSignal:
    agent_id: int
    t: int


@dataclass(frozen=True)
class ValueBroadcast:
    h: int
    V_row: np.ndarray


@dataclass(frozen=True)
class LocalStats:
    h: int
    agent_id: int
    n_row: np.ndarray
    pv_row: np.ndarray
    pv2_row: np.ndarray
    q_row: np.ndarray

    def report(self) -> learner.LocalQReport:
        return learner.LocalQReport(self.n_row, self.q_row, self.pv_row, self.pv2_row)


@dataclass(frozen=True)
class EndTraining:
    pass


Message = Union[PolicyBroadcast, SyncSignal, ValueBroadcast, LocalStats, EndTraining]

DATA_MESSAGES = (PolicyBroadcast, ValueBroadcast, LocalStats)


def message_size(msg: Message) -> int:
    """Wire size in bytes: 8 per table cell, 16 per header.

    A policy broadcast carries a second 16-byte block for ``(r, t)``.
    """
    if isinstance(msg, LocalStats):
        cells = msg.n_row.size + msg.pv_row.size + msg.pv2_row.size + msg.q_row.size
        return HEADER_BYTES + CELL_BYTES * cells
    if isinstance(msg, ValueBroadcast):
        return HEADER_BYTES + CELL_BYTES * msg.V_row.size
    if isinstance(msg, PolicyBroadcast):
        return HEADER_BYTES + CELL_BYTES * (msg.policy.size + msg.N.size) + 16
    if isinstance(msg, SyncSignal):
        return HEADER_BYTES + 16
    if isinstance(msg, EndTraining):
        return HEADER_BYTES
    raise TypeError(f"not a protocol message: {msg!r}")


SERVER = "server"


class InProcessTransport:
    """Synchronous mailbox transport with byte accounting.

    ``send`` delivers to one endpoint; ``broadcast`` delivers one copy to
    every listed endpoint but is accounted as a single message. Data messages
    (policy, value, local stats) feed ``messages``/``bytes``; sync and
    end-of-training signals are tallied under ``control_messages``.
    """

    def __init__(self):
        self._boxes: dict = defaultdict(deque)
        self.messages = 0
        self.bytes = 0
        self.control_messages = 0

    def _account(self, msg: Message) -> None:
        if isinstance(msg, DATA_MESSAGES):
            self.messages += 1
            self.bytes += message_size(msg)
        else:
            self.control_messages += 1

    def send(self, dest, msg: Message) -> None:
        self._account(msg)
        self._boxes[dest].append(msg)

    def broadcast(self, dests, msg: Message) -> None:
        self._account(msg)
        for dest in dests:
            self._boxes[dest].append(msg)

    def receive(self, dest) -> Message:
        return self._boxes[dest].popleft()

    def drain(self, dest) -> list:
        box = self._boxes[dest]
        out = list(box)
        box.clear()
        return out


# --- state ------------------------------------------------------------------


@dataclass
class ClientState:
    agent_id: int
    n_agents: int
    n: np.ndarray  # (H, S, A) visits so far
    n_round_start: np.ndarray  # visits at the start of the current round
    n3: np.ndarray  # (H, S, A, S) transition counts
    r_hat: np.ndarray  # (H, S, A) observed rewards
    N_hat: np.ndarray  # extrapolated global counts
    N_server: np.ndarray  # global counts received at round start
    round: int = 1

    @classmethod
    def fresh(cls, agent_id: int, n_agents: int, H: int, S: int, A: int) -> "ClientState":
        zeros = lambda *shape: np.zeros(shape, dtype=np.int64)  # noqa: E731
        return cls(
            agent_id,
            n_agents,
            n=zeros(H, S, A),
            n_round_start=zeros(H, S, A),
            n3=zeros(H, S, A, S),
            r_hat=np.zeros((H, S, A)),
            N_hat=zeros(H, S, A),
            N_server=zeros(H, S, A),
        )


def client_record_step(cs: ClientState, h: int, s: int, a: int, r: float, s_next: int) -> None:
    cs.n[h, s, a] += 1
    cs.n3[h, s, a, s_next] += 1
    cs.N_hat[h, s, a] += cs.n_agents
    cs.r_hat[h, s, a] = r


def should_sync(cs: ClientState, h: int, s: int, a: int, nu: float, strict: bool = True) -> bool:
    """Local doubling below the threshold, estimated global doubling above it.

    ``strict=False`` switches both comparisons (and the threshold test) to the
    non-strict form.
    """
    N = cs.N_server[h, s, a]
    if strict:
        if N <= nu:
            return bool(cs.n[h, s, a] > 2 * cs.n_round_start[h, s, a])
        return bool(cs.N_hat[h, s, a] > 2 * N)
    if N < nu:
        return bool(cs.n[h, s, a] >= 2 * cs.n_round_start[h, s, a])
    return bool(cs.N_hat[h, s, a] >= 2 * N)


def client_begin_round(cs: ClientState, msg: PolicyBroadcast) -> None:
    cs.round = msg.r
    cs.n_round_start = cs.n.copy()
    cs.N_server = np.array(msg.N, dtype=np.int64)
    cs.N_hat = cs.N_server.copy()


def compute_nu(delta: float, T: int, H: int, M: int, eps_p: float, S: int, A: int) -> float:
    """Count threshold above which clients trust their global-count estimate."""
    if T < 1 or H < 1 or M < 1:
        raise InputError("T, H and M must be >= 1")
    if not 0.0 <= eps_p < 1.0:
        raise InputError(f"eps_p must lie in [0, 1), got {eps_p}")
    cp = learner.ConfidenceParams(delta, S, A, H, M, T)
    return 14 * eps_p * T * H * M + 182 * M * cp.beta_c(T)


@dataclass
class ServerState:
    H: int
    S: int
    A: int
    M: int
    T: int
    cp: learner.ConfidenceParams
    nu: float
    N: np.ndarray
    Q_hat: np.ndarray
    V_hat: np.ndarray  # (H + 1, S), last row 0
    policy: np.ndarray
    r: int = 1
    t: int = 0  # episodes completed per agent

    @classmethod
    def initial(cls, H, S, A, M, T, delta, eps_p, policy=None) -> "ServerState":
        cp = learner.ConfidenceParams(delta, S, A, H, M, T)
        V_hat = np.full((H + 1, S), float(H))
        V_hat[H] = 0.0
        if policy is None:
            policy = np.zeros((H, S), dtype=np.int64)
        return cls(
            H, S, A, M, T, cp,
            nu=compute_nu(delta, T, H, M, eps_p, S, A),
            N=np.zeros((H, S, A), dtype=np.int64),
            Q_hat=np.full((H, S, A), float(H)),
            V_hat=V_hat,
            policy=np.array(policy, dtype=np.int64),
        )


def end_round_counters(server: ServerState, clients: Sequence[ClientState]) -> ServerState:
    total = np.zeros_like(server.N)
    for cs in clients:
        if cs.n.shape != server.N.shape:
            raise InputError(f"client {cs.agent_id} counts have shape {cs.n.shape}, expected {server.N.shape}")
        total += cs.n
    server.N = total
    server.r += 1
    return server


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    episodes_run: int
    triggering_agent: int | None
    trigger_triplet: tuple[int, int, int] | None  # (h, s, a)
    messages_exchanged: int
    bytes_exchanged: int
    policy: np.ndarray = field(repr=False)  # policy played during the round
    value_at_start: float = math.nan  # V_hat[0][start] after the update


def check_client_counters(cs: ClientState) -> None:
    expected = cs.N_server + cs.n_agents * (cs.n - cs.n_round_start)
    if not np.array_equal(cs.N_hat, expected):
        raise InvariantError(f"agent {cs.agent_id}: global-count estimate drifted from its extrapolation rule")
    if (cs.n < cs.n_round_start).any():
        raise InvariantError(f"agent {cs.agent_id}: visit counts decreased within a round")
    if not np.array_equal(cs.n3.sum(axis=-1), cs.n):
        raise InvariantError(f"agent {cs.agent_id}: transition counts do not sum to visit counts")


def check_conservation(server: ServerState, clients: Sequence[ClientState]) -> None:
    if not np.array_equal(server.N, sum(cs.n for cs in clients)):
        raise InvariantError(f"round {server.r}: server counters differ from the sum of client counters")


def policy_update(
    server: ServerState,
    clients: Sequence[ClientState],
    transport: InProcessTransport,
    freeze_policy: bool = False,
) -> None:
    """Backward pass h = H-1..0 over the transport, then counters and broadcast."""
    H, S, A = server.H, server.S, server.A
    client_ids = [cs.agent_id for cs in clients]
    Q = np.empty((H, S, A))
    V = np.zeros((H + 1, S))
    policy = np.empty((H, S), dtype=np.int64)
    V_next = V[H]  # terminal zeros need no broadcast
    for h in range(H - 1, -1, -1):
        for cs in clients:
            rep = learner.client_local_q(cs, h, V_next)
            transport.send(SERVER, LocalStats(h, cs.agent_id, rep.n, rep.pv, rep.pv2, rep.q))
        reports = [m.report() for m in sorted(transport.drain(SERVER), key=lambda m: m.agent_id)]
        _, Q[h] = learner.aggregate_layer(reports, server.cp, H)
        policy[h] = np.argmax(Q[h], axis=1)
        V[h] = Q[h].max(axis=1)
        transport.broadcast(client_ids, ValueBroadcast(h, V[h].copy()))
        for cid in client_ids:
            V_next = transport.receive(cid).V_row
    end_round_counters(server, clients)
    if not freeze_policy:
        server.Q_hat, server.V_hat, server.policy = Q, V, policy
    for cs in clients:
        transport.send(cs.agent_id, PolicyBroadcast(server.policy, server.N.copy(), server.r, server.t))
        client_begin_round(cs, transport.receive(cs.agent_id))


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    fleet: Fleet,
    rngs: Sequence[np.random.Generator],
    transport: InProcessTransport,
    algorithm: str = FED_UCBVI,
    sync_strict: bool = True,
    freeze_policy: bool = False,
    check_invariants: bool = True,
) -> RoundOutcome:
    if server.t >= server.T:
        raise InputError("episode budget already exhausted")
    if algorithm not in ALGORITHMS:
        raise InputError(f"unknown algorithm {algorithm!r}")
    round_index = server.r
    policy = server.policy
    mdps = fleet.agent_mdps
    msgs0, bytes0 = transport.messages, transport.bytes
    episodes = 0
    trigger_agent = trigger_triplet = None
    while True:
        trajectories = []
        for cs, mdp, rng in zip(clients, mdps, rngs):
            steps = sample_episode(mdp, policy, rng)
            for step in steps:
                client_record_step(cs, step.h, step.s, step.a, step.r, step.s_next)
            trajectories.append(steps)
        episodes += 1
        server.t += 1
        if check_invariants:
            for cs in clients:
                check_client_counters(cs)
        for cs, steps in zip(clients, trajectories):
            for step in steps:
                if should_sync(cs, step.h, step.s, step.a, server.nu, sync_strict):
                    trigger_agent, trigger_triplet = cs.agent_id, (step.h, step.s, step.a)
                    break
            if trigger_agent is not None:
                break
        if trigger_agent is not None or algorithm == CONCURRENT or server.t >= server.T:
            break
    if trigger_agent is not None:
        transport.send(SERVER, SyncSignal(trigger_agent, server.t))
        transport.drain(SERVER)
    policy_update(server, clients, transport, freeze_policy)
    if check_invariants:
        check_conservation(server, clients)
    start = fleet.common.start_state
    return RoundOutcome(
        round_index,
        episodes,
        trigger_agent,
        trigger_triplet,
        transport.messages - msgs0,
        transport.bytes - bytes0,
        policy,
        float(server.V_hat[0, start]),
    )


class Simulation:
    """Owns one run's server, clients, transport and per-agent streams."""

    def __init__(
        self,
        fleet: Fleet,
        T: int,
        delta: float,
        rngs: Sequence[np.random.Generator],
        algorithm: str = FED_UCBVI,
        sync_strict: bool = True,
        initial_policy: np.ndarray | None = None,
        freeze_policy: bool = False,
        check_invariants: bool = True,
    ):
        if T < 1:
            raise InputError(f"T must be >= 1, got {T}")
        if len(rngs) != fleet.M:
            raise InputError(f"need one stream per agent ({fleet.M}), got {len(rngs)}")
        mdp = fleet.common
        H, S, A, M = mdp.H, mdp.S, mdp.A, fleet.M
        self.fleet = fleet
        self.rngs = list(rngs)
        self.algorithm = algorithm
        self.sync_strict = sync_strict
        self.freeze_policy = freeze_policy
        self.check_invariants = check_invariants
        self.server = ServerState.initial(H, S, A, M, T, delta, fleet.eps_p, initial_policy)
        self.clients = [ClientState.fresh(i, M, H, S, A) for i in range(M)]
        self.transport = InProcessTransport()
        for cs in self.clients:
            self.transport.send(cs.agent_id, PolicyBroadcast(self.server.policy, self.server.N.copy(), 1, 0))
            client_begin_round(cs, self.transport.receive(cs.agent_id))

    @property
    def done(self) -> bool:
        return self.server.t >= self.server.T

    def run_round(self) -> RoundOutcome:
        return run_round(
            self.server,
            self.clients,
            self.fleet,
            self.rngs,
            self.transport,
            self.algorithm,
            self.sync_strict,
            self.freeze_policy,
            self.check_invariants,
        )

    def finish(self) -> None:
        self.transport.broadcast([cs.agent_id for cs in self.clients], EndTraining())
