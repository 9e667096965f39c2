"""Federated private Frank-Wolfe for stochastic experts (Fed-DP-OPE-Stoch).

Time is split into doubling phases: phase ``p`` covers rounds
``2**(p-1) .. 2**p - 1``. At the start of each phase ``p >= 2`` every client
runs the tree gradient estimator over the losses it saw in phase ``p - 1``.
At each leaf it uploads the (noisy) inner products of its gradient estimate
with the d simplex vertices; the server answers with the vertex minimizing
the client average, and every client takes a Frank-Wolfe step toward it.
The final iterate is then played for the whole phase.

Three privacy variants are supported: ``local-pure`` and ``local-approx``
add Laplace noise on the client before upload, ``central`` adds it once on
the server to the averaged scores.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from typing import Optional

import numpy as np

from fedexperts.adversaries import LossStream
from fedexperts.core import (
    CommLedger,
    ConfigurationError,
    InputError,
    LossBatch,
    ParameterError,
    ProtocolError,
    RandomSource,
    SimplexPoint,
    Transcript,
    convex_combination,
    regret_series,
    simplex_vertex,
)
from fedexperts.dp_fw import TreeAddress, Traversal
from fedexperts.dp_mechanisms import laplace_noise, noisy_avg_argmin

logger = logging.getLogger(__name__)

MODES = ("theorem31", "corollary32", "approx", "central")
SCHEDULES = ("theorem31", "corollary32")
VARIANT_OF_MODE = {
    "theorem31": "local-pure",
    "corollary32": "local-pure",
    "approx": "local-approx",
    "central": "central",
}


@dataclasses.dataclass(frozen=True)
class Phase:
    p: int
    start: int  # first round, 1-indexed
    end: int  # last round, inclusive

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclasses.dataclass(frozen=True)
class PhasePlan:
    phases: tuple[Phase, ...]

    @property
    def P(self) -> int:
        return len(self.phases)

    def __iter__(self):
        return iter(self.phases)

    def __getitem__(self, i):
        return self.phases[i]


def phase_schedule(T: int) -> PhasePlan:
    """Doubling phases covering rounds ``1..T``; the last one is truncated at T."""
    if T < 1:
        raise ParameterError(f"horizon must be >= 1, got {T}")
    phases = []
    p = 1
    while 2 ** (p - 1) <= T:
        phases.append(Phase(p, 2 ** (p - 1), min(2 ** p - 1, T)))
        p += 1
    return PhasePlan(tuple(phases))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def local_pure_scale(alpha: float, j: int, b: int, epsilon: float) -> float:
    return 4.0 * alpha * 2 ** j / (b * epsilon)


def local_approx_scale(alpha: float, T1: int, p: int, b: int, epsilon: float,
                       delta: float) -> float:
    return alpha * 2 ** (T1 / 2) * math.log(2 ** (p - 1) / delta) / (b * epsilon)


def central_scale(alpha: float, j: int, b: int, m: int, epsilon: float) -> float:
    return 4.0 * alpha * 2 ** j / (b * m * epsilon)


@dataclasses.dataclass(frozen=True)
class StochParams:
    """Per-phase parameters of Fed-DP-OPE-Stoch.

    ``noise_scale(j, s)`` is the client Laplace scale for the local variants
    and the server scale for ``central``. ``noiseless`` zeroes every scale.
    """

    variant: str
    p: int
    b: int
    T1: int
    m: int
    epsilon: float
    delta: float
    alpha: float
    noiseless: bool = False

    def noise_scale(self, j: int, s: str = "") -> float:
        if self.noiseless:
            return 0.0
        if self.variant == "local-pure":
            return local_pure_scale(self.alpha, j, self.b, self.epsilon)
        if self.variant == "local-approx":
            return local_approx_scale(self.alpha, self.T1, self.p, self.b,
                                      self.epsilon, self.delta)
        return central_scale(self.alpha, j, self.b, self.m, self.epsilon)

    @property
    def client_noise(self) -> bool:
        return self.variant != "central"

    @property
    def leaf_count(self) -> int:
        return 2 ** (self.T1 + 1) - 2


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp_trees(raw: float, b: int) -> int:
    upper = max(1, int(math.floor(math.log2(b))))
    if not math.isfinite(raw):
        return 1
    return min(max(_round_half_up(raw), 1), upper)


def _smoothed_batch(p: int) -> int:
    b = _round_half_up(2 ** (p - 1) / (p - 1) ** 2)
    if b < 1:
        raise ConfigurationError(f"batch size 2^{p - 1}/{p - 1}^2 rounds below 1")
    return b


def _log_or_neg_inf(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def derive_params(p: int, mode: str, m: int, d: int, epsilon: float, delta: float = 0.0,
                  alpha: float = 1.0, beta: float = 0.0, T: Optional[int] = None,
                  schedule: str = "corollary32", noiseless: bool = False) -> StochParams:
    """Batch size, tree count and noise scales for phase ``p``.

    ``mode`` picks the parameter recipe: ``theorem31`` (pure DP, smoothness
    tuned tree count), ``corollary32`` (pure DP, ``b = 2**(p-1)`` and one
    tree), ``approx`` ((eps, delta)-DP) or ``central`` (server-side noise,
    with batch/tree recipe taken from ``schedule``). The tree count is
    rounded and clamped to ``[1, floor(log2 b)]``.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    if p < 2:
        raise ParameterError(f"phase {p} has no update step")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if d < 2 or m < 1:
        raise ParameterError(f"need d >= 2 and m >= 1, got d={d}, m={m}")
    variant = VARIANT_OF_MODE[mode]
    recipe = mode
    if mode == "central":
        if schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule {schedule!r}")
        recipe = schedule

    if recipe == "corollary32":
        b, T1 = 2 ** (p - 1), 1
    elif recipe == "theorem31":
        b = _smoothed_batch(p)
        raw = 0.5 * _log_or_neg_inf(b * epsilon * beta * math.sqrt(m) / (alpha * math.log(d)))
        T1 = _clamp_trees(raw, b)
    else:
        if not 0.0 < delta < 1.0:
            raise ConfigurationError(f"approximate DP needs 0 < delta < 1, got delta={delta}")
        if T is not None and delta > 1.0 / T:
            raise ConfigurationError(f"approximate DP needs delta <= 1/T, got {delta} > 1/{T}")
        b = _smoothed_batch(p)
        log_term = math.log(2 ** (p - 1) / delta)
        raw = (2.0 / 3.0) * _log_or_neg_inf(
            b * epsilon * math.sqrt(m) * beta / (alpha * log_term * math.log(d)))
        T1 = _clamp_trees(raw, b)
        if beta > 0:
            bound = ((alpha * log_term * math.log(d)) ** 0.25 * math.sqrt(p - 1)
                     / (beta * 2 ** (p - 1)) ** 0.25)
            if epsilon > bound:
                warnings.warn(
                    f"phase {p}: epsilon={epsilon} exceeds the approximate-DP regime "
                    f"bound (alpha log(2^(p-1)/delta) log d)^(1/4) sqrt(p-1) / "
                    f"(beta 2^(p-1))^(1/4) = {bound:.4g}", RuntimeWarning, stacklevel=2)
    return StochParams(variant, p, b, T1, m, epsilon, delta, alpha, noiseless)


# ---------------------------------------------------------------------------
# Messages and the client/server steps
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class UplinkMessage:
    client: int
    address: TreeAddress
    scores: np.ndarray

    @property
    def scalar_count(self) -> int:
        return self.scores.size


@dataclasses.dataclass(frozen=True)
class DownlinkMessage:
    address: TreeAddress
    index: int  # 1-indexed vertex

    scalar_count = 1


class ClientPhase:
    """One client's side of a phase: tree traversal plus leaf protocol.

    Call `next_uplink` to advance to the next leaf; it returns the message
    to send, or ``None`` once every tree has been traversed. Each uplink
    must be answered with `receive` before asking for the next one.
    """

    def __init__(self, client: int, dataset: LossBatch, params: StochParams,
                 x_init: SimplexPoint, noise_rng: Optional[np.random.Generator] = None,
                 batch_rng: Optional[np.random.Generator] = None, full_batch: bool = False):
        self.client = client
        self.params = params
        self.d = x_init.d
        self.traversal = Traversal(dataset, params.T1, params.b, x_init, batch_rng,
                                   full_batch=full_batch, clamp=True)
        self._events = iter(self.traversal)
        self._noise_rng = noise_rng
        self._pending: Optional[TreeAddress] = None
        self.k = 0
        self.leaf_states = []
        self.done = False

    @property
    def x(self) -> SimplexPoint:
        return self.traversal.x

    def next_uplink(self) -> Optional[UplinkMessage]:
        if self._pending is not None:
            raise ProtocolError(f"client {self.client}: reply for {self._pending} still pending")
        for entry, state in self._events:
            if not entry.is_leaf:
                continue
            self.k += 1
            self.leaf_states.append(state)
            # <c_n, v> for vertex c_n is just v_n
            scores = np.array(state.v, dtype=float)
            if self.params.client_noise:
                lam = self.params.noise_scale(entry.address.j, entry.address.s)
                scores = scores + laplace_noise(lam, self.d, self._noise_rng)
            self._pending = entry.address
            return UplinkMessage(self.client, entry.address, scores)
        self.done = True
        return None

    def receive(self, msg: DownlinkMessage) -> SimplexPoint:
        if self._pending is None:
            raise ProtocolError(f"client {self.client}: unexpected downlink {msg}")
        if msg.address != self._pending:
            raise ProtocolError(
                f"client {self.client}: reply for {msg.address}, expected {self._pending}")
        eta = 2.0 / (self.k + 1)
        self.traversal.x = convex_combination(self.traversal.x, simplex_vertex(msg.index, self.d), eta)
        self._pending = None
        return self.traversal.x


def client_phase(client: int, dataset: LossBatch, params: StochParams, x_init: SimplexPoint,
                 noise_rng=None, batch_rng=None, full_batch: bool = False) -> ClientPhase:
    return ClientPhase(client, dataset, params, x_init, noise_rng, batch_rng, full_batch)


def server_select(uplinks, params: StochParams,
                  rng: Optional[np.random.Generator] = None) -> DownlinkMessage:
    """Server's vertex choice for one leaf event."""
    if len(uplinks) != params.m:
        raise ProtocolError(f"expected {params.m} uplinks, got {len(uplinks)}")
    addresses = {u.address for u in uplinks}
    if len(addresses) != 1:
        raise ProtocolError(f"uplinks refer to different leaves: {sorted(map(str, addresses))}")
    address = uplinks[0].address
    rows = np.array([u.scores for u in uplinks], dtype=float)
    if params.client_noise:
        index = noisy_avg_argmin(rows, 0.0)
    else:
        mu = params.noise_scale(address.j, address.s)
        scores = rows.mean(axis=0) + laplace_noise(mu, rows.shape[1], rng)
        index = int(np.argmin(scores)) + 1
    return DownlinkMessage(address, index)


# ---------------------------------------------------------------------------
# End-to-end run
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class StochConfig:
    """Run configuration. ``alpha``/``beta`` default to the stream's constants."""

    m: int
    d: int
    T: int
    mode: str = "corollary32"
    epsilon: float = 10.0
    delta: float = 0.0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    schedule: str = "corollary32"
    noiseless: bool = False
    full_batch: bool = False

    def validate(self):
        if self.m < 1 or self.d < 2 or self.T < 1:
            raise ParameterError(f"need m >= 1, d >= 2, T >= 1 (got {self.m}, {self.d}, {self.T})")
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.mode == "approx" and not 0 < self.delta < 1:
            raise ConfigurationError("approx mode needs 0 < delta < 1")


def expected_comm(m: int, d: int, leaf_counts) -> int:
    """Closed-form scalar count: ``m * (d + 1)`` per leaf event."""
    return m * (d + 1) * sum(leaf_counts)


def run_fed_stoch(config: StochConfig, stream: LossStream, rng: RandomSource,
                  seed: Optional[int] = None) -> Transcript:
    config.validate()
    m, d, T = config.m, config.d, config.T
    if stream.mode != "stochastic":
        raise InputError("Fed-DP-OPE-Stoch needs a stochastic loss stream")
    if stream.d != d:
        raise InputError(f"stream has {stream.d} experts, config says {d}")
    if stream.m < m or stream.T < T:
        raise InputError(f"adversary supplies {stream.m} x {stream.T} losses, "
                         f"run needs {m} x {T}")
    stream = stream.restrict(m, T)
    alpha = stream.alpha if config.alpha is None else config.alpha
    beta = stream.beta if config.beta is None else config.beta

    plan = phase_schedule(T)
    noise_rngs = [rng.stream("client-noise", i) for i in range(m)]
    batch_rngs = [rng.stream("client-batch", i) for i in range(m)]
    server_rng = rng.stream("server-noise")

    z = SimplexPoint.uniform(d)
    xs = [z] * m
    actions = np.empty((m, plan.P, d))
    incurred = np.empty((m, T))
    comm = CommLedger()
    phase_info = []
    for phase in plan:
        if phase.p >= 2:
            params = derive_params(phase.p, config.mode, m, d, config.epsilon, config.delta,
                                   alpha, beta, T=T, schedule=config.schedule,
                                   noiseless=config.noiseless)
            prev = plan[phase.p - 2]
            clients = [
                client_phase(i, stream.batch(i, prev.start - 1, prev.end), params, xs[i],
                             noise_rngs[i], batch_rngs[i], config.full_batch)
                for i in range(m)
            ]
            events = 0
            while True:
                ups = [c.next_uplink() for c in clients]
                if all(u is None for u in ups):
                    break
                if any(u is None for u in ups):
                    raise ProtocolError(f"phase {phase.p}: clients finished at different leaves")
                comm.record(phase.start, "up", sum(u.scalar_count for u in ups))
                down = server_select(ups, params, server_rng)
                for c in clients:
                    c.receive(down)
                comm.record(phase.start, "down", m * down.scalar_count)
                events += 1
            assert events == params.leaf_count
            xs = [c.x for c in clients]
            phase_info.append({"p": phase.p, "b": params.b, "T1": params.T1,
                               "leaves": events})
        for i in range(m):
            actions[i, phase.p - 1] = xs[i].weights
            incurred[i, phase.start - 1:phase.end] = stream.evaluate(
                i, phase.start - 1, phase.end, xs[i])

    expected = expected_comm(m, d, [ph["leaves"] for ph in phase_info])
    assert comm.total == expected, (comm.total, expected)
    regret = regret_series(incurred, stream.expert_round_totals())
    return Transcript(
        algorithm="fed-stoch",
        variant=VARIANT_OF_MODE[config.mode],
        m=m, d=d, T=T, seed=seed,
        actions=actions,
        incurred=incurred,
        regret=regret,
        comm=comm,
        info={"mode": config.mode, "phases": phase_info, "plan": plan},
    )


def phase_actions(transcript: Transcript, client: int = 0) -> np.ndarray:
    """Expands per-phase iterates to a ``(T, d)`` per-round action array."""
    plan = transcript.info["plan"]
    out = np.empty((transcript.T, transcript.d))
    for phase in plan:
        out[phase.start - 1:phase.end] = transcript.actions[client, phase.p - 1]
    return out
