"""Fed-SVT: federated expert selection for near-realizable oblivious losses.

All clients play one shared expert. Every ``N`` rounds each client uploads
its per-expert loss totals for the phase. The server keeps running totals
and asks AboveThreshold whether the loss of the experts played since the
last switch has crossed a threshold. If it has, and the switching budget
``kappa`` is not spent, a new expert is drawn with probability proportional
to ``exp(-eta * max(total loss, m * L_star) / 2)``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from fedexperts.adversaries import LossStream
from fedexperts.core import (
    CommLedger,
    InputError,
    ParameterError,
    ProtocolError,
    RandomSource,
    ShapeError,
    Transcript,
    regret_series,
)
from fedexperts.dp_mechanisms import AboveThresholdState, Outcome, exponential_sample


@dataclasses.dataclass
class SvtConfig:
    """Fed-SVT configuration; ``kappa``, ``eta_svt`` and ``L`` are derived when left None."""

    m: int
    d: int
    T: int
    N: int = 1
    epsilon: float = 10.0
    delta: float = 0.0
    rho: float = 0.05
    L_star: float = 0.0
    kappa: Optional[int] = None
    eta_svt: Optional[float] = None
    L: Optional[float] = None
    noiseless: bool = False

    @property
    def num_phases(self) -> int:
        return math.ceil(self.T / self.N)

    def complete(self) -> "SvtConfig":
        derived = derive_svt_params(self.d, self.rho, self.epsilon, self.delta, self.T,
                                    self.N, self.L_star, self.m)
        return dataclasses.replace(
            self,
            kappa=derived.kappa if self.kappa is None else self.kappa,
            eta_svt=derived.eta_svt if self.eta_svt is None else self.eta_svt,
            L=derived.L if self.L is None else self.L,
        )


@dataclasses.dataclass(frozen=True)
class SvtParams:
    kappa: int
    eta_svt: float
    L: float


def switching_budget(d: int, rho: float) -> int:
    return 3 * math.ceil(math.log2(d)) + math.ceil(24 * math.log(1.0 / rho))


def derive_svt_params(d: int, rho: float, epsilon: float, delta: float, T: int, N: int,
                      L_star: float, m: int) -> SvtParams:
    if not 0.0 < rho < 0.5:
        raise ParameterError(f"rho must lie in (0, 1/2), got {rho}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if N < 1 or T < 1 or m < 1 or d < 1:
        raise ParameterError(f"need N, T, m, d >= 1 (got {N}, {T}, {m}, {d})")
    if L_star < 0:
        raise ParameterError(f"L_star must be nonnegative, got {L_star}")
    if not 0.0 <= delta < 1.0:
        raise ParameterError(f"delta must lie in [0, 1), got {delta}")
    kappa = switching_budget(d, rho)
    if delta == 0:
        eta = epsilon / (2 * kappa)
    else:
        eta = epsilon / math.sqrt(kappa * math.log(1.0 / delta))
    L = m * L_star + 8.0 * math.log(2.0 * T ** 2 / (N ** 2 * rho)) / epsilon + 4.0 / eta
    return SvtParams(kappa, eta, L)


def client_phase_report(phase_losses, expected_length: Optional[int] = None) -> np.ndarray:
    """Per-expert loss totals over one phase (``N x d`` -> ``d``)."""
    losses = np.asarray(phase_losses, dtype=float)
    if losses.ndim != 2:
        raise ShapeError(f"expected an N x d block of losses, got shape {losses.shape}")
    if expected_length is not None and losses.shape[0] != expected_length:
        raise ProtocolError(f"phase has {losses.shape[0]} rounds, expected {expected_length}")
    return losses.sum(axis=0)


class SvtServerState:
    """Server memory between phases.

    ``tallies[n]`` is the total loss of expert ``n + 1`` over all clients
    and all reported rounds; ``since_switch`` the loss of the experts
    actually played since the last switch.
    """

    def __init__(self, config: SvtConfig, initial_expert: int,
                 threshold_rng: Optional[np.random.Generator] = None):
        self.expert = initial_expert
        self.k = 0
        self.tau = 0
        self.phase = 0
        self.tallies = np.zeros(config.d)
        self.since_switch = 0.0
        self.threshold = AboveThresholdState(config.L, config.epsilon, threshold_rng,
                                             noise_override=config.noiseless)


def server_phase_step(state: SvtServerState, reports, config: SvtConfig,
                      round_index: int, threshold_rng=None, sample_rng=None,
                      phase: Optional[int] = None) -> int:
    """Processes the reports closing a phase and returns the next expert.

    Args:
        state: Mutable server state.
        reports: ``m x d`` per-client phase totals.
        config: Completed configuration.
        round_index: Last round of the phase being reported (1-indexed).
        threshold_rng: Stream for AboveThreshold noise.
        sample_rng: Stream for exponential sampling.
        phase: Optional 1-indexed phase number, checked against the state.
    """
    rows = np.asarray(reports, dtype=float)
    if rows.ndim != 2 or rows.shape != (config.m, config.d):
        raise ProtocolError(f"expected {config.m} reports of length {config.d}, got {rows.shape}")
    if phase is not None and phase != state.phase + 1:
        raise ProtocolError(f"report for phase {phase}, expected phase {state.phase + 1}")
    state.phase += 1
    combined = rows.sum(axis=0)
    state.tallies += combined
    # the expert is constant within a phase, so the played loss is one column
    state.since_switch += combined[state.expert - 1]
    if state.k >= config.kappa:
        return state.expert
    outcome = state.threshold.query(state.since_switch, threshold_rng)
    if outcome is Outcome.BELOW:
        return state.expert
    scores = np.maximum(state.tallies, config.m * config.L_star)
    state.expert = exponential_sample(scores, config.eta_svt, sample_rng)
    state.k += 1
    state.tau = round_index
    state.since_switch = 0.0
    state.threshold.reset(threshold_rng)
    return state.expert


def expected_comm(m: int, d: int, T: int, N: int) -> int:
    return m * (d + 1) * math.ceil(T / N)


def run_fed_svt(config: SvtConfig, losses, rng: RandomSource,
                seed: Optional[int] = None) -> Transcript:
    """Simulates Fed-SVT on an ``m x T x d`` oblivious loss tensor or stream."""
    if isinstance(losses, LossStream):
        if losses.mode != "oblivious":
            raise InputError("Fed-SVT needs an oblivious loss stream")
        stream = losses
        tensor = losses.data
    else:
        tensor = np.asarray(losses, dtype=float)
        stream = None
    if tensor.ndim != 3:
        raise ShapeError(f"loss tensor must be m x T x d, got shape {tensor.shape}")
    if tensor.shape[0] < config.m or tensor.shape[1] < config.T or tensor.shape[2] != config.d:
        raise ShapeError(f"loss tensor {tensor.shape} cannot supply "
                         f"{config.m} x {config.T} x {config.d}")
    tensor = tensor[:config.m, :config.T]
    config = config.complete()
    m, d, T, N = config.m, config.d, config.T, config.N

    threshold_rng = rng.stream("svt-threshold")
    sample_rng = rng.stream("svt-sample")
    initial = int(rng.stream("svt-init").integers(d)) + 1
    state = SvtServerState(config, initial, threshold_rng)

    actions = np.empty(T, dtype=np.int64)
    incurred = np.empty((m, T))
    comm = CommLedger()
    switches = []
    for n in range(1, config.num_phases + 1):
        start, stop = (n - 1) * N, min(n * N, T)
        expert = state.expert
        actions[start:stop] = expert
        incurred[:, start:stop] = tensor[:, start:stop, expert - 1]
        reports = np.stack([client_phase_report(tensor[i, start:stop], stop - start)
                            for i in range(m)])
        comm.record(stop, "up", m * d)
        new = server_phase_step(state, reports, config, stop, threshold_rng, sample_rng, phase=n)
        comm.record(stop, "down", m)
        if state.tau == stop and state.k > len(switches):
            switches.append((stop, new))
        assert state.k <= config.kappa

    assert comm.total == expected_comm(m, d, T, N)
    if stream is not None and stream.meta.get("uniform"):
        totals = tensor[0] * m
    else:
        totals = tensor.sum(axis=0)
    regret = regret_series(incurred, totals)
    return Transcript(
        algorithm="fed-svt",
        variant="pure" if config.delta == 0 else "approx",
        m=m, d=d, T=T, seed=seed,
        actions=actions,
        incurred=incurred,
        regret=regret,
        comm=comm,
        switches=switches,
        info={"kappa": config.kappa, "eta_svt": config.eta_svt, "L": config.L, "N": N,
              "initial_expert": initial, "tallies": state.tallies.copy()},
    )
