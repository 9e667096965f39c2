"""Shared domain types: simplex points, loss functions, ledgers and seeding.

Experts are 1-indexed at every public interface. Arrays are 0-indexed
internally, so ``simplex_vertex(1, d)`` puts its mass in ``weights[0]``.
"""

from __future__ import annotations

import dataclasses
import zlib
from typing import Callable, Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9


class ParameterError(ValueError):
    """A numeric parameter is outside its admissible range."""


class ShapeError(ValueError):
    """Array arguments have inconsistent dimensions."""


class StateError(RuntimeError):
    """An operation was attempted in a state that does not allow it."""


class ProtocolError(RuntimeError):
    """A client/server message arrived out of order or with the wrong arity."""


class ConfigurationError(ValueError):
    """Derived algorithm parameters are infeasible."""


class InputError(ValueError):
    """An adversary or data source cannot supply what a run needs."""


# ---------------------------------------------------------------------------
# Simplex geometry
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class SimplexPoint:
    """A probability distribution over ``d`` experts."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ShapeError(f"weights must be a nonempty vector, got shape {w.shape}")
        if np.any(w < -SIMPLEX_TOL) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ParameterError(f"not a point of the simplex: {w}")
        w = np.clip(w, 0.0, None)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, d: int) -> "SimplexPoint":
        return cls(np.full(d, 1.0 / d))

    def __eq__(self, other):
        if not isinstance(other, SimplexPoint):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())

    def __repr__(self):
        return f"SimplexPoint({np.array2string(self.weights, precision=4)})"


def simplex_vertex(n: int, d: int) -> SimplexPoint:
    """Returns the vertex ``c_n`` of the d-simplex (``n`` is 1-indexed)."""
    if not 1 <= n <= d:
        raise IndexError(f"expert index {n} outside 1..{d}")
    w = np.zeros(d)
    w[n - 1] = 1.0
    return SimplexPoint(w)


def convex_combination(x: SimplexPoint, w: SimplexPoint, eta: float) -> SimplexPoint:
    """Returns ``(1 - eta) * x + eta * w``, renormalized against rounding drift."""
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"eta must lie in [0, 1], got {eta}")
    if x.d != w.d:
        raise ShapeError(f"dimension mismatch: {x.d} vs {w.d}")
    if eta == 0.0:
        return x
    if eta == 1.0:
        return w
    y = (1.0 - eta) * x.weights + eta * w.weights
    return SimplexPoint(y / y.sum())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StochasticLossFn:
    """A convex loss on the simplex with its first-order oracle.

    Attributes:
        eval: Maps simplex weights (a length-d array) to the loss value.
        grad: Maps simplex weights to the gradient (length-d array).
        alpha: Lipschitz constant w.r.t. the l1 norm.
        beta: Smoothness constant w.r.t. the l1 norm.
    """

    eval: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    alpha: float
    beta: float

    def __call__(self, x) -> float:
        return float(self.eval(_weights(x)))

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self.grad(_weights(x)), dtype=float)


@dataclasses.dataclass(frozen=True, eq=False)
class ExpertLossVector:
    """Per-expert losses for one (client, round) of an oblivious game."""

    losses: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.losses, dtype=float)
        if v.ndim != 1:
            raise ShapeError(f"loss vector must be 1-d, got shape {v.shape}")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ParameterError("expert losses must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "losses", v)


def _weights(x) -> np.ndarray:
    return x.weights if isinstance(x, SimplexPoint) else np.asarray(x, dtype=float)


class LossBatch:
    """A finite multiset of stochastic losses supporting batch-mean gradients.

    The base class wraps an arbitrary list of `StochasticLossFn`. Adversaries
    whose losses are parametrized by one vector per sample provide a
    vectorized subclass.
    """

    def __init__(self, losses: Sequence[StochasticLossFn]):
        self._losses = list(losses)

    def __len__(self):
        return len(self._losses)

    def __getitem__(self, i) -> StochasticLossFn:
        return self._losses[i]

    def subset(self, idx: np.ndarray) -> "LossBatch":
        return LossBatch([self._losses[int(i)] for i in idx])

    def mean_grad(self, x) -> np.ndarray:
        w = _weights(x)
        return np.mean([f.gradient(w) for f in self._losses], axis=0)

    def mean_value(self, x) -> float:
        w = _weights(x)
        return float(np.mean([f(w) for f in self._losses]))


# ---------------------------------------------------------------------------
# Ledgers
# ---------------------------------------------------------------------------


def per_client_regret(incurred, loss_table) -> float:
    """Per-client regret against the best fixed expert.

    Args:
        incurred: ``(m, T)`` losses actually paid by each client.
        loss_table: ``(m, T, d)`` loss of every expert (vertex) at every round.

    Returns:
        ``(sum(incurred) - min_n sum_{i,t} loss_table[i, t, n]) / m``.
    """
    incurred = np.asarray(incurred, dtype=float)
    table = np.asarray(loss_table, dtype=float)
    if incurred.ndim != 2 or table.ndim != 3 or table.shape[:2] != incurred.shape:
        raise ShapeError(
            f"incurred {incurred.shape} does not match loss table {table.shape}")
    m = incurred.shape[0]
    best = table.sum(axis=(0, 1)).min()
    return float((incurred.sum() - best) / m)


def regret_series(incurred, expert_round_totals) -> np.ndarray:
    """Cumulative per-client regret after each round.

    Args:
        incurred: ``(m, T)`` losses paid.
        expert_round_totals: ``(T, d)`` per-round expert losses summed over clients.

    Returns:
        Length-T array whose entry ``t`` is the regret over rounds ``1..t+1``.
    """
    incurred = np.asarray(incurred, dtype=float)
    totals = np.asarray(expert_round_totals, dtype=float)
    if totals.ndim != 2 or totals.shape[0] != incurred.shape[1]:
        raise ShapeError(
            f"incurred {incurred.shape} does not match totals {totals.shape}")
    m = incurred.shape[0]
    paid = np.cumsum(incurred.sum(axis=0))
    best = np.cumsum(totals, axis=0).min(axis=1)
    return (paid - best) / m


@dataclasses.dataclass(frozen=True)
class CommEvent:
    round: int
    direction: str  # "up" or "down"
    scalars: int


class CommLedger:
    """Append-only log of scalars exchanged between the server and clients."""

    def __init__(self):
        self._events: list[CommEvent] = []
        self._total = 0

    def record(self, round: int, direction: str, scalars: int) -> None:
        if direction not in ("up", "down"):
            raise ParameterError(f"unknown direction {direction!r}")
        if scalars < 0:
            raise ParameterError("scalar count must be nonnegative")
        if self._events and round < self._events[-1].round:
            raise ProtocolError("communication events must be logged in round order")
        self._events.append(CommEvent(int(round), direction, int(scalars)))
        self._total += int(scalars)

    @property
    def events(self) -> tuple[CommEvent, ...]:
        return tuple(self._events)

    @property
    def total(self) -> int:
        return self._total

    def total_by(self, direction: str) -> int:
        return sum(e.scalars for e in self._events if e.direction == direction)

    def cumulative_by_round(self, T: int) -> np.ndarray:
        """Cumulative scalar count at the end of each round ``1..T``."""
        per_round = np.zeros(T + 1, dtype=np.int64)
        for e in self._events:
            per_round[min(max(e.round, 1), T)] += e.scalars
        return np.cumsum(per_round)[1:]


@dataclasses.dataclass
class Transcript:
    """Complete record of one simulated run.

    ``incurred[i, t]`` is client ``i``'s loss at round ``t + 1`` and
    ``regret[t]`` the per-client cumulative regret after that round. The shape
    of ``actions`` depends on the algorithm: simplex weights per client and
    phase for Fed-DP-OPE-Stoch, one 1-indexed expert per round for Fed-SVT.
    """

    algorithm: str
    variant: str
    m: int
    d: int
    T: int
    seed: Optional[int]
    actions: np.ndarray
    incurred: np.ndarray
    regret: np.ndarray
    comm: CommLedger
    switches: Optional[list] = None
    info: dict = dataclasses.field(default_factory=dict)

    @property
    def final_regret(self) -> float:
        return float(self.regret[-1])


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def _tag_key(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


class RandomSource:
    """Derives independent, reproducible generators from one master seed.

    ``stream("adversary", 3)`` always yields the same draw sequence for the
    same master seed, regardless of which other streams were created.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, tag, *keys) -> np.random.Generator:
        spawn_key = (_tag_key(tag),) + tuple(_tag_key(k) for k in keys)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RandomSource({self.seed})"
