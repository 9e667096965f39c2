"""Loss-stream generators for stochastic and oblivious adversaries.

Every generator draws from tagged sub-streams of a `RandomSource`, keyed by
client index. Client ``i`` therefore sees the same losses whatever the total
number of clients, which keeps federated and single-client arms comparable.
"""

from __future__ import annotations

import csv
import math
from typing import Optional

import numpy as np

from fedexperts.core import (
    ExpertLossVector,
    InputError,
    LossBatch,
    ParameterError,
    RandomSource,
    ShapeError,
    StochasticLossFn,
    _weights,
)


class IngestionError(ValueError):
    """A ratings file could not be parsed."""


# ---------------------------------------------------------------------------
# Parametric loss families
# ---------------------------------------------------------------------------


class LinearFamily:
    """``l(x) = <c, x>`` with coefficient vector ``c`` in ``[0, 1]^d``."""

    name = "linear"

    def __init__(self, d: int):
        self.d = d
        self.alpha = 1.0
        self.beta = 0.0

    def value(self, params, x):
        return params @ x

    def grad(self, params, x):
        return np.array(params, dtype=float)

    def vertex_values(self, params):
        return params


class SmoothedCrossEntropy:
    """``l(x) = -sum_k p_k log((1 - gamma) x_k + gamma / d)``.

    Mixing the prediction with the uniform distribution keeps the gradient
    bounded on the simplex boundary.
    """

    name = "xent"

    def __init__(self, d: int, gamma: float):
        if not 0.0 < gamma < 1.0:
            raise ParameterError(f"smoothing gamma must lie in (0, 1), got {gamma}")
        self.d = d
        self.gamma = gamma
        self.alpha = (1.0 - gamma) / (gamma / d)
        self.beta = self.alpha ** 2

    def _mix(self, x):
        return (1.0 - self.gamma) * x + self.gamma / self.d

    def value(self, params, x):
        return -(params * np.log(self._mix(x))).sum(axis=-1)

    def grad(self, params, x):
        return -(1.0 - self.gamma) * params / self._mix(x)

    def vertex_values(self, params):
        hit = -math.log(1.0 - self.gamma + self.gamma / self.d)
        miss = -math.log(self.gamma / self.d)
        return params * hit + (1.0 - params) * miss


class ParametricBatch(LossBatch):
    """Vectorized `LossBatch` over rows of a parameter matrix."""

    def __init__(self, family, params: np.ndarray):
        self.family = family
        self.params = params

    def __len__(self):
        return self.params.shape[0]

    def __getitem__(self, i) -> StochasticLossFn:
        return _loss_fn(self.family, self.params[i])

    def subset(self, idx) -> "ParametricBatch":
        return ParametricBatch(self.family, self.params[idx])

    def mean_grad(self, x) -> np.ndarray:
        return self.family.grad(self.params, _weights(x)).mean(axis=0)

    def mean_value(self, x) -> float:
        return float(self.family.value(self.params, _weights(x)).mean())


def _loss_fn(family, row) -> StochasticLossFn:
    row = np.array(row, dtype=float)
    row.setflags(write=False)
    return StochasticLossFn(
        eval=lambda x: float(family.value(row, x)),
        grad=lambda x: family.grad(row, x),
        alpha=family.alpha,
        beta=family.beta,
    )


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------


class LossStream:
    """A fully materialized ``m x T`` grid of losses over ``d`` experts.

    Stochastic streams hold a loss family and one parameter vector per
    (client, round); oblivious streams hold the loss tensor directly.
    Rounds and clients are 0-indexed here; experts index the last axis.
    """

    def __init__(self, mode: str, data: np.ndarray, family=None,
                 L_star: Optional[float] = None, meta: Optional[dict] = None):
        if mode not in ("stochastic", "oblivious"):
            raise ParameterError(f"unknown stream mode {mode!r}")
        if data.ndim != 3:
            raise ShapeError(f"loss data must be m x T x d, got shape {data.shape}")
        if mode == "stochastic" and family is None:
            raise ParameterError("stochastic streams need a loss family")
        if mode == "oblivious" and (np.any(data < 0) or np.any(data > 1)):
            raise ParameterError("oblivious losses must lie in [0, 1]")
        data = data.view()
        data.setflags(write=False)
        self.mode = mode
        self.data = data
        self.family = family
        self.L_star = L_star
        self.meta = dict(meta or {})

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    @property
    def alpha(self) -> float:
        return self.family.alpha if self.family is not None else 1.0

    @property
    def beta(self) -> float:
        return self.family.beta if self.family is not None else 0.0

    def __getitem__(self, key):
        i, t = key
        if self.mode == "stochastic":
            return _loss_fn(self.family, self.data[i, t])
        return ExpertLossVector(self.data[i, t])

    def batch(self, i: int, start: int, stop: int) -> ParametricBatch:
        if self.mode != "stochastic":
            raise InputError("batches are only defined for stochastic streams")
        if stop > self.T or start < 0 or stop <= start:
            raise InputError(f"rounds [{start}, {stop}) not available (T={self.T})")
        return ParametricBatch(self.family, self.data[i, start:stop])

    def vertex_table(self) -> np.ndarray:
        """``(m, T, d)`` loss of each expert vertex."""
        if self.mode == "oblivious":
            return self.data
        return self.family.vertex_values(self.data)

    def expert_round_totals(self) -> np.ndarray:
        """``(T, d)`` per-round expert losses summed over clients."""
        if self.mode == "oblivious" and self.meta.get("uniform"):
            return self.data[0] * self.m
        return self.vertex_table().sum(axis=0)

    def evaluate(self, i: int, start: int, stop: int, x) -> np.ndarray:
        """Losses client ``i`` pays over rounds ``[start, stop)`` playing ``x``."""
        if self.mode == "stochastic":
            return self.family.value(self.data[i, start:stop], _weights(x))
        return self.data[i, start:stop] @ _weights(x)

    def restrict(self, m: Optional[int] = None, T: Optional[int] = None) -> "LossStream":
        m = self.m if m is None else m
        T = self.T if T is None else T
        if m > self.m or T > self.T:
            raise InputError(f"stream has {self.m} clients x {self.T} rounds; "
                             f"cannot supply {m} x {T}")
        return LossStream(self.mode, self.data[:m, :T], self.family, self.L_star, self.meta)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def gen_stochastic_linear(m: int, T: int, d: int, rng: RandomSource,
                          mean_range: tuple[float, float] = (0.45, 0.55),
                          spread: float = 0.25) -> LossStream:
    """IID linear losses around a fixed mean vector.

    Means are drawn once from ``U[mean_range]``; each coefficient is the mean
    plus ``U[-spread, spread]`` noise, clipped to ``[0, 1]``. The default
    narrow band keeps the best expert hard to tell apart from the runners-up
    over long horizons. Clipping never binds when ``mean_range`` lies inside
    ``[spread, 1 - spread]``, so coefficients then average exactly to the mean.
    """
    if d < 2:
        raise ParameterError("need at least two experts")
    lo, hi = mean_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ParameterError(f"mean range must lie in [0, 1], got {mean_range}")
    if not 0.0 <= spread <= 0.5:
        raise ParameterError(f"spread must lie in [0, 0.5], got {spread}")
    mean = rng.stream("adversary", "mean").uniform(lo, hi, size=d)
    data = np.empty((m, T, d))
    for i in range(m):
        g = rng.stream("adversary", "client", i)
        data[i] = mean + g.uniform(-spread, spread, size=(T, d))
    np.clip(data, 0.0, 1.0, out=data)
    return LossStream("stochastic", data, LinearFamily(d), meta={"mean": mean, "kind": "linear"})


def gen_stochastic_crossentropy(m: int, T: int, d: int, rng: RandomSource,
                                gamma: float = 1e-2) -> LossStream:
    """Cross-entropy losses against softmaxed Gaussian class distributions.

    Per-class Gaussian means are ``U[0, 1]`` and standard deviations
    ``U[0.1, 1]``, drawn once; each (client, round) samples a fresh logit
    vector from them.
    """
    family = SmoothedCrossEntropy(d, gamma)
    g0 = rng.stream("adversary", "mean")
    mu = g0.uniform(0.0, 1.0, size=d)
    sigma = g0.uniform(0.1, 1.0, size=d)
    data = np.empty((m, T, d))
    for i in range(m):
        g = rng.stream("adversary", "client", i)
        z = mu + sigma * g.standard_normal((T, d))
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        data[i] = p / p.sum(axis=1, keepdims=True)
    return LossStream("stochastic", data, family,
                      meta={"mu": mu, "sigma": sigma, "kind": "xent"})


def gen_oblivious_realizable(m: int, T: int, d: int, rng: RandomSource) -> LossStream:
    """Uniform ``[0, 1]`` losses except one expert that always has loss 0."""
    if d < 2:
        raise ParameterError("need at least two experts")
    best = int(rng.stream("adversary", "expert").integers(d))
    data = np.empty((m, T, d))
    for i in range(m):
        data[i] = rng.stream("adversary", "client", i).uniform(0.0, 1.0, size=(T, d))
    data[:, :, best] = 0.0
    assert not data[:, :, best].any()
    return LossStream("oblivious", data, L_star=0.0,
                      meta={"best_expert": best + 1, "kind": "realizable"})


def lowerbound_switch_length(d: int, m: int, epsilon: float) -> int:
    return max(1, math.ceil(math.log(d) / (2 * m * epsilon)))


def gen_lowerbound_sequence(d: int, m: int, T: int, epsilon: float, j: int) -> LossStream:
    """All-zero losses, then ``k`` final rounds where only expert ``j`` is free."""
    if not 1 <= j <= d:
        raise ParameterError(f"target expert {j} outside 1..{d}")
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    k = lowerbound_switch_length(d, m, epsilon)
    if k > T:
        raise ParameterError(f"switch length k={k} exceeds horizon T={T}")
    seq = np.zeros((T, d))
    seq[T - k:] = 1.0
    seq[T - k:, j - 1] = 0.0
    stream = gen_uniform_oblivious(seq, m)
    stream.L_star = 0.0
    stream.meta.update(kind="lowerbound", k=k, target=j)
    return stream


def gen_uniform_oblivious(single_sequence, m: int) -> LossStream:
    """Replicates one ``T x d`` loss sequence to all ``m`` clients."""
    seq = np.array([getattr(v, "losses", v) for v in single_sequence], dtype=float)
    if seq.ndim != 2:
        raise ShapeError(f"expected a T x d sequence, got shape {seq.shape}")
    seq.setflags(write=False)
    data = np.broadcast_to(seq, (m,) + seq.shape)
    return LossStream("oblivious", data, meta={"uniform": True})


def ratings_to_losses(ratings: np.ndarray) -> np.ndarray:
    """Regret-style losses ``max(0, r[u, g*] - r[u, g])`` for the best-on-average column."""
    best = int(np.argmax(ratings.mean(axis=0)))
    return np.maximum(0.0, ratings[:, [best]] - ratings)


def ingest_ratings_csv(path, m: int = 1) -> LossStream:
    """Reads a user x expert rating matrix and turns it into an oblivious stream.

    Losses are divided by their global maximum so they lie in ``[0, 1]``.
    """
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header:
                raise IngestionError(f"{path}: empty file")
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise IngestionError(
                        f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    raise IngestionError(f"{path}: row {lineno} is not numeric") from None
    except OSError as e:
        raise IngestionError(f"{path}: {e}") from e
    except UnicodeDecodeError as e:
        raise IngestionError(f"{path}: not UTF-8 ({e})") from e
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    ratings = np.array(rows)
    if not np.all(np.isfinite(ratings)):
        raise IngestionError(f"{path}: non-finite rating")
    losses = ratings_to_losses(ratings)
    top = losses.max()
    if top > 0:
        losses = losses / top
    stream = gen_uniform_oblivious(losses, m)
    stream.L_star = 0.0
    stream.meta.update(kind="ratings", experts=list(header))
    return stream
