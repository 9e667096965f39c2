"""Binary-tree gradient estimation for Frank-Wolfe on the simplex.

A client runs ``T1`` binary trees; tree ``j`` has depth ``j``. Vertices are
visited depth-first, left child before right child. A left child copies the
parent's iterate and gradient estimate; a right child draws a fresh batch of
size ``floor(b / 2**depth)`` and corrects the parent's estimate by the
difference of batch gradients at the current and parent iterates. Reaching
a leaf is where the caller communicates and moves the iterate.
"""

from __future__ import annotations

import dataclasses
from typing import Iterator, Optional

import numpy as np

from fedexperts.core import LossBatch, ParameterError, SimplexPoint, StateError

ROOT, LEFT, RIGHT = "root", "left", "right"


class AllocationError(ValueError):
    """A vertex batch cannot be drawn from the dataset."""


@dataclasses.dataclass(frozen=True)
class TreeAddress:
    """Vertex ``s`` (a bit string, ``""`` for the root) of tree ``j``."""

    j: int
    s: str = ""

    def __post_init__(self):
        if self.j < 1:
            raise ParameterError(f"tree index must be >= 1, got {self.j}")
        if len(self.s) > self.j or set(self.s) - {"0", "1"}:
            raise ParameterError(f"invalid vertex {self.s!r} for tree {self.j}")

    @property
    def depth(self) -> int:
        return len(self.s)

    @property
    def parent(self) -> Optional["TreeAddress"]:
        return TreeAddress(self.j, self.s[:-1]) if self.s else None


@dataclasses.dataclass(frozen=True)
class VertexState:
    x: SimplexPoint
    v: np.ndarray
    batch: Optional[LossBatch] = None


@dataclasses.dataclass(frozen=True)
class PlanEntry:
    address: TreeAddress
    kind: str
    is_leaf: bool


@dataclasses.dataclass(frozen=True)
class TraversalPlan:
    entries: tuple[PlanEntry, ...]
    leaf_count: int

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


def plan_trees(T1: int) -> TraversalPlan:
    """DFS visiting order over trees ``1..T1``."""
    if T1 < 1:
        raise ParameterError(f"need at least one tree, got T1={T1}")
    entries = []

    def visit(j, s):
        kind = ROOT if not s else (LEFT if s[-1] == "0" else RIGHT)
        leaf = len(s) == j
        entries.append(PlanEntry(TreeAddress(j, s), kind, leaf))
        if not leaf:
            visit(j, s + "0")
            visit(j, s + "1")

    for j in range(1, T1 + 1):
        visit(j, "")
    leaves = sum(e.is_leaf for e in entries)
    assert leaves == 2 ** (T1 + 1) - 2
    return TraversalPlan(tuple(entries), leaves)


def batch_size(depth: int, b: int) -> int:
    return int(b) >> depth if depth >= 0 else 0


def allocate_batch(dataset: LossBatch, depth: int, b: int, rng: np.random.Generator,
                   clamp: bool = False) -> LossBatch:
    """Uniform sample without replacement of ``floor(b / 2**depth)`` losses.

    With ``clamp=True`` the size is forced into ``[1, len(dataset)]`` instead
    of raising; clients use this when the phase's dataset is smaller than
    the nominal batch.
    """
    size = batch_size(depth, b)
    n = len(dataset)
    if clamp:
        size = min(max(size, 1), n)
    if size < 1:
        raise AllocationError(f"batch size floor({b}/2^{depth}) is zero")
    if size > n:
        raise AllocationError(f"batch size {size} exceeds dataset size {n}")
    if size == n:
        return dataset
    idx = rng.choice(n, size=size, replace=False)
    return dataset.subset(np.sort(idx))


def vertex_update(kind: str, parent: Optional[VertexState], x_current: SimplexPoint,
                  batch: Optional[LossBatch]) -> VertexState:
    if kind == ROOT:
        return VertexState(x_current, batch.mean_grad(x_current), batch)
    if parent is None:
        raise StateError(f"{kind} vertex needs its parent's state")
    if kind == LEFT:
        return VertexState(parent.x, parent.v, parent.batch)
    if kind == RIGHT:
        v = parent.v + batch.mean_grad(x_current) - batch.mean_grad(parent.x)
        return VertexState(x_current, v, batch)
    raise ParameterError(f"unknown vertex kind {kind!r}")


class Traversal:
    """Stateful DFS over the trees of one client phase.

    Iterating yields ``(entry, state)`` for every vertex. ``x`` is read each
    time a root or right child is visited, so the caller moves the iterate by
    assigning ``traversal.x`` after handling a leaf.

    Args:
        dataset: Losses observed in the previous phase.
        T1: Number of trees.
        b: Nominal root batch size.
        x: Starting iterate.
        rng: Stream used for batch sampling.
        full_batch: Use the whole dataset at every vertex (test/oracle mode).
        clamp: Clamp batch sizes into ``[1, len(dataset)]``.
    """

    def __init__(self, dataset: LossBatch, T1: int, b: int, x: SimplexPoint,
                 rng: Optional[np.random.Generator] = None, full_batch: bool = False,
                 clamp: bool = False):
        self.plan = plan_trees(T1)
        self.dataset = dataset
        self.b = int(b)
        self.x = x
        self.rng = rng
        self.full_batch = full_batch
        self.clamp = clamp

    def _batch(self, depth):
        if self.full_batch:
            return self.dataset
        return allocate_batch(self.dataset, depth, self.b, self.rng, clamp=self.clamp)

    def __iter__(self) -> Iterator[tuple[PlanEntry, VertexState]]:
        states: dict[TreeAddress, VertexState] = {}
        for entry in self.plan:
            addr = entry.address
            if entry.kind == LEFT:
                state = vertex_update(LEFT, states[addr.parent], self.x, None)
            else:
                parent = states.get(addr.parent) if addr.parent else None
                state = vertex_update(entry.kind, parent, self.x, self._batch(addr.depth))
            states[addr] = state
            yield entry, state
