"""Binary random-walk filtration with exact conditional expectations.

Two storage layouts share one interface:

* ``recombining``: time-``k`` slice has ``k + 1`` nodes indexed by the number
  of up-moves; children of node ``j`` are ``j`` (down) and ``j + 1`` (up).
* ``full_tree``: time-``k`` slice has ``2**k`` nodes indexed by the path
  bitstring (first step is the most significant bit, ``1`` = up); children of
  node ``j`` are ``2j`` (down) and ``2j + 1`` (up).

Every backward operation is written in terms of ``up``/``down`` views of the
next slice, so it runs unchanged in either layout.
"""
from __future__ import annotations

import math
import numbers
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

MAX_FULL_TREE_STEPS = 20


class LatticeMode(str, Enum):
    RECOMBINING = "recombining"
    FULL_TREE = "full_tree"


class PathDependenceError(ValueError):
    """A forward quantity does not recombine, so it needs ``full_tree`` mode."""


@dataclass(frozen=True, eq=False)
class LatticeGrid:
    T: float
    N: int
    mode: LatticeMode = LatticeMode.RECOMBINING
    _levels: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @cached_property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def full_tree(self) -> bool:
        return self.mode is LatticeMode.FULL_TREE

    def n_nodes(self, k: int) -> int:
        self._check_time(k)
        return 2**k if self.full_tree else k + 1

    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def levels(self, k: int) -> np.ndarray:
        """Number of up-moves leading to each time-``k`` node."""
        self._check_time(k)
        if not self.full_tree:
            return np.arange(k + 1)
        if k not in self._levels:
            if k == 0:
                lv = np.zeros(1, dtype=np.int64)
            else:
                prev = self.levels(k - 1)
                lv = np.repeat(prev, 2) + np.tile([0, 1], prev.size)
            self._levels[k] = lv
        return self._levels[k]

    def walk(self, k: int) -> np.ndarray:
        """Value of the scaled walk (the discretised Brownian motion) at time ``k``."""
        return (2 * self.levels(k) - k) * self.sqrt_dt

    def node_labels(self, k: int) -> list[str]:
        if not self.full_tree:
            return [str(j) for j in range(k + 1)]
        if k == 0:
            return ["-"]
        return [format(j, f"0{k}b").replace("1", "u").replace("0", "d") for j in range(2**k)]

    # -- one-step structure -------------------------------------------------

    def up(self, nxt: np.ndarray) -> np.ndarray:
        return nxt[1::2] if self.full_tree else nxt[1:]

    def down(self, nxt: np.ndarray) -> np.ndarray:
        return nxt[0::2] if self.full_tree else nxt[:-1]

    def expect(self, nxt: np.ndarray) -> np.ndarray:
        """One-step conditional expectation of a time-``k+1`` slice."""
        return 0.5 * (self.up(nxt) + self.down(nxt))

    def mart(self, nxt: np.ndarray) -> np.ndarray:
        """Integrand ``Z_k`` with ``Y_{k+1} - E_k Y_{k+1} = Z_k * dxi`` exactly."""
        return (self.up(nxt) - self.down(nxt)) / (2.0 * self.sqrt_dt)

    def spread(self, cur: np.ndarray) -> np.ndarray:
        """Copy each time-``k`` value to its two children (full tree only)."""
        if not self.full_tree:
            raise PathDependenceError("children of a recombining node have two parents")
        return np.repeat(cur, 2)

    def expect_to(self, values: np.ndarray, k_from: int, k_to: int) -> np.ndarray:
        """Iterated conditional expectation from slice ``k_from`` back to ``k_to``."""
        if k_to > k_from:
            raise ValueError("k_to must not exceed k_from")
        out = np.asarray(values, dtype=float)
        if self.full_tree:
            return out.reshape(2**k_to, -1).mean(axis=1)
        for _ in range(k_from - k_to):
            out = self.expect(out)
        return out

    def spread_to(self, values: np.ndarray, k_from: int, k_to: int) -> np.ndarray:
        """Broadcast an ``F_{k_from}``-measurable slice forward to time ``k_to``."""
        if not self.full_tree:
            raise PathDependenceError("forward broadcasting needs full_tree mode")
        return np.repeat(np.asarray(values, dtype=float), 2 ** (k_to - k_from))

    def _check_time(self, k: int) -> None:
        if not 0 <= k <= self.N:
            raise ValueError(f"time index {k} outside 0..{self.N}")


def build_grid(T: float, N: int, mode: str | LatticeMode = LatticeMode.RECOMBINING) -> LatticeGrid:
    if not (isinstance(T, numbers.Real) and T > 0 and math.isfinite(T)):
        raise ValueError(f"horizon T must be positive, got {T!r}")
    if isinstance(N, bool) or not isinstance(N, numbers.Integral) or N < 1:
        raise ValueError(f"step count N must be a positive integer, got {N!r}")
    mode = LatticeMode(mode)
    if mode is LatticeMode.FULL_TREE and N > MAX_FULL_TREE_STEPS:
        raise ValueError(f"full_tree mode is capped at N <= {MAX_FULL_TREE_STEPS}")
    return LatticeGrid(float(T), int(N), mode)


class AdaptedProcess:
    """Per-node values on slices ``0..len-1`` of a grid.

    State-type processes carry ``N + 1`` slices, integrand-type ones ``N``.
    Arithmetic between processes of different lengths truncates to the shorter.
    """

    __array_priority__ = 100

    def __init__(self, grid: LatticeGrid, slices):
        slices = tuple(np.asarray(s, dtype=float) for s in slices)
        if not 1 <= len(slices) <= grid.N + 1:
            raise ValueError("process must have between 1 and N+1 slices")
        for k, s in enumerate(slices):
            if s.shape != (grid.n_nodes(k),):
                raise ValueError(f"slice {k} has shape {s.shape}, expected ({grid.n_nodes(k)},)")
        self.grid = grid
        self.slices = slices

    @classmethod
    def constant(cls, grid: LatticeGrid, value: float, length: int | None = None) -> AdaptedProcess:
        length = grid.N + 1 if length is None else length
        return cls(grid, [np.full(grid.n_nodes(k), float(value)) for k in range(length)])

    @classmethod
    def zeros(cls, grid: LatticeGrid, length: int | None = None) -> AdaptedProcess:
        return cls.constant(grid, 0.0, length)

    @classmethod
    def from_function(cls, grid: LatticeGrid, f, length: int | None = None) -> AdaptedProcess:
        """Build from ``f(k, level)``; ``level`` is an integer array."""
        length = grid.N + 1 if length is None else length
        out = []
        for k in range(length):
            lv = grid.levels(k)
            out.append(np.broadcast_to(np.asarray(f(k, lv), dtype=float), lv.shape).copy())
        return cls(grid, out)

    def __len__(self) -> int:
        return len(self.slices)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.slices[k]

    def __iter__(self):
        return iter(self.slices)

    def head(self, length: int) -> AdaptedProcess:
        return AdaptedProcess(self.grid, self.slices[:length])

    def lift(self, grid: LatticeGrid) -> AdaptedProcess:
        """Copy a recombining process onto a full-tree grid by walk level."""
        if self.grid.full_tree or not grid.full_tree or grid.N != self.grid.N:
            raise ValueError("lift maps a recombining process onto a full_tree grid of equal N")
        return AdaptedProcess(grid, [s[grid.levels(k)] for k, s in enumerate(self.slices)])

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(s))) for s in self.slices)

    def min(self) -> float:
        return min(float(np.min(s)) for s in self.slices)

    def max(self) -> float:
        return max(float(np.max(s)) for s in self.slices)

    def is_deterministic(self) -> bool:
        """True when each slice is constant across its nodes (exact comparison)."""
        return all(np.all(s == s[0]) for s in self.slices)

    def map(self, f) -> AdaptedProcess:
        return AdaptedProcess(self.grid, [f(s) for s in self.slices])

    def _binary(self, other, op):
        if isinstance(other, AdaptedProcess):
            if other.grid is not self.grid:
                raise ValueError("processes live on different grids")
            n = min(len(self), len(other))
            return AdaptedProcess(self.grid, [op(a, b) for a, b in zip(self.slices[:n], other.slices[:n])])
        if isinstance(other, numbers.Real):
            return AdaptedProcess(self.grid, [op(a, other) for a in self.slices])
        return NotImplemented

    def __add__(self, o):
        return self._binary(o, np.add)

    def __radd__(self, o):
        return self._binary(o, lambda a, b: np.add(b, a))

    def __sub__(self, o):
        return self._binary(o, np.subtract)

    def __rsub__(self, o):
        return self._binary(o, lambda a, b: np.subtract(b, a))

    def __mul__(self, o):
        return self._binary(o, np.multiply)

    def __rmul__(self, o):
        return self._binary(o, lambda a, b: np.multiply(b, a))

    def __truediv__(self, o):
        return self._binary(o, np.divide)

    def __rtruediv__(self, o):
        return self._binary(o, lambda a, b: np.divide(b, a))

    def __neg__(self):
        return self.map(np.negative)

    def __abs__(self):
        return self.map(np.abs)

    def __repr__(self) -> str:
        return f"AdaptedProcess(N={self.grid.N}, mode={self.grid.mode.value}, slices={len(self)})"


def _slice(proc, k: int) -> np.ndarray:
    return proc[k] if isinstance(proc, AdaptedProcess) else np.asarray(proc, dtype=float)


def _check_next(grid: LatticeGrid, proc, k: int) -> np.ndarray:
    if not 0 <= k < grid.N:
        raise ValueError(f"node time {k} must lie in 0..{grid.N - 1}")
    nxt = _slice(proc, k + 1) if isinstance(proc, AdaptedProcess) else np.asarray(proc, dtype=float)
    if nxt.shape != (grid.n_nodes(k + 1),):
        raise ValueError(f"process slice does not live at time {k + 1}")
    return nxt


def conditional_expectation(grid: LatticeGrid, proc, k: int, node: int | None = None):
    """``E_k`` of a time-``k+1`` value; all time-``k`` nodes unless ``node`` is given."""
    out = grid.expect(_check_next(grid, proc, k))
    return out if node is None else float(out[node])


def martingale_part(grid: LatticeGrid, proc, k: int, node: int | None = None):
    out = grid.mart(_check_next(grid, proc, k))
    return out if node is None else float(out[node])


def subtree_moments(grid: LatticeGrid, terminal, k: int, node: int | None = None):
    """Exact conditional mean and variance of terminal values given time-``k`` nodes."""
    term = _slice(terminal, grid.N)
    if term.shape != (grid.n_nodes(grid.N),):
        raise ValueError("terminal values must live at time N")
    if not 0 <= k <= grid.N:
        raise ValueError(f"node time {k} outside 0..{grid.N}")
    # law of total variance, one step at a time: no cancellation, never negative
    mean, var = term, np.zeros_like(term)
    for _ in range(grid.N - k):
        half_gap = 0.5 * (grid.up(mean) - grid.down(mean))
        mean, var = grid.expect(mean), grid.expect(var) + half_gap * half_gap
    if node is None:
        return mean, var
    return float(mean[node]), float(var[node])
