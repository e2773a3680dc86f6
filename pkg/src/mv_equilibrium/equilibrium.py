"""Strategies and forward wealth propagation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import AdaptedProcess, PathDependenceError
from .market import MarketModel


def _as_process(grid, value, length: int) -> AdaptedProcess:
    if isinstance(value, AdaptedProcess):
        if value.grid is not grid:
            raise ValueError("process lives on a different grid")
        if len(value) < length:
            raise ValueError(f"process needs at least {length} slices, got {len(value)}")
        return value.head(length)
    return AdaptedProcess.constant(grid, float(value), length)


@dataclass(frozen=True, eq=False)
class Strategy:
    """Either an operator ``u = Theta X + Phi`` or a raw investment process ``u``."""

    kind: str
    Theta: AdaptedProcess | None = None
    Phi: AdaptedProcess | None = None
    u: AdaptedProcess | None = None

    @classmethod
    def operator(cls, grid, Theta, Phi) -> Strategy:
        return cls("operator", Theta=_as_process(grid, Theta, grid.N), Phi=_as_process(grid, Phi, grid.N))

    @classmethod
    def raw(cls, grid, u) -> Strategy:
        return cls("raw", u=_as_process(grid, u, grid.N))

    @property
    def grid(self):
        return (self.Theta if self.kind == "operator" else self.u).grid

    def feedback(self) -> tuple[AdaptedProcess, AdaptedProcess]:
        """``(Theta, Phi)`` with a raw strategy read as ``Theta = 0, Phi = u``."""
        if self.kind == "operator":
            return self.Theta, self.Phi
        return AdaptedProcess.zeros(self.grid, self.grid.N), self.u


@dataclass(frozen=True, eq=False)
class WealthProcess:
    X: AdaptedProcess
    strategy: Strategy
    x0: float
    zero_nodes: list = field(default_factory=list)


def _branches(m: MarketModel, k: int):
    """``eta = beta dt + sigma dxi`` on the (up, down) branches out of time ``k``."""
    dt, h = m.grid.dt, m.grid.sqrt_dt
    drift = m.beta[k] * dt
    return drift + m.sigma[k] * h, drift - m.sigma[k] * h


def _forward(m: MarketModel, Theta: AdaptedProcess, Phi: AdaptedProcess, x0: float) -> AdaptedProcess:
    grid, dt = m.grid, m.grid.dt
    X = [np.array([float(x0)])]
    for k in range(grid.N):
        x = X[k]
        rho = 1.0 + m.r[k] * dt
        eta_up, eta_dn = _branches(m, k)
        th, ph = Theta[k], Phi[k]
        x_up = (rho + th * eta_up) * x + ph * eta_up
        x_dn = (rho + th * eta_dn) * x + ph * eta_dn
        if grid.full_tree:
            nxt = np.empty(2 * x.size)
            nxt[0::2], nxt[1::2] = x_dn, x_up
        else:
            nxt = np.empty(k + 2)
            nxt[0], nxt[-1] = x_dn[0], x_up[-1]
            a, b = x_up[:-1], x_dn[1:]
            scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
            if np.any(np.abs(a - b) > 1e-12 * scale):
                raise PathDependenceError(
                    f"wealth at time {k + 1} depends on the path, not only the level; use full_tree mode"
                )
            nxt[1:-1] = 0.5 * (a + b)
        X.append(nxt)
    return AdaptedProcess(grid, X)


def propagate_wealth(m: MarketModel, s: Strategy, x0: float | None = None) -> WealthProcess:
    """Euler step ``X_{k+1} = (1 + r dt) X_k + u_k (beta dt + sigma dxi)``.

    In recombining mode this only succeeds when the resulting wealth is a
    function of the walk level; otherwise ``PathDependenceError`` is raised.
    """
    x0 = m.x0 if x0 is None else float(x0)
    Theta, Phi = s.feedback()
    return WealthProcess(_forward(m, Theta, Phi, x0), s, x0)


def propagate_homogeneous_wealth(m: MarketModel, Theta) -> WealthProcess:
    """Unit initial wealth, feedback ``Theta`` only; records nodes where wealth hits 0."""
    Theta = _as_process(m.grid, Theta, m.grid.N)
    s = Strategy("operator", Theta=Theta, Phi=AdaptedProcess.zeros(m.grid, m.grid.N))
    X = _forward(m, Theta, s.Phi, 1.0)
    zeros = [(k, int(j)) for k, sl in enumerate(X) for j in np.flatnonzero(sl == 0.0)]
    return WealthProcess(X, s, 1.0, zeros)


def strategy_values(s: Strategy, w: WealthProcess) -> AdaptedProcess:
    """Per-node investment ``u`` along the wealth process generated by ``s``."""
    if w.strategy is not s:
        raise ValueError("wealth process was not generated by this strategy")
    if s.kind == "raw":
        return s.u
    return s.Theta * w.X.head(s.grid.N) + s.Phi


def spike(u: AdaptedProcess, k: int, v, steps: int = 1) -> AdaptedProcess:
    """``u + v`` on times ``k..k+steps-1`` below each time-``k`` node.

    ``v`` is a scalar or one value per time-``k`` node.  Spikes longer than one
    step need full_tree mode unless ``v`` is the same at every node.
    """
    grid = u.grid
    if steps < 1 or k + steps > grid.N:
        raise ValueError("spike window must satisfy k >= 0, steps >= 1, k + steps <= N")
    v = np.broadcast_to(np.asarray(v, dtype=float), (grid.n_nodes(k),))
    out = list(u.slices)
    for j in range(k, k + steps):
        if j == k:
            add = v
        elif np.all(v == v[0]):
            add = np.full(grid.n_nodes(j), v[0])
        else:
            add = grid.spread_to(v, k, j)
        out[j] = out[j] + add
    return AdaptedProcess(grid, out)
