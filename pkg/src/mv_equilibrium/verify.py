"""Certification of equilibrium strategies on the lattice.

Two independent routes to the cost increment of a one-step spike are
provided:

* enumeration: propagate the perturbed and unperturbed wealth path by path and
  take exact subtree moments (full_tree only);
* moment sweep: a backward recursion for the conditional moments of terminal
  wealth as polynomials in current wealth, valid in either layout.

Both are independent of the P-systems, which only enter through the
first-order residuals they are compared against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import (
    RiccatiSolution,
    discount_adjoint,
    solve_linear_bsde,
    solve_p_system_given_operator,
    solve_script_p_system,
)
from .equilibrium import Strategy, _forward, propagate_wealth, spike, strategy_values
from .lattice import AdaptedProcess, PathDependenceError, subtree_moments
from .market import MarketModel

V_GRID = (1.0, -1.0, 0.5, -0.5, 0.1, -0.1, 0.01, -0.01)
WEALTH_ANCHORS = (0.0, 1.0)


@dataclass(frozen=True)
class PerturbationSpec:
    k: int
    v: object = 1.0
    steps: int = 1
    node: int | None = None


def _require_full_tree(m: MarketModel, what: str) -> None:
    if not m.grid.full_tree:
        raise PathDependenceError(f"{what} needs full_tree mode")


def _wealth_slice(m: MarketModel, s: Strategy, k: int, x) -> np.ndarray:
    n = m.grid.n_nodes(k)
    if x is None:
        return propagate_wealth(m, s).X[k]
    if isinstance(x, AdaptedProcess):
        return x[k]
    return np.broadcast_to(np.asarray(x, dtype=float), (n,)).astype(float)


# -- moment sweep -------------------------------------------------------------


class MomentSweep:
    """Conditional moments of ``X_N`` (and of the spike response) given ``X_k = x``.

    ``E_k[X_N] = alpha x + kappa`` and ``E_k[X_N^2] = a2 x^2 + b2 x + c2``;
    ``E_k[X_N D_k] = mu x + nu`` with ``D_k = prod_{j>=k} (1 + r_j dt)``;
    ``d1 = E_k[D_k]``, ``d2 = E_k[D_k^2]``.
    """

    def __init__(self, m: MarketModel, s: Strategy):
        self.m = m
        grid, N, dt = m.grid, m.grid.N, m.grid.dt
        self.Theta, self.Phi = s.feedback()
        n = grid.n_nodes(N)
        one, zero = np.ones(n), np.zeros(n)
        names = ("alpha", "kappa", "a2", "b2", "c2", "mu", "nu", "d1", "d2")
        init = (one, zero, one, zero, zero, one, zero, one, one)
        self.v = {name: [None] * N + [val] for name, val in zip(names, init)}
        for k in range(N - 1, -1, -1):
            rho = 1.0 + m.r[k] * dt
            acc = {name: 0.0 for name in names}
            for eta, pick in self._branches(k):
                nx = {name: pick(self.v[name][k + 1]) for name in names}
                a = rho + self.Theta[k] * eta
                c = self.Phi[k] * eta
                acc["alpha"] += 0.5 * nx["alpha"] * a
                acc["kappa"] += 0.5 * (nx["alpha"] * c + nx["kappa"])
                acc["a2"] += 0.5 * nx["a2"] * a * a
                acc["b2"] += 0.5 * (2.0 * nx["a2"] * a * c + nx["b2"] * a)
                acc["c2"] += 0.5 * (nx["a2"] * c * c + nx["b2"] * c + nx["c2"])
                acc["mu"] += 0.5 * rho * nx["mu"] * a
                acc["nu"] += 0.5 * rho * (nx["mu"] * c + nx["nu"])
                acc["d1"] += 0.5 * rho * nx["d1"]
                acc["d2"] += 0.5 * rho * rho * nx["d2"]
            for name in names:
                self.v[name][k] = acc[name]

    def _branches(self, k: int):
        m = self.m
        dt, h = m.grid.dt, m.grid.sqrt_dt
        drift = m.beta[k] * dt
        yield drift + m.sigma[k] * h, m.grid.up
        yield drift - m.sigma[k] * h, m.grid.down

    def cost(self, k: int, x: np.ndarray) -> np.ndarray:
        v, m = self.v, self.m
        mean = v["alpha"][k] * x + v["kappa"][k]
        second = v["a2"][k] * x * x + v["b2"][k] * x + v["c2"][k]
        return (second - mean * mean) - (m.gamma1 + m.gamma2 * x) * mean

    def spike_coefficients(self, k: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(A, B)`` with ``[J(u + v 1_{k}) - J(u)] / dt = A v + B v^2`` at time ``k``."""
        if k >= self.m.grid.N:
            raise ValueError("spike time must be < N")
        m, v, dt = self.m, self.v, self.m.grid.dt
        rho = 1.0 + m.r[k] * dt
        ex = ex0 = ex0sq = exx0 = 0.0
        for eta, pick in self._branches(k):
            a = rho + self.Theta[k] * eta
            x1 = a * x + self.Phi[k] * eta
            ex = ex + 0.5 * (pick(v["alpha"][k + 1]) * x1 + pick(v["kappa"][k + 1]))
            ex0 = ex0 + 0.5 * eta * pick(v["d1"][k + 1])
            ex0sq = ex0sq + 0.5 * eta * eta * pick(v["d2"][k + 1])
            exx0 = exx0 + 0.5 * eta * (pick(v["mu"][k + 1]) * x1 + pick(v["nu"][k + 1]))
        lin = 2.0 * (exx0 - ex * ex0) - (m.gamma1 + m.gamma2 * x) * ex0
        quad = ex0sq - ex0 * ex0
        return lin / dt, quad / dt


# -- enumeration ---------------------------------------------------------------


def _zero(grid):
    return AdaptedProcess.zeros(grid, grid.N)


def _enumerated_cost(m: MarketModel, X: AdaptedProcess, k: int, x_k: np.ndarray) -> np.ndarray:
    mean, var = subtree_moments(m.grid, X[m.grid.N], k)
    return var - (m.gamma1 + m.gamma2 * x_k) * mean


def cost_functional(m: MarketModel, s: Strategy, k: int, x=None, method: str = "auto", node=None):
    """``Var_k[X_N] - (gamma1 + gamma2 X_k) E_k[X_N]`` at every time-``k`` node.

    ``x`` overrides the time-``k`` wealth (scalar, per-node array or process);
    by default the wealth generated by ``s`` from ``m.x0`` is used.
    """
    if method == "auto":
        method = "enumerate" if m.grid.full_tree and x is None else "moments"
    if method == "enumerate":
        _require_full_tree(m, "enumeration")
        X = propagate_wealth(m, s).X
        out = _enumerated_cost(m, X, k, X[k])
    elif method == "moments":
        out = MomentSweep(m, s).cost(k, _wealth_slice(m, s, k, x))
    else:
        raise ValueError(f"unknown method {method!r}")
    return out if node is None else float(out[node])


def perturbation_quotient(m: MarketModel, s: Strategy, p: PerturbationSpec, x=None, method: str = "auto"):
    """``[J(u + v 1_[k, k+steps)) - J(u)] / (steps dt)`` at every time-``k`` node."""
    grid = m.grid
    if method == "auto":
        method = "enumerate" if grid.full_tree and x is None else "moments"
    eps = p.steps * grid.dt
    if method == "enumerate":
        _require_full_tree(m, "enumeration")
        w = propagate_wealth(m, s)
        u = strategy_values(s, w)
        u_eps = spike(u, p.k, p.v, p.steps)
        X_eps = _forward(m, _zero(grid), u_eps, w.x0)
        x_k = w.X[p.k]
        out = (_enumerated_cost(m, X_eps, p.k, x_k) - _enumerated_cost(m, w.X, p.k, x_k)) / eps
    elif method == "moments":
        if p.steps != 1:
            raise ValueError("moment sweep handles one-step spikes only")
        A, B = MomentSweep(m, s).spike_coefficients(p.k, _wealth_slice(m, s, p.k, x))
        v = np.broadcast_to(np.asarray(p.v, dtype=float), A.shape)
        out = A * v + B * v * v
    else:
        raise ValueError(f"unknown method {method!r}")
    return out if p.node is None else float(out[p.node])


@dataclass
class QuadraticFit:
    A: np.ndarray
    B: np.ndarray
    fit_residual: np.ndarray
    min_quotient: np.ndarray


def quotient_fit(m: MarketModel, s: Strategy, k: int, x=None, method: str = "auto", v_grid=V_GRID) -> QuadraticFit:
    """Least-squares fit ``q(v) = A v + B v^2`` over a symmetric ``v`` grid.

    ``v`` is scaled by ``max(1, |X_k|)`` per node.  On the lattice the quotient
    is exactly quadratic in ``v``, so the fit residual is rounding noise.
    """
    x_k = _wealth_slice(m, s, k, x)
    scale = np.maximum(1.0, np.abs(x_k))
    vs = np.array(v_grid)[:, None] * scale[None, :]
    qs = np.array([perturbation_quotient(m, s, PerturbationSpec(k, v), x=x, method=method) for v in vs])
    s11, s12, s22 = (vs**2).sum(0), (vs**3).sum(0), (vs**4).sum(0)
    b1, b2 = (vs * qs).sum(0), (vs * vs * qs).sum(0)
    det = s11 * s22 - s12 * s12
    A = (b1 * s22 - b2 * s12) / det
    B = (s11 * b2 - s12 * b1) / det
    resid = np.max(np.abs(qs - (A * vs + B * vs * vs)), axis=0)
    return QuadraticFit(A, B, resid, qs.min(axis=0))


def second_order_coefficient(m: MarketModel, s: Strategy, k: int, x=None, method: str = "auto"):
    """``(measured, predicted)``: fitted ``B`` versus ``sigma_k^2 SP1_k / 2``."""
    fit = quotient_fit(m, s, k, x=x, method=method)
    sp1 = solve_script_p_system(m, 0.0).SP1[k]
    return fit.B, 0.5 * m.sigma[k] ** 2 * sp1


# -- first-order residuals ----------------------------------------------------


def _first_order(m: MarketModel, P, Theta, Phi):
    """``(G1, G2, slope)`` per time ``k < N`` from a P-system.

    ``G1 X_k + G2`` is the first-order coefficient of the spike cost at wealth
    ``X_k``; ``slope`` is its derivative in the time-``k`` investment.
    """
    grid, N, dt = m.grid, m.grid.N, m.grid.dt
    y0 = discount_adjoint(m)
    G1, G2, slope = [], [], []
    for k in range(N):
        beta, sig = m.beta[k], m.sigma[k]
        rho = 1.0 + m.r[k] * dt
        pb = [grid.expect(p[k + 1]) for p in P]
        lam = [grid.mart(p[k + 1]) for p in P]
        c = [beta * pb[i] + sig * lam[i] for i in range(5)]
        S = pb[0] * (sig * sig + beta * beta * dt) + 2.0 * beta * sig * lam[0] * dt
        e0 = beta * grid.expect(y0.Y[k + 1]) + sig * y0.Z[k]
        th = Theta[k] if isinstance(Theta, AdaptedProcess) else Theta
        ph = Phi[k] if isinstance(Phi, AdaptedProcess) else Phi
        G1.append(rho * c[0] + c[1] * P[2][k] - m.gamma2 * e0 + S * th)
        G2.append(c[1] * P[3][k] + c[4] + S * ph)
        slope.append(S + dt * c[1] * c[2])
    return AdaptedProcess(grid, G1), AdaptedProcess(grid, G2), AdaptedProcess(grid, slope)


@dataclass
class FirstOrderResiduals:
    G1: AdaptedProcess
    G2: AdaptedProcess

    @property
    def max_g1(self) -> float:
        return self.G1.max_abs()

    @property
    def max_g2(self) -> float:
        return self.G2.max_abs()


def first_order_residuals(m: MarketModel, sol: RiccatiSolution) -> FirstOrderResiduals:
    """Nodewise ``G1``/``G2`` for an operator solution; both vanish at equilibrium."""
    G1, G2, _ = _first_order(m, sol.P, sol.Theta, sol.Phi)
    return FirstOrderResiduals(G1, G2)


def raw_strategy_residual(m: MarketModel, u, x=None) -> AdaptedProcess:
    """First-order residual of a raw strategy ``u`` along its own wealth.

    Equals the ``A`` of :func:`quotient_fit` node by node.  ``x`` overrides the
    wealth process (needed in recombining mode when wealth does not recombine).
    """
    s = u if isinstance(u, Strategy) else Strategy.raw(m.grid, u)
    if s.kind != "raw":
        raise ValueError("raw_strategy_residual takes a raw strategy")
    script = solve_script_p_system(m, s.u)
    G1, G2, _ = _first_order(m, script.P, 0.0, s.u)
    X = propagate_wealth(m, s).X if x is None else x
    if not isinstance(X, AdaptedProcess):
        X = AdaptedProcess.constant(m.grid, float(X))
    return G1 * X.head(m.grid.N) + G2


# -- exact identities (full tree) -------------------------------------------


def expansion_check(m: MarketModel, s: Strategy, p: PerturbationSpec):
    """Both sides of the spike-cost expansion at every time-``k`` node.

    ``lhs`` is the enumerated cost difference; ``rhs`` the sum over the spike
    window of ``v dt E_k[beta (Ybar + Y0eps_bar - gamma2 X_k Y0_bar)
    + sigma (Z + Z0eps - gamma2 X_k Z0)]`` with the adjoints solved by
    backward induction (``Ybar_j = E_j Y_{j+1}``).
    """
    _require_full_tree(m, "expansion_check")
    grid, N, dt, k = m.grid, m.grid.N, m.grid.dt, p.k
    w = propagate_wealth(m, s)
    u = strategy_values(s, w)
    X = w.X
    X_eps = _forward(m, _zero(grid), spike(u, k, p.v, p.steps), w.x0)
    lhs = _enumerated_cost(m, X_eps, k, X[k]) - _enumerated_cost(m, X, k, X[k])

    xN, x0N = X[N], X_eps[N] - X[N]
    cond = lambda z: grid.spread_to(grid.expect_to(z, N, k), k, N)  # noqa: E731
    y1 = solve_linear_bsde(grid, 2.0 * xN - 2.0 * cond(xN) - m.gamma1, a=m.r, start=k)
    y2 = solve_linear_bsde(grid, x0N - cond(x0N), a=m.r, start=k)
    y0 = discount_adjoint(m)
    v = np.broadcast_to(np.asarray(p.v, dtype=float), (grid.n_nodes(k),))
    rhs = np.zeros(grid.n_nodes(k))
    for j in range(k, k + p.steps):
        xk = grid.spread_to(X[k], k, j)
        vj = grid.spread_to(v, k, j)
        ybar = grid.expect(y1.Y[j + 1]) + grid.expect(y2.Y[j + 1]) - m.gamma2 * xk * grid.expect(y0.Y[j + 1])
        zsum = y1.Z[j] + y2.Z[j] - m.gamma2 * xk * y0.Z[j]
        rhs += grid.expect_to(vj * dt * (m.beta[j] * ybar + m.sigma[j] * zsum), j, k)
    return lhs, rhs


@dataclass
class RepresentationResult:
    dev_Y_M: float
    dev_Z_N: float
    dev_Y_script: float
    dev_Z_script: float
    Md: AdaptedProcess
    Nd: AdaptedProcess

    @property
    def max_deviation(self) -> float:
        return max(self.dev_Y_M, self.dev_Z_N, self.dev_Y_script, self.dev_Z_script)


def _candidate(m, P, L, X, u, t):
    """``M(s, t)`` for ``s = t..N`` and ``N(s, t)`` for ``s = t..N-1``."""
    grid, N, dt = m.grid, m.grid.N, m.grid.dt
    Ms, Ns = {}, {}
    for s_ in range(t, N + 1):
        q = P[2][s_] * X[s_] + P[3][s_]
        eq = grid.spread_to(grid.expect_to(q, s_, t), t, s_)
        Ms[s_] = P[0][s_] * X[s_] + P[1][s_] * eq + P[4][s_]
        if s_ < N:
            xbar = (1.0 + m.r[s_] * dt) * X[s_] + u[s_] * m.beta[s_] * dt
            p1bar = grid.expect(P[0][s_ + 1])
            Ns[s_] = L[0][s_] * xbar + p1bar * m.sigma[s_] * u[s_] + L[1][s_] * eq + L[4][s_]
    return Ms, Ns


def representation_check(m: MarketModel, s: Strategy, t: int | None = None) -> RepresentationResult:
    """Compare the adjoint ``(Y(., t), Z(., t))`` with its P-system representations."""
    _require_full_tree(m, "representation_check")
    grid, N = m.grid, m.grid.N
    w = propagate_wealth(m, s)
    X, u = w.X, strategy_values(s, w)
    Theta, Phi = s.feedback()
    op = solve_p_system_given_operator(m, Theta, Phi)
    sc = solve_script_p_system(m, u)
    devs = [0.0, 0.0, 0.0, 0.0]
    times = range(N) if t is None else [t]
    for t_ in times:
        cond = grid.spread_to(grid.expect_to(X[N], N, t_), t_, N)
        adj = solve_linear_bsde(grid, 2.0 * X[N] - 2.0 * cond - m.gamma1, a=m.r, start=t_)
        for i, sol in enumerate((op, sc)):
            Ms, Ns = _candidate(m, sol.P, sol.L, X, u, t_)
            for s_, val in Ms.items():
                devs[2 * i] = max(devs[2 * i], float(np.max(np.abs(val - adj.Y[s_]))))
            for s_, val in Ns.items():
                devs[2 * i + 1] = max(devs[2 * i + 1], float(np.max(np.abs(val - adj.Z[s_]))))
    Md, Nd = [], []
    dt = grid.dt
    for s_ in range(N + 1):
        q = op.P3[s_] * X[s_] + op.P4[s_]
        Md.append(op.P1[s_] * X[s_] + op.P2[s_] * q + op.P5[s_])
        if s_ < N:
            xbar = (1.0 + m.r[s_] * dt) * X[s_] + u[s_] * m.beta[s_] * dt
            Nd.append(op.L1[s_] * xbar + grid.expect(op.P1[s_ + 1]) * m.sigma[s_] * u[s_] + op.L2[s_] * q + op.L5[s_])
    return RepresentationResult(*devs, AdaptedProcess(grid, Md), AdaptedProcess(grid, Nd))


# -- uniqueness ----------------------------------------------------------------


@dataclass
class UniquenessDiagnostics:
    M1: AdaptedProcess
    M2: AdaptedProcess
    M3: AdaptedProcess
    M4: AdaptedProcess
    Ybar: AdaptedProcess
    Zbar: AdaptedProcess
    Zcomposite: AdaptedProcess
    residual: AdaptedProcess
    history: list = field(default_factory=list)

    def sup_norms(self) -> dict:
        names = ("M1", "M2", "M3", "M4", "Ybar", "Zbar", "Zcomposite", "residual")
        return {n: getattr(self, n).max_abs() for n in names}


def uniqueness_diagnostics(m: MarketModel, u_alt, sol: RiccatiSolution, x=None) -> UniquenessDiagnostics:
    """Differences between the raw-strategy system for ``u_alt`` and the equilibrium one.

    Integrand-type differences use the lattice product rule: for
    ``W = (SP1 - P1*) X' + ...`` the martingale part is
    ``(SL1 - L1*) Xbar' + (SP1bar - P1bar*) sigma u'`` with
    ``Xbar' = E_k X'_{k+1}``.
    """
    grid, N, dt = m.grid, m.grid.N, m.grid.dt
    s = u_alt if isinstance(u_alt, Strategy) else Strategy.raw(grid, u_alt)
    u = s.u
    X = propagate_wealth(m, s).X if x is None else x
    sc = solve_script_p_system(m, u)
    M1 = (sc.SP1 - sol.P1) * X + (sc.SP5 - sol.P5)
    M2 = (sc.SP3 - sol.P3) * X + (sc.SP4 - sol.P4)
    M3, M4 = [], []
    for k in range(N):
        xbar = (1.0 + m.r[k] * dt) * X[k] + u[k] * m.beta[k] * dt
        su = m.sigma[k] * u[k]
        d1bar = grid.expect(sc.SP1[k + 1] - sol.P1[k + 1])
        d3bar = grid.expect(sc.SP3[k + 1] - sol.P3[k + 1])
        M3.append((sc.SL1[k] - sol.L1[k]) * xbar + d1bar * su + sc.SL5[k] - sol.L5[k])
        M4.append((sc.SL3[k] - sol.L3[k]) * xbar + d3bar * su + sc.SL4[k] - sol.L4[k])
    M3, M4 = AdaptedProcess(grid, M3), AdaptedProcess(grid, M4)
    Ybar = M1 + sol.P2 * M2
    Zbar = sol.L2 * M2 + M3
    zc = [
        M3[k] + sol.L2[k] * grid.expect(M2[k + 1]) + grid.expect(sol.P2[k + 1]) * M4[k]
        for k in range(N)
    ]
    residual = raw_strategy_residual(m, s, x=X)
    return UniquenessDiagnostics(M1, M2, M3, M4, Ybar, Zbar, AdaptedProcess(grid, zc), residual)


@dataclass
class FixedPointResult:
    u: AdaptedProcess
    history: list
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.history)


def fixed_point_refine(m: MarketModel, u0, sol: RiccatiSolution, max_iter: int = 50, tol: float = 1e-8) -> FixedPointResult:
    """Drive the first-order residual of a raw strategy to zero.

    Update ``u <- u - R(u) / slope`` where ``R`` is :func:`raw_strategy_residual` and
    ``slope`` its exact derivative in the current-node investment (independent
    of ``u``).  At a fixed point ``R = 0`` everywhere, i.e. ``u`` is an
    equilibrium; ``history`` rows are ``(iteration, sup_gap, sup_Ybar)``.
    """
    grid = m.grid
    u = u0 if isinstance(u0, AdaptedProcess) else AdaptedProcess.constant(grid, float(u0), grid.N)
    u = u.head(grid.N)
    _, _, slope = _first_order(m, solve_script_p_system(m, 0.0).P, 0.0, 0.0)
    history = []
    for it in range(1, max_iter + 1):
        diag = uniqueness_diagnostics(m, u, sol)
        u_next = u - diag.residual / slope
        gap = (u_next - u).max_abs()
        history.append((it, gap, diag.Ybar.max_abs()))
        u = u_next
        if gap <= tol:
            return FixedPointResult(u, history, True)
    return FixedPointResult(u, history, False)


# -- aggregate report -------------------------------------------------------


@dataclass
class EquilibriumReport:
    G1: AdaptedProcess
    G2: AdaptedProcess
    raw_res: AdaptedProcess | None
    A: list
    B: list
    min_quotient: list
    B_predicted: list
    tolerances: dict
    anchors: tuple | None = None

    def summary(self) -> dict:
        nA = max(float(np.max(np.abs(a))) for a in self.A)
        rel = max(
            float(np.max(np.abs(b / bp - 1.0))) for b, bp in zip(self.B, self.B_predicted)
        )
        out = {
            "max_abs_G1": self.G1.max_abs(),
            "max_abs_G2": self.G2.max_abs(),
            "max_abs_A": nA,
            "min_B": min(float(np.min(b)) for b in self.B),
            "min_quotient": min(float(np.min(q)) for q in self.min_quotient),
            "max_second_order_rel_err": rel,
        }
        if self.raw_res is not None:
            out["max_abs_raw_residual"] = self.raw_res.max_abs()
        return out

    def checks(self) -> dict:
        s, tol = self.summary(), self.tolerances
        return {
            "operator_residuals": s["max_abs_G1"] <= tol["residual"] and s["max_abs_G2"] <= tol["residual"],
            "first_order": s["max_abs_A"] <= tol["perturbation"],
            "convexity": s["min_B"] >= 0.0,
            "perturbation_quotients": s["min_quotient"] >= -tol["perturbation"],
            "second_order": s["max_second_order_rel_err"] <= tol["second_order"],
        }

    @property
    def passed(self) -> bool:
        return all(self.checks().values())


def certify(m: MarketModel, sol: RiccatiSolution, tolerances: dict, x=None) -> EquilibriumReport:
    """Run the certification suite for the operator in ``sol``.

    Full tree: spike costs are enumerated along the actual wealth from
    ``m.x0``.  Recombining: wealth need not recombine, so the moment sweep is
    evaluated at the anchor wealths 0 and 1; the first-order coefficient is
    affine in wealth, so vanishing at both anchors certifies every wealth.
    """
    grid, N = m.grid, m.grid.N
    s = Strategy.operator(grid, sol.Theta, sol.Phi)
    res = first_order_residuals(m, sol)
    sp1 = solve_script_p_system(m, 0.0).SP1
    A, B, qmin, Bp = [], [], [], []
    raw_res = None
    if grid.full_tree and x is None:
        sweep_x = [None]
        w = propagate_wealth(m, s)
        raw_res = raw_strategy_residual(m, strategy_values(s, w))
        anchors = None
    else:
        sweep_x = [x] if x is not None else list(WEALTH_ANCHORS)
        anchors = tuple(sweep_x) if x is None else None
    sweep = MomentSweep(m, s)
    for k in range(N):
        a_k, b_k, q_k = [], [], []
        for xv in sweep_x:
            if xv is None:
                fit = quotient_fit(m, s, k)
            else:
                xs = _wealth_slice(m, s, k, xv)
                a, b = sweep.spike_coefficients(k, xs)
                vs = np.array(V_GRID)[:, None] * np.maximum(1.0, np.abs(xs))[None, :]
                q = a * vs + b * vs * vs
                fit = QuadraticFit(a, b, np.zeros_like(a), q.min(axis=0))
            a_k.append(np.abs(fit.A))
            b_k.append(fit.B)
            q_k.append(fit.min_quotient)
        A.append(np.max(a_k, axis=0))
        B.append(np.min(b_k, axis=0))
        qmin.append(np.min(q_k, axis=0))
        Bp.append(0.5 * m.sigma[k] ** 2 * sp1[k])
    return EquilibriumReport(res.G1, res.G2, raw_res, A, B, qmin, Bp, dict(tolerances), anchors)
