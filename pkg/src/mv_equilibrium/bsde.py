"""Backward solvers for the adjoint equations and the P-systems.

Discretisation
--------------
Every driver is evaluated explicitly: a BSDE ``dY = -(a Y + c) ds + Z dW`` is
stepped as ``Y_k = (1 + a_k dt) E_k[Y_{k+1}] + c_k dt`` with ``Z_k`` the exact
martingale part of ``Y_{k+1}``.  With ``a = r`` this is the exact adjoint of the
Euler wealth step ``X_{k+1} = (1 + r_k dt) X_k + u_k (beta_k dt + sigma_k dxi_k)``,
so the duality identities used by the verifier hold to rounding error rather
than to ``O(dt)``.

Products of two time-``k+1`` quantities obey the binary-lattice product rule
``E_k[A B] = Abar Bbar + Z_A Z_B dt`` (since ``dxi**2 == dt``), which is why the
drivers below carry a few ``dt``-sized correction terms with no continuous
counterpart.  Each correction vanishes as ``dt -> 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import AdaptedProcess, LatticeGrid
from .market import MarketModel


class StepSizeError(ValueError):
    """The time step is too coarse for the requested scheme; refine N."""


class PreconditionError(ValueError):
    pass


class PositivityError(RuntimeError):
    def __init__(self, message: str, k: int, node: int):
        super().__init__(f"{message} at time {k}, node {node}")
        self.k = k
        self.node = node


class SingularityError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class BsdePair:
    Y: AdaptedProcess
    Z: AdaptedProcess


def _coef(value, k: int) -> np.ndarray | float:
    return value[k] if isinstance(value, AdaptedProcess) else float(value)


def solve_linear_bsde(
    grid: LatticeGrid,
    terminal,
    a=0.0,
    c=0.0,
    scheme: str = "explicit",
    start: int = 0,
) -> BsdePair:
    """Solve ``Y_N = terminal``, driver ``a Y + c``, back to time ``start``.

    ``scheme="explicit"`` (default) steps ``Y_k = (1 + a dt) E_k Y_{k+1} + c dt``;
    ``scheme="implicit"`` steps ``Y_k = (E_k Y_{k+1} + c dt) / (1 - a dt)``.
    Slices before ``start`` are left as NaN.
    """
    if scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if not 0 <= start <= grid.N:
        raise ValueError("start must lie in 0..N")
    dt, N = grid.dt, grid.N
    term = terminal[N] if isinstance(terminal, AdaptedProcess) else np.asarray(terminal, dtype=float)
    term = np.broadcast_to(term, (grid.n_nodes(N),)).astype(float)
    Y = [np.full(grid.n_nodes(k), np.nan) for k in range(N + 1)]
    Z = [np.full(grid.n_nodes(k), np.nan) for k in range(N)]
    Y[N] = term
    for k in range(N - 1, start - 1, -1):
        ak, ck = _coef(a, k), _coef(c, k)
        mean = grid.expect(Y[k + 1])
        Z[k] = grid.mart(Y[k + 1])
        if scheme == "explicit":
            if np.any(1.0 + np.asarray(ak) * dt <= 0):
                raise StepSizeError(f"1 + a*dt <= 0 at time {k}")
            Y[k] = (1.0 + ak * dt) * mean + ck * dt
        else:
            if np.any(np.asarray(ak) * dt >= 1):
                raise StepSizeError(f"a*dt >= 1 at time {k}")
            Y[k] = np.broadcast_to((mean + ck * dt) / (1.0 - ak * dt), mean.shape).copy()
    return BsdePair(AdaptedProcess(grid, Y), AdaptedProcess(grid, Z))


def discount_adjoint(m: MarketModel) -> BsdePair:
    """``(Y0, Z0)``: terminal 1, driver ``r Y0``."""
    return solve_linear_bsde(m.grid, 1.0, a=m.r)


@dataclass
class RiccatiSolution:
    P1: AdaptedProcess
    P2: AdaptedProcess
    P3: AdaptedProcess
    P4: AdaptedProcess
    P5: AdaptedProcess
    L1: AdaptedProcess
    L2: AdaptedProcess
    L3: AdaptedProcess
    L4: AdaptedProcess
    L5: AdaptedProcess
    Theta: AdaptedProcess
    Phi: AdaptedProcess
    Y0: AdaptedProcess
    Z0: AdaptedProcess
    # S_k = E_k[P1_{k+1} eta_k^2] / dt, the lattice version of sigma^2 P1
    curvature: AdaptedProcess
    branch: str = "operator"
    info: dict = field(default_factory=dict)

    @property
    def P(self) -> tuple[AdaptedProcess, ...]:
        return (self.P1, self.P2, self.P3, self.P4, self.P5)

    @property
    def L(self) -> tuple[AdaptedProcess, ...]:
        return (self.L1, self.L2, self.L3, self.L4, self.L5)


@dataclass
class ScriptSolution:
    SP1: AdaptedProcess
    SP2: AdaptedProcess
    SP3: AdaptedProcess
    SP4: AdaptedProcess
    SP5: AdaptedProcess
    SL1: AdaptedProcess
    SL2: AdaptedProcess
    SL3: AdaptedProcess
    SL4: AdaptedProcess
    SL5: AdaptedProcess
    u: AdaptedProcess
    curvature: AdaptedProcess

    @property
    def P(self) -> tuple[AdaptedProcess, ...]:
        return (self.SP1, self.SP2, self.SP3, self.SP4, self.SP5)

    @property
    def L(self) -> tuple[AdaptedProcess, ...]:
        return (self.SL1, self.SL2, self.SL3, self.SL4, self.SL5)


def _backward(m: MarketModel, theta=None, phi=None, p3_from_ratio=False) -> dict:
    """Joint backward sweep of the five pairs.

    ``theta``/``phi`` given: solve the system for that operator.  ``None``: pick
    them node by node so that both first-order residuals vanish.  On the lattice
    ``P3_k`` is affine in ``Theta_k`` and ``P4_k`` in ``phi_k``, so each
    condition is a scalar linear equation; no inner iteration is needed.
    """
    grid, dt, N = m.grid, m.grid.dt, m.grid.N
    y0 = discount_adjoint(m)
    terminal = (2.0, -2.0, 1.0, 0.0, -m.gamma1)
    P = [[None] * (N + 1) for _ in range(5)]
    L = [[None] * N for _ in range(5)]
    for i, v in enumerate(terminal):
        P[i][N] = np.full(grid.n_nodes(N), v)
    Th, Ph, S_out, D_out = [None] * N, [None] * N, [None] * N, [None] * N

    for k in range(N - 1, -1, -1):
        beta, sig = m.beta[k], m.sigma[k]
        rho = 1.0 + m.r[k] * dt
        if np.any(rho <= 0):
            raise StepSizeError(f"1 + r*dt <= 0 at time {k}; refine N")
        Pb = [grid.expect(P[i][k + 1]) for i in range(5)]
        for i in range(5):
            L[i][k] = grid.mart(P[i][k + 1])
        c = [beta * Pb[i] + sig * L[i][k] for i in range(5)]
        S = Pb[0] * (sig * sig + beta * beta * dt) + 2.0 * beta * sig * L[0][k] * dt
        D = S + dt * c[1] * c[2]
        S_out[k], D_out[k] = S, D

        if theta is None or phi is None:
            bad = np.flatnonzero(~(D > 0))
            if bad.size:
                raise PositivityError("non-positive curvature E[P1 eta^2] + E[P2 eta]E[P3 eta]", k, int(bad[0]))
        if theta is None:
            e0 = beta * grid.expect(y0.Y[k + 1]) + sig * y0.Z[k]
            Th[k] = -(rho * c[0] + rho * c[1] * Pb[2] - m.gamma2 * e0) / D
        else:
            Th[k] = np.broadcast_to(_coef(theta, k), Pb[0].shape).astype(float)
        if phi is None:
            Ph[k] = -(c[1] * Pb[3] + c[4]) / D
        else:
            Ph[k] = np.broadcast_to(_coef(phi, k), Pb[0].shape).astype(float)

        P[0][k] = rho * (rho * Pb[0] + Th[k] * dt * c[0])
        P[1][k] = rho * Pb[1]
        P[2][k] = rho * Pb[2] + Th[k] * dt * c[2]
        P[3][k] = Pb[3] + Ph[k] * dt * c[2]
        P[4][k] = rho * (Pb[4] + Ph[k] * dt * c[0])
        if p3_from_ratio:
            P[2][k] = -P[0][k] / P[1][k]

    proc = lambda xs: AdaptedProcess(grid, xs)  # noqa: E731
    return {
        "P": [proc(p) for p in P],
        "L": [proc(l) for l in L],
        "Theta": proc(Th),
        "Phi": proc(Ph),
        "Y0": y0.Y,
        "Z0": y0.Z,
        "S": proc(S_out),
        "D": proc(D_out),
    }


def _riccati(out: dict, branch: str, info: dict | None = None) -> RiccatiSolution:
    P, L = out["P"], out["L"]
    return RiccatiSolution(
        *P, *L, Theta=out["Theta"], Phi=out["Phi"], Y0=out["Y0"], Z0=out["Z0"],
        curvature=out["S"], branch=branch, info=info or {},
    )


def solve_p_system_given_operator(m: MarketModel, Theta, Phi) -> RiccatiSolution:
    """Five-pair system for a fixed operator ``(Theta, Phi)`` (scalars or processes)."""
    return _riccati(_backward(m, Theta, Phi), "operator")


def solve_script_p_system(m: MarketModel, u) -> ScriptSolution:
    """System driven by a raw investment process ``u``.

    Identical to the operator system with ``Theta = 0`` and ``Phi = u``; the
    first pair then carries no feedback term.
    """
    out = _backward(m, 0.0, u)
    u_proc = out["Phi"]
    return ScriptSolution(*out["P"], *out["L"], u=u_proc, curvature=out["S"])


def _check_p1(sol: RiccatiSolution) -> None:
    for k, s in enumerate(sol.P1):
        bad = np.flatnonzero(~(s > 0))
        if bad.size:
            raise PositivityError("P1 <= 0", k, int(bad[0]))


def solve_riccati_gamma2_zero(m: MarketModel) -> RiccatiSolution:
    """Equilibrium operator for constant risk aversion (``gamma2 = 0``).

    ``P3 := -P1/P2`` with ``L3`` its martingale part; ``Theta``/``phi`` solve
    the first-order conditions exactly at every node.
    """
    if m.gamma2 != 0:
        raise PreconditionError("gamma2 must be 0 for the constant risk aversion solver")
    sol = _riccati(_backward(m, p3_from_ratio=True), "gamma2_zero", {"denominator_min": None})
    _check_p1(sol)
    return sol


def solve_riccati_state_dependent(m: MarketModel) -> RiccatiSolution:
    """Equilibrium operator for state-dependent risk aversion (``gamma1 = 0``).

    Needs a deterministic risk-free rate, so that ``P2`` has no martingale part.
    ``info`` records how far ``Theta`` sits from two closed-form expressions
    evaluated on the computed ``(P1, L1, P2)``: ``theta_printed_deviation`` for
    ``-(beta P2 gamma2 / 2 - sigma L1) / (sigma^2 P1)`` and
    ``theta_sign_corrected_deviation`` for ``-(beta P2 gamma2 / 2 + sigma L1) / (sigma^2 P1)``.
    The former differs from the equilibrium whenever ``L1 != 0``; the latter
    agrees up to ``O(dt)``.
    """
    if m.gamma1 != 0:
        raise PreconditionError("gamma1 must be 0 for the state-dependent solver")
    if not m.r_deterministic:
        raise PreconditionError("state-dependent case requires deterministic r")
    sol = _riccati(_backward(m, p3_from_ratio=True), "state_dependent")
    _check_p1(sol)
    N = m.grid.N
    beta, sig = m.beta, m.sigma
    half = 0.5 * m.gamma2 * beta * sol.P2
    denom = sig * sig * sol.P1
    printed = -(half - sig * sol.L1) / denom
    corrected = -(half + sig * sol.L1) / denom
    sol.info = {
        "theta_printed": printed.head(N),
        "theta_printed_deviation": (printed - sol.Theta).max_abs(),
        "theta_sign_corrected_deviation": (corrected - sol.Theta).max_abs(),
    }
    return sol


def solve_equilibrium(m: MarketModel) -> RiccatiSolution:
    """Dispatch on the risk-aversion parameters and the type of ``r``."""
    if m.gamma2 == 0:
        return solve_riccati_gamma2_zero(m)
    return solve_riccati_state_dependent(m)


@dataclass(frozen=True)
class H3Report:
    max_p_identity: float
    max_lambda_identity: float
    min_sigma2_p1: float
    min_curvature: float
    bmo_proxy: float

    def ok(self, tol: float = 1e-12) -> bool:
        return (
            self.max_p_identity <= tol * 10
            and self.max_lambda_identity <= tol * 10
            and self.min_sigma2_p1 > 0
        )


def check_h3(sol: RiccatiSolution, m: MarketModel) -> H3Report:
    """Residuals of ``P1 + P2 P3 = 0`` and its martingale-part counterpart.

    The martingale part of ``P2 P3`` on the lattice is ``P2bar L3 + P3bar L2``
    (bars are one-step conditional means), so the second identity is checked
    in that form.  The BMO proxy is ``sup_k E_k[sum_{j>=k} L1_j^2 dt]``.
    """
    grid, N, dt = m.grid, m.grid.N, m.grid.dt
    p_id = (sol.P1 + sol.P2 * sol.P3).max_abs()
    lam = 0.0
    tail = np.zeros(grid.n_nodes(N))
    bmo = 0.0
    for k in range(N - 1, -1, -1):
        p2b, p3b = grid.expect(sol.P2[k + 1]), grid.expect(sol.P3[k + 1])
        lam = max(lam, float(np.max(np.abs(sol.L1[k] + p3b * sol.L2[k] + p2b * sol.L3[k]))))
        tail = sol.L1[k] ** 2 * dt + grid.expect(tail)
        bmo = max(bmo, float(np.max(tail)))
    return H3Report(
        max_p_identity=p_id,
        max_lambda_identity=lam,
        min_sigma2_p1=(m.sigma * m.sigma * sol.P1).min(),
        min_curvature=sol.curvature.min(),
        bmo_proxy=bmo,
    )


@dataclass
class AlternatePhiSystem:
    K1: AdaptedProcess
    K2: AdaptedProcess
    K3: AdaptedProcess
    K4: AdaptedProcess
    K5: AdaptedProcess
    # coefficient of N2 in the M1 driver; O(dt) on the lattice, absent in the limit
    K6: AdaptedProcess
    M1: AdaptedProcess
    M2: AdaptedProcess
    N1: AdaptedProcess
    N2: AdaptedProcess


def compute_phi_star_alternate(m: MarketModel, sol: RiccatiSolution):
    """Recover ``phi*`` from the linear ``(M1, N1, M2, N2)`` system.

    Only ``(P1, P2, P3)`` and their integrands enter the coefficients, so this
    is an independent route to ``phi*`` (``M1`` plays ``P2 P4 + P5``, ``M2``
    plays ``P4``).  Returns ``(Phi_alt, AlternatePhiSystem)``.
    """
    if m.gamma2 != 0:
        raise PreconditionError("alternate representation is stated for gamma2 = 0")
    grid, N, dt = m.grid, m.grid.N, m.grid.dt
    M1 = [None] * (N + 1)
    M2 = [None] * (N + 1)
    M1[N] = np.full(grid.n_nodes(N), -m.gamma1)
    M2[N] = np.zeros(grid.n_nodes(N))
    N1, N2, phi = [None] * N, [None] * N, [None] * N
    K = [[None] * N for _ in range(6)]
    for k in range(N - 1, -1, -1):
        beta, sig, r = m.beta[k], m.sigma[k], m.r[k]
        rho = 1.0 + r * dt
        pb1, pb2, pb3 = (grid.expect(p[k + 1]) for p in (sol.P1, sol.P2, sol.P3))
        l1, l2, l3 = sol.L1[k], sol.L2[k], sol.L3[k]
        c1, c2, c3 = beta * pb1 + sig * l1, beta * pb2 + sig * l2, beta * pb3 + sig * l3
        D = pb1 * (sig * sig + beta * beta * dt) + 2.0 * beta * sig * l1 * dt + dt * c2 * c3
        if np.any(D == 0):
            raise SingularityError(f"zero denominator at time {k}")
        f_m, f_n, f_2 = -beta / D, -sig / D, (beta * l2 * dt + sig * pb2) / D
        g = pb2 * c3 + c1
        K[0][k] = r + rho * g * f_m
        K[1][k] = rho * g * f_n
        K[2][k] = c3 * f_m
        K[3][k] = c3 * f_n
        K[4][k] = c3 * f_2
        K[5][k] = rho * (g * f_2 - l2)
        m1b, m2b = grid.expect(M1[k + 1]), grid.expect(M2[k + 1])
        N1[k], N2[k] = grid.mart(M1[k + 1]), grid.mart(M2[k + 1])
        phi[k] = f_m * m1b + f_n * N1[k] + f_2 * N2[k]
        M1[k] = m1b + dt * (K[0][k] * m1b + K[1][k] * N1[k] + K[5][k] * N2[k])
        M2[k] = m2b + dt * (K[2][k] * m1b + K[3][k] * N1[k] + K[4][k] * N2[k])
    proc = lambda xs: AdaptedProcess(grid, xs)  # noqa: E731
    system = AlternatePhiSystem(*(proc(x) for x in K), M1=proc(M1), M2=proc(M2), N1=proc(N1), N2=proc(N2))
    return proc(phi), system
