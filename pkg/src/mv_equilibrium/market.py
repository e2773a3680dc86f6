"""Market coefficients on the lattice and the standing hypotheses."""
from __future__ import annotations

import numbers
from dataclasses import dataclass, field

import numpy as np

from .lattice import AdaptedProcess, LatticeGrid, LatticeMode, build_grid

DEFAULT_TOLERANCES = {"residual": 1e-10, "perturbation": 1e-8, "second_order": 0.05}


class HypothesisViolation(ValueError):
    pass


class ScenarioError(ValueError):
    """Malformed scenario input; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Scenario:
    T: float = 1.0
    N: int = 4
    mode: str = "recombining"
    r: object = 0.0
    b: object = 0.0
    sigma: object = 1.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    x0: float = 1.0
    delta: float | None = None
    spike_steps: int = 1
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    name: str = ""

    def grid(self, mode: str | None = None, N: int | None = None) -> LatticeGrid:
        return build_grid(self.T, self.N if N is None else N, mode or self.mode)

    def to_dict(self) -> dict:
        def enc(c):
            if isinstance(c, np.ndarray):
                return c.tolist()
            if callable(c) or isinstance(c, AdaptedProcess):
                return repr(c)
            return c

        return {
            "name": self.name,
            "grid": {"T": self.T, "N": self.N, "mode": str(LatticeMode(self.mode).value)},
            "coefficients": {"r": enc(self.r), "b": enc(self.b), "sigma": enc(self.sigma)},
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "x0": self.x0,
            "delta": self.delta,
            "spike_steps": self.spike_steps,
            "tolerances": dict(self.tolerances),
        }


@dataclass(frozen=True, eq=False)
class MarketModel:
    grid: LatticeGrid
    r: AdaptedProcess
    b: AdaptedProcess
    sigma: AdaptedProcess
    beta: AdaptedProcess
    theta: AdaptedProcess
    delta: float
    gamma1: float
    gamma2: float
    x0: float = 1.0

    @property
    def rho(self) -> AdaptedProcess:
        """One-step riskless growth factor ``1 + r dt``."""
        return 1.0 + self.r * self.grid.dt

    @property
    def r_deterministic(self) -> bool:
        return self.r.is_deterministic()


@dataclass(frozen=True)
class HypothesisReport:
    min_sigma2: float
    delta: float
    bounds: dict
    gamma_product: float
    gammas_ok: bool
    r_deterministic: bool

    @property
    def ok(self) -> bool:
        return self.gammas_ok and self.delta > 0 and self.min_sigma2 >= self.delta


def _coefficient(grid: LatticeGrid, spec, key: str) -> AdaptedProcess:
    N = grid.N
    if isinstance(spec, AdaptedProcess):
        if spec.grid is not grid or len(spec) < N:
            raise ScenarioError(key, "process must live on this grid and cover times 0..N-1")
        out = spec.head(N)
    elif isinstance(spec, bool):
        raise ScenarioError(key, "expected a number, array, table or callable")
    elif isinstance(spec, numbers.Real):
        out = AdaptedProcess.constant(grid, float(spec), N)
    elif callable(spec):
        out = AdaptedProcess.from_function(grid, spec, N)
    elif isinstance(spec, dict) and set(spec) <= {"base", "walk"} and spec:
        base, slope = float(spec.get("base", 0.0)), float(spec.get("walk", 0.0))
        # tanh keeps the coefficient bounded by |base| + |walk| at every N
        out = AdaptedProcess(grid, [base + slope * np.tanh(grid.walk(k)) for k in range(N)])
    elif isinstance(spec, dict):
        out = _table(grid, spec, key)
    elif isinstance(spec, (list, tuple, np.ndarray)):
        arr = np.asarray(spec, dtype=float)
        if arr.shape != (N,):
            raise ScenarioError(key, f"schedule must have length N={N}, got shape {arr.shape}")
        out = AdaptedProcess(grid, [np.full(grid.n_nodes(k), arr[k]) for k in range(N)])
    else:
        raise ScenarioError(key, f"unsupported coefficient specification {type(spec).__name__}")
    for s in out:
        if not np.all(np.isfinite(s)):
            raise ScenarioError(key, "coefficient values must be finite")
    return out


def _table(grid: LatticeGrid, table: dict, key: str) -> AdaptedProcess:
    """Table keyed ``"k,level"`` or, in full_tree mode, ``"k,path=udu"``."""
    slices = [np.full(grid.n_nodes(k), np.nan) for k in range(grid.N)]
    for raw_key, value in table.items():
        try:
            k_txt, node_txt = str(raw_key).split(",", 1)
            k = int(k_txt)
            node_txt = node_txt.strip()
            val = float(value)
        except (ValueError, TypeError):
            raise ScenarioError(f"{key}[{raw_key}]", "expected key 'k,level' with a numeric value") from None
        if not 0 <= k < grid.N:
            raise ScenarioError(f"{key}[{raw_key}]", f"time index outside 0..{grid.N - 1}")
        if node_txt.startswith("path="):
            if not grid.full_tree:
                raise ScenarioError(f"{key}[{raw_key}]", "path-prefix entries need full_tree mode")
            path = node_txt[5:]
            if len(path) != k or set(path) - {"u", "d"}:
                raise ScenarioError(f"{key}[{raw_key}]", f"path must be {k} characters of u/d")
            idx = int(path.replace("u", "1").replace("d", "0"), 2) if k else 0
            slices[k][idx] = val
        else:
            level = int(node_txt)
            if not 0 <= level <= k:
                raise ScenarioError(f"{key}[{raw_key}]", f"level outside 0..{k}")
            slices[k][grid.levels(k) == level] = val
    for k, s in enumerate(slices):
        if np.isnan(s).any():
            raise ScenarioError(key, f"table does not cover every node at time {k}")
    return AdaptedProcess(grid, slices)


def build_market(scenario: Scenario, grid: LatticeGrid | None = None) -> MarketModel:
    grid = scenario.grid() if grid is None else grid
    g1, g2 = float(scenario.gamma1), float(scenario.gamma2)
    if g1 < 0 or g2 < 0:
        raise HypothesisViolation("gamma1 and gamma2 must be non-negative")
    if g1 * g2 != 0:
        raise HypothesisViolation("gamma1*gamma2 must be 0")
    r = _coefficient(grid, scenario.r, "coefficients.r")
    b = _coefficient(grid, scenario.b, "coefficients.b")
    sigma = _coefficient(grid, scenario.sigma, "coefficients.sigma")
    min_s2 = min(float(np.min(s * s)) for s in sigma)
    delta = min_s2 if scenario.delta is None else float(scenario.delta)
    if not delta > 0:
        raise HypothesisViolation(f"sigma^2 >= delta > 0 violated: min sigma^2 = {min_s2:g}")
    if min_s2 < delta:
        raise HypothesisViolation(f"sigma^2 >= delta violated: min sigma^2 = {min_s2:g} < delta = {delta:g}")
    beta = b - r
    return MarketModel(
        grid=grid, r=r, b=b, sigma=sigma, beta=beta, theta=beta / sigma,
        delta=delta, gamma1=g1, gamma2=g2, x0=float(scenario.x0),
    )


def check_hypotheses(m: MarketModel) -> HypothesisReport:
    bounds = {
        name: (proc.min(), proc.max())
        for name, proc in (("r", m.r), ("b", m.b), ("sigma", m.sigma))
    }
    return HypothesisReport(
        min_sigma2=min(float(np.min(s * s)) for s in m.sigma),
        delta=m.delta,
        bounds=bounds,
        gamma_product=m.gamma1 * m.gamma2,
        gammas_ok=m.gamma1 >= 0 and m.gamma2 >= 0 and m.gamma1 * m.gamma2 == 0,
        r_deterministic=m.r_deterministic,
    )
