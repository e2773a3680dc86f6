"""Scenario files: JSON in, validated :class:`Scenario` out.

Schema (every key optional except ``grid.N``)::

    {
      "name": "desk",
      "grid": {"T": 1.0, "N": 64, "mode": "recombining" | "full_tree"},
      "coefficients": {"r": <coef>, "b": <coef>, "sigma": <coef>},
      "gamma1": 1.0, "gamma2": 0.0, "x0": 1.0, "delta": null,
      "spike_steps": 1,
      "tolerances": {"residual": 1e-10, "perturbation": 1e-8, "second_order": 0.05}
    }

``<coef>`` is a number, a length-``N`` list (deterministic schedule), a
``{"base": a, "walk": c}`` object meaning ``a + c tanh(W_k)`` with ``W`` the
scaled walk, or a table ``{"k,level": value}`` (``{"k,path=ud": value}`` in
full_tree mode).
"""
from __future__ import annotations

import json
import numbers
from importlib import resources
from pathlib import Path

from .lattice import LatticeMode
from .market import DEFAULT_TOLERANCES, HypothesisViolation, Scenario, ScenarioError, build_market

_TOP = {"name", "grid", "coefficients", "gamma1", "gamma2", "x0", "delta", "spike_steps", "tolerances"}
_GRID = {"T", "N", "mode"}
_COEF = ("r", "b", "sigma")
_COEF_DEFAULTS = {"r": 0.0, "b": 0.0, "sigma": 1.0}


def _obj(d, key: str, allowed: set) -> dict:
    if not isinstance(d, dict):
        raise ScenarioError(key or "<root>", "expected an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ScenarioError(f"{key}.{extra[0]}" if key else extra[0], "unknown key")
    return d


def _num(value, key: str, lo=None, integer=False):
    ok = isinstance(value, numbers.Real) and not isinstance(value, bool)
    if integer:
        ok = ok and float(value).is_integer()
    if not ok:
        raise ScenarioError(key, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
    if lo is not None and not value >= lo:
        raise ScenarioError(key, f"must be >= {lo}")
    return int(value) if integer else float(value)


def _coef(spec, key: str, N: int):
    if isinstance(spec, bool) or spec is None:
        raise ScenarioError(key, "expected a number, list or object")
    if isinstance(spec, numbers.Real):
        return float(spec)
    if isinstance(spec, list):
        if len(spec) != N:
            raise ScenarioError(key, f"schedule must have length N={N}, got {len(spec)}")
        return [_num(v, f"{key}[{i}]") for i, v in enumerate(spec)]
    if isinstance(spec, dict):
        if spec and set(spec) <= {"base", "walk"}:
            return {k: _num(v, f"{key}.{k}") for k, v in spec.items()}
        return {str(k): _num(v, f"{key}[{k}]") for k, v in spec.items()}
    raise ScenarioError(key, f"unsupported value {spec!r}")


def scenario_from_dict(d: dict) -> Scenario:
    d = _obj(d, "", _TOP)
    grid = _obj(d.get("grid", {}), "grid", _GRID)
    if "N" not in grid:
        raise ScenarioError("grid.N", "required")
    N = _num(grid["N"], "grid.N", lo=1, integer=True)
    T = _num(grid.get("T", 1.0), "grid.T")
    if not T > 0:
        raise ScenarioError("grid.T", "must be positive")
    mode = grid.get("mode", "recombining")
    try:
        mode = LatticeMode(mode).value
    except ValueError:
        raise ScenarioError("grid.mode", f"expected 'recombining' or 'full_tree', got {mode!r}") from None
    coefs = _obj(d.get("coefficients", {}), "coefficients", set(_COEF))
    parsed = {c: _coef(coefs.get(c, _COEF_DEFAULTS[c]), f"coefficients.{c}", N) for c in _COEF}
    tol = _obj(d.get("tolerances", {}), "tolerances", set(DEFAULT_TOLERANCES))
    tolerances = dict(DEFAULT_TOLERANCES)
    tolerances.update({k: _num(v, f"tolerances.{k}", lo=0.0) for k, v in tol.items()})
    delta = d.get("delta")
    name = d.get("name", "")
    if not isinstance(name, str):
        raise ScenarioError("name", "expected a string")
    sc = Scenario(
        T=T, N=N, mode=mode, **parsed,
        gamma1=_num(d.get("gamma1", 0.0), "gamma1", lo=0.0),
        gamma2=_num(d.get("gamma2", 0.0), "gamma2", lo=0.0),
        x0=_num(d.get("x0", 1.0), "x0"),
        delta=None if delta is None else _num(delta, "delta"),
        spike_steps=_num(d.get("spike_steps", 1), "spike_steps", lo=1, integer=True),
        tolerances=tolerances,
        name=name,
    )
    try:
        build_market(sc)
    except HypothesisViolation as exc:
        key = "gamma1" if "gamma" in str(exc) else ("delta" if delta is not None else "coefficients.sigma")
        raise ScenarioError(key, str(exc)) from None
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError("grid", str(exc)) from None
    return sc


def parse_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    sc = scenario_from_dict(data)
    if not sc.name:
        sc.name = path.stem
    return sc


def bundled_scenarios() -> dict[str, Scenario]:
    """Scenarios shipped with the package, keyed by name."""
    out = {}
    for entry in sorted(resources.files("mv_equilibrium.data").iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            sc = scenario_from_dict(json.loads(entry.read_text()))
            sc.name = sc.name or entry.name[:-5]
            out[sc.name] = sc
    return out
