"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import column_or_1d

from .market import MarketModel, Scenario, build_market


def check_market(obj, mode=None) -> MarketModel:
    """Accept a ``MarketModel`` or a ``Scenario`` (built on ``mode`` if given)."""
    if isinstance(obj, MarketModel):
        if mode is not None and obj.grid.mode.value != str(mode):
            raise ValueError("market was built on a different lattice mode")
        return obj
    if isinstance(obj, Scenario):
        return build_market(obj, obj.grid(mode=mode))
    raise TypeError(f"expected MarketModel or Scenario, got {type(obj).__name__}")


def check_wealth(x) -> np.ndarray:
    """Finite 1-d float array of initial wealths; scalars become length 1."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = column_or_1d(arr)
    if arr.ndim != 1:
        raise ValueError(f"expected 1-d wealth values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("wealth values must be finite")
    return arr
