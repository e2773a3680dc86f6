"""Estimator-style wrapper around the equilibrium solver."""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_market, check_wealth
from .bsde import solve_equilibrium
from .equilibrium import Strategy, propagate_wealth, strategy_values


class MeanVarianceEquilibrium(BaseEstimator):
    """Open-loop equilibrium operator ``u = Theta X + Phi`` for one market.

    ``fit`` takes a ``MarketModel`` or ``Scenario`` (there is no training data:
    the solve is exact backward induction).  ``predict`` maps initial wealths to
    the time-0 investment.

    Parameters
    ----------
    mode : {"recombining", "full_tree"} or None
        Lattice layout used when fitting from a ``Scenario``; None keeps the
        scenario's own mode.
    """

    def __init__(self, mode=None):
        self.mode = mode

    def fit(self, market, y=None):
        m = check_market(market, self.mode)
        self.market_ = m
        self.solution_ = solve_equilibrium(m)
        self.theta_ = self.solution_.Theta
        self.phi_ = self.solution_.Phi
        self.branch_ = self.solution_.branch
        return self

    def predict(self, x0):
        check_is_fitted(self, "solution_")
        x = check_wealth(x0)
        return self.theta_[0][0] * x + self.phi_[0][0]

    def strategy(self) -> Strategy:
        check_is_fitted(self, "solution_")
        return Strategy.operator(self.market_.grid, self.theta_, self.phi_)

    def investment(self, x0=None):
        """Nodewise investment along the wealth path from ``x0`` (default: market x0)."""
        s = self.strategy()
        return strategy_values(s, propagate_wealth(self.market_, s, x0))
