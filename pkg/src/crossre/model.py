"""Estimator-style facade over the fitting and prediction pipeline.

CrossedRandomEffects follows the scikit-learn conventions (constructor
stores parameters, fit returns self, fitted attributes carry a trailing
underscore) so the model can sit in existing tooling. It is a thin
shell: all real work happens in the layout/design/estimate/predict
modules, and their objects are exposed as fitted attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, DataError
from .estimate import fit as _fit
from .io import design_from_cubes
from .layout import BalancedLayout, ResponseTable
from .predict import eblup
from .uncertainty import mse_bundle, mse_lsw_all, prediction_interval

__all__ = ["CrossedRandomEffects"]


class CrossedRandomEffects(BaseEstimator):
    """Balanced two-way crossed random effects model.

    Parameters
    ----------
    layout : tuple (g, h, m)
        Grid shape: g row levels, h column levels, m observations per
        cell. Data passed to fit must be in flat layout order (row
        slowest, replicate fastest).
    roles : sequence of str or None
        Role per covariate column of X ("row", "column", "interaction",
        "within", "auto"). None treats every column as auto.
    method : str
        "reml" (default) or "ml".
    """

    def __init__(self, layout=None, roles=None, method="reml"):
        self.layout = layout
        self.roles = roles
        self.method = method

    def _resolved_layout(self) -> BalancedLayout:
        if isinstance(self.layout, BalancedLayout):
            return self.layout
        try:
            g, h, m = self.layout
        except (TypeError, ValueError):
            raise ConfigError(
                f"layout must be a (g, h, m) triple, got {self.layout!r}"
            ) from None
        return BalancedLayout(g=int(g), h=int(h), m=int(m))

    def fit(self, X, y):
        """Fit variance components and fixed effects by REML or ML.

        X is (n, p) observation-level covariates in flat layout order
        (pass an (n, 0) array or None for a mean-only model); y is the
        n response values.
        """
        layout = self._resolved_layout()
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != layout.n:
            raise DataError(
                f"y has {y.size} values but the layout needs {layout.n}"
            )
        if X is None:
            X = np.empty((layout.n, 0))
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != layout.n:
            raise DataError(
                f"X has {X.shape[0]} rows but the layout needs {layout.n}"
            )
        p = X.shape[1]
        if self.roles is None:
            roles = {f"x{idx}": "auto" for idx in range(p)}
        else:
            given = list(self.roles)
            if len(given) != p:
                raise ConfigError(
                    f"roles lists {len(given)} entries for {p} covariate columns"
                )
            roles = {f"x{idx}": role for idx, role in enumerate(given)}
        cubes = {
            name: X[:, idx].reshape(layout.shape)
            for idx, name in enumerate(roles)
        }

        self._train_x = X
        self.design_ = design_from_cubes(layout, cubes, roles)
        self.table_ = ResponseTable(layout, y)
        self.result_ = _fit(self.design_, self.table_, method=self.method)
        self.theta_ = self.result_.theta
        self.xi_ = self.result_.xi
        self.eblups_ = eblup(self.result_, self.design_, self.table_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise ConfigError("this estimator is not fitted; call fit first")

    def predict(self, X=None) -> np.ndarray:
        """In-sample fitted values: fixed part plus predicted effects.

        The model smooths the training grid; it cannot score unseen
        rows or columns, so X must be None (or the training X).
        """
        self._check_fitted()
        if X is not None:
            X = np.asarray(X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.shape != self._train_x.shape or not np.array_equal(X, self._train_x):
                raise ConfigError(
                    "predict only smooths the training grid; pass None or "
                    "the exact training X"
                )
        layout = self.design_.layout
        g, h, m = layout.shape
        mean = self.design_.matrix @ self.xi_.vector()
        effects = self.eblups_.alpha[:, None, None] + self.eblups_.beta[None, :, None]
        if self.eblups_.gamma is not None:
            effects = effects + self.eblups_.gamma[:, :, None]
        return mean + np.broadcast_to(effects, layout.shape).reshape(layout.n)

    def effect_mse(self, target, methods=("lsw",)):
        """MseEstimate for one effect; see uncertainty.mse_bundle."""
        self._check_fitted()
        return mse_bundle(self.result_, self.design_, self.table_, target,
                          methods=methods)

    def prediction_intervals(self, q: float = 0.05) -> dict:
        """Leverage-based intervals for every row/column(/cell) effect."""
        self._check_fitted()
        mses = mse_lsw_all(self.result_, self.design_)
        out = {}
        ebl = self.eblups_
        out["alpha"] = [
            prediction_interval(ebl.alpha[i], mses["alpha"][i], q)
            for i in range(ebl.alpha.size)
        ]
        out["beta"] = [
            prediction_interval(ebl.beta[j], mses["beta"][j], q)
            for j in range(ebl.beta.size)
        ]
        if ebl.gamma is not None:
            g, h = ebl.gamma.shape
            out["gamma"] = [
                [prediction_interval(ebl.gamma[i, j], mses["gamma"][i, j], q)
                 for j in range(h)]
                for i in range(g)
            ]
        return out
