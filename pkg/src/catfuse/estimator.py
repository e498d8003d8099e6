"""scikit-learn style wrapper around the q-step fused fit."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .design import CategoricalDesign, CoefficientFit, PenaltyParams, ResponseMatrix, encode_with_labels
from .fit import FitConfig
from .multi import fit_independent, iterative_q_step, one_pass_q_step

__all__ = ["FusedANOVARegressor"]


def _encode_fit(X) -> CategoricalDesign:
    cols = [[str(v) for v in X[:, j]] for j in range(X.shape[1])]
    labels = [sorted(set(c)) for c in cols]
    levels = np.column_stack([encode_with_labels(c, lab)[0] for c, lab in zip(cols, labels)])
    return CategoricalDesign(levels, labels)


class FusedANOVARegressor(RegressorMixin, BaseEstimator):
    """Multi-response ANOVA with MCP level fusion.

    Every column of ``X`` is treated as categorical (values are compared as
    strings).  ``y`` may have several columns; they are fitted in column
    order with active sets propagated from one response to the next.

    Parameters
    ----------
    lam : float or sequence of float
        Penalty level.  With ``scale_lambda=True`` (default) this is a
        multiplier of ``sqrt(log K_j / n)``; a sequence gives one value per
        response.
    gamma : float
        MCP concavity parameter.
    mode : {"iterative", "one_pass", "independent"}
    scale_lambda : bool
    max_sweeps, tol, min_sweeps : coordinate-descent controls.
    max_rounds : int
        Round limit for ``mode="iterative"``.
    """

    def __init__(
        self,
        lam=1.0,
        gamma: float = 8.0,
        mode: str = "iterative",
        scale_lambda: bool = True,
        max_sweeps: int = 200,
        tol: float = 1e-8,
        min_sweeps: int = 2,
        max_rounds: int = 20,
    ):
        self.lam = lam
        self.gamma = gamma
        self.mode = mode
        self.scale_lambda = scale_lambda
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.min_sweeps = min_sweeps
        self.max_rounds = max_rounds

    def _params(self, design: CategoricalDesign, q: int) -> PenaltyParams:
        if self.scale_lambda:
            return PenaltyParams.scaled(design, q, self.lam, self.gamma)
        lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (q,))
        return PenaltyParams(np.repeat(lam[:, None], design.p, axis=1), np.full((q, design.p), float(self.gamma)))

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=None, multi_output=True, y_numeric=True)
        if self.mode not in ("iterative", "one_pass", "independent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        design = _encode_fit(np.asarray(X, dtype=object))
        Y = ResponseMatrix(np.asarray(y, dtype=float))
        config = FitConfig(self.max_sweeps, self.tol, self.min_sweeps)
        params = self._params(design, Y.q)
        if self.mode == "iterative":
            mf = iterative_q_step(design, Y, params, config, self.max_rounds)
        elif self.mode == "one_pass":
            mf = one_pass_q_step(design, Y, params, config)
        else:
            mf = fit_independent(design, Y, params, config)
        self.level_labels_ = design.level_labels
        self.fits_ = mf.fits
        self.multi_fit_ = mf
        self.penalty_ = params
        self.n_outputs_ = Y.q
        self._y_1d = np.ndim(y) == 1
        self.intercept_ = np.array([f.intercept for f in mf.fits])
        self.coef_ = [list(f.blocks) for f in mf.fits]
        self.active_sets_ = [a.as_list() for a in mf.final_active_sets()]
        return self

    def predict(self, X):
        check_is_fitted(self, "fits_")
        X = validate_data(self, X, dtype=None, reset=False)
        X = np.asarray(X, dtype=object)
        out = np.empty((X.shape[0], self.n_outputs_))
        unseen_total = 0
        codes, masks = [], []
        for j, lab in enumerate(self.level_labels_):
            c, unseen = encode_with_labels([str(v) for v in X[:, j]], lab)
            codes.append(c - 1)
            masks.append(unseen)
            unseen_total += int(unseen.sum())
        for l, f in enumerate(self.fits_):
            yhat = np.full(X.shape[0], f.intercept)
            for j, b in enumerate(f.blocks):
                yhat += np.where(masks[j], 0.0, b[codes[j]])
            out[:, l] = yhat
        self.n_unseen_ = unseen_total
        return out[:, 0] if self._y_1d else out

    def fit_for(self, response: int) -> CoefficientFit:
        check_is_fitted(self, "fits_")
        return self.fits_[response]
