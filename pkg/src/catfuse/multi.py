"""Active-set propagation across responses, oracle least squares and theory diagnostics.

Responses are processed in column order.  The fit of response ``l`` is
constrained to the predictors that survived the fit of the previous response
(the universal set for the very first fit); its nonzero blocks become the
constraint for the next response.  After response ``q`` the sequence wraps
around to response 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import null_space

from .design import (
    ActiveSet,
    CategoricalDesign,
    CoefficientFit,
    FusionPattern,
    PenaltyParams,
    ResponseMatrix,
    lambda_scale,
    predict,
)
from .fit import FitConfig, fit_single_response

__all__ = [
    "CVResult",
    "MultiFit",
    "TheoryDiagnostics",
    "compute_diagnostics",
    "cross_validate",
    "fit_independent",
    "iterative_q_step",
    "one_pass_q_step",
    "oracle_least_squares",
    "oracle_operator",
    "update_active_set",
]


@dataclass(frozen=True)
class MultiFit:
    """Result of the q-step loop.

    ``active_history`` holds one ``(l, A_l)`` entry per fitted step in the
    order the steps ran.  ``stable_round`` is the first round whose active
    sets were reproduced unchanged by the following round (0 if that never
    happened).
    """

    fits: tuple
    active_history: tuple
    converged: bool
    steps_taken: int
    rounds: int
    stable_round: int = 0

    @property
    def q(self) -> int:
        return len(self.fits)

    def final_active_sets(self) -> list:
        last = {}
        for l, a in self.active_history:
            last[l] = a
        return [last[l] for l in range(self.q)]


def update_active_set(fit: CoefficientFit) -> ActiveSet:
    """Predictors whose block has at least one exactly nonzero entry."""
    return ActiveSet(j for j, b in enumerate(fit.blocks) if np.any(b != 0))


def _as_responses(Y) -> ResponseMatrix:
    return Y if isinstance(Y, ResponseMatrix) else ResponseMatrix(Y)


def _check_shapes(design: CategoricalDesign, Y: ResponseMatrix, params: PenaltyParams) -> None:
    if Y.n != design.n:
        raise ValueError(f"responses have {Y.n} rows, design has {design.n}")
    if params.lam.shape != (Y.q, design.p):
        raise ValueError(f"penalty parameters have shape {params.lam.shape}, expected {(Y.q, design.p)}")


def _run_rounds(design, Y, params, config, max_rounds, check):
    Y = _as_responses(Y)
    _check_shapes(design, Y, params)
    config = config or FitConfig()
    q = Y.q
    cache = {}
    history = []
    incoming = ActiveSet.universal(design.p)
    prev_sets = None
    fits = [None] * q
    converged = False
    stable_round = 0
    rounds = 0
    while rounds < max_rounds:
        rounds += 1
        sets = []
        for l in range(q):
            key = (l, incoming.members)
            if key not in cache:
                cache[key] = fit_single_response(
                    design, Y.column(l), incoming, params.lam[l], params.gamma[l], config, response_index=l
                )
            fits[l] = cache[key]
            incoming = update_active_set(fits[l])
            sets.append(incoming)
            history.append((l, incoming))
        if not check:
            break
        if prev_sets is not None and sets == prev_sets:
            converged = True
            stable_round = rounds - 1
            break
        prev_sets = sets
    return MultiFit(tuple(fits), tuple(history), converged, len(history), rounds, stable_round)


def iterative_q_step(
    design: CategoricalDesign,
    Y,
    params: PenaltyParams,
    config: FitConfig | None = None,
    max_rounds: int = 20,
) -> MultiFit:
    """Iterate the q-step loop until a full round leaves every active set unchanged.

    Fits are memoized on ``(l, incoming active set)``; since a fit is a pure
    function of those, a repeated round reproduces its fits exactly.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    return _run_rounds(design, Y, params, config, max_rounds, True)


def one_pass_q_step(design: CategoricalDesign, Y, params: PenaltyParams, config: FitConfig | None = None) -> MultiFit:
    """A single round of the q-step loop, without a convergence check."""
    return _run_rounds(design, Y, params, config, 1, False)


def fit_independent(design: CategoricalDesign, Y, params: PenaltyParams, config: FitConfig | None = None) -> MultiFit:
    """Fit every response on the universal set, with no propagation."""
    Y = _as_responses(Y)
    _check_shapes(design, Y, params)
    config = config or FitConfig()
    fits, history = [], []
    for l in range(Y.q):
        f = fit_single_response(design, Y.column(l), None, params.lam[l], params.gamma[l], config, response_index=l)
        fits.append(f)
        history.append((l, update_active_set(f)))
    return MultiFit(tuple(fits), tuple(history), True, Y.q, 1, 0)


# ---------------------------------------------------------------------------
# oracle least squares


def _pattern_basis(design: CategoricalDesign, pattern: FusionPattern):
    """Centered collapsed columns and the map from their coefficients to blocks.

    For block ``j`` with groups ``g`` and group counts ``N_g``, the group
    values ``c`` must satisfy ``N . c = 0``.  We use the basis
    ``c = e_g - (N_g / N_last) e_last`` over the observed groups, dropping
    the last one.
    """
    if len(pattern.labels) != design.p:
        raise ValueError(f"pattern has {len(pattern.labels)} blocks, design has {design.p}")
    cols, expand = [], []
    for j in range(design.p):
        lab = pattern.labels[j]
        K = design.n_levels[j]
        if lab.shape != (K,):
            raise ValueError(f"pattern block {j} has {lab.size} labels, expected {K}")
        G = int(lab.max()) + 1
        N = np.bincount(lab, weights=design.level_counts[j], minlength=G)
        obs = np.flatnonzero(N > 0)
        if obs.size < 2:
            continue
        last = obs[-1]
        gid = lab[design.codes(j)]
        for g in obs[:-1]:
            col = (gid == g).astype(float) - (N[g] / N[last]) * (gid == last)
            vec = np.zeros(K)
            vec[lab == g] = 1.0
            vec[lab == last] = -N[g] / N[last]
            vec[design.level_counts[j] == 0] = 0.0
            cols.append(col)
            expand.append((j, vec))
    Z = np.column_stack(cols) if cols else np.zeros((design.n, 0))
    return Z, expand


def oracle_operator(design: CategoricalDesign, pattern: FusionPattern) -> np.ndarray:
    """Matrix ``A`` with ``concat(theta_hat) = A @ y`` for the oracle fit.

    Raises ``ValueError`` if the collapsed design is rank deficient.
    """
    Z, expand = _pattern_basis(design, pattern)
    offsets = np.r_[0, np.cumsum(design.n_levels)]
    E = np.zeros((offsets[-1], Z.shape[1]))
    for c, (j, vec) in enumerate(expand):
        E[offsets[j] : offsets[j + 1], c] = vec
    if Z.shape[1] == 0:
        return np.zeros((offsets[-1], design.n))
    if Z.shape[1] >= design.n or np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise ValueError("collapsed design is rank deficient; oracle least squares is not unique")
    return E @ np.linalg.pinv(Z)


def oracle_least_squares(design: CategoricalDesign, y, pattern: FusionPattern, response_index: int = 0) -> CoefficientFit:
    """Least squares over coefficients that are constant on every pattern group.

    The intercept is ``mean(y)`` and every block satisfies the count-weighted
    sum-to-zero constraint.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape != (design.n,):
        raise ValueError(f"y has {y.size} entries, design has {design.n} rows")
    Z, expand = _pattern_basis(design, pattern)
    blocks = design.zero_blocks()
    if Z.shape[1]:
        if Z.shape[1] >= design.n or np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise ValueError("collapsed design is rank deficient; oracle least squares is not unique")
        beta, *_ = np.linalg.lstsq(Z, y - y.mean(), rcond=None)
        for b, (j, vec) in zip(beta, expand):
            blocks[j] = blocks[j] + b * vec
    active = [j for j, b in enumerate(blocks) if np.any(b != 0)]
    return CoefficientFit(float(y.mean()), blocks, response_index=response_index, active=active)


# ---------------------------------------------------------------------------
# theory diagnostics


@dataclass(frozen=True)
class TheoryDiagnostics:
    """Quantities that enter the oracle-recovery conditions.

    Arrays indexed ``[l, j]`` have shape ``(q, p)``; per-predictor arrays
    have shape ``(p,)``.  ``prob_bound_first`` uses the first response's
    ``s`` and ``lambda`` as displayed; ``prob_bound_min`` takes the minimum
    of ``s * lambda**2`` over responses.  Both are ``None`` when no noise
    level was supplied.
    """

    s: np.ndarray
    delta: np.ndarray
    n_j_min: np.ndarray
    n_j_max: np.ndarray
    m_j_min: np.ndarray
    eta_feasible: float
    gamma_star: np.ndarray
    separation_ok: np.ndarray
    separation_bound: np.ndarray
    c_min: float
    prob_bound_first: np.ndarray | None = None
    prob_bound_min: np.ndarray | None = None
    notes: tuple = field(default=())

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return [conv(x) for x in v.tolist()] if v.ndim else conv(v.item())
            if isinstance(v, list):
                return [conv(x) for x in v]
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else "-inf"
            return v

        return {k: conv(getattr(self, k)) for k in self.__dataclass_fields__}


def _truth_blocks(truth) -> list:
    out = []
    for t in truth:
        blocks = t.blocks if isinstance(t, CoefficientFit) else t
        out.append([np.asarray(b, dtype=float) for b in blocks])
    return out


def compute_diagnostics(truth, design: CategoricalDesign, params: PenaltyParams, sigma: float | None = None) -> TheoryDiagnostics:
    """Separation and balance diagnostics for a true coefficient table.

    ``truth`` is a sequence of ``q`` fits or of ``q`` block lists.
    """
    T = _truth_blocks(truth)
    q, p, n = len(T), design.p, design.n
    if params.lam.shape != (q, p):
        raise ValueError(f"penalty parameters have shape {params.lam.shape}, expected {(q, p)}")
    K = design.n_levels
    s = np.zeros((q, p), dtype=np.int64)
    delta = np.full((q, p), np.inf)
    n_min = np.full(p, np.inf)
    n_max = np.zeros(p)
    for l in range(q):
        if len(T[l]) != p:
            raise ValueError(f"truth for response {l} has {len(T[l])} blocks, design has {p}")
        for j in range(p):
            b = T[l][j]
            if b.shape != (K[j],):
                raise ValueError(f"truth block ({l}, {j}) has shape {b.shape}, expected ({K[j]},)")
            vals, inv = np.unique(b, return_inverse=True)
            s[l, j] = vals.size
            if vals.size > 1:
                delta[l, j] = float(np.min(np.diff(vals)))
            tot = np.bincount(inv, weights=design.level_counts[j], minlength=vals.size)
            n_min[j] = min(n_min[j], tot.min())
            n_max[j] = max(n_max[j], tot.max())
    m_min = np.array([c.min() for c in design.level_counts], dtype=float)
    s_min, s_max = s.min(axis=0), s.max(axis=0)

    eta = min(1.0, float(np.min(s_max * n_min / n)), float(np.min(n / (n_max * s_min))))
    eta = max(eta, 0.0)
    lam_max = params.lam.max(axis=0)
    gam_max = params.gamma.max(axis=0)
    gamma_star = np.maximum(gam_max, eta * s_max)
    with np.errstate(divide="ignore"):
        factor = 4.0 + 3.0 * math.sqrt(2.0) / eta if eta > 0 else np.inf
    bound = factor * np.sqrt(gam_max * gamma_star) * lam_max
    sep = delta >= bound[None, :]

    c_vals = []
    for l in range(q):
        A = oracle_operator(design, FusionPattern.from_blocks(T[l]))
        diag = np.einsum("ij,ij->i", A, A)
        c_vals.append(1.0 / diag.max() if diag.max() > 0 else np.inf)
    c_min = float(min(c_vals))

    pb_first = pb_min = None
    if sigma is not None:
        Kj = np.asarray(K, dtype=float)
        base = np.minimum(n_min, c_min) * eta * gamma_star / (8.0 * sigma**2)
        with np.errstate(over="ignore"):
            pb_first = 1.0 - 4.0 * np.exp(-base * s[0] * params.lam[0] ** 2 + np.log(q * Kj))
            pb_min = 1.0 - 4.0 * np.exp(-base * np.min(s * params.lam**2, axis=0) + np.log(q * Kj))

    notes = ("m_j_min is reported for completeness; it enters no recovery condition.",)
    return TheoryDiagnostics(
        s=s,
        delta=delta,
        n_j_min=n_min,
        n_j_max=n_max,
        m_j_min=m_min,
        eta_feasible=eta,
        gamma_star=gamma_star,
        separation_ok=sep,
        separation_bound=bound,
        c_min=c_min,
        prob_bound_first=pb_first,
        prob_bound_min=pb_min,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CVResult:
    """Held-out error per grid multiplier (rows) and response (columns)."""

    grid: np.ndarray
    cv_error: np.ndarray
    best_multiplier: np.ndarray
    params: PenaltyParams
    folds: tuple


def _fold_ids(n: int, folds: int, seed) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    for f, rows in enumerate(np.array_split(perm, folds)):
        ids[rows] = f
    return ids


def cross_validate(
    design: CategoricalDesign,
    Y,
    lambda_grid: Sequence[float],
    gamma_default: float = 8.0,
    folds: int = 5,
    seed=0,
    config: FitConfig | None = None,
    return_details: bool = False,
):
    """Choose one lambda multiplier per response by K-fold cross-validation.

    A grid value ``m`` means ``lambda_lj = m * sqrt(log K_j / n)``.  For each
    grid value every fold runs one pass of the q-step loop on the training
    rows with the same ``m`` for all responses; response ``l`` then keeps the
    ``m`` with the smallest mean held-out squared error (ties go to the
    larger ``m``).  Held-out rows whose level was not seen in training get
    coefficient 0 for that level.
    """
    Y = _as_responses(Y)
    grid = np.asarray(sorted({float(g) for g in lambda_grid}, reverse=True))
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    if np.any(grid < 0):
        raise ValueError("lambda grid values must be nonnegative")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > design.n:
        raise ValueError(f"{folds} folds for {design.n} rows leaves a fold with zero rows")
    if Y.n != design.n:
        raise ValueError(f"responses have {Y.n} rows, design has {design.n}")
    q = Y.q
    ids = _fold_ids(design.n, folds, seed)
    err = np.zeros((grid.size, q))
    for f in range(folds):
        test = ids == f
        train_d = design.subset(~test)
        test_d = design.subset(test)
        Ytr = ResponseMatrix(Y.values[~test])
        Yte = Y.values[test]
        for g, m in enumerate(grid):
            params = PenaltyParams.scaled(train_d, q, m, gamma_default)
            mf = one_pass_q_step(train_d, Ytr, params, config)
            for l in range(q):
                resid = Yte[:, l] - predict(test_d, mf.fits[l])
                err[g, l] += float(resid @ resid)
    err /= design.n
    best_idx = np.array([int(np.argmin(err[:, l])) for l in range(q)])
    best = grid[best_idx]
    params = PenaltyParams.scaled(design, q, best, gamma_default)
    if return_details:
        return CVResult(grid, err, best, params, tuple(ids.tolist()))
    return params
