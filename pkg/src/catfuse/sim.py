"""Simulation studies: correlated categorical designs, scenario truths, metrics and a replication harness.

A study is a pure function of its :class:`ScenarioSpec` and mode.  Every
replication derives its own seed from ``base_seed`` and the replication
index, so replications can be rerun one at a time.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .design import CategoricalDesign, CoefficientFit, PenaltyParams, ResponseMatrix, center_block, predict
from .fit import FitConfig
from .multi import cross_validate, fit_independent, iterative_q_step, one_pass_q_step

__all__ = [
    "MODES",
    "MetricsReport",
    "ScenarioSpec",
    "center_truth",
    "gen_correlated_categorical",
    "l2_error",
    "lasso_baseline_fit",
    "lasso_cross_validate",
    "prediction_mse",
    "run_study",
    "scenario_coefficients",
    "signal",
]

MODES = ("iterative", "one_pass", "univariate_baseline", "lasso_baseline")
REPORT_VERSION = 1
STUDY_GRID = tuple(float(x) for x in np.geomspace(2.0, 16.0, 7))


@dataclass(frozen=True)
class ScenarioSpec:
    """Settings of one simulation cell.

    ``lambda_grid`` holds the multipliers ``m`` searched by cross-validation
    (``lambda_lj = m * sqrt(log K_j / n)``); ``lasso_grid`` holds fractions
    of the smallest lambda that zeroes the lasso.
    """

    n: int = 200
    p: int = 100
    K: int = 24
    sigma: float = 1.0
    rho: float = 0.0
    scenario_id: int = 1
    replications: int = 100
    base_seed: int = 0
    lambda_grid: tuple = STUDY_GRID
    gamma: float = 8.0
    folds: int = 5
    lasso_grid: tuple = tuple(float(x) for x in np.geomspace(1.0, 0.01, 12))

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.K < 1:
            raise ValueError("n, p and K must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.scenario_id not in (1, 2):
            raise ValueError(f"unsupported scenario {self.scenario_id}; expected 1 or 2")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        object.__setattr__(self, "lasso_grid", tuple(float(x) for x in self.lasso_grid))


def gen_correlated_categorical(n: int, p: int, K: int, rho: float, seed) -> CategoricalDesign:
    """Categorical design from an equicorrelated Gaussian copula.

    ``W_i ~ N_p(0, Sigma)`` with unit variances and common correlation
    ``rho``; ``u = Phi(W)`` and ``x = floor(K u) + 1`` clamped to ``1..K``.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((n, 1))
    z = rng.standard_normal((n, p))
    W = np.sqrt(rho) * z0 + np.sqrt(1.0 - rho) * z
    u = ndtr(W)
    levels = np.clip(np.floor(K * u).astype(np.int64) + 1, 1, K)
    labels = [[str(k) for k in range(1, K + 1)]] * p
    return CategoricalDesign(levels, labels)


def scenario_coefficients(scenario_id: int, p: int, K: int = 24) -> list:
    """True (uncentered) coefficient blocks of the two responses.

    Returns ``[blocks_1, blocks_2]``, each a list of ``p`` arrays of length ``K``.
    """
    if K != 24:
        raise ValueError("scenario coefficients are defined for K = 24 levels only")
    if scenario_id == 1:
        b1 = np.repeat([-3.0, 0.0, 3.0], [10, 4, 10])
        b2 = np.repeat([-3.0, 0.0, 3.0], [8, 8, 8])
        n1 = n2 = 3
    elif scenario_id == 2:
        b1 = np.repeat([-2.0, 3.0], [16, 8])
        b2 = np.repeat([-3.0, 3.0], [12, 12])
        n1, n2 = 25, 10
    else:
        raise ValueError(f"unsupported scenario {scenario_id}; expected 1 or 2")
    t1 = [b1.copy() if j < n1 else np.zeros(K) for j in range(p)]
    t2 = [b2.copy() if j < n2 else np.zeros(K) for j in range(p)]
    return [t1, t2]


def center_truth(design: CategoricalDesign, blocks) -> tuple:
    """Count-weighted centering of true blocks; the shifts add up to the intercept."""
    out, mu = [], 0.0
    for j, b in enumerate(blocks):
        c, shift = center_block(b, design.level_counts[j])
        out.append(c)
        mu += shift
    return out, mu


def signal(design: CategoricalDesign, blocks, intercept: float = 0.0) -> np.ndarray:
    """Noiseless mean ``intercept + sum_j theta_j[x_ij]``."""
    return predict(design, CoefficientFit(intercept, blocks))


def _blocks_of(x) -> np.ndarray:
    if isinstance(x, CoefficientFit):
        return x.coef
    if isinstance(x, np.ndarray):
        return x.reshape(-1)
    return np.concatenate([np.asarray(b, dtype=float).reshape(-1) for b in x]) if len(x) else np.zeros(0)


def l2_error(theta_hat, theta_true_centered) -> float:
    """Euclidean distance between two coefficient tables of one response."""
    a, b = _blocks_of(theta_hat), _blocks_of(theta_true_centered)
    if a.shape != b.shape:
        raise ValueError(f"coefficient shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def prediction_mse(design_test: CategoricalDesign, y_test, fit: CoefficientFit) -> float:
    """Mean squared difference between predictions and ``y_test``.

    Studies pass the noiseless test signal as ``y_test``.
    """
    y_test = np.asarray(y_test, dtype=float).reshape(-1)
    if y_test.shape != (design_test.n,):
        raise ValueError(f"y_test has {y_test.size} entries, design has {design_test.n} rows")
    d = predict(design_test, fit) - y_test
    return float(d @ d) / design_test.n


# ---------------------------------------------------------------------------
# lasso on the full dummy encoding


def _soft(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_lambda_max(design: CategoricalDesign, y) -> float:
    """Smallest lambda for which every dummy coefficient is zero."""
    y = np.asarray(y, dtype=float)
    yc = y - y.mean()
    return max(float(np.max(np.abs(np.bincount(design.codes(j), weights=yc, minlength=K)))) for j, K in enumerate(design.n_levels)) / design.n


def lasso_baseline_fit(
    design: CategoricalDesign,
    y,
    lam: float,
    config: FitConfig | None = None,
    *,
    response_index: int = 0,
    trace: list | None = None,
) -> CoefficientFit:
    """L1-penalized least squares on one indicator column per level.

    Minimizes ``(1/2n) ||y - mu - sum_jk b_jk 1{x_j = k}||^2 + lam * sum |b_jk|``
    by cyclic coordinate descent with an unpenalized intercept.  Indicator
    columns of one predictor have disjoint supports, so a whole block is
    updated at once by soft-thresholding.  The returned blocks are
    re-centered (shifts moved to the intercept) so they are comparable with
    the fused fits.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    config = config or FitConfig()
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape != (design.n,):
        raise ValueError(f"y has {y.size} entries, design has {design.n} rows")
    n = design.n
    codes = [design.codes(j) for j in range(design.p)]
    frac = [c / n for c in design.level_counts]
    blocks = design.zero_blocks()
    mu = float(y.mean())
    resid = y - mu

    def objective():
        return float(resid @ resid) / (2 * n) + lam * sum(float(np.abs(b).sum()) for b in blocks)

    if trace is not None:
        trace.append(objective())
    converged = False
    sweeps = 0
    while sweeps < config.max_sweeps:
        sweeps += 1
        change = 0.0
        for j in range(design.p):
            old = blocks[j]
            partial = resid + old[codes[j]]
            z = np.bincount(codes[j], weights=partial, minlength=old.size) / n
            new = np.divide(_soft(z, lam), frac[j], out=np.zeros(old.size), where=frac[j] > 0)
            resid = partial - new[codes[j]]
            blocks[j] = new
            change = max(change, float(np.max(np.abs(new - old)) / (1.0 + np.max(np.abs(old)))))
        shift = float(resid.mean())
        mu += shift
        resid -= shift
        change = max(change, abs(shift) / (1.0 + abs(mu)))
        if trace is not None:
            trace.append(objective())
        if sweeps >= config.min_sweeps and change < config.tol:
            converged = True
            break
    out = []
    for j, b in enumerate(blocks):
        if np.any(design.level_counts[j] > 0):
            c, shift = center_block(b, design.level_counts[j])
        else:
            c, shift = b, 0.0
        out.append(c)
        mu += shift
    active = [j for j, b in enumerate(out) if np.any(b != 0)]
    return CoefficientFit(mu, out, response_index=response_index, active=active, converged=converged, n_sweeps=sweeps)


def lasso_cross_validate(design: CategoricalDesign, y, fractions, folds: int = 5, seed=0, config: FitConfig | None = None) -> float:
    """Lasso lambda by K-fold CV over ``fraction * lambda_max`` (full data)."""
    y = np.asarray(y, dtype=float)
    lmax = lasso_lambda_max(design, y)
    grid = sorted({float(f) * lmax for f in fractions}, reverse=True)
    perm = np.random.default_rng(seed).permutation(design.n)
    err = np.zeros(len(grid))
    for rows in np.array_split(perm, folds):
        test = np.zeros(design.n, dtype=bool)
        test[rows] = True
        tr, te = design.subset(~test), design.subset(test)
        for g, lam in enumerate(grid):
            f = lasso_baseline_fit(tr, y[~test], lam, config)
            r = y[test] - predict(te, f)
            err[g] += float(r @ r)
    return grid[int(np.argmin(err))]


# ---------------------------------------------------------------------------
# replication harness


@dataclass
class MetricsReport:
    """Per-replication metrics and their aggregates for one study."""

    spec: dict
    mode: str
    rows: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "mode": self.mode, "spec": self.spec, "rows": self.rows, "aggregates": self.aggregates}

    def mean(self, metric: str, response: int) -> float:
        for a in self.aggregates:
            if a["response"] == response:
                return a[f"{metric}_mean"]
        raise KeyError(f"no aggregate for response {response}")

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Aggregate table, one row per response."""
        cols = ["scenario", "sigma", "rho", "mode", "response", "replications", "l2_mean", "l2_sd", "mse_mean", "mse_sd"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for a in self.aggregates:
                w.writerow([self.spec["scenario_id"], self.spec["sigma"], self.spec["rho"], self.mode] + [a[c] for c in cols[4:]])


def _aggregate(rows: list, q: int) -> list:
    out = []
    for l in range(q):
        sub = sorted((r for r in rows if r["response"] == l), key=lambda r: r["replication"])
        agg = {"response": l, "replications": len(sub)}
        for m in ("l2", "mse", "runtime_seconds"):
            v = np.array([r[m] for r in sub], dtype=float)
            agg[f"{m}_mean"] = float(v.mean())
            agg[f"{m}_sd"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append(agg)
    return out


def replication_seed(base_seed: int, r: int) -> int:
    return int(base_seed) ^ int(r)


def _tune_and_fit(spec: ScenarioSpec, mode: str, design, Y: ResponseMatrix, cv_seed, config):
    q = Y.q
    if mode in ("iterative", "one_pass"):
        params = cross_validate(design, Y, spec.lambda_grid, spec.gamma, spec.folds, cv_seed, config)
        mf = iterative_q_step(design, Y, params, config) if mode == "iterative" else one_pass_q_step(design, Y, params, config)
        info = {"rounds": mf.rounds, "converged": mf.converged}
        return list(mf.fits), params.lam[:, 0] / max(float(np.sqrt(np.log(spec.K) / design.n)), 1e-300), info
    if mode == "univariate_baseline":
        mults = []
        for l in range(q):
            p1 = cross_validate(design, Y.values[:, [l]], spec.lambda_grid, spec.gamma, spec.folds, cv_seed, config)
            mults.append(p1.lam[0, 0])
        params = PenaltyParams(np.array(mults)[:, None] * np.ones((1, design.p)), np.full((q, design.p), spec.gamma))
        mf = fit_independent(design, Y, params, config)
        return list(mf.fits), params.lam[:, 0] / max(float(np.sqrt(np.log(spec.K) / design.n)), 1e-300), {}
    if mode == "lasso_baseline":
        fits, lams = [], []
        for l in range(q):
            lam = lasso_cross_validate(design, Y.column(l), spec.lasso_grid, spec.folds, cv_seed, config)
            fits.append(lasso_baseline_fit(design, Y.column(l), lam, config, response_index=l))
            lams.append(lam)
        return fits, np.array(lams), {}
    raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")


def run_replication(spec: ScenarioSpec, mode: str, r: int, config: FitConfig | None = None) -> list:
    """Metrics rows (one per response) for replication ``r``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    seeds = np.random.SeedSequence(replication_seed(spec.base_seed, r)).spawn(4)
    design = gen_correlated_categorical(spec.n, spec.p, spec.K, spec.rho, seeds[0])
    truth = scenario_coefficients(spec.scenario_id, spec.p, spec.K)
    noise = np.random.default_rng(seeds[1]).standard_normal((spec.n, len(truth)))
    Y = ResponseMatrix(np.column_stack([signal(design, t) + spec.sigma * noise[:, l] for l, t in enumerate(truth)]))
    test = gen_correlated_categorical(spec.n, spec.p, spec.K, spec.rho, seeds[2])
    cv_seed = seeds[3]

    t0 = time.perf_counter()
    fits, tuning, info = _tune_and_fit(spec, mode, design, Y, cv_seed, config)
    elapsed = time.perf_counter() - t0

    rows = []
    for l, t in enumerate(truth):
        centered, mu_true = center_truth(design, t)
        rows.append(
            {
                "replication": r,
                "seed": replication_seed(spec.base_seed, r),
                "response": l,
                "l2": l2_error(fits[l], centered),
                "mse": prediction_mse(test, signal(test, t), fits[l]),
                "runtime_seconds": elapsed,
                "tuning": float(tuning[l]),
                "active": [j + 1 for j in fits[l].nonzero_blocks()],
                **info,
            }
        )
    return rows


def run_study(spec: ScenarioSpec, mode: str, config: FitConfig | None = None, progress=None) -> MetricsReport:
    """Run every replication of ``spec`` in ``mode`` and aggregate.

    ``progress`` is an optional callable invoked with each replication index
    after it finishes.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    rows = []
    for r in range(spec.replications):
        rows.extend(run_replication(spec, mode, r, config))
        if progress is not None:
            progress(r)
    rows.sort(key=lambda x: (x["replication"], x["response"]))
    spec_d = asdict(spec)
    spec_d["lambda_grid"] = list(spec.lambda_grid)
    spec_d["lasso_grid"] = list(spec.lasso_grid)
    return MetricsReport(spec_d, mode, rows, _aggregate(rows, 2))
