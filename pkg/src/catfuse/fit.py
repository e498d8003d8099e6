"""Single-response penalized fit by blockwise coordinate descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .block import _mcp, _solve_block_nb
from .design import ActiveSet, CategoricalDesign, CoefficientFit

__all__ = [
    "FitConfig",
    "fit_single_response",
    "objective_value",
    "partial_residual_means",
]


@dataclass(frozen=True)
class FitConfig:
    """Stopping rules for coordinate descent.

    A sweep updates every active block once.  The loop stops after at least
    ``min_sweeps`` sweeps once the largest relative block change
    ``||new - old||_inf / (1 + ||old||_inf)`` falls below ``tol``.
    """

    max_sweeps: int = 200
    tol: float = 1e-8
    min_sweeps: int = 2

    def __post_init__(self):
        if not (self.max_sweeps >= self.min_sweeps >= 1):
            raise ValueError("need max_sweeps >= min_sweeps >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def partial_residual_means(design: CategoricalDesign, residual, j: int) -> tuple:
    """Level counts and level means of ``residual`` for predictor ``j``.

    Levels without observations get mean 0.
    """
    if not 0 <= j < design.p:
        raise IndexError(f"predictor index {j} out of range for p={design.p}")
    K = design.n_levels[j]
    counts = design.level_counts[j].astype(float)
    sums = np.bincount(design.codes(j), weights=np.asarray(residual, dtype=float), minlength=K)
    means = np.divide(sums, counts, out=np.zeros(K), where=counts > 0)
    return counts, means


def _penalty(block: np.ndarray, counts: np.ndarray, lam: float, gamma: float) -> float:
    th = block[counts > 0]
    if th.size < 2 or lam == 0:
        return 0.0
    return float(_mcp(np.diff(np.sort(th)), lam, gamma).sum())


def objective_value(design: CategoricalDesign, y, fit: CoefficientFit, lambda_row, gamma_row) -> float:
    """Penalized least-squares objective of ``fit`` with the intercept at ``mean(y)``."""
    y = np.asarray(y, dtype=float)
    resid = y - y.mean()
    for j, b in enumerate(fit.blocks):
        resid -= b[design.codes(j)]
    val = float(resid @ resid) / (2.0 * design.n)
    for j, b in enumerate(fit.blocks):
        val += _penalty(b, design.level_counts[j], float(lambda_row[j]), float(gamma_row[j]))
    return val


def _check_rows(design: CategoricalDesign, lambda_row, gamma_row) -> tuple:
    lam = np.asarray(lambda_row, dtype=float).reshape(-1)
    gam = np.asarray(gamma_row, dtype=float).reshape(-1)
    if lam.size == 1:
        lam = np.full(design.p, lam[0])
    if gam.size == 1:
        gam = np.full(design.p, gam[0])
    if lam.shape != (design.p,) or gam.shape != (design.p,):
        raise ValueError(f"penalty rows must have length p={design.p}")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("lambda entries must be finite and nonnegative")
    if np.any(gam <= 0):
        raise ValueError("gamma entries must be positive")
    return lam, gam


@njit(cache=True)
def _center_nb(raw, counts):
    K = raw.size
    out = np.zeros(K)
    first = 0.0
    seen = False
    same = True
    W = 0.0
    T = 0.0
    for k in range(K):
        if counts[k] > 0:
            if not seen:
                first = raw[k]
                seen = True
            elif raw[k] != first:
                same = False
            W += counts[k]
            T += counts[k] * raw[k]
    if same:
        return out
    shift = T / W
    for k in range(K):
        if counts[k] > 0:
            out[k] = raw[k] - shift
    return out


@njit(cache=True)
def _objective_nb(resid, blocks, counts, offsets, lam, gam, n):
    val = 0.0
    for i in range(resid.size):
        val += resid[i] * resid[i]
    val /= 2.0 * n
    for j in range(offsets.size - 1):
        if lam[j] == 0.0:
            continue
        lo = offsets[j]
        hi = offsets[j + 1]
        m = 0
        for k in range(lo, hi):
            if counts[k] > 0:
                m += 1
        th = np.empty(m)
        m = 0
        for k in range(lo, hi):
            if counts[k] > 0:
                th[m] = blocks[k]
                m += 1
        th = np.sort(th)
        w = gam[j] * lam[j]
        for k in range(1, m):
            d = th[k] - th[k - 1]
            if d >= w:
                val += 0.5 * gam[j] * lam[j] * lam[j]
            else:
                val += lam[j] * d - d * d / (2.0 * gam[j])
    return val


@njit(cache=True)
def _cd_loop(codes, counts, offsets, active, lam, gam, resid, max_sweeps, min_sweeps, tol, want_trace):
    """Blockwise coordinate descent; ``codes`` is (p, n), blocks are stored flat."""
    n = resid.size
    blocks = np.zeros(offsets[-1])
    trace = np.empty(max_sweeps + 1)
    nt = 0
    if want_trace:
        trace[0] = _objective_nb(resid, blocks, counts, offsets, lam, gam, n)
        nt = 1
    converged = active.size == 0
    sweeps = 0
    while sweeps < max_sweeps and active.size > 0:
        sweeps += 1
        change = 0.0
        for j in active:
            lo = offsets[j]
            K = offsets[j + 1] - lo
            cj = codes[j]
            sums = np.zeros(K)
            for i in range(n):
                resid[i] += blocks[lo + cj[i]]
                sums[cj[i]] += resid[i]
            cnt = counts[lo : lo + K]
            means = np.zeros(K)
            for k in range(K):
                if cnt[k] > 0:
                    means[k] = sums[k] / cnt[k]
            raw, _ = _solve_block_nb(cnt, means, float(n), lam[j], gam[j])
            new = _center_nb(raw, cnt)
            dmax = 0.0
            omax = 0.0
            for k in range(K):
                dmax = max(dmax, abs(new[k] - blocks[lo + k]))
                omax = max(omax, abs(blocks[lo + k]))
                blocks[lo + k] = new[k]
            for i in range(n):
                resid[i] -= new[cj[i]]
            change = max(change, dmax / (1.0 + omax))
        if want_trace:
            trace[nt] = _objective_nb(resid, blocks, counts, offsets, lam, gam, n)
            nt += 1
        if sweeps >= min_sweeps and change < tol:
            converged = True
            break
    return blocks, sweeps, converged, trace[:nt]


def fit_single_response(
    design: CategoricalDesign,
    y,
    active: ActiveSet | None = None,
    lambda_row=0.0,
    gamma_row=8.0,
    config: FitConfig | None = None,
    *,
    response_index: int = 0,
    trace: list | None = None,
) -> CoefficientFit:
    """Fit one response with the blocks outside ``active`` held at zero.

    The intercept is fixed at ``mean(y)``.  Each sweep visits the active
    predictors in ascending order and replaces the block by the exact
    minimizer of its subproblem given the other blocks, then re-centers it.
    A fit that hits ``max_sweeps`` is returned with ``converged=False``.

    If ``trace`` is a list, the objective after every sweep is appended to
    it (the first entry is the objective at the zero start).
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape != (design.n,):
        raise ValueError(f"y has {y.size} entries, design has {design.n} rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")
    active = ActiveSet.universal(design.p) if active is None else active
    active.validate(design.p)
    lam, gam = _check_rows(design, lambda_row, gamma_row)

    mu = float(y.mean())
    offsets = np.r_[0, np.cumsum(design.n_levels)].astype(np.int64)
    counts = np.concatenate(design.level_counts).astype(float)
    codes = np.ascontiguousarray((design.levels - 1).T)
    flat, sweeps, converged, tr = _cd_loop(
        codes,
        counts,
        offsets,
        np.asarray(active.members, dtype=np.int64),
        lam,
        gam,
        y - mu,
        config.max_sweeps,
        config.min_sweeps,
        config.tol,
        trace is not None,
    )
    if trace is not None:
        trace.extend(float(v) for v in tr)
    blocks = [flat[offsets[j] : offsets[j + 1]].copy() for j in range(design.p)]

    return CoefficientFit(
        mu,
        blocks,
        response_index=response_index,
        active=[j for j in active if np.any(blocks[j] != 0)],
        converged=converged,
        n_sweeps=sweeps,
    )
