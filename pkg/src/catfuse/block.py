"""Exact solver for the one-predictor fused-level subproblem.

For one predictor with ``K`` levels the block objective is::

    (1/2n) * sum_k w_k (r_k - theta_k)^2 + sum_k rho(theta_(k+1) - theta_(k))

where ``w_k`` are level counts, ``r_k`` the level means of the partial
residual, ``theta_(k)`` the order statistics of ``theta`` and ``rho`` the
minimax concave penalty (MCP).  Levels with zero weight carry no data; they
get coefficient 0 and do not enter the penalty chain.

The minimizer preserves the order of the targets, so the problem reduces to
a chain over levels sorted by target with non-decreasing coefficients.
:func:`solve_fused_block` tries three certified shortcuts before falling back
to an exact dynamic program over piecewise-quadratic value functions:

1. ``lam == 0``: the targets themselves.
2. A closed-form certificate that one fused group is optimal.
3. The optimal segmentation under the assumption that every gap between
   groups is saturated (costs ``gamma * lam**2 / 2``), accepted only when a
   matching lower bound proves it optimal.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "BlockProblem",
    "BlockSolution",
    "block_objective",
    "brute_force_block_oracle",
    "mcp_value",
    "solve_fused_block",
]

ORACLE_MAX_LEVELS = 8


def mcp_value(x: float, lam: float, gamma: float) -> float:
    """MCP ``int_0^x lam * (1 - t / (gamma * lam))_+ dt`` for ``x >= 0``."""
    if x < 0:
        raise ValueError("mcp_value is defined for x >= 0")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0:
        return 0.0
    if x >= gamma * lam:
        return 0.5 * gamma * lam * lam
    return lam * x - x * x / (2.0 * gamma)


def _mcp(d: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    d = np.abs(np.asarray(d, dtype=float))
    if lam == 0:
        return np.zeros_like(d)
    return np.where(d >= gamma * lam, 0.5 * gamma * lam * lam, lam * d - d * d / (2.0 * gamma))


def block_objective(theta, weights, targets, n_total: float, lam: float, gamma: float) -> float:
    """Evaluate the block objective with the order-statistic penalty."""
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(weights, dtype=float)
    pos = w > 0
    r = np.asarray(targets, dtype=float)[pos]
    th = theta[pos]
    loss = float(np.dot(w[pos], (r - th) ** 2)) / (2.0 * n_total)
    pen = float(_mcp(np.diff(np.sort(th)), lam, gamma).sum()) if th.size > 1 else 0.0
    return loss + pen


@dataclass(frozen=True)
class BlockProblem:
    """Data of one block subproblem.

    Parameters
    ----------
    weights : array of shape (K,)
        Level counts ``n_jk`` (nonnegative).
    targets : array of shape (K,)
        Level means of the partial residual; ignored where the weight is 0.
    n_total : float
        Sample size ``n`` of the loss normalization ``1 / (2n)``.
    lam, gamma : float
        MCP parameters, ``lam >= 0`` and ``gamma > 0``.
    """

    weights: np.ndarray
    targets: np.ndarray
    n_total: float
    lam: float
    gamma: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        r = np.array(self.targets, dtype=float)
        if w.ndim != 1 or w.shape != r.shape:
            raise ValueError("weights and targets must be 1-d arrays of equal length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if not np.all(np.isfinite(r[w > 0])):
            raise ValueError("targets must be finite where the weight is positive")
        r = np.where(w > 0, r, 0.0)
        if not self.n_total > 0:
            raise ValueError("n_total must be positive")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be finite and nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "targets", r)
        object.__setattr__(self, "n_total", float(self.n_total))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def size(self) -> int:
        return self.weights.size

    def objective(self, theta) -> float:
        return block_objective(theta, self.weights, self.targets, self.n_total, self.lam, self.gamma)


@dataclass(frozen=True)
class BlockSolution:
    """Minimizer of a :class:`BlockProblem`.

    ``labels[k]`` is the fused group of level ``k`` (groups numbered by
    increasing coefficient), or ``-1`` for zero-weight levels.  ``method``
    records which path produced the answer.
    """

    coefficients: np.ndarray
    objective: float
    labels: np.ndarray
    method: str = field(default="", compare=False)

    @property
    def n_groups(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def cluster_assignment(self) -> list:
        """Fused groups as lists of 0-based level indices."""
        return [np.flatnonzero(self.labels == g).tolist() for g in range(self.n_groups)]


def _labels_from(theta: np.ndarray, pos: np.ndarray) -> np.ndarray:
    labels = np.full(theta.size, -1, dtype=np.int64)
    if np.any(pos):
        _, inv = np.unique(theta[pos], return_inverse=True)
        labels[pos] = inv
    return labels


def _finish(problem: BlockProblem, theta: np.ndarray, method: str) -> BlockSolution:
    pos = problem.weights > 0
    theta = np.where(pos, theta, 0.0)
    return BlockSolution(theta, problem.objective(theta), _labels_from(theta, pos), method)


# ---------------------------------------------------------------------------
# certified shortcuts (compiled kernels on the sorted chain)


@njit(cache=True)
def _min_quad_on(b, e, w):
    """min over d in [0, w] of b*d + e*d*d."""
    best = 0.0
    v = b * w + e * w * w
    if v < best:
        best = v
    if e > 0.0:
        d = -b / (2.0 * e)
        if 0.0 < d < w:
            v = b * d + e * d * d
            if v < best:
                best = v
    return best


@njit(cache=True)
def _fused_gap(r, a, lam, gamma):
    """Lower bound on obj(theta) - obj(fused) over all theta (>= 0 certifies)."""
    m = r.size
    A = 0.0
    T = 0.0
    for k in range(m):
        A += a[k]
        T += a[k] * r[k]
    mean = T / A
    w = gamma * lam
    csat = 0.5 * gamma * lam * lam
    total = 0.0
    S = 0.0
    Aleft = 0.0
    for k in range(m - 1):
        S += a[k] * (r[k] - mean)
        Aleft += a[k]
        s = abs(S)
        c = Aleft * (A - Aleft) / A
        # unsaturated part of the gap range
        best = _min_quad_on(lam - 2.0 * s, c - 1.0 / (2.0 * gamma), w)
        # saturated part: csat - 2 s d + c d^2 for d >= w
        d = s / c
        if d < w:
            d = w
        v = csat - 2.0 * s * d + c * d * d
        if v < best:
            best = v
        total += best
    return total


@njit(cache=True)
def _segment_dp(r, a, lam, gamma, lower):
    """Optimal partition of the sorted chain into contiguous runs.

    With ``lower=False`` each run is fused at its weighted mean and every cut
    costs the saturated penalty; the value is an upper bound on the optimum
    (attained by the returned segmentation when all its gaps saturate).

    With ``lower=True`` each run is charged a lower bound on its best
    arrangement with unsaturated internal gaps; the value is a lower bound on
    the optimum.
    """
    m = r.size
    csat = 0.5 * gamma * lam * lam
    w = gamma * lam
    best = np.empty(m + 1)
    arg = np.zeros(m + 1, dtype=np.int64)
    best[0] = 0.0
    for j in range(1, m + 1):
        bj = np.inf
        aj = 0
        # grow the run r[i:j] leftwards with Welford updates
        W = 0.0
        mean = 0.0
        sse = 0.0
        for i in range(j - 1, -1, -1):
            W_new = W + a[i]
            delta = r[i] - mean
            mean += delta * a[i] / W_new
            sse += a[i] * delta * (r[i] - mean)
            W = W_new
            cost = sse
            if lower and j - i > 1:
                S = 0.0
                Aleft = 0.0
                for k in range(i, j - 1):
                    S += a[k] * (r[k] - mean)
                    Aleft += a[k]
                    c = Aleft * (W - Aleft) / W
                    cost += _min_quad_on(lam - 2.0 * abs(S), c - 1.0 / (2.0 * gamma), w)
            if i > 0:
                cost += csat
            v = best[i] + cost
            if v < bj:
                bj = v
                aj = i
        best[j] = bj
        arg[j] = aj
    return best[m], arg


@njit(cache=True)
def _theta_from_arg(r, a, arg):
    """Cluster means of the segmentation encoded by ``arg``."""
    th = np.empty_like(r)
    j = r.size
    while j > 0:
        i = arg[j]
        A = 0.0
        T = 0.0
        for k in range(i, j):
            A += a[k]
            T += a[k] * r[k]
        for k in range(i, j):
            th[k] = T / A
        j = i
    return th


@njit(cache=True)
def _chain_objective(th, r, a, lam, gamma):
    """Chain objective for a non-decreasing ``th``."""
    v = 0.0
    w = gamma * lam
    for k in range(r.size):
        v += a[k] * (r[k] - th[k]) ** 2
        if k > 0:
            d = th[k] - th[k - 1]
            v += 0.5 * gamma * lam * lam if d >= w else lam * d - d * d / (2.0 * gamma)
    return v


# ---------------------------------------------------------------------------
# exact dynamic program over piecewise-quadratic value functions
#
# F_1(t) = a_1 (r_1 - t)^2
# F_k(t) = a_k (r_k - t)^2 + min_{s <= t} [F_{k-1}(s) + rho(t - s)]
#
# Every F_k is piecewise quadratic on [r_1, r_m].  The inner minimum is the
# lower envelope of a finite family of quadratic candidates, each valid on a
# t-interval and tagged with the affine rule s = e0 + e1 * t that recovers
# the previous coefficient.  Pieces and candidates are rows
# (x0, x1, A, B, C, e0, e1) of float arrays.


@njit(cache=True)
def _grow(arr, n):
    if n < arr.shape[0]:
        return arr
    out = np.empty((2 * arr.shape[0], arr.shape[1]))
    out[: arr.shape[0]] = arr
    return out


@njit(cache=True)
def _qv(c, t):
    return (c[2] * t + c[3]) * t + c[4]


@njit(cache=True)
def _push(cands, nc, x0, x1, e0, e1, A, B, C, saturated, lam, gamma, lo, hi, eps):
    if x0 < lo:
        x0 = lo
    if x1 > hi:
        x1 = hi
    if x1 < x0 - eps:
        return cands, nc
    if x1 < x0:
        x1 = x0
    cands = _grow(cands, nc)
    qa = A * e1 * e1
    qb = 2.0 * A * e0 * e1 + B * e1
    qc = A * e0 * e0 + B * e0 + C
    if saturated:
        qc += 0.5 * gamma * lam * lam
    else:
        g0 = -e0
        g1 = 1.0 - e1
        qa += -g1 * g1 / (2.0 * gamma)
        qb += lam * g1 - g0 * g1 / gamma
        qc += lam * g0 - g0 * g0 / (2.0 * gamma)
    cands[nc, 0] = x0
    cands[nc, 1] = x1
    cands[nc, 2] = qa
    cands[nc, 3] = qb
    cands[nc, 4] = qc
    cands[nc, 5] = e0
    cands[nc, 6] = e1
    return cands, nc + 1


@njit(cache=True)
def _candidates(F, nF, lo, hi, lam, gamma, eps):
    w = gamma * lam
    cands = np.empty((max(16, 6 * nF), 7))
    nc = 0
    # saturated jumps from a fixed s are constant in t; only their running
    # minimum over start points matters, so they are collected first
    sx = np.empty(3 * nF)
    sv = np.empty(3 * nF)
    ss = np.empty(3 * nF)
    ns = 0
    for i in range(nF):
        L = F[i, 0]
        U = F[i, 1]
        A = F[i, 2]
        B = F[i, 3]
        C = F[i, 4]
        # fuse with the previous level
        cands, nc = _push(cands, nc, L, U, 0.0, 1.0, A, B, C, False, lam, gamma, lo, hi, eps)
        # unsaturated jump from a piece end (shared ends are pushed once)
        cands, nc = _push(cands, nc, L, L + w, L, 0.0, A, B, C, False, lam, gamma, lo, hi, eps)
        if i == nF - 1:
            cands, nc = _push(cands, nc, U, U + w, U, 0.0, A, B, C, False, lam, gamma, lo, hi, eps)
        # gap exactly gamma * lam
        cands, nc = _push(cands, nc, L + w, U + w, -w, 1.0, A, B, C, True, lam, gamma, lo, hi, eps)
        sx[ns] = L + w
        ss[ns] = L
        sv[ns] = (A * L + B) * L + C
        ns += 1
        sx[ns] = U + w
        ss[ns] = U
        sv[ns] = (A * U + B) * U + C
        ns += 1
        if A > 0.0:
            v = -B / (2.0 * A)
            if L < v < U:
                sx[ns] = v + w
                ss[ns] = v
                sv[ns] = (A * v + B) * v + C
                ns += 1
        D = 2.0 * A - 1.0 / gamma
        if D > 1e-14 * (abs(A) + 1.0 / gamma):
            alpha = (lam - B) / D
            beta = -1.0 / (gamma * D)
            # L <= s <= U and t - w <= s <= t with s = alpha + beta t, beta < 0
            t_lo = max((U - alpha) / beta, alpha / (1.0 - beta))
            t_hi = min((L - alpha) / beta, (alpha + w) / (1.0 - beta))
            if t_hi >= t_lo:
                cands, nc = _push(cands, nc, t_lo, t_hi, alpha, beta, A, B, C, False, lam, gamma, lo, hi, eps)
    order = np.argsort(sx[:ns], kind="mergesort")
    cur_v = np.inf
    cur_s = 0.0
    cur_x = 0.0
    for o in order:
        if sv[o] < cur_v:
            if cur_v < np.inf and sx[o] > cur_x:
                cands, nc = _push(cands, nc, cur_x, sx[o], cur_s, 0.0, 0.0, 0.0, cur_v, True, lam, gamma, lo, hi, eps)
            cur_v = sv[o]
            cur_s = ss[o]
            cur_x = sx[o]
    if cur_v < np.inf:
        cands, nc = _push(cands, nc, cur_x, hi, cur_s, 0.0, 0.0, 0.0, cur_v, True, lam, gamma, lo, hi, eps)
    return cands, nc


@njit(cache=True)
def _roots_in(qa, qb, qc, x0, x1, eps):
    """Real roots of qa t^2 + qb t + qc strictly inside (x0, x1), sorted.

    Returns ``(first, second, count)``.
    """
    k = 0
    o0 = 0.0
    o1 = 0.0
    big = max(abs(x0), abs(x1), 1.0)
    scale = abs(qa) * big * big + abs(qb) * big + abs(qc)
    if abs(qa) <= 1e-15 * scale or qa == 0.0:
        if qb != 0.0:
            o0 = -qc / qb
            k = 1
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0.0:
            if disc > -1e-14 * qb * qb:
                o0 = -qb / (2.0 * qa)
                k = 1
        else:
            sq = math.sqrt(disc)
            q = -0.5 * (qb + math.copysign(sq, qb))
            o0 = q / qa
            k = 1
            if q != 0.0:
                o1 = qc / q
                k = 2
    r0 = 0.0
    r1 = 0.0
    nr = 0
    if k >= 1 and x0 + eps < o0 < x1 - eps:
        r0 = o0
        nr = 1
    if k == 2 and x0 + eps < o1 < x1 - eps:
        if nr == 0:
            r0 = o1
        else:
            r1 = o1
        nr += 1
    if nr == 2 and r1 < r0:
        r0, r1 = r1, r0
    return r0, r1, nr


@njit(cache=True)
def _lowest_right_of(cands, act, na, t):
    """Index of the candidate lowest immediately to the right of ``t``."""
    vmin = np.inf
    for i in range(na):
        v = _qv(cands[act[i]], t)
        if v < vmin:
            vmin = v
    vtol = 1e-12 * (abs(vmin) + 1.0)
    smin = np.inf
    smax = 0.0
    for i in range(na):
        c = cands[act[i]]
        if _qv(c, t) <= vmin + vtol:
            s = 2.0 * c[2] * t + c[3]
            if s < smin:
                smin = s
            if abs(s) > smax:
                smax = abs(s)
    stol = 1e-9 * (smax + 1.0)
    best = -1
    bcurv = np.inf
    for i in range(na):
        c = cands[act[i]]
        if _qv(c, t) <= vmin + vtol and 2.0 * c[2] * t + c[3] <= smin + stol:
            if c[2] < bcurv:
                bcurv = c[2]
                best = act[i]
    return best


@njit(cache=True)
def _lower_envelope(cands, nc, lo, hi, eps):
    """Lower envelope on [lo, hi] of the candidate quadratics."""
    pts = np.empty(2 * nc + 2)
    pts[0] = lo
    pts[1] = hi
    pts[2 : 2 + nc] = cands[:nc, 0]
    pts[2 + nc :] = cands[:nc, 1]
    pts = np.sort(pts)
    bps = np.empty(pts.size + 1)
    nb = 1
    bps[0] = pts[0]
    for x in pts[1:]:
        if x - bps[nb - 1] > eps:
            bps[nb] = x
            nb += 1
    if nb == 1:
        bps[1] = hi
        nb = 2
    out = np.empty((max(8, 2 * nb), 7))
    no = 0
    act = np.empty(nc, dtype=np.int64)
    lows = np.empty(nc)
    for b in range(nb - 1):
        x0 = bps[b]
        x1 = bps[b + 1]
        na = 0
        for i in range(nc):
            if cands[i, 0] <= x0 + eps and cands[i, 1] >= x1 - eps:
                act[na] = i
                na += 1
        if na == 0:
            raise RuntimeError("lower envelope has a coverage gap")
        if na > 1:
            # drop candidates whose minimum on [x0, x1] exceeds the best maximum
            ub = np.inf
            for i in range(na):
                c = cands[act[i]]
                v0 = _qv(c, x0)
                v1 = _qv(c, x1)
                hv = max(v0, v1)
                lv = min(v0, v1)
                if c[2] != 0.0:
                    tv = -c[3] / (2.0 * c[2])
                    if x0 < tv < x1:
                        if c[2] > 0.0:
                            lv = min(lv, _qv(c, tv))
                        else:
                            hv = max(hv, _qv(c, tv))
                if hv < ub:
                    ub = hv
                lows[i] = lv
            tol = 1e-12 * (abs(ub) + 1.0)
            k = 0
            for i in range(na):
                if lows[i] <= ub + tol:
                    act[k] = act[i]
                    k += 1
            na = k
        t = x0
        while True:
            cur = _lowest_right_of(cands, act, na, t)
            t_next = x1
            for _ in range(na + 1):
                cc = cands[cur]
                for i in range(na):
                    c = cands[act[i]]
                    if act[i] == cur:
                        continue
                    qa = c[2] - cc[2]
                    qb = c[3] - cc[3]
                    qc = c[4] - cc[4]
                    r0, r1, nr = _roots_in(qa, qb, qc, t, t_next, eps)
                    for k in range(nr):
                        rt = r0 if k == 0 else r1
                        nxt = r1 if k + 1 < nr else t_next
                        mid = 0.5 * (rt + nxt)
                        if (qa * mid + qb) * mid + qc < -1e-13 * (abs(_qv(cc, mid)) + 1.0):
                            t_next = rt
                            break
                # tangencies at t can hide a crossing from the root search
                mid = 0.5 * (t + t_next)
                vcur = _qv(cc, mid)
                low = cur
                vlow = vcur
                for i in range(na):
                    v = _qv(cands[act[i]], mid)
                    if v < vlow:
                        vlow = v
                        low = act[i]
                if low == cur or vlow >= vcur - 1e-12 * (abs(vcur) + 1.0):
                    break
                cur = low
                t_next = x1
            cc = cands[cur]
            if no > 0 and out[no - 1, 2] == cc[2] and out[no - 1, 3] == cc[3] and out[no - 1, 4] == cc[4] \
                    and out[no - 1, 5] == cc[5] and out[no - 1, 6] == cc[6]:
                out[no - 1, 1] = t_next
            else:
                out = _grow(out, no)
                out[no, 0] = t
                out[no, 1] = t_next
                out[no, 2:] = cc[2:]
                no += 1
            if t_next >= x1 - eps:
                out[no - 1, 1] = x1
                break
            t = t_next
    return out, no


@njit(cache=True)
def _exact_chain(r, a, lam, gamma):
    """Exact minimizer of the monotone chain problem on sorted targets."""
    m = r.size
    lo = r[0]
    hi = r[m - 1]
    eps = 1e-12 * max(hi - lo, 1e-300)
    F = np.empty((8, 5))
    F[0, 0] = lo
    F[0, 1] = hi
    F[0, 2] = a[0]
    F[0, 3] = -2.0 * a[0] * r[0]
    F[0, 4] = a[0] * r[0] * r[0]
    nF = 1
    hist = np.empty((64, 7))
    nh = 0
    offsets = np.zeros(m, dtype=np.int64)
    for k in range(1, m):
        cands, nc = _candidates(F, nF, lo, hi, lam, gamma, eps)
        G, nG = _lower_envelope(cands, nc, lo, hi, eps)
        while nh + nG > hist.shape[0]:
            hist = _grow(hist, hist.shape[0])
        hist[nh : nh + nG] = G[:nG]
        offsets[k - 1] = nh
        nh += nG
        offsets[k] = nh
        F = np.empty((nG, 5))
        nF = 0
        ak = a[k]
        rk = r[k]
        for i in range(nG):
            A = G[i, 2] + ak
            B = G[i, 3] - 2.0 * ak * rk
            C = G[i, 4] + ak * rk * rk
            if nF > 0 and F[nF - 1, 2] == A and F[nF - 1, 3] == B and F[nF - 1, 4] == C:
                F[nF - 1, 1] = G[i, 1]
            else:
                F[nF, 0] = G[i, 0]
                F[nF, 1] = G[i, 1]
                F[nF, 2] = A
                F[nF, 3] = B
                F[nF, 4] = C
                nF += 1
    best_t = lo
    best_v = np.inf
    for i in range(nF):
        A = F[i, 2]
        B = F[i, 3]
        C = F[i, 4]
        for j in range(3):
            if j == 0:
                t = F[i, 0]
            elif j == 1:
                t = F[i, 1]
            else:
                if A <= 0.0:
                    continue
                t = -B / (2.0 * A)
                if not F[i, 0] < t < F[i, 1]:
                    continue
            v = (A * t + B) * t + C
            if v < best_v:
                best_v = v
                best_t = t
    th = np.empty(m)
    th[m - 1] = best_t
    for k in range(m - 1, 0, -1):
        t = th[k]
        start = offsets[k - 1]
        stop = offsets[k]
        bi = -1
        bv = np.inf
        for i in range(start, stop):
            if hist[i, 0] - eps <= t <= hist[i, 1] + eps:
                v = _qv(hist[i], t)
                if v < bv:
                    bv = v
                    bi = i
        if hist[bi, 5] == 0.0 and hist[bi, 6] == 1.0:
            s = t
        else:
            s = hist[bi, 5] + hist[bi, 6] * t
        th[k - 1] = min(max(s, lo), t)
    return th


@njit(cache=True)
def _polish(th, r, a, lam, gamma):
    """Re-solve the cluster values exactly for the segmentation of ``th``."""
    m = th.size
    scale = max(r[m - 1] - r[0], 1.0)
    starts = np.empty(m, dtype=np.int64)
    M = 0
    for k in range(m):
        if k == 0 or th[k] - th[k - 1] > 1e-9 * scale:
            starts[M] = k
            M += 1
    Acl = np.zeros(M)
    Tcl = np.zeros(M)
    c_old = np.zeros(M)
    for g in range(M):
        stop = starts[g + 1] if g + 1 < M else m
        for k in range(starts[g], stop):
            Acl[g] += a[k]
            Tcl[g] += a[k] * r[k]
            c_old[g] += th[k]
        c_old[g] /= stop - starts[g]
    w = gamma * lam
    H = np.zeros((M, M))
    h = np.empty(M)
    for g in range(M):
        H[g, g] = 2.0 * Acl[g]
        h[g] = 2.0 * Tcl[g]
    for g in range(M - 1):
        if c_old[g + 1] - c_old[g] < w:
            H[g, g] -= 1.0 / gamma
            H[g + 1, g + 1] -= 1.0 / gamma
            H[g, g + 1] += 1.0 / gamma
            H[g + 1, g] += 1.0 / gamma
            h[g] += lam
            h[g + 1] -= lam
    # singular or indefinite systems fall back to the unpolished chain
    for g in range(M):
        if not H[g, g] > 0.0:
            return th
    if abs(np.linalg.det(H)) < 1e-300:
        return th
    c = np.linalg.solve(H, h)
    for g in range(M):
        if not np.isfinite(c[g]):
            return th
    for g in range(M - 1):
        d = c[g + 1] - c[g]
        if d <= 0.0 or (d < w) != (c_old[g + 1] - c_old[g] < w):
            return th
    out = np.empty(m)
    for g in range(M):
        stop = starts[g + 1] if g + 1 < M else m
        for k in range(starts[g], stop):
            out[k] = c[g]
    if _chain_objective(out, r, a, lam, gamma) <= _chain_objective(th, r, a, lam, gamma) + 1e-15:
        return out
    return th


METHODS = ("unpenalized", "constant", "fused", "saturated", "dp")


@njit(cache=True)
def _solve_sorted(r, a, lam, gamma):
    """Minimizer of the chain problem on ascending targets, plus a path code."""
    m = r.size
    if lam == 0.0:
        return r.copy(), 0
    if r[0] == r[m - 1]:
        return np.full(m, r[0]), 1
    A = 0.0
    T = 0.0
    Q = 0.0
    for k in range(m):
        A += a[k]
        T += a[k] * r[k]
        Q += a[k] * r[k] * r[k]
    fused = np.full(m, T / A)
    if _fused_gap(r, a, lam, gamma) >= -1e-15 * (Q + 1.0):
        return fused, 2

    _, arg = _segment_dp(r, a, lam, gamma, False)
    th_sat = _theta_from_arg(r, a, arg)
    obj_sat = _chain_objective(th_sat, r, a, lam, gamma)
    v_low, _ = _segment_dp(r, a, lam, gamma, True)
    if obj_sat <= v_low + 1e-13 * (abs(v_low) + 1.0):
        return th_sat, 3

    th = _polish(_exact_chain(r, a, lam, gamma), r, a, lam, gamma)
    best = th
    bv = _chain_objective(th, r, a, lam, gamma)
    if obj_sat < bv:
        best = th_sat
        bv = obj_sat
    if _chain_objective(fused, r, a, lam, gamma) < bv:
        best = fused
    return best, 4


@njit(cache=True)
def _solve_block_nb(w, targets, n_total, lam, gamma):
    """Unvalidated block solve on plain arrays; zero-weight levels get 0."""
    K = w.size
    m = 0
    for k in range(K):
        if w[k] > 0.0:
            m += 1
    idx = np.empty(m, dtype=np.int64)
    i = 0
    for k in range(K):
        if w[k] > 0.0:
            idx[i] = k
            i += 1
    order = idx[np.argsort(targets[idx], kind="mergesort")]
    r = targets[order]
    a = w[order] / (2.0 * n_total)
    th, code = _solve_sorted(r, a, lam, gamma)
    theta = np.zeros(K)
    for i in range(m):
        theta[order[i]] = th[i]
    return theta, code


def _solve_arrays(w: np.ndarray, targets: np.ndarray, n_total: float, lam: float, gamma: float) -> tuple:
    theta, code = _solve_block_nb(
        np.asarray(w, dtype=np.float64), np.asarray(targets, dtype=np.float64), float(n_total), float(lam), float(gamma)
    )
    return theta, METHODS[code]


def solve_fused_block(problem: BlockProblem) -> BlockSolution:
    """Global minimizer of the block objective.

    Raises
    ------
    ValueError
        If every weight is zero.
    """
    if not np.any(problem.weights > 0):
        raise ValueError("block has no observed levels (all weights are zero)")
    theta, method = _solve_arrays(problem.weights, problem.targets, problem.n_total, problem.lam, problem.gamma)
    return _finish(problem, theta, method)


# ---------------------------------------------------------------------------
# brute-force verification oracle


def _oracle_cluster_values(A, T, lam, gamma, lo, hi, grid_size):
    """Best cluster values for one contiguous partition.

    Candidates are the stationary points for every saturation pattern of the
    gaps, and a coordinate search (dense grid, then zoomed grids)
    started from the cluster means.
    """
    M = A.size

    def f(c):
        return float(np.dot(A, c * c) - 2.0 * np.dot(T, c) + _mcp(np.diff(np.sort(c)), lam, gamma).sum())

    cands = [T / A]
    for pattern in itertools.product((False, True), repeat=M - 1):
        H = np.diag(2.0 * A)
        h = 2.0 * T.copy()
        for g, sat in enumerate(pattern):
            if sat:
                continue
            H[g, g] -= 1.0 / gamma
            H[g + 1, g + 1] -= 1.0 / gamma
            H[g, g + 1] += 1.0 / gamma
            H[g + 1, g] += 1.0 / gamma
            h[g] += lam
            h[g + 1] -= lam
        c, *_ = np.linalg.lstsq(H, h, rcond=None)
        if np.all(np.isfinite(c)):
            cands.append(c)

    def coord_values(c, i, xs):
        trial = np.repeat(c[None, :], xs.size, axis=0)
        trial[:, i] = xs
        s = np.sort(trial, axis=1)
        return (trial * trial) @ A - 2.0 * trial @ T + _mcp(np.diff(s, axis=1), lam, gamma).sum(axis=1)

    c = (T / A).copy()
    grid = np.linspace(lo, hi, grid_size)
    step0 = grid[1] - grid[0] if grid_size > 1 else 0.0
    for _ in range(30):
        before = f(c)
        for i in range(M):
            vals = coord_values(c, i, grid)
            x, step = grid[int(np.argmin(vals))], step0
            for _ in range(6):
                xs = np.linspace(x - step, x + step, 41)
                x = xs[int(np.argmin(coord_values(c, i, xs)))]
                step /= 20.0
            cand = c.copy()
            cand[i] = x
            if f(cand) < f(c):
                c = cand
        if before - f(c) <= 1e-15:
            break
    cands.append(c)
    vals = [f(x) for x in cands]
    k = int(np.argmin(vals))
    return cands[k], vals[k]


def brute_force_block_oracle(problem: BlockProblem, grid_size: int = 2001) -> BlockSolution:
    """Exhaustive minimizer for small blocks (``K <= 8``).

    Enumerates every contiguous partition of the observed levels sorted by
    target and optimizes the group values of each partition independently of
    :func:`solve_fused_block`.
    """
    K = problem.size
    if K > ORACLE_MAX_LEVELS:
        raise ValueError(f"oracle is limited to K <= {ORACLE_MAX_LEVELS}, got {K}")
    w = problem.weights
    pos = w > 0
    if not np.any(pos):
        raise ValueError("block has no observed levels (all weights are zero)")
    idx = np.flatnonzero(pos)
    theta = np.zeros(K)
    if problem.lam == 0.0:
        theta[idx] = problem.targets[idx]
        return _finish(problem, theta, "oracle")
    order = idx[np.argsort(problem.targets[idx], kind="stable")]
    r = problem.targets[order]
    a = w[order] / (2.0 * problem.n_total)
    m = r.size
    lo, hi = float(r.min()), float(r.max())
    best_val, best_th = math.inf, None
    for mask in range(1 << (m - 1)):
        cuts = [0] + [g + 1 for g in range(m - 1) if mask >> g & 1] + [m]
        A = np.array([a[i:j].sum() for i, j in zip(cuts[:-1], cuts[1:])])
        T = np.array([np.dot(a[i:j], r[i:j]) for i, j in zip(cuts[:-1], cuts[1:])])
        c, _ = _oracle_cluster_values(A, T, problem.lam, problem.gamma, lo, hi, grid_size)
        th = np.repeat(c, np.diff(cuts))
        val = float(np.dot(a, (r - th) ** 2) + _mcp(np.diff(np.sort(th)), problem.lam, problem.gamma).sum())
        if val < best_val:
            best_val, best_th = val, th
    theta[order] = best_th
    return _finish(problem, theta, "oracle")
