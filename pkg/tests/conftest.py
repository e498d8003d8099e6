import numpy as np
import pytest

from catfuse.design import CategoricalDesign


def random_design(rng, n, n_levels, cover=True):
    """Uniform random design; with ``cover`` every level appears at least once."""
    cols = []
    for K in n_levels:
        col = rng.integers(1, K + 1, size=n)
        if cover:
            col[:K] = rng.permutation(np.arange(1, K + 1))
            rng.shuffle(col)
        cols.append(col)
    labels = [[f"L{k}" for k in range(K)] for K in n_levels]
    return CategoricalDesign(np.column_stack(cols), labels)


def dummy_matrix(design):
    return np.column_stack(
        [(design.codes(j) == k).astype(float) for j, K in enumerate(design.n_levels) for k in range(K)]
    )


def constrained_ls(design, y, groups=None):
    """Dense KKT solve of the centered least-squares problem.

    Minimizes ||y - mean(y) - D theta||^2 subject to the count-weighted
    sum-to-zero constraint per block, zero coefficients on empty levels, and
    equality within each group of ``groups`` (list per block of lists of
    level indices).  Written against the full dummy matrix so that it shares
    no code with the package.
    """
    D = dummy_matrix(design)
    r = np.asarray(y, float) - np.mean(y)
    m = D.shape[1]
    rows = []
    off = 0
    for j, K in enumerate(design.n_levels):
        c = design.level_counts[j]
        row = np.zeros(m)
        row[off : off + K] = c
        rows.append(row)
        for k in range(K):
            if c[k] == 0:
                e = np.zeros(m)
                e[off + k] = 1.0
                rows.append(e)
        if groups is not None:
            for g in groups[j]:
                g = list(g)
                for a, b in zip(g[:-1], g[1:]):
                    e = np.zeros(m)
                    e[off + a], e[off + b] = 1.0, -1.0
                    rows.append(e)
        off += K
    C = np.array(rows)
    kkt = np.block([[D.T @ D, C.T], [C, np.zeros((len(C), len(C)))]])
    rhs = np.concatenate([D.T @ r, np.zeros(len(C))])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    theta = sol[:m]
    out, off = [], 0
    for K in design.n_levels:
        out.append(theta[off : off + K])
        off += K
    return float(np.mean(y)), out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = []


def record_criterion(number, passed, detail):
    ACCEPTANCE.append((number, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
