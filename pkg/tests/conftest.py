import numpy as np
import pytest

from entroflow.measure import (
    DiscreteMeasure,
    Grid1D,
    MeasureFamily,
    PlanFamily,
    TransportPlan,
)


def rand_measure(seed, grid, floor=0.05):
    rng = np.random.default_rng(seed)
    w = rng.random(grid.n) + floor
    return DiscreteMeasure(grid, w / w.sum())


def bump_measure(grid, center, width, floor=1e-6):
    u = (grid.nodes - center) / width
    w = np.exp(-0.5 * u * u) + floor
    return DiscreteMeasure(grid, w / w.sum())


def translation_pair(seed, grid, cells, floor=0.2):
    """Measure supported clear of the edges plus its exact shift plan."""
    rng = np.random.default_rng(seed)
    w = rng.random(grid.n) + floor
    pad = abs(cells)
    if pad:
        if cells >= 0:
            w[grid.n - pad:] = 0.0
        else:
            w[:pad] = 0.0
    w = w / w.sum()
    mat = np.zeros((grid.n, grid.n))
    idx = np.nonzero(w)[0]
    mat[idx, idx + cells] = w[idx]
    return DiscreteMeasure(grid, w), TransportPlan(grid, grid, mat)


def translation_plans(grid, cells_list, seed0=1):
    measures, plans = [], []
    for j, cells in enumerate(cells_list):
        m, p = translation_pair(seed0 + j, grid, cells)
        measures.append(m)
        plans.append(p)
    return MeasureFamily(measures), PlanFamily(plans)


def lp_transport_cost(a, x, b, y):
    """Exhaustive small-LP oracle for the quadratic transport cost."""
    from scipy.optimize import linprog

    na, nb = len(a), len(b)
    c = ((x[:, None] - y[None, :]) ** 2).ravel()
    a_eq = []
    for i in range(na):
        row = np.zeros((na, nb))
        row[i, :] = 1.0
        a_eq.append(row.ravel())
    for j in range(nb):
        row = np.zeros((na, nb))
        row[:, j] = 1.0
        a_eq.append(row.ravel())
    b_eq = np.concatenate([a, b])
    res = linprog(c, A_eq=np.array(a_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


@pytest.fixture
def grid32():
    return Grid1D(0.0, 1.0, 32)


@pytest.fixture
def grid64():
    return Grid1D(0.0, 1.0, 64)
