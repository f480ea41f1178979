import numpy as np
import pytest

from entroflow.errors import DomainMismatchError
from entroflow.measure import (
    DiscreteMeasure,
    Grid1D,
    MeasureFamily,
    PlanFamily,
    TransportPlan,
    displacement_interpolant,
    displacement_path,
    optimal_plan_1d,
    plan_cost,
    product_wasserstein,
    pushforward,
    wasserstein2_1d,
)

from conftest import lp_transport_cost, rand_measure


def dirac(grid, j):
    w = np.zeros(grid.n)
    w[j] = 1.0
    return DiscreteMeasure(grid, w)


def test_grid_nodes():
    g = Grid1D(-1.0, 3.0, 8)
    assert g.spacing == 0.5
    assert np.allclose(g.nodes, -1.0 + (np.arange(8) + 0.5) * 0.5)
    assert np.all(np.diff(g.nodes) > 0)
    with pytest.raises(ValueError):
        Grid1D(1.0, 0.0, 4)
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 1)


def test_measure_validation(grid32):
    with pytest.raises(ValueError):
        DiscreteMeasure(grid32, -np.ones(32) / 32)
    with pytest.raises(ValueError):
        DiscreteMeasure(grid32, np.ones(32))
    m = rand_measure(0, grid32)
    assert not m.weights.flags.writeable


def test_family_needs_two(grid32):
    with pytest.raises(ValueError):
        MeasureFamily([rand_measure(0, grid32)])


def test_w2_dirac_to_dirac(grid32):
    a, b = 3, 20
    d = wasserstein2_1d(dirac(grid32, a), dirac(grid32, b))
    assert d == abs(grid32.nodes[a] - grid32.nodes[b])


def test_w2_identical_is_zero(grid32):
    m = rand_measure(1, grid32)
    assert wasserstein2_1d(m, m) == 0.0


def test_w2_against_lp_oracle():
    # two-atom pair from a shared embedding grid, plus random pairs
    g = Grid1D(0.0, 4.0, 8)
    mu = DiscreteMeasure(g, np.array([0.5, 0.5, 0, 0, 0, 0, 0, 0.0]))
    nu = DiscreteMeasure(g, np.array([0.5, 0, 0, 0, 0.5, 0, 0, 0.0]))
    lp = lp_transport_cost(mu.weights, g.nodes, nu.weights, g.nodes)
    assert wasserstein2_1d(mu, nu) ** 2 == pytest.approx(lp, abs=1e-12)
    for seed in range(4):
        a = rand_measure(seed, g)
        b = rand_measure(seed + 50, g)
        lp = lp_transport_cost(a.weights, g.nodes, b.weights, g.nodes)
        assert wasserstein2_1d(a, b) ** 2 == pytest.approx(lp, abs=1e-9)


def test_w2_domain_mismatch(grid32):
    other = Grid1D(0.0, 2.0, 32)
    with pytest.raises(DomainMismatchError):
        wasserstein2_1d(rand_measure(0, grid32), rand_measure(1, other))


def test_w2_symmetry_and_triangle(grid32):
    for seed in range(5):
        a = rand_measure(seed, grid32)
        b = rand_measure(seed + 10, grid32)
        c = rand_measure(seed + 20, grid32)
        dab = wasserstein2_1d(a, b)
        assert dab == wasserstein2_1d(b, a)
        assert dab <= wasserstein2_1d(a, c) + wasserstein2_1d(c, b) + 1e-10


def test_product_wasserstein(grid32):
    a = MeasureFamily([rand_measure(0, grid32), rand_measure(1, grid32)])
    assert product_wasserstein(a, a) == 0.0
    # components 3 and 4 aggregate to 5: dirac pairs on a binary-exact grid
    g = Grid1D(0.0, 16.0, 16)
    fam1 = MeasureFamily([dirac(g, 0), dirac(g, 0)])
    fam2 = MeasureFamily([dirac(g, 3), dirac(g, 4)])
    w1 = wasserstein2_1d(fam1[0], fam2[0])
    w2 = wasserstein2_1d(fam1[1], fam2[1])
    assert w1 == 3.0 and w2 == 4.0
    assert product_wasserstein(fam1, fam2) == pytest.approx(5.0, abs=1e-14)
    # recomposition on random pairs
    b = MeasureFamily([rand_measure(7, grid32), rand_measure(8, grid32)])
    expect = np.sqrt(sum(wasserstein2_1d(x, y) ** 2 for x, y in zip(a, b)))
    assert product_wasserstein(a, b) == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError):
        product_wasserstein(a, MeasureFamily([a[0], a[0], a[0]]))


def test_optimal_plan(grid32):
    m = rand_measure(3, grid32)
    diag = optimal_plan_1d(m, m)
    assert np.allclose(np.diag(m.weights), diag.weights)
    p = optimal_plan_1d(dirac(grid32, 2), dirac(grid32, 9))
    assert np.count_nonzero(p.weights) == 1
    # 4-atom random pair against the exhaustive LP
    g = Grid1D(0.0, 1.0, 4)
    a = rand_measure(5, g)
    b = rand_measure(6, g)
    plan = optimal_plan_1d(a, b)
    assert plan.feasible_for(a, b)
    assert plan.cost() == pytest.approx(
        lp_transport_cost(a.weights, g.nodes, b.weights, g.nodes), abs=1e-10
    )


def test_plan_cost_equals_w2_squared(grid32):
    for seed in range(5):
        a = rand_measure(seed, grid32)
        b = rand_measure(seed + 30, grid32)
        plans = PlanFamily([optimal_plan_1d(a, b), optimal_plan_1d(b, a)])
        w = wasserstein2_1d(a, b)
        assert plan_cost(plans) == pytest.approx(2 * w * w, abs=1e-10)


def test_plan_cost_half_mass(grid32):
    # half the mass moves distance 2, half stays: cost = 0.5 * 4 = 2
    g = Grid1D(0.0, 4.0, 4)
    w = np.zeros((4, 4))
    w[0, 2] = 0.5
    w[1, 1] = 0.5
    plan = TransportPlan(g, g, w)
    assert plan.cost() == pytest.approx(2.0)


def test_displacement_endpoints_bitwise(grid32):
    a = rand_measure(11, grid32)
    b = rand_measure(12, grid32)
    plan = optimal_plan_1d(a, b)
    fam = PlanFamily([plan, plan])
    at0 = displacement_path(fam, 0.0)
    at1 = displacement_path(fam, 1.0)
    assert np.array_equal(at0[0].weights, plan.source_marginal().weights)
    assert np.array_equal(at1[0].weights, plan.target_marginal().weights)


def test_displacement_identity_plan(grid32):
    m = rand_measure(13, grid32)
    ident = optimal_plan_1d(m, m)
    for t in (0.25, 0.5, 0.9):
        out = displacement_interpolant(ident, t)
        assert np.max(np.abs(out.weights - m.weights)) < 1e-14


def test_displacement_mass_and_moment(grid32):
    a = rand_measure(14, grid32)
    b = rand_measure(15, grid32)
    plan = optimal_plan_1d(a, b)
    for t in (0.3, 0.62):
        out = displacement_interpolant(plan, t)
        assert abs(out.weights.sum() - 1.0) < 1e-12
        sidx, tidx = np.nonzero(plan.weights)
        expect = float(np.sum(plan.weights[sidx, tidx] * (
            grid32.nodes[sidx] + t * (grid32.nodes[tidx] - grid32.nodes[sidx])
        )))
        assert out.mean() == pytest.approx(expect, abs=1e-12)


def test_displacement_bad_t(grid32):
    m = rand_measure(16, grid32)
    plan = optimal_plan_1d(m, m)
    with pytest.raises(ValueError):
        displacement_interpolant(plan, 1.5)


def test_pushforward(grid32):
    m = rand_measure(17, grid32)
    out = pushforward(m, grid32.nodes)
    assert np.max(np.abs(out.weights - m.weights)) < 1e-14
    const = pushforward(m, np.full(32, grid32.nodes[5]))
    expect = np.zeros(32)
    expect[5] = 1.0
    assert np.max(np.abs(const.weights - expect)) < 1e-14
    # affine shift by exactly one cell, support away from the right edge
    w = np.array(m.weights)
    w[-1] = 0.0
    w /= w.sum()
    m2 = DiscreteMeasure(grid32, w)
    image = np.minimum(grid32.nodes + grid32.spacing, grid32.hi)
    shifted = pushforward(m2, image)
    assert np.max(np.abs(shifted.weights[1:] - m2.weights[:-1])) < 1e-13
    with pytest.raises(DomainMismatchError):
        pushforward(m, grid32.nodes + 10.0)


def test_plan_validation(grid32):
    w = np.full((32, 32), 1.0 / (32 * 32))
    plan = TransportPlan(grid32, grid32, w)
    assert plan.feasible_for(
        DiscreteMeasure(grid32, np.full(32, 1 / 32)),
        DiscreteMeasure(grid32, np.full(32, 1 / 32)),
    )
    with pytest.raises(ValueError):
        TransportPlan(grid32, grid32, 2 * w)
    with pytest.raises(DomainMismatchError):
        TransportPlan(grid32, Grid1D(0.0, 2.0, 32), w)


def test_serialization_roundtrip(tmp_path, grid32):
    m = rand_measure(18, grid32)
    csv_path = tmp_path / "m.csv"
    m.to_csv(csv_path)
    back = DiscreteMeasure.from_csv(csv_path)
    assert back.grid == m.grid
    assert np.allclose(back.weights, m.weights, atol=0, rtol=0)
    json_path = tmp_path / "m.json"
    m.to_json(json_path)
    back2 = DiscreteMeasure.from_json(json_path)
    assert back2.grid == m.grid
    assert np.array_equal(back2.weights, m.weights)
