import numpy as np
import pytest

from entroflow.cost import build_cost
from entroflow.errors import ConvergenceError, EntroflowError
from entroflow.measure import DiscreteMeasure, Grid1D, MeasureFamily
from entroflow.potential import quotient_ck_norm
from entroflow.solver import (
    eot_value_dual,
    eot_value_primal,
    potential_lipschitz_check,
    primal_plan,
    solve,
)

from conftest import bump_measure, rand_measure


def test_zero_cost_solution(grid32):
    mu = MeasureFamily([rand_measure(0, grid32), rand_measure(1, grid32)])
    c = build_cost({"kind": "zero"}, [grid32, grid32])
    rep = solve(c, mu)
    assert rep.final_residual <= 1e-10
    assert quotient_ck_norm(rep.potentials.members, 0) < 1e-12
    assert rep.dual_value == pytest.approx(0.0, abs=1e-12)
    gamma = primal_plan(rep, mu, c)
    prod = mu[0].weights[:, None] * mu[1].weights[None, :]
    assert np.max(np.abs(gamma.weights - prod)) < 1e-12


def test_separable_closed_form(grid32):
    c = build_cost({"kind": "separable", "terms": [
        {"fn": "poly", "coeffs": [0.0, 1.0]},
        {"fn": "cos", "amplitude": 0.5, "freq": 3.0, "phase": 0.1},
    ]}, [grid32, grid32])
    mu = MeasureFamily([rand_measure(2, grid32), rand_measure(3, grid32)])
    rep = solve(c, mu)
    expect = float(np.dot(grid32.nodes, mu[0].weights)
                   + np.dot(0.5 * np.cos(3.0 * grid32.nodes + 0.1), mu[1].weights))
    assert rep.dual_value == pytest.approx(expect, abs=1e-10)
    assert rep.primal_value == pytest.approx(expect, abs=1e-10)
    gamma = primal_plan(rep, mu, c)
    prod = mu[0].weights[:, None] * mu[1].weights[None, :]
    assert np.max(np.abs(gamma.weights - prod)) < 1e-10
    # potentials match (f, g) up to an admissible constant
    f = grid32.nodes
    g = 0.5 * np.cos(3.0 * grid32.nodes + 0.1)
    diff = [rep.potentials.members[0] - f, rep.potentials.members[1] - g]
    assert quotient_ck_norm(diff, 0) < 1e-10


def dual_oracle_2x2(cvals, w1, w2):
    """Direct maximization of the dual over the four potential values."""
    from scipy.optimize import minimize

    def neg_dual(u):
        phi1, phi2 = u[:2], u[2:]
        mass = float(np.sum(
            w1[:, None] * w2[None, :]
            * np.exp(phi1[:, None] + phi2[None, :] - cvals)
        ))
        return -(float(np.dot(phi1, w1)) + float(np.dot(phi2, w2)) + 1.0 - mass)

    best = None
    for start in (np.zeros(4), np.array([0.3, -0.2, 0.1, 0.4])):
        res = minimize(neg_dual, start, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 2000})
        if best is None or res.fun < best:
            best = res.fun
    return -best


def test_2x2_dual_oracle():
    g = Grid1D(0.0, 1.0, 2)
    mu = MeasureFamily([DiscreteMeasure(g, np.array([0.5, 0.5])),
                        DiscreteMeasure(g, np.array([0.5, 0.5]))])
    cvals = np.array([[0.0, 1.0], [1.0, 0.0]])
    c = build_cost({"kind": "tabulated", "values": cvals}, [g, g])
    rep = solve(c, mu, tol=1e-12)
    oracle = dual_oracle_2x2(cvals, mu[0].weights, mu[1].weights)
    assert rep.dual_value == pytest.approx(oracle, abs=1e-8)


def test_gauge_determinism(grid32):
    mu = MeasureFamily([rand_measure(4, grid32), rand_measure(5, grid32)])
    c = build_cost({"kind": "quadratic", "a": 1.0}, [grid32, grid32])
    tol = 1e-11
    rep0 = solve(c, mu, tol=tol)
    rng = np.random.default_rng(11)
    rep1 = solve(c, mu, tol=tol, phi0=[rng.normal(size=32), rng.normal(size=32)])
    for a, b in zip(rep0.potentials.members, rep1.potentials.members):
        assert np.max(np.abs(a - b)) <= 10 * tol


def test_nonconvergence_raises_with_report(grid32):
    mu = MeasureFamily([rand_measure(6, grid32), rand_measure(7, grid32)])
    c = build_cost({"kind": "quadratic", "a": 2.0}, [grid32, grid32])
    with pytest.raises(ConvergenceError) as err:
        solve(c, mu, tol=1e-12, max_iter=1)
    report = err.value.report
    assert not report.converged
    assert report.final_residual > 1e-12
    assert len(report.residual_history) == 2


def test_three_marginal_solve():
    g = Grid1D(0.0, 1.0, 12)
    mu = MeasureFamily([rand_measure(s, g) for s in (8, 9, 10)])
    c = build_cost({"kind": "quadratic", "a": 0.5}, [g, g, g])
    rep = solve(c, mu)
    assert rep.final_residual <= 1e-10
    assert abs(rep.primal_value - rep.dual_value) <= 1e-8
    gamma = primal_plan(rep, mu, c)
    for i in range(3):
        assert np.max(np.abs(gamma.marginal(i) - mu[i].weights)) <= 10 * rep.tol
    assert rep.dual_value == pytest.approx(eot_value_primal(gamma, mu, c), abs=1e-9)


def test_weak_duality(grid32):
    mu = MeasureFamily([rand_measure(12, grid32), rand_measure(13, grid32)])
    c = build_cost({"kind": "gaussian", "amplitude": 0.9,
                    "centers": [0.5, 0.5], "widths": [0.3, 0.2]},
                   [grid32, grid32])
    rep = solve(c, mu)
    gamma = primal_plan(rep, mu, c)
    primal = eot_value_primal(gamma, mu, c)
    rng = np.random.default_rng(14)
    for _ in range(5):
        phi = [rng.normal(size=32) * 0.5, rng.normal(size=32) * 0.5]
        assert eot_value_dual(phi, mu, c) <= primal + 1e-9


def test_marginal_error_definition(grid32):
    mu = MeasureFamily([rand_measure(15, grid32), rand_measure(16, grid32)])
    c = build_cost({"kind": "quadratic", "a": 1.0}, [grid32, grid32])
    rep = solve(c, mu)
    gamma = primal_plan(rep, mu, c)
    direct = max(
        float(np.max(np.abs(gamma.marginal(i) - mu[i].weights)))
        for i in range(2)
    )
    assert rep.marginal_error == pytest.approx(direct, rel=1e-6, abs=1e-15)
    assert rep.marginal_error <= 10 * rep.tol


def test_lipschitz_check(grid32):
    mu = MeasureFamily([rand_measure(17, grid32), rand_measure(18, grid32)])
    c0 = build_cost({"kind": "zero"}, [grid32, grid32])
    rep0 = solve(c0, mu)
    assert max(potential_lipschitz_check(rep0, c0)) < 1e-10
    cq = build_cost({"kind": "quadratic", "a": 1.0}, [grid32, grid32])
    rep = solve(cq, mu)
    slopes = potential_lipschitz_check(rep, cq)
    assert max(slopes) <= 2.0 + grid32.spacing * 2.0
    cs = build_cost({"kind": "separable", "terms": [
        {"fn": "poly", "coeffs": [0.0, 1.5]}, {"fn": "zero"},
    ]}, [grid32, grid32])
    reps = solve(cs, mu)
    slopes = potential_lipschitz_check(reps, cs)
    assert slopes[0] == pytest.approx(1.5, abs=1e-9)


def test_lipschitz_check_raises_on_bad_bound(grid32):
    mu = MeasureFamily([rand_measure(19, grid32), rand_measure(20, grid32)])
    cq = build_cost({"kind": "quadratic", "a": 1.0}, [grid32, grid32])
    rep = solve(cq, mu)
    shrunk = build_cost({"kind": "quadratic", "a": 0.01}, [grid32, grid32])
    with pytest.raises(EntroflowError):
        potential_lipschitz_check(rep, shrunk, slack=1e-6)


def test_boundedness_sweep(grid32):
    # ||S(mu)||_{C~1} stays under 2 (||c||_C1 + log |X|) across random marginals
    cq = build_cost({"kind": "quadratic", "a": 0.5}, [grid32, grid32])
    bound = 2.0 * (cq.deriv_bounds[1] + np.log(cq.domain_volume()))
    for seed in range(8):
        mu = MeasureFamily([rand_measure(seed, grid32),
                            rand_measure(seed + 100, grid32)])
        rep = solve(cq, mu)
        norm = quotient_ck_norm(rep.potentials, 1)
        assert norm <= bound, (norm, bound)


def test_zero_mass_cells_keep_potentials_finite(grid32):
    w = np.array(rand_measure(21, grid32).weights)
    w[:5] = 0.0
    w /= w.sum()
    mu = MeasureFamily([DiscreteMeasure(grid32, w), bump_measure(grid32, 0.6, 0.1)])
    c = build_cost({"kind": "quadratic", "a": 1.0}, [grid32, grid32])
    rep = solve(c, mu)
    for m in rep.potentials.members:
        assert np.all(np.isfinite(m))
    assert rep.final_residual <= 1e-10


def test_residual_history_recorded(grid32):
    mu = MeasureFamily([rand_measure(22, grid32), rand_measure(23, grid32)])
    c = build_cost({"kind": "quadratic", "a": 1.5}, [grid32, grid32])
    rep = solve(c, mu)
    assert len(rep.residual_history) == rep.iterations + 1
    assert rep.residual_history[-1] <= 1e-10


def test_coupling_csv(tmp_path, grid32):
    mu = MeasureFamily([rand_measure(24, grid32), rand_measure(25, grid32)])
    c = build_cost({"kind": "quadratic", "a": 1.0}, [grid32, grid32])
    rep = solve(c, mu)
    gamma = primal_plan(rep, mu, c)
    gamma.to_csv(tmp_path / "coupling.csv")
    assert (tmp_path / "coupling.csv").stat().st_size > 0
