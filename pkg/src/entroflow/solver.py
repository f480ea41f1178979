"""Multi-marginal Sinkhorn solver for the Schroedinger map S(mu).

The fixed point phi_i = -T-bar_i(phi, mu) is iterated with cyclic
(Gauss-Seidel) coordinate updates; the stopping rule is the gauge-minimized
sup norm of T(phi, mu), i.e. the defining equation itself measured in the
quotient space, not iterate movement.  Potentials remain defined on every
grid node even where marginal weights vanish.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import CostTensor
from .errors import ConvergenceError, EntroflowError
from .measure import MeasureFamily
from .potential import (
    PotentialFamily,
    TbarOperator,
    as_members,
    canonical_gauge,
    log_weights,
    quotient_ck_norm,
)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50_000


@dataclass(frozen=True, eq=False)
class SolveReport:
    """Solved potentials plus the standard convergence diagnostics."""

    potentials: PotentialFamily
    iterations: int
    final_residual: float
    primal_value: float
    dual_value: float
    marginal_error: float
    tol: float
    converged: bool
    residual_history: tuple

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "primal_value": self.primal_value,
            "dual_value": self.dual_value,
            "marginal_error": self.marginal_error,
            "tol": self.tol,
            "converged": self.converged,
            "gauge": self.potentials.gauge,
            "potentials": [[float(v) for v in m] for m in self.potentials.members],
        }


@dataclass(frozen=True, eq=False)
class Coupling:
    """N-dimensional transport plan gamma on the product grid."""

    grids: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("coupling has negative mass")
        total = float(np.sum(w))
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"coupling mass {total} is not 1 within 1e-10")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "grids", tuple(self.grids))

    def marginal(self, i: int) -> np.ndarray:
        axes = tuple(j for j in range(self.weights.ndim) if j != i)
        return self.weights.sum(axis=axes)

    def to_csv(self, path) -> None:
        if self.weights.ndim != 2:
            raise EntroflowError("CSV coupling dumps are supported for N = 2 only")
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "weight"])
            for a, b in np.argwhere(self.weights > 0):
                writer.writerow([int(a), int(b), repr(float(self.weights[a, b]))])


def solve(cost: CostTensor, mu: MeasureFamily, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER, phi0=None,
          op: TbarOperator | None = None) -> SolveReport:
    """Solve the Schroedinger system T(phi, mu) = 0 on the grid.

    Raises ConvergenceError (carrying the partial report) if max_iter sweeps
    do not reach the tolerance.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if op is None:
        op = TbarOperator(cost)
    n = op.n
    if len(mu) != n:
        raise ValueError(f"cost has {n} marginals, family has {len(mu)}")
    logw = [log_weights(m) for m in mu]
    if phi0 is None:
        phi = [np.zeros(g.n) for g in cost.grids]
    else:
        phi = [np.array(m, dtype=float) for m in as_members(phi0)]

    b = [p + lw for p, lw in zip(phi, logw)]
    history = []
    iterations = 0
    residual = np.inf
    converged = False
    t_res = None
    for it in range(max_iter + 1):
        tbar = [op.tbar_component(i, b) for i in range(n)]
        t_res = [p + t for p, t in zip(phi, tbar)]
        residual = quotient_ck_norm(t_res, 0)
        history.append(residual)
        iterations = it
        if residual <= tol:
            converged = True
            break
        if it == max_iter:
            break
        for i in range(n):
            phi[i] = -op.tbar_component(i, b)
            b[i] = phi[i] + logw[i]

    # admissible gauge shifts leave T = phi + T-bar and the total plan mass
    # invariant, so the final diagnostics reuse the loop's last contraction
    potentials = canonical_gauge(phi, mu)
    z_terms = phi[0] + logw[0] + tbar[0]
    m0 = float(np.max(z_terms))
    mass = float(np.exp(m0) * np.sum(np.exp(z_terms - m0)))
    dual_value = sum(
        float(np.dot(m, w.weights)) for m, w in zip(potentials.members, mu)
    ) + 1.0 - mass

    # i-th marginal of gamma = mu_i * exp(T_i), so the primal value
    # int c dgamma + H(gamma|mu) = sum_i int phi_i dgamma_i needs no tensor
    marginal_error = 0.0
    primal_value = 0.0
    for m, w, t in zip(potentials.members, mu, t_res):
        gi = w.weights * np.exp(t)
        marginal_error = max(marginal_error, float(np.max(np.abs(gi - w.weights))))
        primal_value += float(np.dot(m, gi))

    report = SolveReport(
        potentials=potentials,
        iterations=iterations,
        final_residual=residual,
        primal_value=primal_value,
        dual_value=dual_value,
        marginal_error=marginal_error,
        tol=tol,
        converged=converged,
        residual_history=tuple(history),
    )
    if not converged:
        raise ConvergenceError(
            f"Sinkhorn did not reach residual {tol} in {max_iter} sweeps "
            f"(last residual {residual:.3e})",
            report=report,
        )
    return report


def primal_plan(report: SolveReport, mu: MeasureFamily, cost: CostTensor) -> Coupling:
    """Optimal coupling gamma = exp(sum_i phi_i - c) mu as a dense tensor."""
    n = cost.n_marginals
    log_gamma = -np.array(cost.values)
    for i in range(n):
        shape = [1] * n
        shape[i] = -1
        log_gamma = log_gamma + (report.potentials.members[i]
                                 + log_weights(mu[i])).reshape(shape)
    return Coupling(cost.grids, np.exp(log_gamma))


def eot_value_primal(coupling: Coupling, mu: MeasureFamily, cost: CostTensor) -> float:
    """int c dgamma + H(gamma | prod mu), with the 0 log 0 = 0 convention."""
    g = coupling.weights
    n = cost.n_marginals
    log_prod = np.zeros(g.shape)
    for i in range(n):
        shape = [1] * n
        shape[i] = -1
        log_prod = log_prod + log_weights(mu[i]).reshape(shape)
    pos = g > 0
    if np.any(np.isneginf(log_prod[pos])):
        raise ValueError("coupling puts mass where the product measure has none")
    transport = float(np.sum(g * cost.values))
    entropy = float(np.sum(g[pos] * (np.log(g[pos]) - log_prod[pos])))
    return transport + entropy


def eot_value_dual(phi, mu: MeasureFamily, cost: CostTensor,
                   op: TbarOperator | None = None) -> float:
    """Dual objective sum_i int phi_i dmu_i + 1 - int exp(sum phi - c) dmu.

    A valid lower bound on the primal value at any feasible plan, for any
    (not necessarily optimal) potentials.
    """
    members = as_members(phi)
    if op is None:
        op = TbarOperator(cost)
    b = [m + log_weights(w) for m, w in zip(members, mu)]
    tbar0 = op.tbar_component(0, b)
    z_terms = b[0] + tbar0
    m0 = float(np.max(z_terms))
    mass = float(np.exp(m0) * np.sum(np.exp(z_terms - m0))) if np.isfinite(m0) else 0.0
    return sum(float(np.dot(m, w.weights)) for m, w in zip(members, mu)) + 1.0 - mass


def potential_lipschitz_check(report: SolveReport, cost: CostTensor,
                              slack: float | None = None):
    """Check max |finite-difference slope of phi_i| <= L_i + O(spacing).

    L_i = sup |d c / d x_i| comes from the cost's gradient bounds.  Returns
    the per-marginal max slopes; raises if any exceeds its bound plus slack.
    """
    slopes = []
    for i, (g, m) in enumerate(zip(cost.grids, report.potentials.members)):
        slope = float(np.max(np.abs(np.diff(m) / g.spacing)))
        s = slack
        if s is None:
            s = g.spacing * max(1.0, cost.deriv_bounds[min(2, cost.k_max)])
        if slope > cost.grad_bounds[i] + s:
            raise EntroflowError(
                f"potential {i} slope {slope} exceeds Lipschitz bound "
                f"{cost.grad_bounds[i]} + slack {s}"
            )
        slopes.append(slope)
    return slopes
