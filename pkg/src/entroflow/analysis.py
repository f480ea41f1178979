"""Stability certification for the marginals-to-potentials map.

Covers Lipschitz-ratio measurement along displacement paths (in quotient C^k
and against negative Sobolev perturbation norms), the linearized operator
Id + L with its gauge-pinned solve, the time derivative of potentials via
the implicit-function identity, the energy derivative along paths, and
semiconvexity moduli.

Discretization conventions used throughout:

* gradients of grid functions are central differences (one-sided second
  order at the boundary) and are linearly interpolated at off-node points;
* the derivative of potentials along a probed path is taken with respect to
  the path actually being differentiated, i.e. the binned displacement
  measures, so rates match finite differences of the solves to the order of
  the time step rather than plateauing at the spatial resolution;
* the energy derivative uses the slope of the piecewise-linear interpolant
  of the potentials at the deposit positions, which differentiates the
  discrete energy exactly (the dual derivative of the solved value with
  respect to the marginal weights is the potential itself).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cost import CostTensor
from .errors import CapacityError, EntroflowError
from .measure import (
    Grid1D,
    MeasureFamily,
    PlanFamily,
    displacement_path,
    plan_cost,
    product_wasserstein,
    optimal_plan_1d,
)
from .potential import (
    TbarOperator,
    apply_Tbar,
    as_members,
    density_fields,
    quotient_ck_norm,
)
from .solver import solve

MAX_DENSE_NODES = 1024


# ---------------------------------------------------------------------------
# finite-difference helpers
# ---------------------------------------------------------------------------

def grad_central(values: np.ndarray, spacing: float) -> np.ndarray:
    return np.gradient(values, spacing, edge_order=2)


def interp_values(grid: Grid1D, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation at points inside the node range."""
    return np.interp(pts, grid.nodes, values)


def _cell_index(grid: Grid1D, pts: np.ndarray):
    u = (pts - grid.lo) / grid.spacing - 0.5
    j0 = np.clip(np.floor(u).astype(int), 0, grid.n - 2)
    theta = np.clip(u - j0, 0.0, 1.0)
    return j0, theta


def hat_slope(grid: Grid1D, values: np.ndarray, pts: np.ndarray,
              direction: np.ndarray | None = None) -> np.ndarray:
    """Slope of the linear interpolant of `values` at `pts`.

    At points sitting exactly on a node the slope is one-sided; `direction`
    selects the side (the side the point is about to move toward).
    """
    j0, theta = _cell_index(grid, pts)
    if direction is not None:
        on_node = (theta < 1e-12) & (direction < 0) & (j0 > 0)
        j0 = np.where(on_node, j0 - 1, j0)
    return (values[j0 + 1] - values[j0]) / grid.spacing


def _plan_entries(plan):
    a, b = np.nonzero(plan.weights)
    return (a, b, plan.weights[a, b],
            plan.source_grid.nodes[a], plan.target_grid.nodes[b])


# ---------------------------------------------------------------------------
# path probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathProbe:
    """Solved potentials and energies along a displacement path."""

    plans: PlanFamily
    t_samples: tuple
    potentials_at_t: tuple
    energies_at_t: tuple
    measures_at_t: tuple
    residuals: tuple
    plan_cost: float
    tol: float

    def index_of(self, t: float) -> int:
        for k, s in enumerate(self.t_samples):
            if abs(s - t) <= 1e-14:
                return k
        raise KeyError(f"t={t} is not one of the probed samples")


def probe_path(cost: CostTensor, plans: PlanFamily, t_samples, tol: float,
               out_grids=None, warm_start: bool = True,
               max_iter: int = 50_000) -> PathProbe:
    """Solve S(mu^t) along the displacement path, warm-starting in t."""
    t_samples = tuple(float(t) for t in t_samples)
    if any(t < 0 or t > 1 for t in t_samples):
        raise ValueError("samples must lie in [0, 1]")
    if sorted(t_samples) != list(t_samples):
        raise ValueError("samples must be sorted increasingly")
    op = TbarOperator(cost)
    phis, energies, measures, residuals = [], [], [], []
    warm = None
    for t in t_samples:
        fam = displacement_path(plans, t, out_grids)
        try:
            rep = solve(cost, fam, tol=tol, max_iter=max_iter, phi0=warm, op=op)
        except EntroflowError as exc:
            raise EntroflowError(f"solve failed at path sample t={t}: {exc}") from exc
        if warm_start:
            warm = rep.potentials
        phis.append(rep.potentials)
        energies.append(rep.dual_value)
        measures.append(fam)
        residuals.append(rep.final_residual)
    return PathProbe(
        plans=plans,
        t_samples=t_samples,
        potentials_at_t=tuple(phis),
        energies_at_t=tuple(energies),
        measures_at_t=tuple(measures),
        residuals=tuple(residuals),
        plan_cost=plan_cost(plans),
        tol=tol,
    )


def lipschitz_ratio_ck(probe: PathProbe, k: int, ceiling: float | None = None):
    """Ratios ||phi^t - phi^s||_{C~k} / (|t-s| sqrt(cost)) over sample pairs."""
    grids = probe.potentials_at_t[0].grids
    root_cost = math.sqrt(probe.plan_cost)
    pairs = []
    for a in range(len(probe.t_samples)):
        for b in range(a + 1, len(probe.t_samples)):
            s, t = probe.t_samples[a], probe.t_samples[b]
            diff = [pt - ps for pt, ps in zip(probe.potentials_at_t[b].members,
                                              probe.potentials_at_t[a].members)]
            num = quotient_ck_norm(diff, k, grids=grids)
            if root_cost == 0.0:
                if num > 100 * probe.tol:
                    raise EntroflowError(
                        "zero-cost path but potentials moved by "
                        f"{num:.3e} between t={s} and t={t}"
                    )
                pairs.append((s, t, 0.0))
            else:
                pairs.append((s, t, num / ((t - s) * root_cost)))
    ratios = np.array([r for _, _, r in pairs])
    stats = {
        "pairs": pairs,
        "max": float(np.max(ratios)),
        "median": float(np.median(ratios)),
    }
    if ceiling is not None and stats["max"] > ceiling:
        raise EntroflowError(
            f"Lipschitz ratio {stats['max']:.4g} exceeds the ceiling {ceiling}"
        )
    return stats


# ---------------------------------------------------------------------------
# negative Sobolev machinery
# ---------------------------------------------------------------------------

def _fd_matrix_first(n: int, h: float) -> np.ndarray:
    d = np.zeros((n, n))
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5 / h, 0.5 / h
    d[0, 0], d[0, 1], d[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    d[-1, -1], d[-1, -2], d[-1, -3] = 1.5 / h, -2.0 / h, 0.5 / h
    return d


def _fd_matrix_second(n: int, h: float) -> np.ndarray:
    d = np.zeros((n, n))
    h2 = h * h
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i], d[i, i + 1] = 1.0 / h2, -2.0 / h2, 1.0 / h2
    d[0, :4] = np.array([2.0, -5.0, 4.0, -1.0]) / h2
    d[-1, -4:] = np.array([-1.0, 4.0, -5.0, 2.0]) / h2
    return d


@dataclass(frozen=True, eq=False)
class SobolevGram:
    """Gram matrix of the discrete H^p inner product on one grid."""

    p: int
    grid: Grid1D
    gram: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=float)
        if np.max(np.abs(g - g.T)) > 1e-12:
            raise ValueError("Gram matrix must be symmetric")
        if np.linalg.eigvalsh(g)[0] <= 0:
            raise ValueError("Gram matrix must be positive definite")
        g = g.copy()
        g.flags.writeable = False
        object.__setattr__(self, "gram", g)

    def hp_norm(self, f: np.ndarray) -> float:
        return math.sqrt(float(f @ self.gram @ f))


def sobolev_gram(grid: Grid1D, p: int) -> SobolevGram:
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if grid.n < 2 * p + 2:
        raise ValueError(f"grid too coarse for H^{p} stencils")
    mats = [np.eye(grid.n), _fd_matrix_first(grid.n, grid.spacing)]
    if p == 2:
        mats.append(_fd_matrix_second(grid.n, grid.spacing))
    g = sum(grid.spacing * m.T @ m for m in mats)
    return SobolevGram(p, grid, 0.5 * (g + g.T))


def hneg_norm(signed_weights: np.ndarray, gram: SobolevGram) -> float:
    """Dual norm sup { f . rho : ||f||_{H^p} <= 1 } = sqrt(rho' G^-1 rho)."""
    rho = np.asarray(signed_weights, dtype=float)
    if rho.shape != (gram.grid.n,):
        raise ValueError("signed measure does not match the Gram grid")
    if abs(float(np.sum(rho))) > 1e-12:
        raise ValueError("input must be balanced (sum zero) within 1e-12")
    x = np.linalg.solve(gram.gram, rho)
    return math.sqrt(max(float(rho @ x), 0.0))


def lipschitz_ratio_sobolev(cost: CostTensor, mu: MeasureFamily, nu: MeasureFamily,
                            k: int, p: int, tol: float = 1e-10):
    """||S(mu) - S(nu)||_{C~k} / sum_i ||mu_i - nu_i||_{H^-p}."""
    if len(mu) != len(nu):
        raise ValueError("families must have the same size")
    for a, b in zip(mu, nu):
        if a.grid != b.grid:
            raise ValueError("marginal pairs must share grids")
    rep_mu = solve(cost, mu, tol=tol)
    rep_nu = solve(cost, nu, tol=tol)
    diff = [a - b for a, b in zip(rep_mu.potentials.members, rep_nu.potentials.members)]
    num = quotient_ck_norm(diff, k, grids=rep_mu.potentials.grids)
    den = 0.0
    for a, b in zip(mu, nu):
        den += hneg_norm(a.weights - b.weights, sobolev_gram(a.grid, p))
    if den < 1e-15:
        return {"ratio": 0.0, "numerator": num, "denominator": den}
    return {"ratio": num / den, "numerator": num, "denominator": den}


# ---------------------------------------------------------------------------
# linearized operator Id + L
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearizedOperator:
    """Dense Id + L on concatenated grid functions, with gauge pinning.

    The unpinned operator annihilates exactly the gauge directions
    (constants kappa_i with sum kappa_i = 0); solves append N-1 rows pinning
    equal mu-means and project the right-hand side onto the range by
    equalizing its Q_i-means.
    """

    matrix: np.ndarray
    pinning: np.ndarray
    q_marginals: tuple
    mu: MeasureFamily
    offsets: tuple

    @property
    def n_marginals(self) -> int:
        return len(self.offsets) - 1

    def split(self, vec: np.ndarray):
        return [vec[self.offsets[i]:self.offsets[i + 1]]
                for i in range(self.n_marginals)]

    def project_rhs(self, members) -> np.ndarray:
        members = [np.asarray(m, dtype=float) for m in members]
        means = [float(np.dot(m, q)) for m, q in zip(members, self.q_marginals)]
        target = sum(means) / len(means)
        return np.concatenate([m - (mean - target)
                               for m, mean in zip(members, means)])

    def solve(self, rhs_members):
        g = self.project_rhs(rhs_members)
        aug = np.vstack([self.matrix, self.pinning])
        rhs = np.concatenate([g, np.zeros(self.pinning.shape[0])])
        sol, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
        return self.split(sol)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.matrix, compute_uv=False)[::-1]

    def kernel_vectors(self, count: int) -> np.ndarray:
        _, _, vt = np.linalg.svd(self.matrix)
        return vt[-count:].T


def gauge_subspace_basis(grids) -> np.ndarray:
    """Orthonormal basis of {(kappa_1 1, ..., kappa_N 1) : sum kappa_i = 0}."""
    sizes = [g.n for g in grids]
    total, n = sum(sizes), len(sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    cols = []
    for r in range(n - 1):
        kappa = np.zeros(n)
        kappa[r], kappa[r + 1] = 1.0, -1.0
        v = np.zeros(total)
        for i in range(n):
            v[offsets[i]:offsets[i + 1]] = kappa[i]
        cols.append(v)
    basis, _ = np.linalg.qr(np.array(cols).T)
    return basis


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(sv, -1.0, 1.0))


def assemble_linearization(phi, mu: MeasureFamily, cost: CostTensor) -> LinearizedOperator:
    """Dense matrix of D_phi T = Id + L at (phi, mu)."""
    n = cost.n_marginals
    sizes = [g.n for g in cost.grids]
    total = sum(sizes)
    if total > MAX_DENSE_NODES:
        raise CapacityError(
            f"dense linearization limited to {MAX_DENSE_NODES} total nodes, got {total}"
        )
    fields = density_fields(phi, mu, cost, check=False)
    offsets = tuple(np.concatenate([[0], np.cumsum(sizes)]).astype(int))
    a = np.eye(total)
    weights = [m.weights for m in mu]
    for i in range(n):
        others = [j for j in range(n) if j != i]
        qmi = fields.q_minus_i[i]
        for pos, j in enumerate(others):
            saxes = tuple(1 + p for p in range(len(others)) if p != pos)
            block = qmi
            for p, l in enumerate(others):
                if l == j:
                    continue
                shape = [1] * qmi.ndim
                shape[1 + p] = -1
                block = block * weights[l].reshape(shape)
            block = block.sum(axis=saxes) if saxes else block
            block = block * weights[j][None, :]
            rs = block.sum(axis=1)
            if np.max(np.abs(rs - 1.0)) > 1e-10:
                raise EntroflowError(
                    f"L block ({i},{j}) rows are not convex combinations "
                    f"(max deviation {np.max(np.abs(rs - 1.0)):.2e})"
                )
            a[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] += block
    pin = np.zeros((n - 1, total))
    for r in range(n - 1):
        pin[r, offsets[r]:offsets[r + 1]] = weights[r]
        pin[r, offsets[r + 1]:offsets[r + 2]] = -weights[r + 1]
    q_marg = tuple(fields.q_i[i] * weights[i] for i in range(n))
    return LinearizedOperator(a, pin, q_marg, mu, offsets)


# ---------------------------------------------------------------------------
# time derivatives along displacement paths
# ---------------------------------------------------------------------------

def path_weight_rate(plan, t: float, grid: Grid1D) -> np.ndarray:
    """d/dt of the binned weights of the displacement interpolant."""
    _, _, mass, x, y = _plan_entries(plan)
    v = y - x
    pts = x + t * (y - x)
    j0, theta = _cell_index(grid, pts)
    on_node = theta < 1e-12
    move_left = on_node & (v < 0) & (j0 > 0)
    j0 = np.where(move_left, j0 - 1, j0)
    out = np.zeros(grid.n)
    np.add.at(out, j0, -mass * v / grid.spacing)
    np.add.at(out, j0 + 1, mass * v / grid.spacing)
    return out


def dtG_path(phi, mu_t: MeasureFamily, plans: PlanFamily, t: float,
             cost: CostTensor, op: TbarOperator | None = None):
    """Exact t-derivative of the discrete G(phi, t) = T(phi, mu^t).

    The binned path enters G only through the marginal weights, so the
    derivative is the T-bar kernel contracted against the weight rates.
    """
    members = as_members(phi)
    if op is None:
        op = TbarOperator(cost)
    n = op.n
    tbar = apply_Tbar(members, mu_t, cost, op)
    wdot = [path_weight_rate(plans[j], t, mu_t[j].grid) for j in range(n)]
    out = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        ex = op.exponent_minus_i(i, members)  # (x_i, others) layout
        kern = np.exp(ex - tbar[i].reshape([-1] + [1] * (n - 1)))
        if n == 2:
            j = others[0]
            out.append(kern @ wdot[j])
        else:
            j1, j2 = others
            term = (kern * wdot[j1][None, :, None] * mu_t[j2].weights[None, None, :]
                    + kern * mu_t[j1].weights[None, :, None] * wdot[j2][None, None, :])
            out.append(term.sum(axis=(1, 2)))
    return out


def dtG(phi, plans: PlanFamily, t: float, cost: CostTensor):
    """Plan-kernel form of d/dt G: the reweighted-plan integral of
    (y_j - x_j) (grad phi_j(x_j^t) - grad_j c(x^t)).

    Gradients are central differences linearly interpolated at the off-node
    points x^t; values of phi and c at off-node points use the matching
    linear interpolation.
    """
    members = as_members(phi)
    n = cost.n_marginals
    if n == 2:
        return [_dtG_plan_2(members, plans, t, cost, i) for i in range(2)]
    if n == 3:
        return [_dtG_plan_3(members, plans, t, cost, i) for i in range(3)]
    raise ValueError("dtG supports N = 2 or 3")


def _interp_along(values2d: np.ndarray, j0: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Interpolate a (n0, m)-shaped table along its second axis at entries."""
    return values2d[:, j0] * (1.0 - theta)[None, :] + values2d[:, j0 + 1] * theta[None, :]


def _dtG_plan_2(members, plans, t, cost, i):
    j = 1 - i
    gj = cost.grids[j]
    _, _, mass, x, y = _plan_entries(plans[j])
    pts = x + t * (y - x)
    v = y - x
    j0, theta = _cell_index(gj, pts)
    cv = np.moveaxis(cost.values, i, 0)
    c_at = _interp_along(cv, j0, theta)
    dc = np.gradient(cost.values, gj.spacing, axis=j, edge_order=2)
    dc_at = _interp_along(np.moveaxis(dc, i, 0), j0, theta)
    phi_at = interp_values(gj, members[j], pts)
    gphi_at = interp_values(gj, grad_central(members[j], gj.spacing), pts)
    ex = phi_at[None, :] - c_at
    m = np.max(ex, axis=1, keepdims=True)
    w = mass[None, :] * np.exp(ex - m)
    z = np.sum(w, axis=1)
    num = np.sum(w * (v * (gphi_at[None, :] - dc_at)), axis=1)
    return num / z


def _dtG_plan_3(members, plans, t, cost, i):
    others = [j for j in range(3) if j != i]
    j1, j2 = others
    g1, g2 = cost.grids[j1], cost.grids[j2]
    _, _, m1, x1, y1 = _plan_entries(plans[j1])
    _, _, m2, x2, y2 = _plan_entries(plans[j2])
    p1, v1 = x1 + t * (y1 - x1), y1 - x1
    p2, v2 = x2 + t * (y2 - x2), y2 - x2
    a1, th1 = _cell_index(g1, p1)
    a2, th2 = _cell_index(g2, p2)
    cv = np.moveaxis(cost.values, i, 0)
    if others != sorted(others):
        raise AssertionError("axis bookkeeping")
    # bilinear gather of c and its two partials at (p1, p2) pairs
    n0 = cost.grids[i].n

    def gather(table):
        tv = np.moveaxis(table, i, 0)
        out = np.zeros((n0, len(p1), len(p2)))
        for s1, w1 in ((0, 1.0 - th1), (1, th1)):
            for s2, w2 in ((0, 1.0 - th2), (1, th2)):
                out += tv[:, a1 + s1][:, :, a2 + s2] * (w1[None, :, None] * w2[None, None, :])
        return out

    c_at = gather(cost.values)
    dc1_at = gather(np.gradient(cost.values, g1.spacing, axis=j1, edge_order=2))
    dc2_at = gather(np.gradient(cost.values, g2.spacing, axis=j2, edge_order=2))
    phi1_at = interp_values(g1, members[j1], p1)
    phi2_at = interp_values(g2, members[j2], p2)
    gphi1_at = interp_values(g1, grad_central(members[j1], g1.spacing), p1)
    gphi2_at = interp_values(g2, grad_central(members[j2], g2.spacing), p2)
    ex = phi1_at[None, :, None] + phi2_at[None, None, :] - c_at
    m = np.max(ex.reshape(n0, -1), axis=1).reshape(n0, 1, 1)
    w = (m1[None, :, None] * m2[None, None, :]) * np.exp(ex - m)
    z = w.reshape(n0, -1).sum(axis=1)
    integrand = (v1[None, :, None] * (gphi1_at[None, :, None] - dc1_at)
                 + v2[None, None, :] * (gphi2_at[None, None, :] - dc2_at))
    num = (w * integrand).reshape(n0, -1).sum(axis=1)
    return num / z


def _plan_G(phi, plans: PlanFamily, t: float, cost: CostTensor):
    """G_i(phi, t) evaluated with linear interpolation (oracle companion)."""
    members = as_members(phi)
    n = cost.n_marginals
    out = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        if n == 2:
            j = others[0]
            gj = cost.grids[j]
            _, _, mass, x, y = _plan_entries(plans[j])
            pts = x + t * (y - x)
            j0, theta = _cell_index(gj, pts)
            c_at = _interp_along(np.moveaxis(cost.values, i, 0), j0, theta)
            phi_at = interp_values(gj, members[j], pts)
            ex = phi_at[None, :] - c_at
            m = np.max(ex, axis=1)
            z = np.sum(mass[None, :] * np.exp(ex - m[:, None]), axis=1)
            out.append(members[i] + m + np.log(z))
        else:
            j1, j2 = others
            g1, g2 = cost.grids[j1], cost.grids[j2]
            _, _, m1, x1, y1 = _plan_entries(plans[j1])
            _, _, m2, x2, y2 = _plan_entries(plans[j2])
            p1 = x1 + t * (y1 - x1)
            p2 = x2 + t * (y2 - x2)
            a1, th1 = _cell_index(g1, p1)
            a2, th2 = _cell_index(g2, p2)
            n0 = cost.grids[i].n
            tv = np.moveaxis(cost.values, i, 0)
            c_at = np.zeros((n0, len(p1), len(p2)))
            for s1, w1 in ((0, 1.0 - th1), (1, th1)):
                for s2, w2 in ((0, 1.0 - th2), (1, th2)):
                    c_at += tv[:, a1 + s1][:, :, a2 + s2] * (w1[None, :, None] * w2[None, None, :])
            phi1_at = interp_values(g1, members[j1], p1)
            phi2_at = interp_values(g2, members[j2], p2)
            ex = phi1_at[None, :, None] + phi2_at[None, None, :] - c_at
            m = np.max(ex.reshape(n0, -1), axis=1)
            z = ((m1[None, :, None] * m2[None, None, :])
                 * np.exp(ex - m.reshape(n0, 1, 1))).reshape(n0, -1).sum(axis=1)
            out.append(members[i] + m + np.log(z))
    return out


def potential_time_derivative(probe: PathProbe, t: float, cost: CostTensor,
                              form: str = "path"):
    """D_t phi^t = -[D_phi T]^{-1} D_t G via the gauge-pinned linear solve.

    form="path" differentiates the probed (binned) path exactly;
    form="plan" uses the plan-kernel integral with interpolated gradients.
    """
    k = probe.index_of(t)
    phi_t = probe.potentials_at_t[k]
    mu_t = probe.measures_at_t[k]
    lin = assemble_linearization(phi_t, mu_t, cost)
    if form == "path":
        rhs = dtG_path(phi_t, mu_t, probe.plans, t, cost)
    elif form == "plan":
        rhs = dtG(phi_t, probe.plans, t, cost)
    else:
        raise ValueError(f"unknown form {form!r}")
    sol = lin.solve(rhs)
    return [-s for s in sol]


def energy_derivative(probe: PathProbe, t: float) -> float:
    """d/dt E(mu^t) = sum_i int (y-x) phi-slope(x^t) dgamma_i.

    Slopes are those of the piecewise-linear interpolant at the deposit
    positions, which makes this the exact dual (Danskin) derivative of the
    discrete energy along the binned path.
    """
    k = probe.index_of(t)
    phi_t = probe.potentials_at_t[k]
    total = 0.0
    for i, plan in enumerate(probe.plans):
        _, _, mass, x, y = _plan_entries(plan)
        v = y - x
        pts = x + t * v
        grid = phi_t.grids[i]
        slopes = hat_slope(grid, phi_t.members[i], pts, direction=v)
        total += float(np.sum(mass * v * slopes))
    return total


def semiconvexity_modulus(probe: PathProbe, chord_slack: float = 1e-9):
    """Measured Lipschitz modulus of t -> dE/dt, plus the chord inequalities.

    Returns the max pairwise ratio |h'(t) - h'(s)| / (|t-s| cost) and checks
    E(mu^t) <= (1-t) E^0 + t E^1 +- modulus * cost * t (1-t) / 2 on the
    probed samples (both signs).
    """
    if len(probe.t_samples) < 3:
        raise ValueError("need at least three samples")
    cost_g = probe.plan_cost
    hp = [energy_derivative(probe, t) for t in probe.t_samples]
    if cost_g == 0.0:
        return {"modulus": 0.0, "derivatives": hp, "chord_violation": 0.0}
    modulus = 0.0
    for a in range(len(hp)):
        for b in range(a + 1, len(hp)):
            dt = probe.t_samples[b] - probe.t_samples[a]
            modulus = max(modulus, abs(hp[b] - hp[a]) / (dt * cost_g))
    if not (probe.t_samples[0] == 0.0 and probe.t_samples[-1] == 1.0):
        return {"modulus": modulus, "derivatives": hp, "chord_violation": None}
    e0, e1 = probe.energies_at_t[0], probe.energies_at_t[-1]
    scale = max(1.0, abs(e0), abs(e1))
    worst = 0.0
    for t, e in zip(probe.t_samples, probe.energies_at_t):
        chord = (1 - t) * e0 + t * e1
        bulge = modulus * cost_g * t * (1 - t) / 2.0
        worst = max(worst, e - (chord + bulge), (chord - bulge) - e)
    if worst > chord_slack * scale:
        raise EntroflowError(
            f"chord inequality violated by {worst:.3e} with measured modulus {modulus:.4g}"
        )
    return {"modulus": modulus, "derivatives": hp, "chord_violation": worst}


def wasserstein_gradient_check(cost: CostTensor, mu0: MeasureFamily,
                               mu1: MeasureFamily, tol: float = 1e-10,
                               s_values=(0.2, 0.1, 0.05)):
    """First-order expansion of E along optimal displacement directions.

    Measures |E(mu^s) - E(mu^0) - s * <grad>| / W(mu^0, mu^s)^2 over a
    shrinking family; the ratio staying bounded certifies the gradient
    identification.
    """
    plans = PlanFamily([optimal_plan_1d(a, b) for a, b in zip(mu0, mu1)])
    rep0 = solve(cost, mu0, tol=tol)
    grad_term = 0.0
    for i, plan in enumerate(plans):
        _, _, mass, x, y = _plan_entries(plan)
        v = y - x
        slopes = hat_slope(mu0[i].grid, rep0.potentials.members[i], x, direction=v)
        grad_term += float(np.sum(mass * v * slopes))
    rows = []
    for s in s_values:
        fam = displacement_path(plans, s)
        rep = solve(cost, fam, tol=tol)
        w = product_wasserstein(mu0, fam)
        resid = abs(rep.dual_value - rep0.dual_value - s * grad_term)
        rows.append({"s": s, "residual": resid, "w": w,
                     "ratio": resid / w ** 2 if w > 0 else 0.0})
    return {"gradient_term": grad_term, "rows": rows}
