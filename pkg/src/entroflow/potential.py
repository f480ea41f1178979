"""Potential families, the Schroedinger operator T, and quotient norms.

A potential family (phi_1, ..., phi_N) is defined up to additive constants
kappa_i with sum kappa_i = 0; the canonical gauge fixes equal mu-weighted
means.  All exponentials of potentials and costs are evaluated through
max-subtracted log-sum-exp contractions (see _kernels), never by raw
exponentiation of unshifted values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cost import CostTensor
from .errors import GridTooCoarseError
from .measure import DiscreteMeasure, MeasureFamily


def log_weights(mu: DiscreteMeasure) -> np.ndarray:
    """log of cell masses with log(0) = -inf and no warnings."""
    w = mu.weights
    out = np.full(w.shape, -np.inf)
    pos = w > 0
    out[pos] = np.log(w[pos])
    return out


@dataclass(frozen=True, eq=False)
class PotentialFamily:
    """N grid functions phi_i plus the gauge convention they are stored in."""

    grids: tuple
    members: tuple
    gauge: str = "raw"

    def __post_init__(self):
        grids = tuple(self.grids)
        members = []
        for g, m in zip(grids, self.members):
            arr = np.array(m, dtype=float)
            if arr.shape != (g.n,):
                raise ValueError(f"potential shape {arr.shape} != grid size {g.n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("potential values must be finite")
            arr.flags.writeable = False
            members.append(arr)
        if len(members) != len(grids) or len(members) < 2:
            raise ValueError("need one potential per marginal, N >= 2")
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "members", tuple(members))

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @staticmethod
    def zeros(grids, gauge: str = "raw") -> "PotentialFamily":
        return PotentialFamily(tuple(grids), tuple(np.zeros(g.n) for g in grids), gauge)

    def shifted(self, kappa) -> "PotentialFamily":
        """Representative phi_i + kappa_i; admissible iff sum kappa_i = 0."""
        return PotentialFamily(
            self.grids, tuple(m + k for m, k in zip(self.members, kappa)), "raw"
        )

    # -- serialization: CSV of (marginal, node, value) + JSON sidecar --------
    def to_csv(self, path, sidecar_path=None) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["marginal", "node", "value"])
            for i, (g, m) in enumerate(zip(self.grids, self.members)):
                for x, v in zip(g.nodes, m):
                    writer.writerow([i, repr(float(x)), repr(float(v))])
        if sidecar_path is not None:
            meta = {
                "gauge": self.gauge,
                "grids": [{"lo": g.lo, "hi": g.hi, "n": g.n} for g in self.grids],
            }
            with open(sidecar_path, "w") as fh:
                json.dump(meta, fh, indent=1)

    @staticmethod
    def from_csv(path, sidecar_path) -> "PotentialFamily":
        from .measure import Grid1D

        with open(sidecar_path) as fh:
            meta = json.load(fh)
        grids = tuple(Grid1D(g["lo"], g["hi"], int(g["n"])) for g in meta["grids"])
        members = [np.zeros(g.n) for g in grids]
        counts = [0] * len(grids)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                i = int(row[0])
                members[i][counts[i]] = float(row[2])
                counts[i] += 1
        return PotentialFamily(grids, tuple(members), meta["gauge"])


def as_members(phi) -> tuple:
    if isinstance(phi, PotentialFamily):
        return phi.members
    return tuple(np.asarray(m, dtype=float) for m in phi)


# ---------------------------------------------------------------------------
# the Schroedinger operator
# ---------------------------------------------------------------------------

class TbarOperator:
    """Per-axis contiguous cost views for repeated T-bar contractions.

    Building one of these costs an N-fold copy of the tensor; reuse it across
    solver sweeps and flow steps with the same cost.
    """

    def __init__(self, cost: CostTensor):
        self.cost = cost
        self.n = cost.n_marginals
        self._cperm = tuple(
            np.ascontiguousarray(np.moveaxis(cost.values, i, 0))
            for i in range(self.n)
        )

    def tbar_component(self, i: int, b) -> np.ndarray:
        """T-bar_i given b_j = phi_j + log w_j for every j."""
        others = [j for j in range(self.n) if j != i]
        if self.n == 2:
            return _kernels.lse_contract_2(self._cperm[i], b[others[0]])
        return _kernels.lse_contract_3(self._cperm[i], b[others[0]], b[others[1]])

    def exponent_minus_i(self, i: int, phi_members) -> np.ndarray:
        """sum_{j != i} phi_j - c in the (x_i, x_others) axis layout."""
        others = [j for j in range(self.n) if j != i]
        ex = -self._cperm[i]
        for pos, j in enumerate(others):
            shape = [1] * self.n
            shape[pos + 1] = -1
            ex = ex + phi_members[j].reshape(shape)
        return ex


def apply_Tbar(phi, mu: MeasureFamily, cost: CostTensor, op: TbarOperator | None = None):
    """T-bar_i(phi, mu)(x_i) = log int exp(sum_{j!=i} phi_j - c) dmu_{-i}."""
    members = as_members(phi)
    if op is None:
        op = TbarOperator(cost)
    b = [m + log_weights(w) for m, w in zip(members, mu)]
    return [op.tbar_component(i, b) for i in range(op.n)]


def apply_T(phi, mu: MeasureFamily, cost: CostTensor, op: TbarOperator | None = None):
    """T_i = phi_i + T-bar_i; zero (as a quotient element) at the solution."""
    members = as_members(phi)
    tbar = apply_Tbar(members, mu, cost, op)
    return [m + t for m, t in zip(members, tbar)]


def schrodinger_residual(phi, mu: MeasureFamily, cost: CostTensor,
                         op: TbarOperator | None = None) -> float:
    """Gauge-minimized sup norm of T(phi, mu): the solver's defining residual."""
    return quotient_ck_norm(apply_T(phi, mu, cost, op), 0)


# ---------------------------------------------------------------------------
# density fields q, q_i, q_{-i}
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityFields:
    """Densities of the optimal-plan measure Q relative to mu.

    q lives on the product grid; q_i on marginal grids; q_minus_i[i] has
    axis order (x_i, then the remaining axes in increasing original order)
    and each slice q_minus_i[i][a] integrates to one against mu_{-i}.
    """

    q: np.ndarray
    q_i: tuple
    q_minus_i: tuple
    log_mass: float


def density_fields(phi, mu: MeasureFamily, cost: CostTensor,
                   op: TbarOperator | None = None,
                   check: bool = True) -> DensityFields:
    members = as_members(phi)
    if op is None:
        op = TbarOperator(cost)
    n = op.n
    b = [m + log_weights(w) for m, w in zip(members, mu)]
    tbar = [op.tbar_component(i, b) for i in range(n)]

    # log Z from the first marginal: Z = sum_a w_0[a] exp(phi_0[a] + tbar_0[a])
    z_terms = b[0] + tbar[0]
    m0 = float(np.max(z_terms))
    log_z = m0 + np.log(float(np.sum(np.exp(z_terms - m0))))

    log_q = -cost.values - log_z
    for i in range(n):
        shape = [1] * n
        shape[i] = -1
        log_q = log_q + members[i].reshape(shape)
    q = np.exp(log_q)

    q_i = tuple(np.exp(members[i] + tbar[i] - log_z) for i in range(n))
    q_minus_i = tuple(
        np.exp(op.exponent_minus_i(i, members)
               - tbar[i].reshape([-1] + [1] * (n - 1)))
        for i in range(n)
    )
    fields = DensityFields(q, q_i, q_minus_i, log_z)
    if check:
        _check_density_fields(fields, members, mu, cost)
    return fields


def _check_density_fields(fields, members, mu, cost, tol=1e-10):
    n = len(mu)
    prod_w = np.ones([1] * n)
    for i in range(n):
        shape = [1] * n
        shape[i] = -1
        prod_w = prod_w * mu[i].weights.reshape(shape)
    total = float(np.sum(fields.q * prod_w))
    if abs(total - 1.0) > tol:
        raise ValueError(f"q integrates to {total}, not 1 within {tol}")
    for i in range(n):
        ti = float(np.dot(fields.q_i[i], mu[i].weights))
        if abs(ti - 1.0) > tol:
            raise ValueError(f"q_{i} integrates to {ti}, not 1 within {tol}")
        others = [j for j in range(n) if j != i]
        w_rest = np.ones([1] * (n - 1))
        for pos, j in enumerate(others):
            shape = [1] * (n - 1)
            shape[pos] = -1
            w_rest = w_rest * mu[j].weights.reshape(shape)
        slices = np.tensordot(fields.q_minus_i[i], w_rest,
                              axes=(tuple(range(1, n)), tuple(range(n - 1))))
        if np.max(np.abs(slices - 1.0)) > tol:
            raise ValueError(f"a conditional slice of q_-{i} does not integrate to 1")

    phi_c0 = quotient_ck_norm(members, 0)
    bound = np.exp(2.0 * (n * phi_c0 + cost.deriv_bounds[0]))
    for name, arr in (("q", fields.q), *((f"q_{i}", fields.q_i[i]) for i in range(n)),
                      *((f"q_-{i}", fields.q_minus_i[i]) for i in range(n))):
        lo, hi = float(np.min(arr)), float(np.max(arr))
        if hi > bound * (1 + 1e-12) or lo < (1 - 1e-12) / bound:
            raise ValueError(
                f"{name} violates the density bounds: range [{lo}, {hi}], "
                f"bound envelope [{1/bound}, {bound}]"
            )


# ---------------------------------------------------------------------------
# quotient norms and gauges
# ---------------------------------------------------------------------------

def _v_breakpoints(lo: float, hi: float, d: float):
    """Slope breakpoints of kappa -> max(d, hi - kappa, kappa - lo)."""
    return (0.5 * (hi + lo), hi - d, lo + d)


def quotient_ck_norm(phi_diff, k: int, mu: MeasureFamily | None = None,
                     grids=None) -> float:
    """inf over admissible constants of sum_i ||phi_i - kappa_i||_{C^k}.

    Only the order-0 part of each C^k norm depends on the gauge, so each
    summand is a flat-bottomed V-shape in its constant and the objective is
    piecewise linear and convex.  The gauge search therefore reduces to
    evaluating the slope breakpoints: directly for N = 2, and as the inner
    step of a multi-start cyclic coordinate descent for N = 3.
    """
    if isinstance(phi_diff, PotentialFamily):
        grids = phi_diff.grids
        members = phi_diff.members
    else:
        members = tuple(np.asarray(m, dtype=float) for m in phi_diff)
    n = len(members)
    if k >= 1:
        if grids is None and mu is not None:
            grids = tuple(m.grid for m in mu)
        if grids is None:
            raise ValueError("k >= 1 needs grids (pass a PotentialFamily or mu)")
        deriv = []
        for m, g in zip(members, grids):
            if g.n < 2 * k + 1:
                raise GridTooCoarseError(f"n={g.n} too coarse for order {k}")
            d, best = m, 0.0
            for _ in range(k):
                d = np.gradient(d, g.spacing, edge_order=2)
                best = max(best, float(np.max(np.abs(d))))
            deriv.append(best)
    else:
        deriv = [0.0] * n

    his = [float(np.max(m)) for m in members]
    los = [float(np.min(m)) for m in members]

    def term(i, kap):
        return max(deriv[i], his[i] - kap, kap - los[i])

    if n == 2:
        # term(1, -kappa) breaks where -kappa hits the breakpoints of V_1
        cands = list(_v_breakpoints(los[0], his[0], deriv[0]))
        cands += [-c for c in _v_breakpoints(los[1], his[1], deriv[1])]
        return min(term(0, c) + term(1, -c) for c in cands)
    if n != 3:
        raise ValueError(f"gauge search implemented for N in {{2, 3}}, got {n}")

    # N = 3: f(k1, k2) = term_0(k1) + term_1(k2) + term_2(-k1-k2)
    def coord_min(i, other_sum):
        # minimize term(i, u) + term(2, -u - other_sum) over u exactly
        cands = list(_v_breakpoints(los[i], his[i], deriv[i]))
        cands += [-c - other_sum for c in _v_breakpoints(los[2], his[2], deriv[2])]
        best_u, best = cands[0], np.inf
        for u in cands:
            val = term(i, u) + term(2, -u - other_sum)
            if val < best:
                best_u, best = u, val
        return best_u

    span = max(his) - min(los) + 1.0
    mids = [0.5 * (h + l) for h, l in zip(his, los)]
    best_val = np.inf
    for s1 in (-span / 2, 0.0, span / 2):
        for s2 in (-span / 2, 0.0, span / 2):
            k1, k2 = mids[0] + s1, mids[1] + s2
            val = term(0, k1) + term(1, k2) + term(2, -k1 - k2)
            for _ in range(100):
                k1 = coord_min(0, k2)
                k2 = coord_min(1, k1)
                new_val = term(0, k1) + term(1, k2) + term(2, -k1 - k2)
                if val - new_val < 1e-14:
                    val = min(val, new_val)
                    break
                val = new_val
            best_val = min(best_val, val)
    return float(best_val)


def quotient_l2_norm(h, mu: MeasureFamily):
    """Squared quotient L^2 norm and its equal-means optimal representative.

    Closed form: sum_i Var_{mu_i}(h_i) + (1/N) (sum_i int h_i dmu_i)^2.
    """
    members = as_members(h)
    n = len(members)
    means = [float(np.dot(m, w.weights)) for m, w in zip(members, mu)]
    nu = sum(means) / n
    variances = [
        float(np.dot((m - mean) ** 2, w.weights))
        for m, mean, w in zip(members, means, mu)
    ]
    value = sum(variances) + sum(means) ** 2 / n
    rep = tuple(m - mean + nu for m, mean in zip(members, means))
    return value, rep


def canonical_gauge(phi, mu: MeasureFamily) -> PotentialFamily:
    """Equal mu-weighted-means representative; idempotent."""
    if isinstance(phi, PotentialFamily):
        grids = phi.grids
    else:
        grids = tuple(m.grid for m in mu)
    members = as_members(phi)
    means = [float(np.dot(m, w.weights)) for m, w in zip(members, mu)]
    nu = sum(means) / len(members)
    shifted = tuple(m - mean + nu for m, mean in zip(members, means))
    return PotentialFamily(grids, shifted, gauge="canonical")
