"""Cost tensors on product grids with analytic derivative bounds.

Built-in descriptors: quadratic sum_{i<j} a_ij |x_i - x_j|^2, separable
sum_i f_i(x_i), cosine and Gaussian smooth test costs, and tabulated values.
Descriptors are plain dicts so they round-trip through JSON configs.

The order-0 bound is the exact max over grid nodes (the sup of the discrete
restriction, which is what every downstream check integrates against);
orders 1..3 are analytic where the descriptor admits them and central
finite-difference estimates otherwise.  Storage is dense: N <= 3 and at most
2^21 entries, larger requests fail with a capacity error.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, GridTooCoarseError
from .measure import Grid1D

MAX_MARGINALS = 3
MAX_ENTRIES = 2 ** 21
K_MAX = 3

# sup_u |d^j/du^j exp(-u^2/2)| for j = 0..3
_GAUSS_DERIV_SUP = (1.0, 0.6065306597126334, 1.0, 1.3801652536370657)


@dataclass(frozen=True, eq=False)
class CostTensor:
    """Cost c evaluated on the product grid, with derivative metadata.

    deriv_bounds[j] bounds the C^j norm (max over derivative orders <= j of
    the sup norm); grad_bounds[i] bounds sup |d c / d x_i|, the per-marginal
    Lipschitz constant of the i-th Schroedinger potential.
    """

    grids: tuple
    values: np.ndarray
    deriv_bounds: tuple
    grad_bounds: tuple
    k_max: int = K_MAX
    bounds_kind: str = "analytic"
    normalization_shift: float = 0.0

    def __post_init__(self):
        grids = tuple(self.grids)
        n = len(grids)
        if n < 2:
            raise ValueError("cost needs at least two marginals")
        if n > MAX_MARGINALS:
            raise CapacityError(
                f"dense cost tensors support N <= {MAX_MARGINALS} marginals, got {n}"
            )
        vals = np.asarray(self.values, dtype=float)
        shape = tuple(g.n for g in grids)
        if vals.shape != shape:
            raise ValueError(f"values shape {vals.shape} != grid shape {shape}")
        if vals.size > MAX_ENTRIES:
            raise CapacityError(
                f"cost tensor has {vals.size} entries, limit {MAX_ENTRIES}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("cost values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "deriv_bounds", tuple(float(b) for b in self.deriv_bounds))
        object.__setattr__(self, "grad_bounds", tuple(float(b) for b in self.grad_bounds))
        if len(self.deriv_bounds) != self.k_max + 1:
            raise ValueError("need one derivative bound per order 0..k_max")
        if len(self.grad_bounds) != n:
            raise ValueError("need one gradient bound per marginal")

    @property
    def n_marginals(self) -> int:
        return len(self.grids)

    def volume_element(self) -> float:
        return float(np.prod([g.spacing for g in self.grids]))

    def domain_volume(self) -> float:
        return float(np.prod([g.hi - g.lo for g in self.grids]))

    def ck_bound(self, k: int) -> float:
        if k > self.k_max:
            raise ValueError(f"no derivative bound of order {k} (k_max={self.k_max})")
        return self.deriv_bounds[k]


# ---------------------------------------------------------------------------
# 1D building blocks for separable descriptors
# ---------------------------------------------------------------------------

def _poly_sup(coeffs, lo, hi) -> float:
    """Exact sup of |polynomial| over [lo, hi] via critical points."""
    p = np.polynomial.Polynomial(coeffs)
    cands = [lo, hi]
    dp = p.deriv()
    if dp.degree() >= 1:
        roots = dp.roots()
        cands.extend(r.real for r in roots if abs(r.imag) < 1e-12 and lo <= r.real <= hi)
    return float(max(abs(p(c)) for c in cands))


def eval_func1d(desc: dict, x: np.ndarray) -> np.ndarray:
    kind = desc.get("fn")
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "poly":
        return np.polynomial.Polynomial(desc["coeffs"])(x)
    if kind == "cos":
        return desc["amplitude"] * np.cos(desc["freq"] * x + desc.get("phase", 0.0))
    if kind == "gauss":
        u = (x - desc["center"]) / desc["width"]
        return desc["amplitude"] * np.exp(-0.5 * u * u)
    raise ConfigError(f"unknown 1D function kind {kind!r}")


def func1d_deriv_sups(desc: dict, lo: float, hi: float):
    """Upper bounds on sup |f^(j)| over [lo, hi] for j = 0..3."""
    kind = desc.get("fn")
    if kind == "zero":
        return [0.0] * (K_MAX + 1)
    if kind == "poly":
        p = np.polynomial.Polynomial(desc["coeffs"])
        sups = []
        for _ in range(K_MAX + 1):
            sups.append(_poly_sup(p.coef, lo, hi))
            p = p.deriv()
        return sups
    if kind == "cos":
        amp, freq = abs(desc["amplitude"]), abs(desc["freq"])
        return [amp * freq ** j for j in range(K_MAX + 1)]
    if kind == "gauss":
        amp, width = abs(desc["amplitude"]), abs(desc["width"])
        return [amp * _GAUSS_DERIV_SUP[j] / width ** j for j in range(K_MAX + 1)]
    raise ConfigError(f"unknown 1D function kind {kind!r}")


# ---------------------------------------------------------------------------
# finite-difference surrogate for C^k norms
# ---------------------------------------------------------------------------

def ck_norm_estimate(values: np.ndarray, grid: Grid1D, k: int) -> float:
    """Discrete C^k norm: max over orders j <= k of sup |j-th difference|.

    Central differences in the interior, one-sided second-order stencils at
    the boundary; an O(spacing^2)-consistent surrogate for the sup norm.
    """
    if not 0 <= k <= K_MAX:
        raise ValueError(f"k must lie in 0..{K_MAX}, got {k}")
    if grid.n < 2 * k + 1 or (k >= 1 and grid.n < 3):
        raise GridTooCoarseError(f"n={grid.n} too coarse for order-{k} differences")
    vals = np.asarray(values, dtype=float)
    if vals.shape != (grid.n,):
        raise ValueError("values do not match the grid")
    best = float(np.max(np.abs(vals)))
    d = vals
    for _ in range(k):
        d = np.gradient(d, grid.spacing, edge_order=2)
        best = max(best, float(np.max(np.abs(d))))
    return best


def _axis_gradient(values: np.ndarray, grid: Grid1D, axis: int) -> np.ndarray:
    order = 2 if values.shape[axis] >= 3 else 1
    return np.gradient(values, grid.spacing, axis=axis, edge_order=order)


def _fd_order_sups(values: np.ndarray, grids) -> list:
    """Per-order derivative sups of a tensor by repeated axis gradients."""
    n = len(grids)
    sups = [float(np.max(np.abs(values)))]
    for order in range(1, K_MAX + 1):
        worst = 0.0
        for alpha in itertools.product(range(order + 1), repeat=n):
            if sum(alpha) != order:
                continue
            d = values
            for axis, reps in enumerate(alpha):
                for _ in range(reps):
                    d = _axis_gradient(d, grids[axis], axis)
            worst = max(worst, float(np.max(np.abs(d))))
        sups.append(worst)
    return sups


def _fd_grad_bounds(values: np.ndarray, grids) -> list:
    return [
        float(np.max(np.abs(_axis_gradient(values, g, i))))
        for i, g in enumerate(grids)
    ]


# ---------------------------------------------------------------------------
# descriptor evaluation
# ---------------------------------------------------------------------------

def _axis_view(x: np.ndarray, axis: int, n_axes: int) -> np.ndarray:
    shape = [1] * n_axes
    shape[axis] = -1
    return x.reshape(shape)


def _quadratic_coeffs(desc: dict, n: int) -> np.ndarray:
    if "coeffs" in desc:
        a = np.asarray(desc["coeffs"], dtype=float)
        if a.shape != (n, n):
            raise ConfigError(f"quadratic coeffs must be {n}x{n}")
        if not np.allclose(a, a.T):
            raise ConfigError("quadratic coeffs must be symmetric")
    else:
        a = np.full((n, n), float(desc.get("a", 1.0)))
    np.fill_diagonal(a, 0.0)
    return a


def _pair_diameter(gi: Grid1D, gj: Grid1D) -> float:
    return max(gi.hi - gj.lo, gj.hi - gi.lo)


def build_cost(descriptor: dict, grids) -> CostTensor:
    """Evaluate a cost descriptor on the product grid with its bounds."""
    grids = tuple(grids)
    n = len(grids)
    if n > MAX_MARGINALS:
        raise CapacityError(
            f"dense cost tensors support N <= {MAX_MARGINALS} marginals, got {n}"
        )
    kind = descriptor.get("kind")
    shape = tuple(g.n for g in grids)

    if kind == "zero":
        values = np.zeros(shape)
        order_sups = [0.0] * (K_MAX + 1)
        grad_bounds = [0.0] * n
        bounds_kind = "analytic"

    elif kind == "separable":
        terms = descriptor["terms"]
        if len(terms) != n:
            raise ConfigError(f"separable cost needs {n} terms, got {len(terms)}")
        values = np.zeros(shape)
        per_func = []
        for i, (term, g) in enumerate(zip(terms, grids)):
            values = values + _axis_view(eval_func1d(term, g.nodes), i, n)
            per_func.append(func1d_deriv_sups(term, g.lo, g.hi))
        order_sups = [sum(f[0] for f in per_func)]
        order_sups += [max(f[j] for f in per_func) for j in range(1, K_MAX + 1)]
        grad_bounds = [f[1] for f in per_func]
        bounds_kind = "analytic"

    elif kind == "quadratic":
        a = _quadratic_coeffs(descriptor, n)
        values = np.zeros(shape)
        for i in range(n):
            for j in range(i + 1, n):
                if a[i, j] == 0.0:
                    continue
                d = (_axis_view(grids[i].nodes, i, n)
                     - _axis_view(grids[j].nodes, j, n))
                values = values + a[i, j] * d * d
        diam = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    diam[i, j] = _pair_diameter(grids[i], grids[j])
        s0 = float(sum(abs(a[i, j]) * diam[i, j] ** 2
                       for i in range(n) for j in range(i + 1, n)))
        grad_bounds = [float(2 * sum(abs(a[i, j]) * diam[i, j]
                                     for j in range(n) if j != i))
                       for i in range(n)]
        s1 = max(grad_bounds)
        s2 = float(max(2 * np.sum(np.abs(a), axis=1)))
        order_sups = [s0, s1, s2, 0.0]
        bounds_kind = "analytic"

    elif kind == "cosine":
        amp = float(descriptor["amplitude"])
        wts = np.asarray(descriptor["weights"], dtype=float)
        if wts.shape != (n,):
            raise ConfigError(f"cosine cost needs {n} weights")
        phase = float(descriptor.get("phase", 0.0))
        arg = np.zeros(shape)
        for i in range(n):
            arg = arg + wts[i] * _axis_view(grids[i].nodes, i, n)
        values = amp * np.cos(arg + phase)
        wmax = float(np.max(np.abs(wts)))
        order_sups = [abs(amp) * wmax ** j for j in range(K_MAX + 1)]
        grad_bounds = [abs(amp * w) for w in wts]
        bounds_kind = "analytic"

    elif kind == "gaussian":
        amp = float(descriptor["amplitude"])
        centers = np.asarray(descriptor["centers"], dtype=float)
        widths = np.asarray(descriptor["widths"], dtype=float)
        if centers.shape != (n,) or widths.shape != (n,):
            raise ConfigError(f"gaussian cost needs {n} centers and widths")
        values = np.full(shape, amp)
        for i in range(n):
            u = (grids[i].nodes - centers[i]) / widths[i]
            values = values * _axis_view(np.exp(-0.5 * u * u), i, n)
        order_sups = [abs(amp)]
        for order in range(1, K_MAX + 1):
            worst = 0.0
            for alpha in itertools.product(range(order + 1), repeat=n):
                if sum(alpha) != order:
                    continue
                bound = abs(amp) * math.prod(
                    _GAUSS_DERIV_SUP[alpha[i]] / widths[i] ** alpha[i]
                    for i in range(n)
                )
                worst = max(worst, bound)
            order_sups.append(worst)
        grad_bounds = [abs(amp) * _GAUSS_DERIV_SUP[1] / widths[i] for i in range(n)]
        bounds_kind = "analytic"

    elif kind == "tabulated":
        values = np.asarray(descriptor["values"], dtype=float)
        if values.shape != shape:
            raise ConfigError(f"tabulated values shape {values.shape} != {shape}")
        order_sups = _fd_order_sups(values, grids)
        grad_bounds = _fd_grad_bounds(values, grids)
        bounds_kind = "estimated"

    else:
        raise ConfigError(f"unknown cost descriptor kind {kind!r}")

    # order 0 is the exact node sup of the built tensor
    order_sups[0] = float(np.max(np.abs(values))) if values.size else 0.0
    deriv_bounds = np.maximum.accumulate(order_sups)
    return CostTensor(grids, values, tuple(deriv_bounds), tuple(grad_bounds),
                      k_max=K_MAX, bounds_kind=bounds_kind)


def load_tabulated_csv(path, grids) -> CostTensor:
    """Load a tabulated cost from CSV rows (i_1, ..., i_N, value)."""
    grids = tuple(grids)
    shape = tuple(g.n for g in grids)
    values = np.full(shape, np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "value":
            raise ConfigError(f"unexpected CSV header {header}")
        for row in reader:
            idx = tuple(int(v) for v in row[:-1])
            values[idx] = float(row[-1])
    if np.any(np.isnan(values)):
        raise ConfigError("tabulated CSV does not cover the full product grid")
    return build_cost({"kind": "tabulated", "values": values}, grids)


def save_tabulated_csv(cost: CostTensor, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"i{k+1}" for k in range(cost.n_marginals)] + ["value"])
        for idx in itertools.product(*(range(g.n) for g in cost.grids)):
            writer.writerow(list(idx) + [repr(float(cost.values[idx]))])


def normalize_cost(cost: CostTensor):
    """Shift c so that int exp(-c) dx = 1 under the midpoint quadrature.

    Returns (shifted_tensor, shift); the shift solves
    logsumexp(-c) + log(cell volume) + (-shift) = 0.
    """
    flat = -cost.values.ravel()
    m = float(np.max(flat))
    shift = m + math.log(float(np.sum(np.exp(flat - m)))) + math.log(cost.volume_element())
    new_values = cost.values + shift
    order_sups = list(cost.deriv_bounds)
    order_sups[0] = float(np.max(np.abs(new_values)))
    deriv_bounds = tuple(np.maximum.accumulate(order_sups))
    shifted = CostTensor(cost.grids, new_values, deriv_bounds, cost.grad_bounds,
                         k_max=cost.k_max, bounds_kind=cost.bounds_kind,
                         normalization_shift=cost.normalization_shift + shift)
    return shifted, shift
