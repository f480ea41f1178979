"""Grids, discrete measures, transport plans, and 1D Wasserstein geometry.

Measures are histograms on uniform cell-centered grids: ``weights[j]`` is the
mass of cell j, not a density (densities are ``weights / spacing``).  All
types are immutable after construction; every operation is a pure function.

W2 in one dimension is computed exactly by the monotone (quantile) coupling;
the small-LP formulation is kept only as a test oracle.  Pushforwards and
displacement interpolation deposit mass by two-cell linear splitting, which
preserves total mass and the first moment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainMismatchError

_MASS_TOL = 1e-12
_PLAN_TOL = 1e-10
# binning offsets below this snap to the nearest node; keeps exact-node
# deposits exact while perturbing first moments by < 1e-12 * spacing
_SNAP_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [lo, hi] with n cells."""

    lo: float
    hi: float
    n: int
    spacing: float = field(init=False)
    nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.n < 2:
            raise ValueError(f"need n >= 2 cells, got {self.n}")
        spacing = (self.hi - self.lo) / self.n
        nodes = self.lo + (np.arange(self.n) + 0.5) * spacing
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "nodes", _readonly(nodes))

    def same_interval(self, other: "Grid1D") -> bool:
        return self.lo == other.lo and self.hi == other.hi

    def __eq__(self, other):
        return (isinstance(other, Grid1D) and self.lo == other.lo
                and self.hi == other.hi and self.n == other.n)

    def __hash__(self):
        return hash((self.lo, self.hi, self.n))


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability histogram on a Grid1D (cell masses summing to one)."""

    grid: Grid1D
    weights: np.ndarray

    def __post_init__(self):
        w = _readonly(self.weights)
        if w.shape != (self.grid.n,):
            raise ValueError(f"weights shape {w.shape} != grid size {self.grid.n}")
        if np.any(w < 0.0):
            raise ValueError("negative weight in measure")
        total = float(np.sum(w))
        if abs(total - 1.0) > _MASS_TOL:
            raise ValueError(f"weights sum to {total}, not 1 within {_MASS_TOL}")
        object.__setattr__(self, "weights", w)

    def mean(self) -> float:
        return float(np.dot(self.weights, self.grid.nodes))

    def densities(self) -> np.ndarray:
        return self.weights / self.grid.spacing

    # -- serialization -------------------------------------------------------
    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "weight"])
            for x, w in zip(self.grid.nodes, self.weights):
                writer.writerow([repr(float(x)), repr(float(w))])

    @staticmethod
    def from_csv(path) -> "DiscreteMeasure":
        nodes, weights = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["node", "weight"]:
                raise ValueError(f"unexpected CSV header {header}")
            for row in reader:
                nodes.append(float(row[0]))
                weights.append(float(row[1]))
        nodes = np.asarray(nodes)
        n = len(nodes)
        if n < 2:
            raise ValueError("need at least two rows")
        spacing = nodes[1] - nodes[0]
        if not np.allclose(np.diff(nodes), spacing, rtol=0, atol=1e-9 * abs(spacing)):
            raise ValueError("nodes are not uniformly spaced")
        grid = Grid1D(float(nodes[0] - spacing / 2), float(nodes[-1] + spacing / 2), n)
        return DiscreteMeasure(grid, np.asarray(weights))

    def to_json_dict(self) -> dict:
        return {
            "grid": {"lo": self.grid.lo, "hi": self.grid.hi, "n": self.grid.n},
            "weights": [float(w) for w in self.weights],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "DiscreteMeasure":
        grid = Grid1D(d["grid"]["lo"], d["grid"]["hi"], int(d["grid"]["n"]))
        return DiscreteMeasure(grid, np.asarray(d["weights"], dtype=float))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @staticmethod
    def from_json(path) -> "DiscreteMeasure":
        with open(path) as fh:
            return DiscreteMeasure.from_json_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class MeasureFamily:
    """Ordered tuple of N >= 2 marginal measures (grids may differ)."""

    members: tuple

    def __init__(self, members):
        members = tuple(members)
        if len(members) < 2:
            raise ValueError(f"need N >= 2 marginals, got {len(members)}")
        for m in members:
            if not isinstance(m, DiscreteMeasure):
                raise TypeError("MeasureFamily members must be DiscreteMeasure")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def grids(self):
        return tuple(m.grid for m in self.members)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling on X_i x X_i, stored as a nonnegative mass matrix."""

    source_grid: Grid1D
    target_grid: Grid1D
    weights: np.ndarray

    def __post_init__(self):
        if not self.source_grid.same_interval(self.target_grid):
            raise DomainMismatchError("plan grids must cover the same interval")
        w = _readonly(self.weights)
        if w.shape != (self.source_grid.n, self.target_grid.n):
            raise ValueError(f"plan shape {w.shape} does not match grids")
        if np.any(w < 0.0):
            raise ValueError("negative plan weight")
        total = float(np.sum(w))
        if abs(total - 1.0) > _PLAN_TOL:
            raise ValueError(f"plan mass {total} is not 1 within {_PLAN_TOL}")
        object.__setattr__(self, "weights", w)

    def source_marginal(self) -> DiscreteMeasure:
        w = self.weights.sum(axis=1)
        return DiscreteMeasure(self.source_grid, w / w.sum())

    def target_marginal(self) -> DiscreteMeasure:
        w = self.weights.sum(axis=0)
        return DiscreteMeasure(self.target_grid, w / w.sum())

    def feasible_for(self, mu: DiscreteMeasure, nu: DiscreteMeasure,
                     tol: float = _PLAN_TOL) -> bool:
        return (np.max(np.abs(self.weights.sum(axis=1) - mu.weights)) <= tol
                and np.max(np.abs(self.weights.sum(axis=0) - nu.weights)) <= tol)

    def cost(self) -> float:
        d = self.source_grid.nodes[:, None] - self.target_grid.nodes[None, :]
        return float(np.sum(self.weights * d * d))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_index", "target_index", "weight"])
            idx = np.argwhere(self.weights > 0)
            for a, b in idx:
                writer.writerow([int(a), int(b), repr(float(self.weights[a, b]))])


@dataclass(frozen=True, eq=False)
class PlanFamily:
    """One transport plan per marginal; defines a displacement path."""

    members: tuple

    def __init__(self, members):
        members = tuple(members)
        if len(members) < 2:
            raise ValueError(f"need N >= 2 plans, got {len(members)}")
        for p in members:
            if not isinstance(p, TransportPlan):
                raise TypeError("PlanFamily members must be TransportPlan")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]


# ---------------------------------------------------------------------------
# Wasserstein distances
# ---------------------------------------------------------------------------

def _monotone_walk(a: np.ndarray, x: np.ndarray, b: np.ndarray, y: np.ndarray):
    """North-west-corner walk through the monotone coupling.

    Yields (i, j, mass) triples; exact up to float accumulation because the
    walk splits on the remaining masses rather than on cumulative sums.
    """
    i = j = 0
    na, nb = len(a), len(b)
    ra = float(a[0])
    rb = float(b[0])
    while True:
        if ra <= 0.0:
            i += 1
            if i >= na:
                return
            ra = float(a[i])
            continue
        if rb <= 0.0:
            j += 1
            if j >= nb:
                return
            rb = float(b[j])
            continue
        m = ra if ra <= rb else rb
        yield i, j, m
        ra -= m
        rb -= m


def wasserstein2_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Exact W2 between two histograms on grids over the same interval."""
    if not mu.grid.same_interval(nu.grid):
        raise DomainMismatchError(
            f"measures on [{mu.grid.lo},{mu.grid.hi}] vs [{nu.grid.lo},{nu.grid.hi}]"
        )
    if mu.grid == nu.grid and np.array_equal(mu.weights, nu.weights):
        return 0.0
    x, y = mu.grid.nodes, nu.grid.nodes
    total = 0.0
    for i, j, m in _monotone_walk(mu.weights, x, nu.weights, y):
        d = x[i] - y[j]
        total += m * d * d
    return math.sqrt(total)


def product_wasserstein(a: MeasureFamily, b: MeasureFamily) -> float:
    """Product metric: sqrt of the sum of squared per-marginal W2."""
    if len(a) != len(b):
        raise ValueError(f"family sizes differ: {len(a)} vs {len(b)}")
    return math.sqrt(sum(wasserstein2_1d(m, n) ** 2 for m, n in zip(a, b)))


def optimal_plan_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> TransportPlan:
    """Monotone quantile coupling; its cost equals wasserstein2_1d(mu, nu)^2."""
    if not mu.grid.same_interval(nu.grid):
        raise DomainMismatchError("measures on different intervals")
    w = np.zeros((mu.grid.n, nu.grid.n))
    for i, j, m in _monotone_walk(mu.weights, mu.grid.nodes, nu.weights, nu.grid.nodes):
        w[i, j] += m
    return TransportPlan(mu.grid, nu.grid, w)


def plan_cost(plans: PlanFamily) -> float:
    """Quadratic transport cost sum_i int |y - x|^2 dgamma_i."""
    return sum(p.cost() for p in plans)


# ---------------------------------------------------------------------------
# binning / pushforward / displacement
# ---------------------------------------------------------------------------

def _bin_masses(points: np.ndarray, masses: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Deposit point masses onto the grid by two-cell linear splitting."""
    u = (points - grid.lo) / grid.spacing - 0.5
    j0 = np.floor(u).astype(int)
    theta = u - j0
    # points in the boundary half-cells snap to the edge node
    low = j0 < 0
    j0[low], theta[low] = 0, 0.0
    high = j0 > grid.n - 2
    j0[high], theta[high] = grid.n - 2, 1.0
    theta = np.where(theta < _SNAP_TOL, 0.0, theta)
    theta = np.where(theta > 1.0 - _SNAP_TOL, 1.0, theta)
    out = np.zeros(grid.n)
    np.add.at(out, j0, masses * (1.0 - theta))
    np.add.at(out, j0 + 1, masses * theta)
    return out


def pushforward(mu: DiscreteMeasure, map_values: np.ndarray,
                out_grid: Grid1D | None = None) -> DiscreteMeasure:
    """Binned pushforward of mu under a map given by its per-node values."""
    grid = out_grid if out_grid is not None else mu.grid
    pts = np.asarray(map_values, dtype=float)
    if pts.shape != (mu.grid.n,):
        raise ValueError(f"map_values shape {pts.shape} != grid size {mu.grid.n}")
    if np.any(pts < grid.lo) or np.any(pts > grid.hi):
        raise DomainMismatchError("map value outside the target interval")
    return DiscreteMeasure(grid, _bin_masses(pts, mu.weights, grid))


def _displacement_out_grid(plan: TransportPlan) -> Grid1D:
    # default refinement policy: reuse the plan grid, taking the finer of the
    # two when source and target resolutions differ
    if plan.source_grid == plan.target_grid:
        return plan.source_grid
    return (plan.source_grid if plan.source_grid.n >= plan.target_grid.n
            else plan.target_grid)


def displacement_interpolant(plan: TransportPlan, t: float,
                             out_grid: Grid1D | None = None) -> DiscreteMeasure:
    """Single-plan displacement interpolation ((1-t) x + t y)_# gamma."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0 and out_grid is None:
        return plan.source_marginal()
    if t == 1.0 and out_grid is None:
        return plan.target_marginal()
    grid = out_grid if out_grid is not None else _displacement_out_grid(plan)
    a, b = np.nonzero(plan.weights)
    x = plan.source_grid.nodes[a]
    y = plan.target_grid.nodes[b]
    pts = x + t * (y - x)
    return DiscreteMeasure(grid, _bin_masses(pts, plan.weights[a, b], grid))


def displacement_path(plans: PlanFamily, t: float,
                      out_grids=None) -> MeasureFamily:
    """Family of displacement interpolants mu_i^t at parameter t."""
    if out_grids is None:
        out_grids = [None] * len(plans)
    return MeasureFamily(
        [displacement_interpolant(p, t, g) for p, g in zip(plans, out_grids)]
    )
