"""Wasserstein gradient-flow simulator for energies built on the EOT value.

Presets:

* ``eot_only``        d/dt mu_i = div(mu_i grad S_i(mu)), pure advection;
* ``sinkhorn_divergence``  single species driven by the debiased divergence
                      from a fixed target nu, pure advection;
* ``bridge_energy``   single species, E(mu, nu) + H(mu), unit diffusion;
* ``multi_species``   all species, E(mu) + sum_i H(mu_i), unit diffusion.

Spatial scheme: explicit finite volumes with no-flux boundaries.  With
diffusion the advective and diffusive fluxes are combined by
Scharfetter-Gummel exponential fitting, whose zero-flux states reproduce
discrete Gibbs profiles exactly (plain upwind biases the steady state at
first order in the spacing, which would miss the equilibrium tolerances);
without diffusion it reduces to plain upwind.  Mass is conserved exactly by
telescoping fluxes.

Entropy is discretized as sum_j w_j log(w_j / spacing), the same midpoint
quadrature used by the solver, so the multi-species functional vanishes at
the closed-form equilibrium at the discrete level.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cost import CostTensor
from .errors import CflError, ConfigError, EntroflowError
from .measure import DiscreteMeasure, MeasureFamily, wasserstein2_1d
from .potential import PotentialFamily, TbarOperator, log_weights
from .solver import solve

PRESETS = ("eot_only", "sinkhorn_divergence", "bridge_energy", "multi_species")

CFL_SAFETY = 0.4
CLIP_FLOOR = -1e-14
MASS_TOL_PER_STEP = 1e-13


def entropy(measure: DiscreteMeasure) -> float:
    """H(mu) = sum w log(w / spacing), the density-convention entropy."""
    w = measure.weights
    pos = w > 0
    return float(np.sum(w[pos] * (np.log(w[pos]) - math.log(measure.grid.spacing))))


@dataclass(frozen=True, eq=False)
class FlowSpec:
    preset: str
    cost: CostTensor
    t_end: float
    target_nu: DiscreteMeasure | None = None
    diffusion: tuple | None = None
    dt_policy: dict = field(default_factory=lambda: {"kind": "cfl", "safety": CFL_SAFETY})
    inner_tol: float = 1e-9
    inner_max_iter: int = 100_000
    record_stride: int = 50
    early_stop_gap: float | None = None
    fit_burn_in_fraction: float = 0.1
    fit_gap_floor: float = 1e-12

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.t_end <= 0 or self.inner_tol <= 0:
            raise ConfigError("t_end and inner_tol must be positive")
        single = self.preset in ("sinkhorn_divergence", "bridge_energy")
        if single:
            if self.cost.n_marginals != 2:
                raise ConfigError(f"{self.preset} needs a two-marginal cost")
            if self.target_nu is None:
                raise ConfigError(f"{self.preset} needs target_nu")
            if self.target_nu.grid != self.cost.grids[1]:
                raise ConfigError("target_nu grid does not match the cost")
        elif self.target_nu is not None:
            raise ConfigError(f"{self.preset} takes no target_nu")
        n_species = 1 if single else self.cost.n_marginals
        forced = {
            "eot_only": 0.0, "sinkhorn_divergence": 0.0,
            "bridge_energy": 1.0, "multi_species": 1.0,
        }[self.preset]
        alphas = tuple([forced] * n_species)
        if self.diffusion is not None and tuple(self.diffusion) != alphas:
            raise ConfigError(
                f"{self.preset} forces diffusion {alphas}, got {tuple(self.diffusion)}"
            )
        object.__setattr__(self, "diffusion", alphas)
        kind = self.dt_policy.get("kind")
        if kind not in ("cfl", "fixed"):
            raise ConfigError("dt_policy kind must be 'cfl' or 'fixed'")
        if kind == "fixed" and self.dt_policy.get("dt", 0) <= 0:
            raise ConfigError("fixed dt_policy needs dt > 0")

    @property
    def n_species(self) -> int:
        return 1 if self.preset in ("sinkhorn_divergence", "bridge_energy") else self.cost.n_marginals

    @property
    def species_grids(self) -> tuple:
        if self.preset in ("sinkhorn_divergence", "bridge_energy"):
            return (self.cost.grids[0],)
        return self.cost.grids


@dataclass(frozen=True, eq=False)
class FlowState:
    time: float
    measures: tuple
    potentials: PotentialFamily
    energy: float
    fisher: float | None = None
    w2_to_equilibrium: float | None = None


@dataclass(frozen=True, eq=False)
class FlowResult:
    spec: FlowSpec
    states: tuple
    times: np.ndarray
    energies: np.ndarray
    summary: dict
    equilibrium: tuple | None


@dataclass(frozen=True, eq=False)
class DecayFit:
    kappa: float
    r_squared: float
    n_points: int
    flagged: bool
    window: tuple


def fit_decay_rate(times, gaps, burn_in: float = 0.0,
                   gap_floor: float = 1e-13) -> DecayFit:
    """Least-squares slope of log gap vs t on the post-burn-in window."""
    t = np.asarray(times, dtype=float)
    g = np.asarray(gaps, dtype=float)
    mask = (t >= burn_in) & (g > gap_floor)
    t, g = t[mask], g[mask]
    if len(t) < 3:
        return DecayFit(0.0, 0.0, len(t), True, (float("nan"), float("nan")))
    y = np.log(g)
    slope, intercept = np.polyfit(t, y, 1)
    pred = slope * t + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    kappa = -float(slope)
    return DecayFit(kappa, r2, len(t), kappa <= 0.0, (float(t[0]), float(t[-1])))


def equilibrium_multispecies(cost: CostTensor) -> MeasureFamily:
    """Marginals of exp(-c) dx; requires the normalized cost convention."""
    vol = cost.volume_element()
    gamma = np.exp(-cost.values) * vol
    total = float(np.sum(gamma))
    if abs(total - 1.0) > 1e-8:
        raise EntroflowError(
            f"cost is not normalized (int exp(-c) dx = {total}); "
            "apply normalize_cost first"
        )
    gamma = gamma / total
    members = []
    for i in range(cost.n_marginals):
        axes = tuple(j for j in range(cost.n_marginals) if j != i)
        members.append(DiscreteMeasure(cost.grids[i], gamma.sum(axis=axes)))
    return MeasureFamily(members)


# ---------------------------------------------------------------------------
# inner solves and velocities
# ---------------------------------------------------------------------------

class _FlowEngine:
    """Per-run workspace: cached operators, warm starts, fixed-target solves."""

    def __init__(self, spec: FlowSpec):
        self.spec = spec
        self.op = TbarOperator(spec.cost)
        self.warm = {}
        self._nu_nu_value = None

    def _solve(self, key, family, warm_key):
        rep = solve(self.spec.cost, family, tol=self.spec.inner_tol,
                    max_iter=self.spec.inner_max_iter,
                    phi0=self.warm.get(warm_key), op=self.op)
        self.warm[warm_key] = rep.potentials
        return rep

    def evaluate(self, measures):
        """Inner solves at the current measures: energy, drifts, potentials."""
        spec = self.spec
        if spec.preset in ("eot_only", "multi_species"):
            fam = MeasureFamily(measures)
            rep = self._solve("joint", fam, "joint")
            drifts = list(rep.potentials.members)
            energy = rep.dual_value
            if spec.preset == "multi_species":
                energy += sum(entropy(m) for m in measures)
            return energy, drifts, rep.potentials

        mu = measures[0]
        nu = spec.target_nu
        if spec.preset == "bridge_energy":
            rep = self._solve("munu", MeasureFamily([mu, nu]), "munu")
            energy = rep.dual_value + entropy(mu)
            return energy, [rep.potentials.members[0]], rep.potentials

        # sinkhorn divergence: E(mu, nu) - E(mu, mu)/2 - E(nu, nu)/2
        rep_mn = self._solve("munu", MeasureFamily([mu, nu]), "munu")
        rep_mm = self._solve("mumu", MeasureFamily([mu, mu]), "mumu")
        if self._nu_nu_value is None:
            rep_nn = solve(self.spec.cost, MeasureFamily([nu, nu]),
                           tol=spec.inner_tol, max_iter=spec.inner_max_iter,
                           op=self.op)
            self._nu_nu_value = rep_nn.dual_value
        energy = rep_mn.dual_value - 0.5 * rep_mm.dual_value - 0.5 * self._nu_nu_value
        drift = (rep_mn.potentials.members[0]
                 - 0.5 * (rep_mm.potentials.members[0] + rep_mm.potentials.members[1]))
        return energy, [drift], rep_mn.potentials


def _face_velocity(drift: np.ndarray, spacing: float) -> np.ndarray:
    """Transport velocity -grad(drift) at the n+1 faces (no-flux ends)."""
    v = np.zeros(len(drift) + 1)
    v[1:-1] = -(drift[1:] - drift[:-1]) / spacing
    return v


def _cfl_dt(spec: FlowSpec, velocities) -> float:
    worst = np.inf
    for grid, alpha, v in zip(spec.species_grids, spec.diffusion, velocities):
        vmax = float(np.max(np.abs(v)))
        denom = 2.0 * alpha + grid.spacing * vmax
        if denom > 0:
            worst = min(worst, grid.spacing ** 2 / denom)
    return worst


def velocity_field(spec: FlowSpec, state: FlowState):
    """Face-centered transport velocities for every species at a state."""
    engine = _FlowEngine(spec)
    engine.warm["joint"] = state.potentials
    engine.warm["munu"] = state.potentials
    _, drifts, _ = engine.evaluate(state.measures)
    return [
        _face_velocity(d, g.spacing)
        for d, g in zip(drifts, spec.species_grids)
    ]


def _step_measures(spec: FlowSpec, measures, velocities, dt: float):
    new_measures = []
    clip_events = 0
    mass_drift = 0.0
    for m, v, alpha, grid in zip(measures, velocities, spec.diffusion,
                                 spec.species_grids):
        w = _kernels.fv_step(np.asarray(m.weights), v, alpha, dt, grid.spacing)
        drift = abs(float(np.sum(w)) - float(np.sum(m.weights)))
        if drift > MASS_TOL_PER_STEP:
            raise EntroflowError(f"mass drifted by {drift:.3e} in one step")
        mass_drift = max(mass_drift, drift)
        if np.any(w < 0):
            worst = float(np.min(w))
            if worst < CLIP_FLOOR:
                raise EntroflowError(
                    f"negative weight {worst:.3e} below the clip floor; "
                    "the step violates positivity"
                )
            clip_events += int(np.sum(w < 0))
            w = np.maximum(w, 0.0)
            w = w / np.sum(w)
        new_measures.append(DiscreteMeasure(grid, w))
    return tuple(new_measures), clip_events, mass_drift


def flow_step(spec: FlowSpec, state: FlowState, dt: float) -> FlowState:
    """One explicit step from a state; refuses CFL-violating dt."""
    engine = _FlowEngine(spec)
    engine.warm["joint"] = state.potentials
    engine.warm["munu"] = state.potentials
    energy, drifts, potentials = engine.evaluate(state.measures)
    velocities = [_face_velocity(d, g.spacing)
                  for d, g in zip(drifts, spec.species_grids)]
    dt_max = CFL_SAFETY * _cfl_dt(spec, velocities)
    if dt > dt_max:
        raise CflError(f"dt={dt} violates the stability policy", dt_max=dt_max)
    measures, _, _ = _step_measures(spec, state.measures, velocities, dt)
    new_energy, _, new_potentials = engine.evaluate(measures)
    return FlowState(state.time + dt, measures, new_potentials, new_energy)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _marginal_fisher(measure: DiscreteMeasure, drift: np.ndarray) -> float:
    w = measure.weights
    grid = measure.grid
    if np.any(w <= 0):
        warnings.warn("zero weights inside the support: masking them in the "
                      "Fisher information", RuntimeWarning)
    field = np.where(w > 0, np.log(np.maximum(w, 1e-300) / grid.spacing), 0.0) + drift
    grad = np.gradient(field, grid.spacing, edge_order=2)
    return float(np.sum(w * grad * grad))


def fisher_information(state: FlowState, spec: FlowSpec,
                       product_check: bool = True) -> float:
    """Relative Fisher information sum_i I(mu_i | exp(-S_i)).

    For multi_species the product-grid quantity I(gamma^t | gamma^*) is also
    computed and the identity |I_prod - sum_i I_i| <= 2% I is asserted
    whenever the value is above numerical floor.
    """
    if spec.preset not in ("multi_species", "bridge_energy"):
        raise EntroflowError("Fisher information applies to the diffusive presets")
    if spec.preset == "bridge_energy":
        return _marginal_fisher(state.measures[0], state.potentials.members[0])

    total = sum(
        _marginal_fisher(m, d)
        for m, d in zip(state.measures, state.potentials.members)
    )
    if not product_check:
        return total
    n = spec.cost.n_marginals
    log_gamma = -np.array(spec.cost.values)
    for i in range(n):
        shape = [1] * n
        shape[i] = -1
        log_gamma = log_gamma + (state.potentials.members[i]
                                 + log_weights(state.measures[i])).reshape(shape)
    gamma = np.exp(log_gamma)
    rel = log_gamma - np.log(spec.cost.volume_element()) + spec.cost.values
    i_prod = 0.0
    for i in range(n):
        grad = np.gradient(rel, spec.cost.grids[i].spacing, axis=i, edge_order=2)
        i_prod += float(np.sum(gamma * grad * grad))
    if total > 1e-8 and abs(i_prod - total) > 0.02 * total:
        raise EntroflowError(
            f"Fisher identity violated: product value {i_prod}, marginal sum {total}"
        )
    return total


def _w2_family(measures, reference) -> float:
    return math.sqrt(sum(
        wasserstein2_1d(m, r) ** 2 for m, r in zip(measures, reference)
    ))


# ---------------------------------------------------------------------------
# the driver
# ---------------------------------------------------------------------------

def run_flow(spec: FlowSpec, initial, equilibrium=None) -> FlowResult:
    """Integrate the flow to t_end with per-step conservation and
    dissipation checks.

    `equilibrium`: optional tuple of DiscreteMeasure used for gap and W2
    diagnostics; defaults to the closed form for multi_species.  For the
    Sinkhorn-divergence preset the distance to the target nu is reported
    (never asserted).
    """
    if isinstance(initial, (MeasureFamily, list, tuple)):
        measures = tuple(initial)
    else:
        measures = (initial,)
    if len(measures) != spec.n_species:
        raise ConfigError(f"{spec.preset} expects {spec.n_species} species")
    for m, g in zip(measures, spec.species_grids):
        if m.grid != g:
            raise ConfigError("initial measure grid does not match the cost")

    if equilibrium is None and spec.preset == "multi_species":
        equilibrium = tuple(equilibrium_multispecies(spec.cost))
    w2_reference = equilibrium
    if spec.preset == "sinkhorn_divergence" and w2_reference is None:
        w2_reference = (spec.target_nu,)

    engine = _FlowEngine(spec)
    f_star = None
    if equilibrium is not None:
        f_star, _, _ = _FlowEngine(spec).evaluate(equilibrium)

    times, energies = [], []
    states = []
    t = 0.0
    step = 0
    clip_events = 0
    max_mass_drift = 0.0
    max_energy_increase = 0.0
    dt_min, dt_max_seen, dt_sum = np.inf, 0.0, 0.0
    prev_energy = None
    prev_slack = np.inf
    stopped_early = False

    fixed_dt = spec.dt_policy.get("dt") if spec.dt_policy["kind"] == "fixed" else None
    safety = spec.dt_policy.get("safety", CFL_SAFETY)

    while True:
        energy, drifts, potentials = engine.evaluate(measures)
        times.append(t)
        energies.append(energy)

        if prev_energy is not None:
            increase = energy - prev_energy
            max_energy_increase = max(max_energy_increase, increase)
            if increase > prev_slack:
                raise EntroflowError(
                    f"energy increased by {increase:.3e} at t={t:.6f}, "
                    f"above the per-step slack {prev_slack:.3e}"
                )
        prev_energy = energy

        record = (step % spec.record_stride == 0)
        gap = energy - f_star if f_star is not None else None
        done = t >= spec.t_end - 1e-12
        if (spec.early_stop_gap is not None and gap is not None
                and gap <= spec.early_stop_gap):
            stopped_early = True
            done = True
        if record or done:
            fisher = None
            if spec.preset in ("multi_species", "bridge_energy"):
                state_tmp = FlowState(t, measures, potentials, energy)
                fisher = fisher_information(state_tmp, spec, product_check=False)
                if spec.preset == "multi_species" and fisher > 1e-8:
                    fisher = fisher_information(state_tmp, spec, product_check=True)
            w2 = (_w2_family(measures, w2_reference)
                  if w2_reference is not None else None)
            states.append(FlowState(t, measures, potentials, energy,
                                    fisher=fisher, w2_to_equilibrium=w2))
        if done:
            break

        velocities = [_face_velocity(d, g.spacing)
                      for d, g in zip(drifts, spec.species_grids)]
        dt_unit = _cfl_dt(spec, velocities)
        dt_max = safety * dt_unit
        dt = fixed_dt if fixed_dt is not None else dt_max
        if dt > dt_max:
            raise CflError(
                f"fixed dt={dt} violates the stability policy at t={t}",
                dt_max=dt_max,
            )
        dt = min(dt, spec.t_end - t)
        dt_min = min(dt_min, dt)
        dt_max_seen = max(dt_max_seen, dt)
        dt_sum += dt
        measures, clips, drift = _step_measures(spec, measures, velocities, dt)
        clip_events += clips
        max_mass_drift = max(max_mass_drift, drift)
        prev_slack = 10.0 * dt * dt + spec.inner_tol
        t += dt
        step += 1

    times = np.asarray(times)
    energies = np.asarray(energies)
    summary = {
        "preset": spec.preset,
        "n_steps": step,
        "t_final": float(times[-1]),
        "final_energy": float(energies[-1]),
        "clip_events": int(clip_events),
        "max_mass_drift": float(max_mass_drift),
        "max_energy_increase": float(max_energy_increase),
        "stopped_early": bool(stopped_early),
        "dt_min": float(dt_min) if step else None,
        "dt_max": float(dt_max_seen) if step else None,
        "dt_mean": float(dt_sum / step) if step else None,
    }
    if f_star is not None:
        gaps = energies - f_star
        summary["f_star"] = float(f_star)
        summary["final_gap"] = float(gaps[-1])
        fit = fit_decay_rate(times, gaps,
                             burn_in=spec.fit_burn_in_fraction * float(times[-1]),
                             gap_floor=spec.fit_gap_floor)
        summary["kappa_hat"] = fit.kappa
        summary["fit_r_squared"] = fit.r_squared
        summary["fit_points"] = fit.n_points
        summary["fit_flagged"] = fit.flagged
    if w2_reference is not None and states:
        summary["final_w2_to_equilibrium"] = states[-1].w2_to_equilibrium
    return FlowResult(spec, tuple(states), times, energies, summary,
                      equilibrium=tuple(equilibrium) if equilibrium else None)
