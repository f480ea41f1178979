"""Command-line driver: experiment configs, report emission, manifests.

Configs are versioned JSON documents with a strict schema: unknown keys are
rejected with their path so a misspelled ceiling can never silently widen a
tolerance.  Given the same (config, seed) a run writes byte-identical
reports; nothing time-stamped goes into the emitted JSON.  Every run writes
``manifest.json`` echoing the resolved config, SHA-256 checksums of the
artifacts, and a machine-readable list of assertion failures (nonzero exit
when the list is non-empty).
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys

import numpy as np

from . import analysis, flow as flow_mod
from .cost import build_cost, load_tabulated_csv, normalize_cost
from .errors import ConfigError, EntroflowError
from .measure import (
    DiscreteMeasure,
    Grid1D,
    MeasureFamily,
    PlanFamily,
    TransportPlan,
    optimal_plan_1d,
)
from .solver import primal_plan, solve

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def _check_keys(obj: dict, allowed, path: str) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} at {path or '<root>'}")


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ConfigError(f"missing required key {key!r} at {path or '<root>'}")
    return obj[key]


def load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"config schema must be {SCHEMA_VERSION}, got {cfg.get('schema')!r}")
    if "command" not in cfg:
        raise ConfigError("config needs a 'command' field")
    return cfg


def _build_grids(spec_list, path="grids"):
    grids = []
    for i, g in enumerate(spec_list):
        _check_keys(g, {"lo", "hi", "n"}, f"{path}[{i}]")
        grids.append(Grid1D(float(_require(g, "lo", path)),
                            float(_require(g, "hi", path)),
                            int(_require(g, "n", path))))
    return tuple(grids)


_MARGINAL_KEYS = {
    "uniform": {"kind"},
    "gaussian_bump": {"kind", "center", "width", "floor"},
    "two_bump": {"kind", "centers", "widths", "mix", "floor"},
    "from_csv": {"kind", "path"},
    "random_mixture": {"kind", "bumps", "floor"},
}


def build_marginal(desc: dict, grid: Grid1D, rng, path="marginal") -> DiscreteMeasure:
    kind = desc.get("kind")
    if kind not in _MARGINAL_KEYS:
        raise ConfigError(f"unknown marginal kind {kind!r} at {path}")
    _check_keys(desc, _MARGINAL_KEYS[kind], path)
    x = grid.nodes
    if kind == "uniform":
        w = np.ones(grid.n)
    elif kind == "gaussian_bump":
        u = (x - float(desc["center"])) / float(desc["width"])
        w = np.exp(-0.5 * u * u) + float(desc.get("floor", 1e-6))
    elif kind == "two_bump":
        centers = desc["centers"]
        widths = desc["widths"]
        mix = desc.get("mix", [0.5, 0.5])
        w = np.zeros(grid.n)
        for c, s, m in zip(centers, widths, mix):
            u = (x - float(c)) / float(s)
            w = w + float(m) * np.exp(-0.5 * u * u)
        w = w + float(desc.get("floor", 1e-6))
    elif kind == "from_csv":
        return DiscreteMeasure.from_csv(desc["path"])
    else:  # random_mixture
        if rng is None:
            raise ConfigError("random_mixture marginals need a seed")
        n_bumps = int(desc.get("bumps", 3))
        w = np.zeros(grid.n)
        for _ in range(n_bumps):
            c = grid.lo + (grid.hi - grid.lo) * rng.uniform(0.1, 0.9)
            s = (grid.hi - grid.lo) * rng.uniform(0.03, 0.2)
            w = w + rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((x - c) / s) ** 2)
        w = w + float(desc.get("floor", 1e-6))
    return DiscreteMeasure(grid, w / w.sum())


def _build_cost_from_config(desc: dict, grids):
    if desc.get("kind") == "tabulated_csv":
        _check_keys(desc, {"kind", "path"}, "cost")
        return load_tabulated_csv(desc["path"], grids)
    return build_cost(desc, grids)


# ---------------------------------------------------------------------------
# emission helpers
# ---------------------------------------------------------------------------

def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, resolved_config, artifacts, failures) -> None:
    echoed = {k: v for k, v in resolved_config.items() if k != "out"}
    manifest = {
        "schema": SCHEMA_VERSION,
        "resolved_config": echoed,
        "artifacts": {name: _sha256(os.path.join(out_dir, name)) for name in artifacts},
        "failures": failures,
    }
    _dump_json(manifest, os.path.join(out_dir, "manifest.json"))


def _resolve_common(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.tol is not None:
        cfg["tol"] = args.tol
    if args.out is not None:
        cfg["out"] = args.out
    if "out" not in cfg:
        raise ConfigError("output directory missing: set 'out' in the config or pass --out")
    return cfg


# ---------------------------------------------------------------------------
# solve command
# ---------------------------------------------------------------------------

_SOLVE_KEYS = {"schema", "command", "seed", "out", "grids", "cost", "marginals",
               "tol", "max_iter", "dump_coupling", "normalize_cost"}


def run_solve(cfg: dict) -> int:
    _check_keys(cfg, _SOLVE_KEYS, "")
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    grids = _build_grids(_require(cfg, "grids", ""))
    cost = _build_cost_from_config(_require(cfg, "cost", ""), grids)
    if cfg.get("normalize_cost"):
        cost, _ = normalize_cost(cost)
    seed = cfg.get("seed")
    rng = np.random.default_rng(seed) if seed is not None else None
    marginals = [
        build_marginal(d, g, rng, f"marginals[{i}]")
        for i, (d, g) in enumerate(zip(_require(cfg, "marginals", ""), grids))
    ]
    mu = MeasureFamily(marginals)
    tol = float(cfg.get("tol", 1e-10))
    failures = []
    report = solve(cost, mu, tol=tol, max_iter=int(cfg.get("max_iter", 50_000)))
    artifacts = ["report.json"]
    _dump_json(report.to_json_dict(), os.path.join(out_dir, "report.json"))
    if cfg.get("dump_coupling") and cost.n_marginals == 2:
        coupling = primal_plan(report, mu, cost)
        coupling.to_csv(os.path.join(out_dir, "coupling.csv"))
        artifacts.append("coupling.csv")
    for i, m in enumerate(marginals):
        name = f"marginal_{i}.csv"
        m.to_csv(os.path.join(out_dir, name))
        artifacts.append(name)
    _write_manifest(out_dir, cfg, artifacts, failures)
    return 0 if not failures else 1


# ---------------------------------------------------------------------------
# stability command
# ---------------------------------------------------------------------------

_STABILITY_KEYS = {"schema", "command", "seed", "out", "grids", "cost", "marginals",
                   "plans", "t_samples", "tol", "k", "ceilings", "sobolev",
                   "derivative_check"}


def _build_plans(desc: dict, mu: MeasureFamily, rng) -> PlanFamily:
    kind = desc.get("kind")
    if kind == "translation":
        _check_keys(desc, {"kind", "cells"}, "plans")
        plans = []
        for m, cells in zip(mu, desc["cells"]):
            cells = int(cells)
            n = m.grid.n
            w = np.array(m.weights)
            pad = abs(cells)
            if pad:
                if cells >= 0:
                    w[n - pad:] = 0.0
                else:
                    w[:pad] = 0.0
            w = w / w.sum()
            mat = np.zeros((n, n))
            idx = np.nonzero(w)[0]
            mat[idx, idx + cells] = w[idx]
            plans.append(TransportPlan(m.grid, m.grid, mat))
        return PlanFamily(plans)
    if kind == "optimal_to":
        _check_keys(desc, {"kind", "targets"}, "plans")
        targets = [
            build_marginal(d, m.grid, rng, f"plans.targets[{i}]")
            for i, (d, m) in enumerate(zip(desc["targets"], mu))
        ]
        return PlanFamily([optimal_plan_1d(m, t) for m, t in zip(mu, targets)])
    raise ConfigError(f"unknown plans kind {kind!r}")


def _plans_base_family(plans: PlanFamily) -> MeasureFamily:
    return MeasureFamily([p.source_marginal() for p in plans])


def run_stability(cfg: dict) -> int:
    _check_keys(cfg, _STABILITY_KEYS, "")
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    grids = _build_grids(_require(cfg, "grids", ""))
    cost = _build_cost_from_config(_require(cfg, "cost", ""), grids)
    seed = cfg.get("seed")
    rng = np.random.default_rng(seed) if seed is not None else None
    marginals = [
        build_marginal(d, g, rng, f"marginals[{i}]")
        for i, (d, g) in enumerate(zip(_require(cfg, "marginals", ""), grids))
    ]
    mu0 = MeasureFamily(marginals)
    plans = _build_plans(_require(cfg, "plans", ""), mu0, rng)
    mu_base = _plans_base_family(plans)
    t_samples = tuple(float(t) for t in _require(cfg, "t_samples", ""))
    tol = float(cfg.get("tol", 1e-10))
    k = int(cfg.get("k", 1))
    ceilings = cfg.get("ceilings", {})
    failures = []

    probe = analysis.probe_path(cost, plans, t_samples, tol)
    ratio_stats = analysis.lipschitz_ratio_ck(probe, k)
    if "lipschitz_ratio" in ceilings and ratio_stats["max"] > ceilings["lipschitz_ratio"]:
        failures.append({
            "invariant": "lipschitz_ratio",
            "measured": ratio_stats["max"],
            "ceiling": ceilings["lipschitz_ratio"],
        })
    sc = analysis.semiconvexity_modulus(probe)
    report = {
        "plan_cost": probe.plan_cost,
        "max_solver_residual": max(probe.residuals),
        "lipschitz_ratio_max": ratio_stats["max"],
        "lipschitz_ratio_median": ratio_stats["median"],
        "semiconvexity_modulus": sc["modulus"],
        "chord_violation": sc["chord_violation"],
        "ceilings": ceilings,
        "k": k,
    }

    dcheck = cfg.get("derivative_check")
    if dcheck:
        _check_keys(dcheck, {"t", "fd_step"}, "derivative_check")
        t0 = float(dcheck["t"])
        h = float(dcheck.get("fd_step", 1e-3))
        deriv = analysis.potential_time_derivative(probe, t0, cost)
        from .measure import displacement_path
        rp = solve(cost, displacement_path(plans, t0 + h), tol=tol)
        rm = solve(cost, displacement_path(plans, t0 - h), tol=tol)
        fd = [(a - b) / (2 * h) for a, b in
              zip(rp.potentials.members, rm.potentials.members)]
        from .potential import quotient_ck_norm
        err = quotient_ck_norm([a - b for a, b in zip(deriv, fd)], 0)
        report["derivative_fd_error"] = err
        lin = analysis.assemble_linearization(
            probe.potentials_at_t[probe.index_of(t0)],
            probe.measures_at_t[probe.index_of(t0)], cost)
        sv = lin.singular_values()
        report["kernel_svals_below_1e8"] = int(np.sum(sv < 1e-8))
        if "derivative_fd_error" in ceilings and err > ceilings["derivative_fd_error"]:
            failures.append({
                "invariant": "derivative_fd_error",
                "measured": err,
                "ceiling": ceilings["derivative_fd_error"],
            })

    sob = cfg.get("sobolev")
    if sob:
        _check_keys(sob, {"p", "k", "amplitudes", "bump_center", "bump_width"}, "sobolev")
        p = int(sob.get("p", 2))
        ks = int(sob.get("k", 1))
        ratios = []
        for amp in sob["amplitudes"]:
            nus = []
            for m in mu_base:
                x = m.grid.nodes
                u = (x - float(sob["bump_center"])) / float(sob["bump_width"])
                bump = np.exp(-0.5 * u * u)
                bump = bump - np.dot(bump, np.ones(len(x))) / len(x)
                w = m.weights + float(amp) * bump * m.grid.spacing
                w = np.maximum(w, 1e-12)
                nus.append(DiscreteMeasure(m.grid, w / w.sum()))
            out = analysis.lipschitz_ratio_sobolev(cost, mu_base, MeasureFamily(nus), ks, p, tol)
            ratios.append({"amplitude": amp, "ratio": out["ratio"]})
        report["sobolev_ratios"] = ratios

    _dump_json(report, os.path.join(out_dir, "stability_report.json"))
    base = probe.potentials_at_t[0]
    with open(os.path.join(out_dir, "curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "energy", "energy_derivative", "ck_norm_from_start"])
        for idx, (t, e) in enumerate(zip(probe.t_samples, probe.energies_at_t)):
            diff = [a - b for a, b in
                    zip(probe.potentials_at_t[idx].members, base.members)]
            from .potential import quotient_ck_norm as _qnorm
            writer.writerow([repr(t), repr(e),
                             repr(analysis.energy_derivative(probe, t)),
                             repr(_qnorm(diff, k, grids=base.grids))])
    _write_manifest(out_dir, cfg, ["stability_report.json", "curves.csv"], failures)
    return 0 if not failures else 1


# ---------------------------------------------------------------------------
# flow command
# ---------------------------------------------------------------------------

_FLOW_KEYS = {"schema", "command", "seed", "out", "grids", "cost", "normalize_cost",
              "preset", "initial", "target", "t_end", "inner_tol", "record_stride",
              "early_stop_gap", "dt_policy", "tol", "equilibrium", "fit_burn_in_fraction",
              "fit_gap_floor", "assertions"}


def run_flow_command(cfg: dict) -> int:
    _check_keys(cfg, _FLOW_KEYS, "")
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    grids = _build_grids(_require(cfg, "grids", ""))
    cost = _build_cost_from_config(_require(cfg, "cost", ""), grids)
    if cfg.get("normalize_cost"):
        cost, _ = normalize_cost(cost)
    seed = cfg.get("seed")
    rng = np.random.default_rng(seed) if seed is not None else None
    preset = _require(cfg, "preset", "")
    target = None
    if cfg.get("target") is not None:
        target = build_marginal(cfg["target"], grids[1], rng, "target")
    spec = flow_mod.FlowSpec(
        preset=preset,
        cost=cost,
        t_end=float(_require(cfg, "t_end", "")),
        target_nu=target,
        inner_tol=float(cfg.get("inner_tol", 1e-9)),
        record_stride=int(cfg.get("record_stride", 50)),
        early_stop_gap=cfg.get("early_stop_gap"),
        dt_policy=cfg.get("dt_policy", {"kind": "cfl", "safety": flow_mod.CFL_SAFETY}),
        fit_burn_in_fraction=float(cfg.get("fit_burn_in_fraction", 0.1)),
        fit_gap_floor=float(cfg.get("fit_gap_floor", 1e-12)),
    )
    initial = [
        build_marginal(d, g, rng, f"initial[{i}]")
        for i, (d, g) in enumerate(zip(_require(cfg, "initial", ""), spec.species_grids))
    ]
    equilibrium = None
    eq_mode = cfg.get("equilibrium", "auto")
    if eq_mode == "gibbs":
        cdesc = cfg["cost"]
        if cdesc.get("kind") != "separable":
            raise ConfigError("equilibrium='gibbs' needs a separable cost")
        from .cost import eval_func1d
        f = eval_func1d(cdesc["terms"][0], grids[0].nodes)
        w = np.exp(-(f - f.min()))
        w = w / w.sum()
        equilibrium = (DiscreteMeasure(grids[0], w),)
    elif eq_mode not in ("auto", "none"):
        raise ConfigError("equilibrium must be one of auto|gibbs|none")

    result = flow_mod.run_flow(spec, initial, equilibrium=equilibrium)
    failures = []
    asserts = cfg.get("assertions", {})
    for key, ceiling in asserts.items():
        if key == "max_w2_to_equilibrium":
            measured = result.summary.get("final_w2_to_equilibrium")
            ok = measured is not None and measured <= ceiling
        elif key == "min_kappa":
            measured = result.summary.get("kappa_hat")
            ok = measured is not None and measured >= ceiling
        elif key == "min_r_squared":
            measured = result.summary.get("fit_r_squared")
            ok = measured is not None and measured >= ceiling
        else:
            raise ConfigError(f"unknown flow assertion {key!r}")
        if not ok:
            failures.append({"invariant": key, "measured": measured, "ceiling": ceiling})

    artifacts = ["summary.json", "trajectory.csv"]
    _dump_json(result.summary, os.path.join(out_dir, "summary.json"))
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["t", "energy", "fisher", "w2_to_equilibrium"]
        for i in range(spec.n_species):
            header += [f"mean_{i}", f"var_{i}"]
        writer.writerow(header)
        for st in result.states:
            row = [repr(st.time), repr(st.energy),
                   "" if st.fisher is None else repr(st.fisher),
                   "" if st.w2_to_equilibrium is None else repr(st.w2_to_equilibrium)]
            for m in st.measures:
                mean = m.mean()
                var = float(np.dot((m.grid.nodes - mean) ** 2, m.weights))
                row += [repr(mean), repr(var)]
            writer.writerow(row)
    for i, m in enumerate(result.states[-1].measures):
        name = f"final_measure_{i}.csv"
        m.to_csv(os.path.join(out_dir, name))
        artifacts.append(name)
    _write_manifest(out_dir, cfg, artifacts, failures)
    return 0 if not failures else 1


# ---------------------------------------------------------------------------
# report command
# ---------------------------------------------------------------------------

_REPORT_KEYS = {"schema", "command", "seed", "out", "inputs"}


def run_report(cfg: dict) -> int:
    _check_keys(cfg, _REPORT_KEYS, "")
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    keys = ["source"]
    for pattern in _require(cfg, "inputs", ""):
        for path in sorted(glob.glob(pattern)):
            with open(path) as fh:
                data = json.load(fh)
            row = {"source": path}
            for k, v in sorted(data.items()):
                if isinstance(v, (int, float, bool, str)) or v is None:
                    row[k] = v
                    if k not in keys:
                        keys.append(k)
            rows.append(row)
    table = os.path.join(out_dir, "report_table.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    _write_manifest(out_dir, cfg, ["report_table.csv"], [])
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "solve": run_solve,
    "stability": run_stability,
    "flow": run_flow_command,
    "report": run_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="entroflow",
        description="grid-based entropic optimal transport experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--tol", type=float, default=None, help="override the solver tolerance")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg["command"] != args.command:
            raise ConfigError(
                f"config command {cfg['command']!r} does not match subcommand {args.command!r}"
            )
        cfg = _resolve_common(cfg, args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, EntroflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
