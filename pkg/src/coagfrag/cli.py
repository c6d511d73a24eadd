"""Scenario runner: parse a flat key = value config, dispatch to the
simulation and verification pipelines, and persist results reproducibly.

Outputs are plain data files (CSV / JSON / JSONL) with floats printed at 17
significant digits; a manifest records the fully resolved configuration,
the seed, every tolerance in play, and a checksum per output, so equal
configs reproduce byte-identical data.

Exit status: 0 when every configured check passes, 1 when a check fails,
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coagfrag import kernels as kmod
from coagfrag import statistics as stats
from coagfrag.dynamics import GeneratorForm, GeneratorSpec, simulate
from coagfrag.meanfield import (
    CFPDESolver,
    DensityField,
    SizeGrid,
    compare_empirical_pde,
    empirical_balance_check,
    martingale_diagnostic,
    simulate_rescaled,
)
from coagfrag.samplers import (
    InitialMeasure,
    LiftingLaw,
    RngStream,
    sample_gamma_pp,
    sample_lifted,
    sample_pd,
    sample_poisson_init,
    sample_tilted_pd,
)
from coagfrag.state import ClusterState

SCHEMA_VERSION = 1
ARTIFACT_VERSION = "0.1.0"
SCENARIOS = (
    "simulate",
    "correlate",
    "hierarchy",
    "reversibility",
    "meanfield",
    "moments",
    "spectral",
)

DEFAULTS = {
    "seed": 0,
    "ensemble": 1000,
    "horizon": 1.0,
    "snapshots_per_unit_time": 64.0,
    "threads": 1,
    "tol.nsigma": 3.0,
    "tol.quad_abs": kmod.QUAD_ABS_TOL,
    "init.trunc_tol": 1e-12,
    "generator.theta": 1.0,
    "generator.N": 1,
}


class ConfigError(ValueError):
    """All violations are collected and reported together."""


@dataclass
class ScenarioConfig:
    scenario: str
    raw: dict
    path: str = ""

    def get(self, key, default=None):
        if key in self.raw:
            return self.raw[key]
        if default is not None:
            return default
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise KeyError(key)

    def get_float(self, key, default=None):
        return float(self.get(key, default))

    def get_int(self, key, default=None):
        return int(self.get(key, default))

    def get_list(self, key, default=None):
        v = self.get(key, default)
        if isinstance(v, (list, tuple)):
            return [float(x) for x in v]
        if isinstance(v, (int, float)):
            return [float(v)]
        return [float(x) for x in str(v).split(",") if x.strip()]

    def resolved(self):
        out = dict(DEFAULTS)
        out.update(self.raw)
        out["scenario"] = self.scenario
        out["schema"] = SCHEMA_VERSION
        return out


def _parse_value(text):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    if "," in t:
        try:
            return [float(x) for x in t.split(",")]
        except ValueError:
            pass
    return t


def parse_config(path):
    """Parse and validate a scenario config file; raises ConfigError with
    every violation listed (line numbers included for parse problems)."""
    path = Path(path)
    errors = []
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'key = value', got {body!r}")
            continue
        key, _, value = body.partition("=")
        key = key.strip()
        if not key:
            errors.append(f"line {lineno}: empty key")
            continue
        if key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = _parse_value(value)
    if errors:
        raise ConfigError("config parse errors:\n  " + "\n  ".join(errors))

    schema = raw.pop("schema", SCHEMA_VERSION)
    if int(schema) != SCHEMA_VERSION:
        errors.append(f"unsupported schema version {schema} (expected {SCHEMA_VERSION})")
    scenario = raw.pop("scenario", None)
    if scenario not in SCENARIOS:
        errors.append(
            f"scenario must be one of {'|'.join(SCENARIOS)}, got {scenario!r}"
        )
    cfg = ScenarioConfig(scenario or "simulate", raw, str(path))
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _validate(cfg):
    errors = []
    try:
        build_kernel_pair(cfg)
    except KeyError as e:
        if cfg.scenario not in ("moments", "spectral"):
            errors.append(f"missing kernel key: {e}")
    except kmod.KernelError as e:
        errors.append(f"kernel rejected: {e}")

    form = cfg.raw.get("generator.form")
    init_kind = cfg.raw.get("init.kind")
    if form in ("simplex", "simplex_weighted") and init_kind not in (
        "pd",
        "tilted_pd",
        None,
    ):
        errors.append(
            f"generator form {form!r} acts on unit-mass states; initial law "
            f"{init_kind!r} does not have total mass one"
        )
    if cfg.scenario == "reversibility":
        errors.extend(_validate_reversible_pairing(cfg, form, init_kind))
    if cfg.scenario == "meanfield":
        kind = cfg.raw.get("init.c0.kind")
        if kind not in ("gamma", "uniform", "table"):
            errors.append(
                "meanfield scenarios need init.c0.kind in {gamma, uniform, "
                "table}: the moment condition for the rescaled limit "
                "(finite first moment and finite (2 + degree + delta)-th "
                "moment, delta > 1) is guaranteed only for bounded supports "
                "or exponentially cut intensities"
            )
    required = {
        "correlate": ["correlate.edges"],
        "hierarchy": ["hierarchy.boxes", "hierarchy.times"],
        "meanfield": ["meanfield.boxes", "meanfield.N_values"],
    }
    for key in required.get(cfg.scenario, ()):
        if key not in cfg.raw:
            errors.append(f"scenario {cfg.scenario!r} requires the key {key!r}")
    return errors


def _validate_reversible_pairing(cfg, form, init_kind):
    pairs = {
        "simplex_weighted": ("pd", "tilted_pd"),
        "balanced": ("gamma_pp", "lifted_pd"),
    }
    if form not in pairs:
        return [
            f"reversibility scenarios support generator.form in "
            f"{sorted(pairs)}, got {form!r}"
        ]
    if init_kind not in pairs[form]:
        return [
            f"generator form {form!r} is reversible for initial laws "
            f"{pairs[form]}, got {init_kind!r} (mismatched pairs are "
            "rejected at config time)"
        ]
    if form == "simplex_weighted":
        th_g = float(cfg.raw.get("generator.theta", 1.0))
        th_i = float(cfg.raw.get("init.theta", 1.0))
        if abs(th_g - th_i) > 1e-12:
            return [
                f"the split-weight parameter (generator.theta = {th_g}) must "
                f"equal the initial-law parameter (init.theta = {th_i})"
            ]
        s_gen = cfg.raw.get("generator.phi.threshold")
        if init_kind == "tilted_pd":
            s_init = cfg.raw.get("init.s")
            if s_gen is None or s_init is None or abs(float(s_gen) - float(s_init)) > 1e-12:
                return [
                    "tilted reversibility runs need matching thresholds "
                    "generator.phi.threshold and init.s"
                ]
    return []


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _build_kernel(cfg, prefix):
    fam = cfg.get(f"{prefix}.family", "constant")
    if fam == "constant":
        return kmod.constant_kernel(
            cfg.get_float(f"{prefix}.value", 1.0), cfg.get_float(f"{prefix}.degree", 0.0)
        )
    if fam == "product_power":
        return kmod.product_power_kernel(
            cfg.get_float(f"{prefix}.a"),
            cfg.get_float(f"{prefix}.b"),
            cfg.get_float(f"{prefix}.c"),
        )
    if fam == "abs_power":
        return kmod.abs_power_kernel(
            cfg.get_float(f"{prefix}.a"),
            cfg.get_float(f"{prefix}.b"),
            cfg.get_float(f"{prefix}.c"),
        )
    if fam == "sum_powers":
        return kmod.sum_powers_kernel(
            cfg.get_float(f"{prefix}.degree"), cfg.get_float(f"{prefix}.a")
        )
    if fam == "ratio_indicator":
        return kmod.ratio_indicator_kernel(
            cfg.get_float(f"{prefix}.degree"), cfg.get_float(f"{prefix}.threshold")
        )
    if fam == "custom":
        return kmod.custom_kernel(0.0, str(cfg.get(f"{prefix}.name")))
    raise kmod.KernelError(f"unknown kernel family {fam!r} for {prefix}")


def build_kernel_pair(cfg):
    coag = _build_kernel(cfg, "kernel.coag")
    if "kernel.frag.scale" in cfg.raw:
        return kmod.make_kernel_pair(coag, frag_scale=cfg.get_float("kernel.frag.scale"))
    if any(k.startswith("kernel.frag.") for k in cfg.raw):
        return kmod.make_kernel_pair(coag, _build_kernel(cfg, "kernel.frag"))
    return kmod.make_kernel_pair(coag)


def build_generator(cfg, pair):
    form = cfg.get("generator.form", "full")
    theta = cfg.get_float("generator.theta", 1.0)
    if form == "full":
        return GeneratorSpec.full(pair)
    if form == "normalized":
        return GeneratorSpec.normalized(pair)
    if form == "simplex":
        return GeneratorSpec.simplex(pair)
    if form == "balanced":
        return GeneratorSpec.balanced(pair.coag, theta)
    if form == "rescaled":
        return GeneratorSpec.rescaled(pair, cfg.get_int("generator.N", 1))
    if form == "simplex_weighted":
        s = cfg.raw.get("generator.phi.threshold")
        if s is not None:
            s = float(s)

            def phi(u):
                return (np.asarray(u) <= s).astype(float)

            def k1(x, y):
                return x * y * phi(x + y)

            def f1(x, y):
                return theta * (x + y) * phi(x) * phi(y)

            return GeneratorSpec(
                form=GeneratorForm.SIMPLEX_WEIGHTED,
                theta=theta,
                k1=k1,
                f1=f1,
                k1_bound=1.0,
                f1_bound=theta,
            )
        return GeneratorSpec.q_weighted(
            lambda x, y: np.ones_like(np.asarray(x * y, dtype=float)), theta
        )
    raise ConfigError(f"unknown generator form {form!r}")


def build_initial_sampler(cfg):
    kind = cfg.get("init.kind", "pd")
    theta = cfg.get_float("init.theta", 1.0)
    tol = cfg.get_float("init.trunc_tol", 1e-12)
    if kind == "pd":
        return lambda gen: sample_pd(theta, gen, tol)
    if kind == "tilted_pd":
        s = cfg.get_float("init.s")
        return lambda gen: sample_tilted_pd(theta, s, gen, tol)
    if kind == "lifted_pd":
        law = build_lifting(cfg)
        return lambda gen: sample_lifted(theta, law, gen, tol)
    if kind == "gamma_pp":
        b = cfg.get_float("init.b", 1.0)
        eps = cfg.get_float("init.eps_cut", 1e-9 / b)
        return lambda gen: sample_gamma_pp(theta, b, gen, eps)
    if kind == "poisson":
        c0 = build_initial_measure(cfg)
        N = cfg.get_int("init.N", 1)
        return lambda gen: sample_poisson_init(c0, N, gen)
    raise ConfigError(f"unknown initial law {kind!r}")


def build_lifting(cfg):
    kind = cfg.get("init.lifting", "deterministic")
    if kind == "deterministic":
        return LiftingLaw("deterministic", v=cfg.get_float("init.lifting.v", 1.0))
    if kind == "gamma":
        return LiftingLaw(
            "gamma",
            shape=cfg.get_float("init.lifting.shape", cfg.get_float("init.theta", 1.0)),
            rate=cfg.get_float("init.lifting.rate", 1.0),
        )
    raise ConfigError(f"unknown lifting law {kind!r}")


def build_initial_measure(cfg):
    kind = cfg.get("init.c0.kind", "gamma")
    if kind == "gamma":
        return InitialMeasure(
            "gamma",
            theta=cfg.get_float("init.c0.theta", 1.0),
            b=cfg.get_float("init.c0.b", 1.0),
            eps_cut=cfg.get_float("init.c0.eps_cut", 1e-6),
        )
    if kind == "uniform":
        return InitialMeasure(
            "uniform",
            lo=cfg.get_float("init.c0.lo", 0.1),
            hi=cfg.get_float("init.c0.hi", 1.0),
            total_number=cfg.get_float("init.c0.total", 1.0),
        )
    raise ConfigError(f"unknown initial measure kind {kind!r}")


def build_grid(cfg):
    kind = cfg.get("grid.kind", "geometric")
    if kind == "geometric":
        return SizeGrid.geometric(
            cfg.get_float("grid.x_min", 1e-4),
            cfg.get_float("grid.x_max", 40.0),
            cfg.get_float("grid.ratio", 2.0**0.25),
        )
    if kind == "graded":
        return SizeGrid.graded(
            cfg.get_float("grid.x_min", 1e-3),
            cfg.get_float("grid.x_max", 24.0),
            cfg.get_float("grid.ratio", 2.0 ** (1.0 / 14.0)),
            cfg.get_float("grid.dx_cap", 0.115),
        )
    if kind == "linear":
        return SizeGrid.linear(
            cfg.get_float("grid.x_min"),
            cfg.get_float("grid.x_max"),
            cfg.get_int("grid.n_bins"),
        )
    raise ConfigError(f"unknown grid kind {kind!r}")


def parse_boxes(spec_text):
    """Boxes like '0.5:1.5' (k=1) or '0.5:1.5,0.3:1.0' (k=2); several boxes
    separated by ';'."""
    boxes = []
    for chunk in str(spec_text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        ivs = []
        for axis in chunk.split(","):
            lo, _, hi = axis.partition(":")
            ivs.append((float(lo), float(hi)))
        boxes.append(tuple(ivs))
    return boxes


# ---------------------------------------------------------------------------
# Export helpers
# ---------------------------------------------------------------------------


def fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(c) for c in row) + "\n")


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")


def _sha256(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Replica-parallel helper
# ---------------------------------------------------------------------------


def _chunk_ranges(n, parts):
    sizes = [n // parts + (1 if i < n % parts else 0) for i in range(parts)]
    out = []
    start = 0
    for s in sizes:
        if s:
            out.append((start, start + s))
        start += s
    return out


def _ensemble_worker(args):
    cfg_raw, scenario, r0, r1 = args
    cfg = ScenarioConfig(scenario, cfg_raw)
    return _collect_replicas(cfg, r0, r1)


def _collect_replicas(cfg, r0, r1):
    """Simulate replicas [r0, r1) and return snapshot arrays (shared code
    path for the trajectory-ensemble scenarios)."""
    pair = build_kernel_pair(cfg)
    gen = build_generator(cfg, pair)
    sampler = build_initial_sampler(cfg)
    seed = cfg.get_int("seed")
    horizon = cfg.get_float("horizon")
    per_unit = cfg.get_float("snapshots_per_unit_time")
    record = bool(cfg.raw.get("record_events", cfg.scenario == "simulate"))
    times = np.linspace(0.0, horizon, int(round(per_unit * horizon)) + 1)
    snaps = []
    events = []
    n_events = 0
    for r in range(r0, r1):
        generator = RngStream(seed, r).generator()
        state0 = sampler(generator)
        traj = simulate(
            state0, gen, generator, t_end=horizon, snapshot_times=times,
            record_events=record,
        )
        snaps.append([s for s in traj.snapshots])
        if record:
            events.append(
                [
                    {
                        "replica": r,
                        "time": e.time,
                        "kind": e.kind,
                        "parents": list(e.parents),
                        "children": list(e.children),
                    }
                    for e in traj.events
                ]
            )
        n_events += traj.n_events
    return times, snaps, n_events, events


def gather_ensemble(cfg):
    n = cfg.get_int("ensemble")
    threads = cfg.get_int("threads")
    if threads <= 1:
        times, snaps, n_events, events = _collect_replicas(cfg, 0, n)
        return stats.EnsembleSnapshots(times, snaps, events or None), n_events
    jobs = [
        (cfg.raw, cfg.scenario, r0, r1) for (r0, r1) in _chunk_ranges(n, threads)
    ]
    all_snaps = []
    all_events = []
    n_events = 0
    times = None
    with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
        for t, snaps, ev, events in pool.map(_ensemble_worker, jobs):
            times = t
            all_snaps.extend(snaps)
            all_events.extend(events)
            n_events += ev
    return stats.EnsembleSnapshots(times, all_snaps, all_events or None), n_events


# ---------------------------------------------------------------------------
# Scenario runners (each returns (pass_flag, outputs, extras))
# ---------------------------------------------------------------------------


def run_simulate(cfg, outdir):
    ens, n_events = gather_ensemble(cfg)
    rows = []
    ok = True
    for r, snaps in enumerate(ens.replicas):
        m0 = float(np.sum(snaps[0]))
        for t, z in zip(ens.times, snaps):
            rows.append([r, float(t)] + [float(v) for v in z])
            if abs(float(np.sum(z)) - m0) > 1e-9 * max(m0, 1.0):
                ok = False
    path = outdir / "snapshots.csv"
    with open(path, "w") as fh:
        fh.write("replica,time,sizes...\n")
        for row in rows:
            fh.write(",".join(fmt(c) for c in row) + "\n")
    outputs = ["snapshots.csv", "summary.json"]
    if ens.events is not None:
        write_jsonl(
            outdir / "events.jsonl",
            (rec for replica in ens.events for rec in replica),
        )
        outputs.append("events.jsonl")
    write_json(
        outdir / "summary.json",
        {
            "replicas": len(ens.replicas),
            "events": n_events,
            "mass_conserved": ok,
        },
    )
    return ok, outputs, {"events": n_events}


def run_correlate(cfg, outdir):
    k = cfg.get_int("correlate.k", 1)
    edges = np.asarray(cfg.get_list("correlate.edges"))
    t = cfg.get_float("correlate.time", cfg.get_float("horizon"))
    if t > 0:
        ens, n_events = gather_ensemble(cfg)
        ti = int(np.searchsorted(ens.times, t))
        states = [snaps[ti] for snaps in ens.replicas]
    else:
        n_events = 0
        sampler = build_initial_sampler(cfg)
        seed = cfg.get_int("seed")
        states = [
            sampler(RngStream(seed, r).generator()).sizes
            for r in range(cfg.get_int("ensemble"))
        ]
    hist = stats.estimate_correlation(states, k, edges)
    rows = []
    nsigma = cfg.get_float("tol.nsigma")
    ok = True
    analytic = _analytic_box_fn(cfg, k)
    for idx in np.ndindex(hist.values.shape):
        box = [(float(edges[i]), float(edges[i + 1])) for i in idx]
        target = analytic(box) if analytic else math.nan
        val, se = float(hist.values[idx]), float(hist.stderr[idx])
        cell_ok = True
        if analytic:
            cell_ok = abs(val - target) <= nsigma * se + 1e-12
            ok = ok and cell_ok
        rows.append(list(idx) + [val, se, target, cell_ok])
    write_csv(
        outdir / "correlation.csv",
        [f"cell_{i}" for i in range(k)] + ["value", "stderr", "analytic", "within"],
        rows,
    )
    write_json(
        outdir / "correlation_meta.json",
        {
            "k": k,
            "edges": edges.tolist(),
            "time": t,
            "n_replicas": hist.n_replicas,
            "nsigma": nsigma,
            "seed": cfg.get_int("seed"),
        },
    )
    return ok, ["correlation.csv", "correlation_meta.json"], {"events": n_events}


def _analytic_box_fn(cfg, k):
    """Analytic cell targets apply to sampled laws (time 0); a stationary
    run can opt in with correlate.analytic = true."""
    t = cfg.get_float("correlate.time", cfg.get_float("horizon"))
    if t > 0.0 and cfg.raw.get("correlate.analytic") is not True:
        return None
    kind = cfg.get("init.kind", "pd")
    theta = cfg.get_float("init.theta", 1.0)
    if kind == "pd":
        return lambda box: stats.pd_box_integral(theta, box)
    if kind == "gamma_pp":
        b = cfg.get_float("init.b", 1.0)
        return lambda box: stats.gamma_pp_box_integral(theta, b, box)
    return None


def run_hierarchy(cfg, outdir):
    pair = build_kernel_pair(cfg)
    ens, n_events = gather_ensemble(cfg)
    boxes = parse_boxes(cfg.get("hierarchy.boxes"))
    times = cfg.get_list("hierarchy.times")
    nsigma = cfg.get_float("tol.nsigma")
    rows = []
    ok = True
    for box_iv in boxes:
        box = stats.TestFunctionBox(box_iv)
        for res in stats.hierarchy_residuals(ens, pair, box, times):
            within = abs(res.residual) <= nsigma * res.residual_se + 1e-12
            ok = ok and within
            rows.append(
                [
                    box.k,
                    ";".join(f"{a}:{b}" for a, b in box_iv),
                    res.t,
                    res.lhs,
                    res.lhs_se,
                    *res.terms.tolist(),
                    res.residual,
                    res.residual_se,
                    within,
                ]
            )
    write_csv(
        outdir / "hierarchy.csv",
        ["k", "box", "time", "lhs", "lhs_se"]
        + [f"I{i}" for i in range(1, 7)]
        + ["residual", "residual_se", "within"],
        rows,
    )
    write_json(
        outdir / "hierarchy_meta.json",
        {
            "n_replicas": len(ens.replicas),
            "nsigma": nsigma,
            "seed": cfg.get_int("seed"),
            "quad_abs_tol": cfg.get_float("tol.quad_abs"),
        },
    )
    return ok, ["hierarchy.csv", "hierarchy_meta.json"], {"events": n_events}


def run_reversibility(cfg, outdir):
    pair = build_kernel_pair(cfg)
    gen = build_generator(cfg, pair)
    sampler = build_initial_sampler(cfg)
    times = cfg.get_list("reversibility.times", [0.0, 0.5, 1.0])

    def psi2(z):
        return float(np.sum(np.asarray(z) ** 2))

    def max_size(z):
        return float(np.max(z)) if len(z) else 0.0

    report = stats.reversibility_report(
        gen,
        sampler,
        {"psi2": psi2, "max_size": max_size},
        times,
        cfg.get_int("ensemble"),
        cfg.get_int("seed"),
        reversal_pair=(psi2, max_size),
        nsigma=cfg.get_float("tol.nsigma"),
    )
    rows = []
    for nm, obs in report["observables"].items():
        for t, m, se, dr in zip(times, obs["means"], obs["stderr"], obs["drift_sigma"]):
            rows.append([nm, t, m, se, dr])
    write_csv(
        outdir / "reversibility.csv",
        ["observable", "time", "mean", "stderr", "drift_sigma"],
        rows,
    )
    write_json(outdir / "reversibility_report.json", report)
    return (
        not report["flagged"],
        ["reversibility.csv", "reversibility_report.json"],
        {},
    )


def run_meanfield(cfg, outdir):
    pair = build_kernel_pair(cfg)
    c0 = build_initial_measure(cfg)
    grid = build_grid(cfg)
    horizon = cfg.get_float("horizon")
    times = cfg.get_list("meanfield.times", [0.5, 1.0])
    boxes = [tuple(b[0]) for b in parse_boxes(cfg.get("meanfield.boxes"))]
    n_values = [int(v) for v in cfg.get_list("meanfield.N_values")]
    redistribution = cfg.get("meanfield.redistribution", "quadratic")
    split = cfg.get_int("meanfield.source_split", 2)

    solver = CFPDESolver(pair, grid, redistribution=redistribution, source_split=split)
    f0 = DensityField.from_initial_measure(grid, c0)
    final, snaps, flux = solver.solve(f0, horizon, snapshot_times=times)
    resid, rel, scale = solver.residual_report(
        DensityField(grid, f0.bin_mass.copy())
    )

    rows = []
    ok = True
    per_n = {}
    snap_times = sorted(set([0.0] + list(times)))
    for N in n_values:
        run = simulate_rescaled(
            N,
            c0,
            pair,
            horizon,
            cfg.get_int("ensemble"),
            cfg.get_int("seed") + N,
            snapshot_times=snap_times,
            grid=grid,
        )
        cmp_rows = compare_empirical_pde(run, snaps, boxes, times)
        per_n[N] = cmp_rows
        for row in cmp_rows:
            rows.append(
                [
                    N,
                    row["time"],
                    f"{row['box'][0]}:{row['box'][1]}",
                    f"{row['snapped'][0]}:{row['snapped'][1]}",
                    row["empirical"],
                    row["empirical_se"],
                    row["deterministic"],
                    row["distance"],
                    row["within"],
                ]
            )
            ok = ok and row["within"]
    write_csv(
        outdir / "meanfield_compare.csv",
        [
            "N",
            "time",
            "box",
            "snapped",
            "empirical",
            "empirical_se",
            "deterministic",
            "distance",
            "within",
        ],
        rows,
    )
    write_csv(
        outdir / "pde_snapshots.csv",
        ["time", "bin", "edge_lo", "edge_hi", "bin_mass"],
        [
            [f.time, i, grid.edges[i], grid.edges[i + 1], f.bin_mass[i]]
            for f in snaps
            for i in range(grid.n_bins)
        ],
    )
    write_json(
        outdir / "meanfield_meta.json",
        {
            "flux": flux,
            "max_abs_residual": float(np.max(np.abs(resid))),
            "bins": grid.n_bins,
            "N_values": n_values,
            "seed": cfg.get_int("seed"),
            "nsigma": cfg.get_float("tol.nsigma"),
        },
    )
    return ok, ["meanfield_compare.csv", "pde_snapshots.csv", "meanfield_meta.json"], {}


def run_moments(cfg, outdir):
    n_max = cfg.get_int("moments.n_max", 4)
    N = cfg.get_int("moments.N", 3)
    c0 = build_initial_measure(cfg)
    moments = [c0.moment(p) for p in range(1, n_max + 1)]
    rows = [
        [n, N, stats.poisson_moment(n, N, moments)] for n in range(1, n_max + 1)
    ]
    write_csv(outdir / "moments.csv", ["n", "N", "moment"], rows)
    return True, ["moments.csv"], {}


def run_spectral(cfg, outdir):
    theta = cfg.get_float("generator.theta", 1.0)
    deltas = cfg.get_list("spectral.deltas", [0.5, 0.2, 0.1, 0.05])
    n = cfg.get_int("ensemble")
    seed = cfg.get_int("seed")
    from coagfrag.samplers import pd_atoms

    gen = RngStream(seed).generator()
    states = [pd_atoms(theta, gen) for _ in range(n)]
    rows = []
    pers = {}
    for d in deltas:
        var = stats.pd_variance_psi(theta, d)
        mean_e, se_e, per = stats.dirichlet_form_estimate(theta, d, states)
        pers[d] = per / var
        rows.append([d, var, mean_e, se_e, mean_e / var, se_e / var])
    ok = True
    nsigma = cfg.get_float("tol.nsigma")
    for d1, d2 in zip(deltas, deltas[1:]):
        diff = pers[d1] - pers[d2]
        m, se = float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(n))
        ok = ok and (m > nsigma * se)
    write_csv(
        outdir / "spectral.csv",
        ["delta", "variance", "dirichlet_form", "dirichlet_se", "ratio", "ratio_se"],
        rows,
    )
    write_json(
        outdir / "spectral_meta.json",
        {"theta": theta, "ensemble": n, "seed": seed, "monotone": ok},
    )
    return ok, ["spectral.csv", "spectral_meta.json"], {}


RUNNERS = {
    "simulate": run_simulate,
    "correlate": run_correlate,
    "hierarchy": run_hierarchy,
    "reversibility": run_reversibility,
    "meanfield": run_meanfield,
    "moments": run_moments,
    "spectral": run_spectral,
}


def run_scenario(cfg, outdir):
    """Execute the configured pipeline; returns the finalized manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "schema": SCHEMA_VERSION,
        "config": cfg.resolved(),
        "seed": cfg.get_int("seed"),
        "status": "running",
    }
    write_json(outdir / "manifest.json", manifest)
    t0 = time.monotonic()
    try:
        ok, outputs, extras = RUNNERS[cfg.scenario](cfg, outdir)
    except Exception as exc:
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["wall_clock_s"] = time.monotonic() - t0
        write_json(outdir / "manifest.json", manifest)
        raise
    manifest["status"] = "pass" if ok else "fail"
    manifest["wall_clock_s"] = time.monotonic() - t0
    manifest["outputs"] = {name: _sha256(outdir / name) for name in outputs}
    manifest.update(extras)
    write_json(outdir / "manifest.json", manifest)
    return manifest


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="coagfrag",
        description="coagulation-fragmentation scenario runner",
    )
    parser.add_argument("command", choices=SCENARIOS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", default="out")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    if cfg.scenario != args.command:
        print(
            f"config declares scenario {cfg.scenario!r} but the command was "
            f"{args.command!r}",
            file=sys.stderr,
        )
        return 2
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
    if args.threads is not None:
        cfg.raw["threads"] = args.threads
    manifest = run_scenario(cfg, args.out)
    print(f"scenario {cfg.scenario}: {manifest['status']}")
    return 0 if manifest["status"] == "pass" else 1


if __name__ == "__main__":
    sys.exit(main())
