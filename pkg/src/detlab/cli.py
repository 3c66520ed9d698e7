"""Command-line front door: ``detlab <subcommand> CONFIG -o OUTDIR``.

Exit codes: 0 success, 2 configuration error, 3 numeric error (the module
error name is printed verbatim).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List

import numpy as np
import yaml

from . import __version__
from .errors import LabError
from .weights import BUILTIN_WEIGHTS, REFERENCES, REGION_TYPES, build_grid, region_from_dict

OUTPUT_SCHEMA = "detlab-output 1"
SUBCOMMANDS = ("equilibrium", "sample", "fekete", "free-energy", "ldp", "rate")

# field -> (type check, default); None default means required
FIELDS = {
    "name": (str, None),
    "weight": (str, None),
    "region": (dict, None),
    "measure": (str, "area"),
    "reference": (str, "fs"),
    "resolution": (int, 128),
    "k_list": (list, [8, 16, 32]),
    "seed": (int, 0),
    "tol": (float, 1e-6),
    "n_samples": (int, 1000),
    "sampler": (str, "exact"),
    "step_scale": (float, 0.2),
    "epsilon": (float, 0.2),
    "test_function": (str, "re"),
    "restarts": (int, 3),
    "compare_resolution": (int, 10),
    "target": (dict, {"kind": "equilibrium"}),
}


class ConfigError(Exception):
    pass


@dataclass
class Scenario:
    name: str
    weight: str
    region: dict
    measure: str
    reference: str
    resolution: int
    k_list: List[int]
    seed: int
    extra: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        d = {k: getattr(self, k) for k in ("name", "weight", "region", "measure", "reference",
                                            "resolution", "k_list", "seed")}
        d.update(self.extra)
        return d


def builtin_scenario(name: str) -> dict:
    path = resources.files("detlab") / "scenarios" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"field 'scenario': unknown built-in scenario {name!r}")
    return yaml.safe_load(path.read_text())


def _check(name, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"field {name!r}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def load_config(path) -> Scenario:
    """Parse a YAML config; ``scenario: <builtin>`` pulls defaults from the registry."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ConfigError(f"{where}{getattr(exc, 'problem', exc)}") from None
    if not isinstance(raw, dict):
        raise ConfigError("line 1: top level must be a mapping")
    data = {}
    if "scenario" in raw:
        data.update(builtin_scenario(raw.pop("scenario")))
    data.update(raw)
    unknown = sorted(set(data) - set(FIELDS))
    if unknown:
        raise ConfigError(f"field {unknown[0]!r}: unknown field")
    out = {}
    for key, (typ, default) in FIELDS.items():
        if key in data:
            out[key] = _check(key, data[key], typ)
        elif default is None:
            raise ConfigError(f"field {key!r}: required")
        else:
            out[key] = default
    if out["weight"] not in BUILTIN_WEIGHTS:
        raise ConfigError(f"field 'weight': unknown weight {out['weight']!r}; choose from {sorted(BUILTIN_WEIGHTS)}")
    if out["reference"] not in REFERENCES:
        raise ConfigError(f"field 'reference': must be one of {sorted(REFERENCES)}")
    if out["region"].get("kind") not in REGION_TYPES:
        raise ConfigError(f"field 'region.kind': must be one of {sorted(REGION_TYPES)}")
    try:
        region_from_dict(out["region"])
    except TypeError as exc:
        raise ConfigError(f"field 'region': {exc}") from None
    if not out["k_list"] or not all(isinstance(k, int) and k >= 1 for k in out["k_list"]):
        raise ConfigError("field 'k_list': must be a nonempty list of positive integers")
    if out["sampler"] not in ("exact", "mcmc"):
        raise ConfigError("field 'sampler': must be 'exact' or 'mcmc'")
    core = {k: out.pop(k) for k in ("name", "weight", "region", "measure", "reference", "resolution", "k_list", "seed")}
    return Scenario(**core, extra=out)


# ----------------------------------------------------------------------------
# Output helpers (a single writer; numbers formatted with repr precision)
# ----------------------------------------------------------------------------


class Outputs:
    def __init__(self, outdir: Path):
        self.dir = Path(outdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []

    def write(self, name: str, text: str):
        (self.dir / name).write_text(text)
        self.files.append(name)

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self.write(name, buf.getvalue())

    def json(self, name: str, obj):
        self.write(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else ("-inf" if f < 0 else ("inf" if f > 0 else "nan"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------


def _setup(sc: Scenario):
    from .weights import reference

    region = region_from_dict(sc.region)
    grid = build_grid(region, sc.resolution, sc.measure)
    return grid, BUILTIN_WEIGHTS[sc.weight], reference(sc.reference)


def cmd_equilibrium(sc: Scenario, out: Outputs):
    from .equilibrium import envelope_radial, ma_radial, radial_profile
    from .rate import rate_functional
    from .equilibrium import equilibrium_qp

    grid, w, ref = _setup(sc)
    qp = equilibrium_qp(grid, w, ref, tol=sc.extra["tol"])
    rep = rate_functional(qp.measure, w, grid, ref, qp=qp)
    out.csv("measure.csv", ["re", "im", "mass"],
            zip(grid.nodes.real, grid.nodes.imag, qp.measure.density))
    out.json("energy_report.json", json.loads(rep.to_json()))
    summary = json.loads(qp.to_json())
    interval = grid.region.log_radial_interval()
    if w.radial and interval is not None:
        ends = [x for x in interval if math.isfinite(x)]
        p = radial_profile(w, -30.0, max(ends + [0.0]) + 4.0, 20001, ends)
        ma = ma_radial(envelope_radial(p, interval), grid)
        summary["radial_l1"] = ma.l1(qp.measure)
    out.json("qp_report.json", summary)


def cmd_sample(sc: Scenario, out: Outputs):
    from .basis import orthonormalize
    from .ensemble import EnsembleSpec, sample_exact_many, sample_mcmc, save_samples

    grid, w, _ = _setup(sc)
    rows = []
    n = sc.extra["n_samples"]
    for k in sc.k_list:
        e = EnsembleSpec(orthonormalize(grid, w, k), w, grid)
        seed = [sc.seed, k]
        if sc.extra["sampler"] == "exact":
            configs = sample_exact_many(e, n, np.random.SeedSequence(seed))
            acc = float("nan")
        else:
            thin = 20 * e.N
            res = sample_mcmc(e, max(100 * e.N, (n + 1) * thin), sc.extra["step_scale"],
                              np.random.SeedSequence(seed), burn_in=100 * e.N, record_every=thin)
            configs, acc = res.samples[:n], res.acceptance
        name = f"samples_k{k}.jsonl"
        save_samples(out.dir / name, configs, k, w.label, sc.seed, sc.extra["sampler"])
        out.files.append(name)
        stats = np.array([[c.points.real.mean(), c.points.imag.mean(), (np.abs(c.points) ** 2).mean()]
                          for c in configs])
        m, s = stats.mean(axis=0), stats.std(axis=0, ddof=1) / math.sqrt(len(stats))
        rows.append([k, len(configs), m[0], s[0], m[1], s[1], m[2], s[2], acc])
    out.csv("sample_summary.csv", ["k", "n", "mean_re", "se_re", "mean_im", "se_im", "mean_abs2", "se_abs2",
                                   "acceptance"], rows)


def cmd_fekete(sc: Scenario, out: Outputs):
    from .equilibrium import equilibrium_qp
    from .ldp import fekete_ascent, smooth_to_grid, transfer_measure, _average
    from .equilibrium import GridMeasure

    grid, w, ref = _setup(sc)
    region = region_from_dict(sc.region)
    coarse = build_grid(region, sc.extra["compare_resolution"], sc.measure)
    eq = equilibrium_qp(grid, w, ref, tol=sc.extra["tol"])
    eqc = transfer_measure(eq.measure, coarse)
    eqc = GridMeasure(coarse, _average(eqc.density, coarse))
    rows = []
    for k in sc.k_list:
        r = fekete_ascent(grid, w, k, sc.extra["restarts"], [sc.seed, k], ref)
        out.csv(f"fekete_k{k}.csv", ["re", "im"], zip(r.config.points.real, r.config.points.imag))
        rows.append([k, r.objective, r.objective / k**2, smooth_to_grid(r.config, coarse).l1(eqc)])
    out.csv("fekete_summary.csv", ["k", "objective", "objective_over_k2", "l1_to_equilibrium"], rows)


def cmd_free_energy(sc: Scenario, out: Outputs):
    from .ldp import free_energy_curve, predicted_free_energy

    grid, w, ref = _setup(sc)
    c = free_energy_curve(grid, w, ref, sc.k_list)
    out.csv("free_energy.csv", ["k", "log_z", "minus_log_z_over_k2", "log_det_gram_over_k2"],
            zip(c.k, c.log_z, c.free_energy, c.gram_curve))
    summary = {"limit": c.limit, "fit_residual": c.residual}
    try:
        pred = predicted_free_energy(grid, w, ref)
        summary.update(predicted=pred, relative_error=abs(c.limit - pred) / abs(pred) if pred else None)
    except ValueError as exc:
        summary["predicted"] = None
        summary["note"] = str(exc)
    out.json("free_energy_summary.json", summary)


def cmd_ldp(sc: Scenario, out: Outputs):
    from .equilibrium import equilibrium_qp
    from .ldp import DeviationExperiment, deviation_probability, rate_fit, rate_prediction

    grid, w, ref = _setup(sc)
    x = DeviationExperiment(sc.extra["test_function"], sc.extra["epsilon"], sc.k_list,
                            sc.extra["n_samples"], sc.extra["sampler"], sc.seed)
    eq = equilibrium_qp(grid, w, ref, tol=sc.extra["tol"])
    pred = rate_prediction(grid, w, ref, x.test_function, x.epsilon, eq=eq)
    est = deviation_probability(x, grid, w, eq_mean=pred.eq_mean, ref=ref)
    out.csv("deviation.csv", ["k", "hits", "n", "estimate", "wilson_low", "wilson_high"],
            [[e.k, e.hits, e.n, e.estimate, e.lower, e.upper] for e in est])
    summary = {"prediction": {"inf_value": pred.inf_value, "side": pred.side, "one_sided": pred.one_sided,
                              "eq_mean": pred.eq_mean},
               "tolerances": {"rate_factor": 2.0}}
    try:
        fit = rate_fit(est, sc.k_list)
        summary["fit"] = {"k": fit.k, "r_hat": fit.r_hat, "limit": fit.limit, "nondecreasing": fit.nondecreasing,
                          "residual": fit.residual,
                          "within_factor_2": bool(pred.inf_value / 2 <= fit.limit <= 2 * pred.inf_value)}
    except LabError as exc:
        summary["fit"] = {"error": exc.name, "message": str(exc)}
    out.json("ldp_summary.json", summary)


def cmd_rate(sc: Scenario, out: Outputs):
    from .equilibrium import equilibrium_qp, uniform_measure
    from .rate import rate_functional

    grid, w, ref = _setup(sc)
    qp = equilibrium_qp(grid, w, ref, tol=sc.extra["tol"])
    t = sc.extra["target"]
    kind = t.get("kind")
    if kind == "equilibrium":
        mu = qp.measure
    elif kind == "uniform":
        mu = uniform_measure(grid)
    elif kind == "uniform-disk":
        r = float(t.get("radius", 1.0))
        mu = uniform_measure(grid, lambda z: np.abs(z) <= r)
    else:
        raise ConfigError("field 'target.kind': must be equilibrium, uniform or uniform-disk")
    rows = []
    for route in ("green-double-integral", "dirichlet-form"):
        if route == "dirichlet-form" and grid.lattice is None:
            continue
        rep = rate_functional(mu, w, grid, ref, qp=qp, route=route)
        rows.append(json.loads(rep.to_json()))
    out.json("energy_report.json", rows)


COMMANDS = {"equilibrium": cmd_equilibrium, "sample": cmd_sample, "fekete": cmd_fekete,
            "free-energy": cmd_free_energy, "ldp": cmd_ldp, "rate": cmd_rate}


def write_manifest(out: Outputs, sub: str, sc: Scenario):
    from .ldp import thread_count

    lines = [f"schema: {OUTPUT_SCHEMA}", f"detlab_version: {__version__}", f"subcommand: {sub}",
             f"threads: {thread_count()}", "config: " + json.dumps(sc.resolved(), sort_keys=True),
             "artifacts: " + json.dumps(sorted(out.files))]
    (out.dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def build_parser():
    p = argparse.ArgumentParser(prog="detlab", description="Determinantal ensembles and equilibrium measures.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("config", help="YAML configuration file")
    p.add_argument("-o", "--output", default="detlab-out", help="output directory")
    return p


def run(subcommand: str, config_path, output_dir) -> int:
    if subcommand not in COMMANDS:
        print(build_parser().format_usage(), file=sys.stderr, end="")
        return 2
    try:
        sc = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Outputs(output_dir)
    try:
        COMMANDS[subcommand](sc, out)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except LabError as exc:
        print(f"{exc.name}: {exc}", file=sys.stderr)
        return 3
    write_manifest(out, subcommand, sc)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.output)


if __name__ == "__main__":
    sys.exit(main())
