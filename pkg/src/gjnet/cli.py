"""``gjn`` command-line front end.

Every subcommand reads one JSON config (``--config``) and writes its
artifacts under ``--out``.  Exit codes: 0 success, 1 analysis error,
2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, des, nlmp, ph, routing, service, traffic
from .errors import ConfigError, GJNError, NotConverged
from .network import NetworkSpec
from .rates import RateTrace, detect_flattening

SCHEMA_VERSION = 1

SCHEMA = {
    "": {"schema_version", "seed", "network", "chain", "simulate", "nlmp", "verify", "regularity"},
    "network": {"P", "V", "services", "N", "mode", "K", "allow_self", "force_open", "initial",
                "queue_cap"},
    "chain": {"spec", "K_schedule", "tol", "n_max", "zero_threshold", "contraction_n"},
    "simulate": {"horizon", "warmup", "probes", "replications", "bin_width", "snapshot_interval"},
    "nlmp": {"T", "dt", "n_max", "tau_max", "init", "init_b", "window", "tol", "overflow_bound",
             "record_every"},
    "verify": {"tests", "bin_width", "tol", "warmup", "relative"},
    "regularity": {"delta", "points"},
}
VERIFY_TESTS = ("ks", "dispersion", "correlation", "tv", "initial_state")


class Refused(GJNError):
    """A stage declined to run (e.g. simulation of an overloaded network)."""


# -- config handling -------------------------------------------------------------

def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    check_schema(doc)
    return doc


def check_schema(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    for section, allowed in SCHEMA.items():
        part = doc if section == "" else doc.get(section)
        if part is None:
            continue
        if not isinstance(part, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = sorted(set(part) - allowed)
        if unknown:
            where = f"section {section!r}" if section else "top level"
            raise ConfigError(f"unknown key(s) at {where}: {', '.join(unknown)}")
    tests = doc.get("verify", {}).get("tests", VERIFY_TESTS)
    bad = sorted(set(tests) - set(VERIFY_TESTS))
    if bad:
        raise ConfigError(f"unknown verify test(s): {', '.join(bad)}")


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _need(doc, section):
    if section not in doc:
        raise ConfigError(f"config has no {section!r} section")
    return doc[section]


def build_network(doc: dict) -> NetworkSpec:
    net = _need(doc, "network")
    sim = doc.get("simulate", {})
    try:
        services = [service.from_config(s) for s in net["services"]]
        P = routing.RoutingMatrix(np.asarray(net["P"], dtype=float))
        mode = net.get("mode", "open")
        V = net.get("V", [0.0] * P.m)
        horizon = float(sim.get("horizon", 1000.0))
        return NetworkSpec(
            P=P, V=np.asarray(V, dtype=float), services=services,
            N=int(net.get("N", 1)), mode=mode, K=int(net.get("K", 0)),
            horizon=horizon, warmup=sim.get("warmup"),
            force_open=bool(net.get("force_open", False)),
            allow_self=bool(net.get("allow_self", True)),
            initial=net.get("initial"), queue_cap=int(net.get("queue_cap", 10**6)),
            bin_width=float(sim.get("bin_width", 1.0)),
            snapshot_interval=float(sim.get("snapshot_interval", 1.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"network section missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid network section: {exc}") from None


def _probe_list(spec: NetworkSpec, probes) -> list[int]:
    S = spec.m * spec.N
    if probes is None or probes == "all":
        return list(range(S))
    out = []
    for p in probes:
        try:
            i, k = int(p[0]), int(p[1])
        except (TypeError, ValueError, IndexError):
            raise ConfigError("probes must be \"all\" or a list of [type, copy] pairs") from None
        if not (1 <= i <= spec.m and 1 <= k <= spec.N):
            raise ConfigError(f"probe [{i}, {k}] outside 1..{spec.m} x 1..{spec.N}")
        out.append((i - 1) * spec.N + (k - 1))
    return out


def _parse_init(entries, m):
    if entries is None:
        return None
    if not isinstance(entries, list) or len(entries) != m:
        raise ConfigError(f"nlmp init needs one entry per type ({m})")
    out = []
    for e in entries:
        if e is None or isinstance(e, (int, float)) and not isinstance(e, bool):
            out.append(e)
        elif isinstance(e, list) and len(e) == 2:
            out.append((int(e[0]), float(e[1])))
        elif isinstance(e, dict):
            out.append({int(k): float(v) for k, v in e.items()})
        else:
            raise ConfigError(f"unsupported nlmp initial state {e!r}")
    return out


# -- output helpers ---------------------------------------------------------------

class Run:
    def __init__(self, out: Path, doc: dict, seed: int, command: str, quiet: bool):
        self.out = out
        self.doc = doc
        self.seed = seed
        self.command = command
        self.quiet = quiet
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        return self.out / name

    def write_json(self, name, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def say(self, msg) -> None:
        if not self.quiet:
            print(msg)

    def manifest(self, status: str, artifacts=None) -> None:
        import scipy
        import statsmodels
        self.write_json("manifest.json", {
            "command": self.command,
            "config_hash": config_hash(self.doc),
            "config": self.doc,
            "seed": self.seed,
            "status": status,
            "artifacts": sorted(artifacts or []),
            "versions": {"gjnet": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "statsmodels": statsmodels.__version__,
                         "python": platform.python_version()},
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        })


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


# -- stages ------------------------------------------------------------------------

def stage_chain(run: Run) -> dict:
    opts = _need(run.doc, "chain")
    chain = routing.chain_from_json(_need(opts, "spec"))
    schedule = opts.get("K_schedule")
    tol = float(opts.get("tol", 1e-10))
    verdict = routing.transience_verdict(chain, schedule, tol=tol, n_max=opts.get("n_max"),
                                         zero_threshold=float(opts.get("zero_threshold", 1e-6)))
    out = {"verdict": verdict.to_dict()}
    try:
        ls = routing.lambda_star(chain, schedule, tol=tol, n_max=opts.get("n_max"),
                                 zero_threshold=float(opts.get("zero_threshold", 1e-6)))
        out["lambda_star"] = ls.to_dict()
    except GJNError as exc:
        out["lambda_star"] = {"error": f"{type(exc).__name__}: {exc}"}
    PK = routing.as_matrix(chain, max(schedule) if schedule else None)
    n = int(opts.get("contraction_n", PK.m))
    out["contraction"] = {"n": n, "coefficient": routing.contraction_coefficient(PK, n)}
    run.write_json("chain.json", out)
    run.say(f"zero_only_invariant: {verdict.zero_only_invariant}")
    return out


def stage_traffic(run: Run, spec: NetworkSpec) -> tuple[dict, traffic.LoadReport]:
    val = routing.validate_open(spec.P)
    sol = traffic.solve_traffic(spec.V, spec.P)
    load = traffic.check_underload(sol.vbar, spec.service_means)
    out = {"validate_open": val.to_dict(), "traffic": sol.to_dict(), "load": load.to_dict()}
    run.write_json("traffic.json", out)
    run.say(f"rho: {np.array2string(load.rho, precision=6)}  underloaded: {load.underloaded}")
    return out, load


def stage_regularity(run: Run, spec: NetworkSpec) -> list:
    opts = run.doc.get("regularity", {})
    delta = float(opts.get("delta", 0.5))
    reports = []
    for i, d in enumerate(spec.services):
        grid = service.default_grid(d, int(opts["points"])) if "points" in opts else None
        rep = service.validate_regularity(d, grid, delta=delta)
        reports.append({"type": i + 1, **rep.to_dict()})
    run.write_json("regularity.json", reports)
    for r in reports:
        run.say(f"type {r['type']}: regularity {'pass' if r['passed'] else 'fail'}")
    return reports


def stage_simulate(run: Run, spec: NetworkSpec) -> dict:
    opts = run.doc.get("simulate", {})
    reps = int(opts.get("replications", 1))
    if reps < 1:
        raise ConfigError("replications must be at least 1")
    probes = _probe_list(spec, opts.get("probes", "all"))
    seeds = [run.seed + r for r in range(reps)]
    pooled = des.replicate(spec, seeds, probes=probes)
    runs = pooled.runs
    bw = spec.bin_width
    n_bins = min(r.n_bins for r in runs)
    arr = sum(r.arrivals[:, :n_bins] for r in runs)
    dep = sum(r.departures[:, :n_bins] for r in runs)
    scale = spec.N * bw * reps
    trace = RateTrace((np.arange(n_bins) + 0.5) * bw, arr / scale, dep / scale)
    trace.write_csv(run.path("sim_rates.csv"))
    hist = pooled.qlen_hist
    _write_rows(run.path("queue_marginals.csv"), ["type", "n", "prob"],
                [(i + 1, n, float(hist[i, n] / hist[i].sum()))
                 for i in range(spec.m) for n in range(hist.shape[1]) if hist[i].sum() > 0])
    rows = []
    for r in runs:
        for p, times in zip(r.probes, r.probe_arrivals):
            i, k = divmod(p, spec.N)
            rows.extend((r.seed, i + 1, k + 1, float(t)) for t in times)
    _write_rows(run.path("probe_arrivals.csv"), ["seed", "type", "copy", "t"], rows)
    resid = des.balance_residual(trace, spec.V if spec.mode == "open" else np.zeros(spec.m),
                                 spec.P, after=spec.warmup)
    out = {"spec_hash": spec.spec_hash(), "horizon": spec.horizon, "warmup": spec.warmup,
           "bin_width": bw, "N": spec.N, "m": spec.m, "seeds": seeds,
           "pooled": pooled.to_summary(), "balance_residual": resid,
           "mean_in_type": np.mean([r.mean_in_type for r in runs], axis=0),
           "replications": [r.to_summary() for r in runs]}
    run.write_json("sim_summary.json", out)
    run.say(f"mean in system: {pooled.mean_in_system:.6g}")
    return out


def stage_nlmp(run: Run, spec: NetworkSpec) -> dict:
    opts = _need(run.doc, "nlmp")
    T = float(opts.get("T", 500.0))
    kw = dict(dt=opts.get("dt"), n_max=int(opts.get("n_max", 200)), tau_max=opts.get("tau_max"),
              overflow_bound=float(opts.get("overflow_bound", 1e-6)),
              record_every=int(opts.get("record_every", 1)))
    res = nlmp.integrate(spec, T, init=_parse_init(opts.get("init"), spec.m), **kw)
    res.trace.write_csv(run.path("nlmp_rates.csv"))
    res.write_measures_csv(run.path("nlmp_measures.csv"), threshold=1e-15)
    window = float(opts.get("window", T / 10))
    tol = float(opts.get("tol", 1e-3))
    out = {"T": T, "dt": res.trace.times[1] - res.trace.times[0] if res.trace.times.size > 1 else None,
           "mean_customers_initial": res.mean_customers[0],
           "mean_customers_final": res.mean_customers[-1],
           "overflow": [mz.overflow for mz in res.measures]}
    converged = True
    try:
        out["flattening"] = detect_flattening(res.trace, window, tol).to_dict()
        out["converged"] = True
    except NotConverged as exc:
        converged = False
        out["converged"] = False
        out["oscillation"] = exc.oscillation
    if "init_b" in opts:
        res_b = nlmp.integrate(spec, T, init=_parse_init(opts["init_b"], spec.m), **kw)
        res_b.trace.write_csv(run.path("nlmp_rates_b.csv"))
        try:
            out["flattening_b"] = detect_flattening(res_b.trace, window, tol).to_dict()
        except NotConverged as exc:
            converged = False
            out["oscillation_b"] = exc.oscillation
    run.write_json("nlmp_convergence.json", out)
    if "flattening" in out:
        run.say(f"lambda_hat: {np.array2string(np.asarray(out['flattening']['lambda_hat']), precision=6)}")
    if not converged:
        raise NotConverged("mean-field rates did not flatten; see nlmp_convergence.json")
    return out


def _read_sim(run: Run):
    try:
        summary = json.loads(run.path("sim_summary.json").read_text())
        marg = np.loadtxt(run.path("queue_marginals.csv"), delimiter=",", skiprows=1, ndmin=2)
        probes = np.loadtxt(run.path("probe_arrivals.csv"), delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"simulation artifacts missing (run `simulate` first): {exc}") from None
    return summary, marg, probes


def stage_verify(run: Run, spec: NetworkSpec) -> ph.PHReport:
    opts = run.doc.get("verify", {})
    tests = set(opts.get("tests", VERIFY_TESTS))
    report = ph.PHReport(N=spec.N)
    extra: dict = {}
    if tests & {"ks", "dispersion", "correlation", "tv"}:
        summary, marg, probes = _read_sim(run)
        warmup, horizon = summary["warmup"], summary["horizon"]
        bw = float(opts.get("bin_width", summary["bin_width"]))
        n = int((horizon - warmup) // bw)
        edges = warmup + np.arange(n + 1) * bw
        groups = _split_probes(probes)
        gaps_by_type: dict = {}
        for seed in sorted({key[0] for key in groups}):
            counts = []
            for (s, i, k), t in ((key, t) for key, t in groups.items() if key[0] == seed):
                t = t[t >= warmup]
                gaps = np.diff(t)
                gaps_by_type.setdefault(i, []).append(gaps)
                if "ks" in tests and gaps.size >= 100:
                    r = ph.ks_exponential(gaps)
                    report.ks.append({"seed": s, "type": i, "copy": k, "statistic": r.statistic,
                                      "pvalue": r.pvalue, "n": r.n})
                c = np.histogram(t, bins=edges)[0]
                counts.append(c)
                if "dispersion" in tests and n >= 50 and c.mean() > 0:
                    report.dispersion.append(ph.dispersion_index(c))
            if "correlation" in tests and len(counts) >= 2 and n >= 100:
                pairs, r, z = ph.pairwise_flow_z(np.array(counts))
                report.correlations.extend(
                    {"seed": seed, "pair": [int(a), int(b)], "r": float(x), "z": float(y)}
                    for (a, b), x, y in zip(pairs, r, z))
        if "ks" in tests:
            extra["pooled_ks"] = {str(i): ph.pooled_ks(g).statistic
                                  for i, g in sorted(gaps_by_type.items())
                                  if sum(x.size for x in g) >= 100}
        if "tv" in tests:
            sol = traffic.solve_traffic(spec.V, spec.P) if spec.mode == "open" else None
            for i, d in enumerate(spec.services):
                emp = marg[marg[:, 0] == i + 1, 2]
                if sol is None:
                    continue
                ref = _reference_marginal(sol.vbar[i], d)
                report.tv.append(ph.compare_stationary(emp, ref))
    if "initial_state" in tests and run.path("nlmp_rates_b.csv").exists():
        ta = RateTrace.read_csv(run.path("nlmp_rates.csv"))
        tb = RateTrace.read_csv(run.path("nlmp_rates_b.csv"))
        T = float(ta.times[-1])
        ind = ph.initial_state_independence(
            ta, tb, warmup=float(opts.get("warmup", 0.4 * T)), tol=float(opts.get("tol", 0.02)),
            relative=bool(opts.get("relative", True)))
        report.initial_state_divergence = ind.divergence
        extra["initial_state"] = ind.to_dict()
    doc = report.to_dict()
    doc["summary"] = report.summary_row()
    doc.update(extra)
    run.write_json("ph_report.json", doc)
    report.write_summary_csv(run.path("ph_summary.csv"))
    row = report.summary_row()
    run.say("PH: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                               for k, v in row.items()))
    return report


def _split_probes(rows: np.ndarray) -> dict:
    """``{(seed, type, copy): sorted arrival times}`` from probe_arrivals.csv rows."""
    if rows.size == 0:
        return {}
    order = np.lexsort((rows[:, 3], rows[:, 2], rows[:, 1], rows[:, 0]))
    rows = rows[order]
    keys = rows[:, :3].astype(np.int64)
    cut = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
    starts = np.concatenate([[0], cut])
    ends = np.concatenate([cut, [len(rows)]])
    return {tuple(int(x) for x in keys[a]): rows[a:b, 3] for a, b in zip(starts, ends)}


def _reference_marginal(lam, dist, n_max: int = 200) -> np.ndarray:
    """Single-server stationary queue-length law at Poisson rate ``lam``."""
    rho = lam * dist.mean
    if dist.family == "exponential":
        return (1 - rho) * rho ** np.arange(n_max + 1)
    return nlmp.stationary_single_node(lam, dist, n_max=n_max)


# -- commands ------------------------------------------------------------------------

def cmd_chain(run: Run) -> int:
    stage_chain(run)
    return 0


def cmd_traffic(run: Run) -> int:
    spec = build_network(run.doc)
    stage_traffic(run, spec)
    return 0


def cmd_validate_dist(run: Run) -> int:
    spec = build_network(run.doc)
    reports = stage_regularity(run, spec)
    return 0 if all(r["passed"] for r in reports) else 1


def cmd_simulate(run: Run) -> int:
    spec = build_network(run.doc)
    spec.validate()
    if spec.mode == "open":
        _, load = stage_traffic(run, spec)
        if not load.underloaded and not run.force:
            raise Refused(f"overloaded types {load.overloaded_types}; simulation refused "
                          "(use --force)")
    stage_simulate(run, spec)
    return 0


def cmd_nlmp(run: Run) -> int:
    spec = build_network(run.doc)
    spec.validate()
    stage_nlmp(run, spec)
    return 0


def cmd_verify_ph(run: Run) -> int:
    spec = build_network(run.doc)
    stage_verify(run, spec)
    return 0


def cmd_pipeline(run: Run) -> int:
    spec = build_network(run.doc)
    stages: dict = {}
    run.stages = stages

    def stage(name, fn, *args):
        run.current_stage = name
        result = fn(*args)
        stages[name] = "ok"
        return result

    stage("validate", spec.validate)
    stage("regularity", stage_regularity, run, spec)
    wants = [s for s in ("simulate", "nlmp") if s in run.doc]
    if spec.mode == "open":
        _, load = stage("traffic", stage_traffic, run, spec)
        run.current_stage = "underload"
        if not load.underloaded:
            stages["underload"] = f"overloaded types {load.overloaded_types}"
            if wants and not run.force:
                raise Refused(f"overloaded types {load.overloaded_types}; "
                              f"{' and '.join(wants)} refused (use --force)")
            if not wants:
                run.write_json("pipeline.json", {"stages": stages, "verdict": "overloaded"})
                run.say("verdict: overloaded")
                return 0
        else:
            stages["underload"] = "ok"
    if "simulate" in run.doc:
        stage("simulate", stage_simulate, run, spec)
    if "nlmp" in run.doc:
        stage("nlmp", stage_nlmp, run, spec)
    if "simulate" in run.doc or "nlmp" in run.doc:
        if "verify" in run.doc or "simulate" in run.doc:
            stage("verify", stage_verify, run, spec)
    run.write_json("pipeline.json", {"stages": stages, "verdict": "ok"})
    return 0


COMMANDS = {
    "chain": cmd_chain,
    "traffic": cmd_traffic,
    "validate-dist": cmd_validate_dist,
    "simulate": cmd_simulate,
    "nlmp": cmd_nlmp,
    "verify-ph": cmd_verify_ph,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gjn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gjn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: config or 0)")
        p.add_argument("--out", default="gjn_out", help="output directory")
        p.add_argument("--force", action="store_true", help="simulate even when overloaded")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        doc = load_config(args.config)
        seed = args.seed if args.seed is not None else doc.get("seed", 0)
        if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
    except ConfigError as exc:
        print(f"gjn: config error: {exc}", file=sys.stderr)
        return 2
    run = Run(Path(args.out), doc, seed, args.command, args.quiet)
    run.force = args.force
    run.current_stage = args.command
    artifacts_before = set(os.listdir(run.out))
    try:
        code = COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"gjn: config error: {exc}", file=sys.stderr)
        code, status = 2, f"config error: {exc}"
    except GJNError as exc:
        msg = f"stage {run.current_stage}: {type(exc).__name__}: {exc}"
        print(f"gjn: {msg}", file=sys.stderr)
        if args.command == "pipeline":
            stages = getattr(run, "stages", {})
            stages[run.current_stage] = f"{type(exc).__name__}: {exc}"
            run.write_json("pipeline.json", {"stages": stages, "verdict": "failed",
                                             "failed_stage": run.current_stage})
        code, status = 1, msg
    else:
        status = "ok" if code == 0 else "failed"
    artifacts = (set(os.listdir(run.out)) | artifacts_before) - {"manifest.json"}
    run.manifest(status, artifacts)
    return code


if __name__ == "__main__":
    sys.exit(main())
