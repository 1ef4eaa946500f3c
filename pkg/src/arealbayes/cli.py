"""Command-line front door.

Wires ingestion -> graph -> EDA -> fit -> evaluation, with a reproducible
run manifest (command line, config snapshot, input digests, seed, version,
duration, outputs) written to the output directory on every run, including
failures.  Output files are written atomically (temp file + rename).
Exit codes: 0 success, 2 validation failure (before any computation),
1 computation failure.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, esda, graph as graph_mod, model_eval, pipeline, synth
from .car_spatial import Hyperpriors, MCMCConfig, fit_spatial, fitted_and_residuals
from .st_ar import fit_quality, fit_st

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_VALIDATION = 2


class ValidationFailure(Exception):
    pass


def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects manifest data; every invocation leaves exactly one manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out_dir = Path(args.out_dir)
        self.inputs: dict = {}
        self.outputs: list = []
        self.start = time.monotonic()

    def register_input(self, path):
        path = Path(path)
        if not path.exists():
            raise ValidationFailure(f"missing input file: {path}")
        self.inputs[str(path)] = _sha256(path)
        return path

    def write_csv(self, name, header, rows):
        path = self.out_dir / name
        _atomic_write_text(path, _csv_text(header, rows))
        self.outputs.append(str(path))
        return path

    def write_manifest(self, error=None):
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "command_line": self.argv,
            "subcommand": self.args.subcommand,
            "config": config,
            "inputs": self.inputs,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "duration_s": round(time.monotonic() - self.start, 3),
            "outputs": sorted(self.outputs),
        }
        if error is not None:
            manifest["error"] = str(error)
        _atomic_write_text(self.out_dir / "manifest.json",
                           json.dumps(manifest, indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# Shared loading helpers


def _load_graph(run: Run):
    return graph_mod.read_graph(run.register_input(run.args.graph))


def _load_panel(run: Run):
    return pipeline.read_panel_csv(run.register_input(run.args.panel))


def _parse_names(raw):
    return [n.strip() for n in raw.split(",") if n.strip()] if raw else []


def _hyper_from_args(args) -> Hyperpriors:
    return Hyperpriors(a1=args.a1, b1=args.b1, a2=args.a2, b2=args.b2,
                       beta_var=args.beta_var)


def _config_from_args(args) -> MCMCConfig:
    return MCMCConfig(n_iterations=args.iterations, burn_in=args.burn_in,
                      thin=args.thin, seed=args.seed, rho_step=args.rho_step)


def _write_summary(run: Run, name, summary: model_eval.FitSummary):
    rows = [(param, v["mean"], v["q2.5"], v["q97.5"], v["ess"])
            for param, v in summary.table.items()]
    rows.append(("DIC", summary.dic, "", "", ""))
    rows.append(("pD", summary.p_d, "", "", ""))
    rows.append(("WAIC", summary.waic, "", "", ""))
    rows.append(("pWAIC", summary.p_waic, "", "", ""))
    return run.write_csv(name, ["parameter", "mean", "q2.5", "q97.5", "ess"], rows)


def _design_from_panel(panel, args, weekend=False):
    predictors = _parse_names(args.predictors)
    trend = getattr(args, "trend", "none")
    X, names = pipeline.build_design(
        panel, predictors, trend=trend, intercept=True,
        trend_divisor=getattr(args, "trend_divisor", pipeline.DEFAULT_TREND_DIVISOR),
        weekend=weekend)
    return X, names


# ---------------------------------------------------------------------------
# Subcommands


def cmd_adjacency(run: Run):
    args = run.args
    polygons = graph_mod.read_geojson(run.register_input(args.geojson),
                                      id_property=args.id_property)
    rule = graph_mod.ContiguityRule(kind=args.rule,
                                    snap_tolerance=args.snap_tolerance)
    g = graph_mod.build_contiguity(polygons, rule)
    out = run.out_dir / "adjacency.csv"
    run.out_dir.mkdir(parents=True, exist_ok=True)
    graph_mod.write_graph(g, out)
    run.outputs.append(str(out))
    run.outputs.append(str(out) + ".summary.json")
    if g.islands():
        print(f"warning: islands (degree-0 units): {list(g.islands())}",
              file=sys.stderr)


def cmd_ingest(run: Run):
    args = run.args
    g = _load_graph(run)
    year = args.year
    start, end = dt.date(year, 1, 1), dt.date(year, 12, 31)
    daily = args.granularity == "daily"
    panel = pipeline.AreaPanel(
        unit_ids=[str(u) for u in g.unit_ids],
        dates=[start + dt.timedelta(days=i) for i in range((end - start).days + 1)]
        if daily else None)
    transforms = {}
    for spec in args.transform or []:
        if "=" not in spec:
            raise ValidationFailure(f"bad --transform {spec!r}; expected NAME=KIND")
        name, kind = spec.split("=", 1)
        transforms[name] = pipeline.TransformSpec(kind=kind)

    def add(name, values):
        spec = transforms.get(name, pipeline.TransformSpec("none"))
        panel.add(name, pipeline.apply_transform(values, spec, name), spec.kind)

    if args.trips:
        records = pipeline.read_events_csv(run.register_input(args.trips),
                                           args.trips_timestamp_col,
                                           args.trips_area_col)
        counts, report = pipeline.aggregate_events(
            records, panel.unit_ids, args.granularity, start, end)
        add("rideshares", counts)
        print(f"trips: accepted={report.accepted} dropped={report.dropped_area} "
              f"skipped={report.skipped}", file=sys.stderr)
    if args.crimes:
        records = pipeline.read_events_csv(run.register_input(args.crimes),
                                           args.crimes_timestamp_col,
                                           args.crimes_area_col)
        counts, report = pipeline.aggregate_events(
            records, panel.unit_ids, args.granularity, start, end)
        add("crimes", counts)
        print(f"crimes: accepted={report.accepted} dropped={report.dropped_area} "
              f"skipped={report.skipped}", file=sys.stderr)
    if args.snapshot:
        columns = pipeline.read_snapshot_csv(run.register_input(args.snapshot),
                                             args.snapshot_id_col)
        for name, per_area in columns.items():
            missing = [u for u in panel.unit_ids if u not in per_area]
            if missing:
                raise ValidationFailure(
                    f"snapshot column {name!r} missing areas {missing[:5]}")
            col = np.array([per_area[u] for u in panel.unit_ids])
            add(name, np.repeat(col[:, None], panel.n_periods, axis=1))

    out = run.out_dir / "panel.csv"
    run.out_dir.mkdir(parents=True, exist_ok=True)
    pipeline.write_panel_csv(panel, out)
    run.outputs.append(str(out))


def cmd_esda(run: Run):
    args = run.args
    g = _load_graph(run)
    panel = _load_panel(run)
    names = _parse_names(args.variables) or sorted(panel.values)
    for name in names:
        if name not in panel.values:
            raise ValidationFailure(f"unknown variable {name!r} in panel")
    columns = [panel.values[name].ravel() for name in names]
    R = esda.pearson_matrix(columns, names)
    run.write_csv("correlation.csv", ["variable"] + names,
                  [[name] + [float(R[i, j]) for j in range(len(names))]
                   for i, name in enumerate(names)])
    moran_rows = []
    for name in names:
        values = panel.values[name].mean(axis=1)
        result = esda.permutation_pvalue(
            values, g, scheme=args.weights_scheme,
            n_permutations=args.permutations, seed=args.seed,
            threads=args.threads)
        moran_rows.append((name, result.statistic, result.expected_null,
                           result.p_value, result.weight_scheme))
        run.write_csv(f"choropleth_{name.replace(' ', '_')}.csv",
                      ["area_id", "value"],
                      list(zip(panel.unit_ids, map(float, values))))
    run.write_csv("moran.csv", ["variable", "I", "expected", "p", "scheme"],
                  moran_rows)


def _write_draws(run: Run, draws: dict, fmt: str):
    if fmt == "npz":
        path = run.out_dir / "draws.npz"
        fd, tmp = tempfile.mkstemp(dir=run.out_dir, prefix="draws.", suffix=".npz")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, **draws)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        run.outputs.append(str(path))
    else:
        names = list(draws)
        columns = [np.asarray(draws[n], dtype=float) for n in names]
        rows = list(zip(*[c.tolist() for c in columns]))
        run.write_csv("draws.csv", names, rows)


def cmd_fit_spatial(run: Run):
    args = run.args
    g = _load_graph(run)
    panel = _load_panel(run)
    if args.response not in panel.values:
        raise ValidationFailure(f"unknown response variable {args.response!r}")
    y = panel.values[args.response].mean(axis=1)
    X, names = _design_from_panel(panel, args)
    X = X[:, 0, :]
    fit = fit_spatial(y, X, g, _hyper_from_args(args), _config_from_args(args),
                      beta_names=names)
    summary = model_eval.summarize_fit(
        fit, model_eval.spatial_deviance_at_mean(fit, y, X))
    _write_summary(run, "summary.csv", summary)
    _write_draws(run, fit.parameter_draws(), args.draws_format)
    _, residuals = fitted_and_residuals(fit, y, X)
    run.write_csv("residual_choropleth.csv", ["area_id", "value"],
                  list(zip(panel.unit_ids, map(float, residuals))))


def cmd_fit_st(run: Run):
    args = run.args
    g = _load_graph(run)
    panel = _load_panel(run)
    if args.response not in panel.values:
        raise ValidationFailure(f"unknown response variable {args.response!r}")
    y = panel.values[args.response]
    X, names = _design_from_panel(panel, args, weekend=args.weekend)
    fit = fit_st(y, X, g, _hyper_from_args(args), _config_from_args(args),
                 beta_names=names)
    summary = model_eval.summarize_fit(fit, model_eval.st_deviance_at_mean(fit, y))
    _write_summary(run, "summary.csv", summary)
    _write_draws(run, fit.parameter_draws(), args.draws_format)
    labels = panel.date_labels()
    rows = []
    for t, label in enumerate(labels):
        for k, unit in enumerate(panel.unit_ids):
            rows.append((unit, label, float(y[k, t]), float(fit.fitted_mean[k, t])))
    run.write_csv("fitted_vs_actual.csv", ["area_id", "date", "actual", "fitted"],
                  rows)
    r, slope = fit_quality(fit, y)
    print(f"fit quality: r={r:.4f} slope={slope:.4f}", file=sys.stderr)


def cmd_select(run: Run):
    args = run.args
    g = _load_graph(run)
    panel = _load_panel(run)
    if args.response not in panel.values:
        raise ValidationFailure(f"unknown response variable {args.response!r}")
    y = panel.values[args.response].mean(axis=1)
    names = _parse_names(args.candidates) or \
        [n for n in sorted(panel.values) if n != args.response]
    for name in names:
        if name not in panel.values:
            raise ValidationFailure(f"unknown candidate {name!r}")
    candidates = {n: panel.values[n].mean(axis=1) for n in names}
    chosen, trace = model_eval.stepwise_select(
        y, candidates, g, _hyper_from_args(args), _config_from_args(args),
        criterion=args.criterion, threads=args.threads)
    run.write_csv("step_trace.csv", ["step", "action", "predictor", "dic", "waic"],
                  trace)
    X = np.column_stack([np.ones(g.n_units)] + [candidates[n] for n in chosen])
    cfg = _config_from_args(args)
    final = fit_spatial(y, X, g, _hyper_from_args(args), cfg,
                        beta_names=["Intercept"] + chosen)
    summary = model_eval.summarize_fit(
        final, model_eval.spatial_deviance_at_mean(final, y, X))
    _write_summary(run, "summary.csv", summary)


def cmd_diagnose(run: Run):
    args = run.args
    path = run.register_input(args.draws)
    with np.load(path) as data:
        draws = {name: data[name] for name in data.files}
    stats = model_eval.convergence(draws)
    rows = [(name, s.ess, s.geweke_z, s.psrf, int(s.degenerate))
            for name, s in stats.items()]
    run.write_csv("diagnostics.csv",
                  ["parameter", "ess", "geweke_z", "psrf", "degenerate"], rows)


def cmd_simulate(run: Run):
    args = run.args
    g = graph_mod.grid_graph(args.rows, args.cols, rule=args.rule)
    beta = np.array([float(v) for v in _parse_names(args.beta)] or [0.0])
    scenario = synth.SimScenario(graph=g, beta=beta, nu2=args.nu2,
                                 tau2=args.tau2, rho=args.rho, T=args.t,
                                 rho_1t=args.rho1, rho_2t=args.rho2,
                                 seed=args.seed)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "spatial":
        y, X, truth = synth.generate_spatial_dataset(scenario)
        y = y[:, None]
        X = X[:, None, :]
        dates = None
    else:
        y, X, truth = synth.generate_st_dataset(scenario)
        start = dt.date(2022, 1, 1)
        dates = [start + dt.timedelta(days=i) for i in range(args.t)]
    panel = pipeline.AreaPanel(unit_ids=[str(u) for u in g.unit_ids], dates=dates)
    panel.add("y", y)
    for j in range(1, X.shape[2]):
        panel.add(f"x{j}", X[:, :, j])
    panel_path = run.out_dir / "panel.csv"
    pipeline.write_panel_csv(panel, panel_path)
    run.outputs.append(str(panel_path))
    graph_path = run.out_dir / "adjacency.csv"
    graph_mod.write_graph(g, graph_path)
    run.outputs.append(str(graph_path))
    run.outputs.append(str(graph_path) + ".summary.json")
    truth_json = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                  for k, v in truth.items()}
    _atomic_write_text(run.out_dir / "truth.json",
                       json.dumps(truth_json, indent=2) + "\n")
    run.outputs.append(str(run.out_dir / "truth.json"))


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p):
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def _add_mcmc(p):
    p.add_argument("--iterations", type=int, default=22000)
    p.add_argument("--burn-in", type=int, default=2000)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--rho-step", type=float, default=1.0)
    p.add_argument("--a1", type=float, default=1.0)
    p.add_argument("--b1", type=float, default=0.01)
    p.add_argument("--a2", type=float, default=1.0)
    p.add_argument("--b2", type=float, default=0.01)
    p.add_argument("--beta-var", type=float, default=1e5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arealbayes",
        description="Bayesian spatial and spatio-temporal areal regression")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("adjacency", help="build contiguity graph from GeoJSON")
    _add_common(p)
    p.add_argument("--geojson", required=True)
    p.add_argument("--id-property", default="area_numbe")
    p.add_argument("--rule", choices=["queen", "rook"], default="queen")
    p.add_argument("--snap-tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_adjacency)

    p = sub.add_parser("ingest", help="aggregate event extracts into a panel")
    _add_common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--trips")
    p.add_argument("--crimes")
    p.add_argument("--snapshot")
    p.add_argument("--granularity", choices=["total", "daily"], default="total")
    p.add_argument("--year", type=int, default=2022)
    p.add_argument("--trips-timestamp-col", default=pipeline.DEFAULT_TRIP_TIMESTAMP_COL)
    p.add_argument("--trips-area-col", default=pipeline.DEFAULT_TRIP_AREA_COL)
    p.add_argument("--crimes-timestamp-col", default=pipeline.DEFAULT_CRIME_TIMESTAMP_COL)
    p.add_argument("--crimes-area-col", default=pipeline.DEFAULT_CRIME_AREA_COL)
    p.add_argument("--snapshot-id-col", default="area_id")
    p.add_argument("--transform", action="append", metavar="NAME=KIND")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("esda", help="correlation screening and Moran tests")
    _add_common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--variables", default="")
    p.add_argument("--weights-scheme", choices=["binary", "row-standardized"],
                   default="row-standardized")
    p.add_argument("--permutations", type=int, default=999)
    p.set_defaults(func=cmd_esda)

    p = sub.add_parser("fit-spatial", help="fit the spatial Leroux regression")
    _add_common(p)
    _add_mcmc(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--predictors", default="")
    p.add_argument("--draws-format", choices=["npz", "csv"], default="npz")
    p.set_defaults(func=cmd_fit_spatial)

    p = sub.add_parser("fit-st", help="fit the spatio-temporal AR(2) regression")
    _add_common(p)
    _add_mcmc(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--predictors", default="")
    p.add_argument("--trend", choices=["none", "scaled-day"], default="scaled-day")
    p.add_argument("--trend-divisor", type=float,
                   default=pipeline.DEFAULT_TREND_DIVISOR)
    p.add_argument("--weekend", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--draws-format", choices=["npz", "csv"], default="npz")
    p.set_defaults(func=cmd_fit_st)

    p = sub.add_parser("select", help="stepwise predictor selection")
    _add_common(p)
    _add_mcmc(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--candidates", default="")
    p.add_argument("--criterion", choices=["dic", "waic"], default="dic")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("diagnose", help="convergence diagnostics for saved draws")
    _add_common(p)
    p.add_argument("--draws", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--mode", choices=["spatial", "st"], default="spatial")
    p.add_argument("--rows", type=int, default=7)
    p.add_argument("--cols", type=int, default=11)
    p.add_argument("--rule", choices=["queen", "rook"], default="rook")
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--beta", default="0")
    p.add_argument("--nu2", type=float, default=0.1)
    p.add_argument("--tau2", type=float, default=0.15)
    p.add_argument("--rho", type=float, default=0.6)
    p.add_argument("--rho1", type=float, default=0.0)
    p.add_argument("--rho2", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    run = Run(args, argv)
    try:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        args.func(run)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.write_manifest(error=exc)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.write_manifest(error=exc)
        return EXIT_COMPUTE
    run.write_manifest()
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
