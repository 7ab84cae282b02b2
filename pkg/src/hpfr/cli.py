"""
Command-line interface: ``hpfr fit``, ``hpfr predict`` and ``hpfr simulate``.

Runs are described by an INI-style configuration file (see the README for
every key); ``--family``, ``--seed`` and ``--out`` override it. Relative
paths in a config file are resolved against the file's directory.

Exit codes: 0 success, 2 a fit did not converge, 1 any error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from . import artifact
from .data import BasisConfig, ColumnSchema, load_dataset
from .em import FitConfig, fit
from .errors import DataError, HPFRError, SchemaError
from .kernels import CovParams, Targets
from .mixing import MixingFamily
from .predict import METHODS, PredictionJob, predict_jobs
from .sim import SCHEMES, SchemeConfig, run_benchmark

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2
OUTLIER_LEVEL = 0.99


def _list(text):
    return [p.strip() for p in text.split(",") if p.strip()] if text else []


class RunConfig:
    """Typed access to the configuration sections."""

    def __init__(self, path=None):
        self.parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        self.base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise DataError(f"config file {path} does not exist")
            self.parser.read(path, encoding="utf-8")
            self.base = path.resolve().parent

    def get(self, section, key, default=None):
        return self.parser.get(section, key, fallback=default)

    def getint(self, section, key, default):
        return self.parser.getint(section, key, fallback=default)

    def getfloat(self, section, key, default):
        return self.parser.getfloat(section, key, fallback=default)

    def getbool(self, section, key, default):
        return self.parser.getboolean(section, key, fallback=default)

    def path(self, section, key, default=None):
        value = self.get(section, key, default)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def schema(self):
        return ColumnSchema(
            u_cols=tuple(_list(self.get("data", "u", ""))),
            v_cols=tuple(_list(self.get("data", "v", ""))),
            w_cols=tuple(_list(self.get("data", "w", ""))),
            x_cols=tuple(_list(self.get("data", "x", "t"))),
            u_intercept=self.getbool("data", "u_intercept", True),
            v_intercept=self.getbool("data", "v_intercept", False),
            w_intercept=self.getbool("data", "w_intercept", False),
            id_col=self.get("data", "id", "id"),
            t_col=self.get("data", "t", "t"),
            y_col=self.get("data", "y", "y"),
        )

    def dataset(self):
        path = self.path("data", "path")
        if path is None:
            raise SchemaError("the [data] section needs a 'path'")
        if not path.is_file():
            raise DataError(f"data file {path} does not exist")
        return load_dataset(path, self.schema())

    def basis(self, ds):
        domain = self.get("basis", "domain", "auto")
        domain = ds.t_range if domain == "auto" else tuple(float(v) for v in _list(domain))
        return BasisConfig(domain, self.getint("basis", "degree", 3),
                           self.getint("basis", "knots", 18))

    def families(self, override=None):
        text = override or self.get("model", "family", "N")
        return [MixingFamily.parse(f) for f in _list(text)]

    def fit_config(self):
        d = FitConfig()
        return FitConfig(
            max_outer_iters=self.getint("fit", "max_iter", d.max_outer_iters),
            param_tol=self.getfloat("fit", "param_tol", d.param_tol),
            loglik_tol=self.getfloat("fit", "loglik_tol", d.loglik_tol),
            psi_optimizer_budget=self.getint("fit", "psi_budget", d.psi_optimizer_budget),
            cm_passes=self.getint("fit", "cm_passes", d.cm_passes),
            compute_information=self.getbool("fit", "information", True),
        )

    def echo(self):
        return {s: dict(self.parser[s]) for s in self.parser.sections()}


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def beta_names(result, schema):
    D = result.basis.n_basis
    u_names = schema.names("u")
    v_names = schema.names("v")
    if len(u_names) != result.design.p_u:
        u_names = [f"u{j}" for j in range(result.design.p_u)]
    if len(v_names) != result.design.p_v:
        v_names = [f"v{j}" for j in range(result.design.p_v)]
    return [f"B[{k},{u}]" for u in u_names for k in range(D)] + [f"gamma[{v}]" for v in v_names]


def parameter_rows(result, schema):
    """``(name, estimate, std_error)`` on the natural scale."""
    p, lay = result.params, result.layout
    se = result.standard_errors()
    se_free = iter(se) if se is not None else None

    def next_se(free):
        return next(se_free) if (free and se_free is not None) else None

    rows = [(n, b, next_se(True)) for n, b in zip(beta_names(result, schema), p.beta)]
    for name, v, free in zip(CovParams.names(p.cov.p_x, p.cov.p_w), p.cov.to_vector(),
                             lay.psi_free):
        rows.append((name, v, next_se(free)))
    for name in ("nu", "gamma"):
        v = getattr(p.fam, name)
        if v is not None:
            rows.append((name, v, next_se(name in lay.fam_free)))
    return rows


def subject_rows(result):
    rows = []
    for s, d, w in zip(result.data, result.mahalanobis, result.weights):
        cut = chi2.ppf(OUTLIER_LEVEL, s.n)
        rows.append((s.id, s.n, d, w, cut, int(d > cut)))
    return rows


def fitted_rmse(result):
    """RMSE of ``y`` against the fitted mean plus the noise-free predicted
    random term at the observation points."""
    jobs = [PredictionJob(s, Targets.from_subject(s), s.u, "random_term") for s in result.data]
    preds = predict_jobs(result, jobs, methods=())
    err = np.concatenate([s.y - A @ result.params.beta - p.mean
                          for s, A, p in zip(result.data, result.design.A, preds)])
    return float(np.sqrt(np.mean(err ** 2)))


def _write_fit(result, schema, out, suffix, echo):
    artifact.save(result, schema, out / f"fit{suffix}.json", echo)
    _write_csv(out / f"params{suffix}.csv", ("name", "estimate", "std_error"),
               [(n, _fmt(v), _fmt(s)) for n, v, s in parameter_rows(result, schema)])
    _write_csv(out / f"subjects{suffix}.csv",
               ("id", "n", "mahalanobis", "weight", "chi2_cutoff", "outlier"),
               [(i, n, _fmt(d), _fmt(w), _fmt(c), f) for i, n, d, w, c, f in subject_rows(result)])
    _write_csv(out / f"trace{suffix}.csv", ("iteration", "loglik"),
               [(k, _fmt(v)) for k, v in enumerate(result.loglik_trace)])


def _degree_text(fam):
    if fam.kind == "N":
        return "/"
    parts = [f"nu={fam.nu:.3f}"] + ([f"gamma={fam.gamma:.3f}"] if fam.kind == "CN" else [])
    return " ".join(parts)


def comparison_report(results, schema, dropped=None, refits=None):
    """Plain-text table: degree, BIC, RMSE and ``estimate/SE/change %`` for
    each linear fixed effect; change ratios need ``refits``."""
    first = results[0]
    names = beta_names(first, schema)[first.design.p_u * first.basis.n_basis:]
    head = ["Model", "Degree", "BIC", "RMSE"] + [n[6:-1] for n in names]
    rows = []
    for k, r in enumerate(results):
        p_u_D = r.design.p_u * r.basis.n_basis
        se = r.standard_errors()
        cells = [r.params.fam.label, _degree_text(r.params.fam), f"{r.bic:.1f}",
                 f"{fitted_rmse(r):.3f}"]
        for j in range(len(names)):
            est = r.params.beta[p_u_D + j]
            cell = f"{est:.3f}/" + ("-" if se is None else f"{se[p_u_D + j]:.3f}")
            if refits is not None:
                new = refits[k].params.beta[p_u_D + j]
                cell += f"/{100 * (new - est) / est:.1f}" if est != 0 else "/-"
            cells.append(cell)
        rows.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)) for line in [head] + rows]
    order = sorted(range(len(results)), key=lambda k: results[k].bic)
    lines += ["", "BIC ranking: " + " < ".join(results[k].params.fam.label for k in order)]
    if dropped is not None:
        lines.append("cells: estimate/standard error/change % after dropping "
                     + (", ".join(dropped) if dropped else "no subjects"))
    else:
        lines.append("cells: estimate/standard error")
    return "\n".join(lines) + "\n"


def _family_suffix(fam, many):
    return f"_{fam.label.replace('(', '').replace(')', '').replace(',', '_')}" if many else ""


def cmd_fit(args):
    cfg = RunConfig(args.config)
    ds = cfg.dataset()
    basis = cfg.basis(ds)
    fams = cfg.families(args.family)
    fcfg = cfg.fit_config()
    out = Path(args.out or cfg.get("run", "out", "hpfr_out"))
    out.mkdir(parents=True, exist_ok=True)
    schema = ds.schema
    results = []
    for fam in fams:
        t0 = time.perf_counter()
        r = fit(ds, basis, fam, fcfg)
        _log(f"{fam.label}: loglik {r.loglik:.4f}, {r.iterations} iterations, "
             f"converged={r.converged}, {time.perf_counter() - t0:.1f} s")
        for w in r.warnings:
            _log(f"  warning: {w}")
        _write_fit(r, schema, out, _family_suffix(fam, len(fams) > 1), cfg.echo())
        results.append(r)
    if len(results) > 1 or cfg.getbool("fit", "change_ratio", False):
        dropped, refits = None, None
        if cfg.getbool("fit", "change_ratio", False):
            screen = next((r for r in results if r.params.fam.kind == "N"), results[0])
            dropped = [row[0] for row in subject_rows(screen) if row[5]]
            if dropped:
                reduced = ds.without(dropped)
                refits = [fit(reduced, basis, r.params.fam, fcfg) for r in results]
            else:
                refits = results
        (out / "report.txt").write_text(comparison_report(results, schema, dropped, refits),
                                        encoding="utf-8")
    return EXIT_OK if all(r.converged for r in results) else EXIT_NONCONVERGED


def _derived_block(t, cols, intercept, t_col):
    """Covariate block at new times when every column is the time column."""
    bad = [c for c in cols if c != t_col]
    if bad:
        raise SchemaError(f"covariates {bad} cannot be evaluated on a grid; "
                          f"supply a targets CSV instead")
    parts = ([np.ones((len(t), 1))] if intercept else []) + [t[:, None] for _ in cols]
    return np.hstack(parts) if parts else np.zeros((len(t), 0))


def _grid_targets(t, schema):
    return Targets(t, _derived_block(t, schema.x_cols, False, schema.t_col),
                   _derived_block(t, schema.w_cols, schema.w_intercept, schema.t_col),
                   _derived_block(t, schema.v_cols, schema.v_intercept, schema.t_col))


def _csv_targets(path, schema):
    """Per-id ``(Targets, u)`` from a CSV with the data columns except ``y``."""
    need = [c for c in schema.source_columns() if c != schema.y_col]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"targets file {path} lacks column(s) {missing}")
        rows = {}
        for i, rec in enumerate(reader, start=1):
            try:
                vals = {c: float(rec[c]) for c in need if c != schema.id_col}
            except ValueError:
                raise DataError(f"targets row {i}: non-numeric value") from None
            rows.setdefault(rec[schema.id_col], []).append(vals)
    out = {}
    for sid, recs in rows.items():
        recs.sort(key=lambda r: r[schema.t_col])

        def block(cols, intercept):
            n = len(recs)
            parts = ([np.ones((n, 1))] if intercept else []) + (
                [np.array([[r[c] for c in cols] for r in recs])] if cols else [])
            return np.hstack(parts) if parts else np.zeros((n, 0))

        t = np.array([r[schema.t_col] for r in recs])
        out[sid] = (Targets(t, block(schema.x_cols, False),
                            block(schema.w_cols, schema.w_intercept),
                            block(schema.v_cols, schema.v_intercept)),
                    block(schema.u_cols, schema.u_intercept)[0])
    return out


def _check_schema(model, schema):
    if model.schema != schema:
        raise SchemaError("column roles of the data differ from those of the fitted model")


def cmd_predict(args):
    cfg = RunConfig(args.config)
    fit_path = args.fit or cfg.path("predict", "fit")
    if fit_path is None:
        raise SchemaError("no fit artifact given (use --fit or [predict] fit = ...)")
    model = artifact.load(fit_path)
    ds = cfg.dataset()
    _check_schema(model, ds.schema)
    kind = cfg.get("predict", "kind", "response")
    noisy = cfg.getbool("predict", "noisy", False)
    ncls = [float(v) / 100 for v in _list(cfg.get("predict", "ncl", "80,90,95"))]
    methods = [m.upper() for m in _list(cfg.get("predict", "methods", ",".join(METHODS)))]
    unknown = set(methods) - set(METHODS)
    if unknown or not all(0 < c < 1 for c in ncls):
        raise SchemaError(f"bad methods {sorted(unknown)} or NCLs {ncls}")
    spec = cfg.get("predict", "targets", "observed")
    by_id = {s.id: s for s in ds}
    jobs, ids = [], []
    if spec == "observed":
        for s in ds:
            jobs.append(PredictionJob(s, Targets.from_subject(s), s.u, kind, noisy))
            ids.append(s.id)
    elif spec.startswith("grid:"):
        lo, hi, n = _list(spec[5:])
        grid = np.linspace(float(lo), float(hi), int(n))
        for s in ds:
            jobs.append(PredictionJob(s, _grid_targets(grid, ds.schema), s.u, kind, noisy))
            ids.append(s.id)
    else:
        for sid, (targets, u) in _csv_targets(cfg.path("predict", "targets"), ds.schema).items():
            obs = by_id.get(sid)
            if obs is None and kind == "random_term":
                raise DataError(f"random terms need observations; subject {sid!r} has none")
            jobs.append(PredictionJob(obs, targets, u, kind, noisy))
            ids.append(sid)
    seed = args.seed if args.seed is not None else cfg.getint("run", "seed", 0)
    preds = predict_jobs(model, jobs, ncls, methods,
                         J=cfg.getint("predict", "bootstrap_J", 50),
                         B=cfg.getint("predict", "bootstrap_B", 20),
                         n_draws=cfg.getint("predict", "pl1_draws", 10_000),
                         rng=np.random.default_rng(seed))
    out = Path(args.out or cfg.get("run", "out", "hpfr_out"))
    out.mkdir(parents=True, exist_ok=True)
    cols = [(m, c) for m in methods for c in ncls]
    header = ["id", "t", "mean", "variance"] + [
        f"{m}_{side}{100 * c:g}" for m, c in cols for side in ("lo", "hi")]
    rows = []
    for sid, p in zip(ids, preds):
        for i in range(len(p.t)):
            row = [sid, _fmt(p.t[i]), _fmt(p.mean[i]), _fmt(p.variance[i])]
            for m, c in cols:
                lo, hi = p.bounds(m, c)
                row += [_fmt(lo[i]), _fmt(hi[i])]
            rows.append(row)
    _write_csv(out / "predictions.csv", header, rows)
    skipped = max((p.diagnostics.get("bts_skipped", 0) for p in preds), default=0)
    if skipped:
        _log(f"bootstrap: {skipped} parameter draws skipped")
    return EXIT_OK


def cmd_simulate(args):
    cfg = RunConfig(args.config)
    sec = "simulate"
    seed = args.seed if args.seed is not None else cfg.getint("run", "seed", 0)
    families = _list(args.families or args.family or cfg.get(sec, "families", "N,T"))
    scfg = SchemeConfig(
        scheme=args.scheme or cfg.get(sec, "scheme", "I"),
        n_m=args.n or cfg.getint(sec, "n", 31),
        replications=args.reps or cfg.getint(sec, "reps", 50),
        seed=seed,
        families=tuple(families),
        new_subject=args.new_subject or cfg.getbool(sec, "new_subject", False),
        J=cfg.getint(sec, "bootstrap_J", 50),
        B=cfg.getint(sec, "bootstrap_B", 20),
        n_draws=cfg.getint(sec, "pl1_draws", 10_000),
    )
    out = Path(args.out or cfg.get("run", "out", "hpfr_out"))
    out.mkdir(parents=True, exist_ok=True)
    workers = args.threads or cfg.getint("run", "threads", os.cpu_count() or 1)

    def progress(rep, seconds):
        _log(f"replication {rep + 1}/{scfg.replications}: {seconds:.1f} s")

    report = run_benchmark(scfg, workers=workers, progress=progress)
    stem = f"bench_{scfg.scheme}_n{scfg.n_m}" + ("_new" if scfg.new_subject else "")
    (out / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
    (out / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    rt = report.runtime
    _log(f"total {rt['total']:.1f} s, {rt['per_rep_mean']:.1f} s per replication")
    return EXIT_NONCONVERGED if any(report.nonconverged.values()) else EXIT_OK


def _log(msg):
    print(msg, file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(prog="hpfr", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--family", help="mixing family override, e.g. N, T, T4, SL, CN")
        p.add_argument("--seed", type=int, help="random seed override")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int,
                       help="worker processes (simulate only; default: all cores)")
        return p

    common(sub.add_parser("fit", help="fit one or more mixing families"))
    p = common(sub.add_parser("predict", help="predict from a fit artifact"))
    p.add_argument("--fit", help="fit artifact (overrides [predict] fit)")
    p = common(sub.add_parser("simulate", help="run a simulation benchmark"))
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--n", type=int, help="points per subject")
    p.add_argument("--reps", type=int, help="replications")
    p.add_argument("--families", help="comma-separated benchmark families (N,T,T1,SL,SL1,CN)")
    p.add_argument("--new-subject", action="store_true", help="new-subject prediction mode")
    return parser


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (HPFRError, ValueError, OSError, configparser.Error) as exc:
        _log(f"error: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
