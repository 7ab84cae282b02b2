"""
Simulation benchmark: data-generating schemes, scoring and a replication
driver that aggregates RMSE, coverage and interval length tables.

Every scheme shares a common base. ``n_m`` equally spaced times on
``[-4, 4]``, kernel input ``x = 2.5 t``, linear random-effect covariate
``w = 0.5 t``, ``theta = (0.04, 1)``, ``phi_b = 0.01``, ``phi_eps = 0.01``
and mean ``mu(t) = 0.8 sin((0.5 t)^3)``.

====== =====================================================================
I      Gaussian process responses
II     Student-t(4) process: one ``r_m ~ Gamma(2, rate 2)`` scales subject m
III    as I, subject 5 has mean amplitude 4 instead of 0.8
IV     as I, ``y_10`` shifted up by 2 on ``t in [-1, 1]``
V      III and IV together
VI     as I with 21 subjects; the last one has ``phi_eps = 0.05``
====== =====================================================================

In new-subject mode the last of ``M = 21`` subjects is a test subject of
which half the points are observed (and used in the fit) and the other half
predicted; ``interp`` picks the test half at random, ``extrap`` takes the
points with ``t >= 0``.
"""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BasisConfig, dataset_from_arrays
from .em import FitConfig, fit
from .kernels import CovParams, SqExpParams, Targets, sigma_from_covariates
from .mixing import MixingFamily
from .predict import METHODS, PredictionJob, predict_jobs

SCHEMES = ("I", "II", "III", "IV", "V", "VI")
MODES = ("interp", "extrap")
TRUE_COV = CovParams(SqExpParams(0.04, [1.0]), [0.01], 0.01)
DOMAIN = (-4.0, 4.0)
AMPLITUDE = 0.8
OUTLIER_AMPLITUDE = 4.0
AMPLITUDE_SUBJECT = 4  # zero-based index of subject 5
SHIFT_SUBJECT = 9      # subject 10
SHIFT = 2.0
TEST_PHI_EPS = 0.05

# benchmark labels: fixed-degree members and their estimated-degree "1" variants
BENCH_FAMILIES = {
    "N": lambda: MixingFamily.gaussian(),
    "T": lambda: MixingFamily.student_t(4.0, fixed=True),
    "T1": lambda: MixingFamily.student_t(),
    "SL": lambda: MixingFamily.slash(1.3, fixed=True),
    "SL1": lambda: MixingFamily.slash(),
    "CN": lambda: MixingFamily.contaminated(),
}


def bench_family(label):
    try:
        return BENCH_FAMILIES[label]()
    except KeyError:
        raise ValueError(f"unknown benchmark family {label!r}; "
                         f"expected one of {sorted(BENCH_FAMILIES)}") from None


def true_mean(t, amplitude=AMPLITUDE):
    t = np.asarray(t, dtype=float)
    return amplitude * np.sin((0.5 * t) ** 3)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "I"
    n_m: int = 31
    M: int = None
    replications: int = 50
    seed: int = 0
    families: tuple = ("N", "T")
    new_subject: bool = False
    modes: tuple = MODES
    ncls: tuple = (0.8, 0.9, 0.95)
    methods: tuple = METHODS
    J: int = 50
    B: int = 20
    n_draws: int = 10_000
    knot_count: int = 18
    fit_config: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme == "VI":
            object.__setattr__(self, "new_subject", True)
        if self.M is None:
            object.__setattr__(self, "M", 21 if self.new_subject else 20)
        if self.n_m < 4 or self.replications < 1:
            raise ValueError("need n_m >= 4 and at least one replication")
        if self.new_subject and self.M < 2:
            raise ValueError("new-subject mode needs at least one training subject")
        if not self.new_subject and self.M < max(self.outliers, default=-1) + 1:
            raise ValueError(f"scheme {self.scheme} needs at least "
                             f"{max(self.outliers) + 1} subjects")
        for f in self.families:
            bench_family(f)
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown new-subject mode {m!r}")

    @property
    def outliers(self):
        """Zero-based indices of perturbed subjects (left out of tau scores)."""
        return {"III": (AMPLITUDE_SUBJECT,), "IV": (SHIFT_SUBJECT,),
                "V": (AMPLITUDE_SUBJECT, SHIFT_SUBJECT)}.get(self.scheme, ())

    @property
    def basis(self):
        return BasisConfig(DOMAIN, 3, self.knot_count)


@dataclass(frozen=True)
class SchemeData:
    """A simulated replication with the truth kept for scoring."""

    t: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    X: np.ndarray
    W: np.ndarray
    r: np.ndarray
    outliers: tuple = ()

    def dataset(self, index=None, test_subject=None, observed=None):
        """Dataset of subjects ``index`` (default all); ``test_subject`` is
        reduced to the points ``observed``."""
        index = range(len(self.y)) if index is None else index
        ts, ys, Xs, Ws = [], [], [], []
        for m in index:
            sel = observed if m == test_subject else slice(None)
            ts.append(self.t[sel])
            ys.append(self.y[m][sel])
            Xs.append(self.X[sel])
            Ws.append(self.W[sel])
        return dataset_from_arrays([f"s{m + 1:02d}" for m in index], ts, ys, W=Ws, X=Xs)


def _stream(cfg, rep, *key):
    """Generator for one purpose within a replication. Keys: ``(0,)`` paths,
    ``(3,)`` Scheme II scales, ``(1,)`` test-point split, ``(2, family, mode)``
    prediction draws. The scheme is not part of the key, so schemes with
    the same seed share their base paths (common random numbers)."""
    return np.random.default_rng([cfg.seed, cfg.n_m, rep, *key])


def _sym_root(S):
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0, None))


def generate_scheme(cfg, rep_index):
    """Draw one replication of ``cfg.scheme``; deterministic in
    ``(cfg.seed, cfg.n_m, rep_index)`` and the scheme."""
    rng = _stream(cfg, rep_index, 0)
    scales = _stream(cfg, rep_index, 3)
    n, M = cfg.n_m, cfg.M
    t = np.linspace(*DOMAIN, n)
    X = (2.5 * t)[:, None]
    W = (0.5 * t)[:, None]
    R = _sym_root(sigma_from_covariates(X, W, TRUE_COV, include_noise=False))
    mu = np.tile(true_mean(t), (M, 1))
    if cfg.scheme in ("III", "V"):
        mu[AMPLITUDE_SUBJECT] = true_mean(t, OUTLIER_AMPLITUDE)
    noise_sd = np.full(M, np.sqrt(TRUE_COV.phi_eps))
    if cfg.scheme == "VI":
        noise_sd[-1] = np.sqrt(TEST_PHI_EPS)
    r = np.ones(M)
    tau = np.empty((M, n))
    y = np.empty((M, n))
    for m in range(M):
        if cfg.scheme == "II":
            r[m] = scales.gamma(2.0, 0.5)
        scale = 1.0 / np.sqrt(r[m])
        tau[m] = scale * (R @ rng.standard_normal(n))
        y[m] = mu[m] + tau[m] + scale * noise_sd[m] * rng.standard_normal(n)
    if cfg.scheme in ("IV", "V"):
        y[SHIFT_SUBJECT] += SHIFT * ((t >= -1) & (t <= 1))
    return SchemeData(t, y, mu, tau, X, W, r, cfg.outliers if not cfg.new_subject else ())


def rmse(estimate, truth):
    e = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(e * e)))


def score_mean_rmse(result, truth):
    """RMSE of the fitted mean curve against ``mu`` on the observation grid."""
    return rmse(result.mean_curve(truth.t), true_mean(truth.t))


def score_tau_rmse(predictions, truth, exclude_outliers=True):
    """RMSE of predicted random terms pooled over subjects (and points)."""
    keep = _kept(len(predictions), truth, exclude_outliers)
    return rmse(np.concatenate([predictions[m].mean for m in keep]),
                np.concatenate([truth.tau[m] for m in keep]))


def _kept(M, truth, exclude_outliers):
    return [m for m in range(M) if not (exclude_outliers and m in truth.outliers)]


def score_intervals(lo, hi, truth):
    """(coverage in percent, mean length) of pointwise intervals."""
    lo, hi, truth = (np.asarray(a, dtype=float) for a in (lo, hi, truth))
    cover = (lo <= truth) & (truth <= hi)
    return 100.0 * float(np.mean(cover)), float(np.mean(hi - lo))


def _pct(ncl):
    return f"{100 * ncl:g}"


def _interval_records(preds, truths, cfg, mode):
    out = []
    for method in cfg.methods:
        for c in cfg.ncls:
            lo = np.concatenate([p.bounds(method, c)[0] for p in preds])
            hi = np.concatenate([p.bounds(method, c)[1] for p in preds])
            cp, length = score_intervals(lo, hi, np.concatenate(truths))
            out.append(("cp", method, _pct(c), mode, cp))
            out.append(("length", method, _pct(c), mode, length))
    return out


def _predict_kwargs(cfg, rng):
    return dict(ncls=cfg.ncls, methods=cfg.methods, J=cfg.J, B=cfg.B,
                n_draws=cfg.n_draws, rng=rng)


def _observed_rep(cfg, truth, label, rng):
    ds = truth.dataset()
    res = fit(ds, cfg.basis, bench_family(label), cfg.fit_config)
    recs = [("mean_rmse", "", "", "obs", score_mean_rmse(res, truth))]
    jobs = [PredictionJob(s, Targets.from_subject(s), s.u, "random_term") for s in ds]
    preds = predict_jobs(res, jobs, **_predict_kwargs(cfg, rng))
    recs.append(("tau_rmse", "", "", "obs", score_tau_rmse(preds, truth)))
    keep = _kept(len(preds), truth, True)
    recs += _interval_records([preds[m] for m in keep], [truth.tau[m] for m in keep], cfg, "obs")
    return recs, [res.converged]


def split_new_subject(n, mode, rng):
    """(observed, test) index arrays of the test subject."""
    if mode == "extrap":
        idx = np.arange(n)
        return idx[: n // 2], idx[n // 2:]
    test = np.sort(rng.choice(n, n - n // 2, replace=False))
    return np.setdiff1d(np.arange(n), test), test


def _new_subject_rep(cfg, truth, label, rep):
    recs, conv = [], []
    last = cfg.M - 1
    fam_key = list(BENCH_FAMILIES).index(label)
    for mode in cfg.modes:
        # the split stream does not depend on the family: all fit the same data
        obs_idx, test_idx = split_new_subject(cfg.n_m, mode, _stream(cfg, rep, 1))
        rng = _stream(cfg, rep, 2, fam_key, MODES.index(mode))
        ds = truth.dataset(test_subject=last, observed=obs_idx)
        res = fit(ds, cfg.basis, bench_family(label), cfg.fit_config)
        conv.append(res.converged)
        targets = Targets(truth.t[test_idx], truth.X[test_idx], truth.W[test_idx])
        job = PredictionJob(ds[last], targets, ds[last].u, "response")
        (pred,) = predict_jobs(res, [job], **_predict_kwargs(cfg, rng))
        y_test = truth.y[last][test_idx]
        recs.append(("resp_rmse", "", "", mode, rmse(pred.mean, y_test)))
        recs += _interval_records([pred], [y_test], cfg, mode)
    return recs, conv


def run_replication(cfg, rep):
    """Records ``(family, metric, method, ncl, mode, value)`` of one
    replication, convergence flags and elapsed seconds."""
    t0 = time.perf_counter()
    truth = generate_scheme(cfg, rep)
    records, flags = [], {}
    for label in cfg.families:
        # streams are keyed by label so adding a family leaves the others unchanged
        if cfg.new_subject:
            recs, conv = _new_subject_rep(cfg, truth, label, rep)
        else:
            rng = _stream(cfg, rep, 2, list(BENCH_FAMILIES).index(label), 0)
            recs, conv = _observed_rep(cfg, truth, label, rng)
        records += [(label,) + r for r in recs]
        flags[label] = all(conv)
    return records, flags, time.perf_counter() - t0


def _run_one(args):
    return run_replication(*args)


@dataclass
class BenchReport:
    """Aggregated benchmark results.

    ``records`` holds one dict per (family, metric, method, ncl, mode) with
    the replication mean ``value``; ``per_rep`` keeps every replication's
    value under the same key. ``runtime`` is kept out of the written files
    so that reports are byte-reproducible.
    """

    config: SchemeConfig
    records: list
    per_rep: dict
    nonconverged: dict
    runtime: dict

    FIELDS = ("scheme", "n_m", "family", "metric", "method", "ncl", "mode", "value", "reps")

    def value(self, family, metric, method="", ncl="", mode="obs"):
        ncl = _pct(ncl) if isinstance(ncl, float) and ncl < 1 else str(ncl)
        for r in self.records:
            if (r["family"], r["metric"], r["method"], r["ncl"], r["mode"]) == (
                    family, metric, method, ncl, mode):
                return r["value"]
        raise KeyError((family, metric, method, ncl, mode))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({**r, "value": f"{r['value']:.10g}"})
        return buf.getvalue()

    def to_text(self):
        cfg = self.config
        fams = list(cfg.families)
        lines = [f"Scheme {cfg.scheme}, n_m = {cfg.n_m}, M = {cfg.M}, "
                 f"{cfg.replications} replications, seed {cfg.seed}", ""]

        def row(label, metric, method="", ncl="", mode="obs", fmt="{:8.3f}"):
            vals = []
            for f in fams:
                try:
                    vals.append(fmt.format(self.value(f, metric, method, ncl, mode)))
                except KeyError:
                    vals.append(f"{'-':>8}")
            return f"{label:<16}" + "".join(vals)

        head = f"{'':<16}" + "".join(f"{f:>8}" for f in fams)
        modes = cfg.modes if cfg.new_subject else ("obs",)
        for mode in modes:
            tag = "" if mode == "obs" else f" ({mode}olation)"
            metric = "resp_rmse" if cfg.new_subject else "tau_rmse"
            lines.append(f"RMSE{tag}")
            lines.append(head)
            if not cfg.new_subject:
                lines.append(row("mean curve", "mean_rmse"))
            lines.append(row("random term" if not cfg.new_subject else "response", metric, mode=mode))
            lines.append("")
            for metric, title, fmt in (("cp", "Coverage (%)", "{:8.1f}"),
                                       ("length", "Interval length", "{:8.3f}")):
                lines.append(f"{title}{tag}")
                lines.append(head)
                for c in cfg.ncls:
                    for method in cfg.methods:
                        lines.append(row(f"{_pct(c):>3}% {method}", metric, method,
                                         _pct(c), mode, fmt))
                lines.append("")
        bad = {f: k for f, k in self.nonconverged.items() if k}
        lines.append("non-converged fits: " + (", ".join(f"{f} {k}" for f, k in bad.items())
                                               if bad else "none"))
        return "\n".join(lines) + "\n"


def run_benchmark(cfg, workers=1, progress=None):
    """Run ``cfg.replications`` replications and aggregate them.

    Replications are independent and seeded from ``(seed, rep)``, so the
    report does not depend on ``workers``. ``progress(rep, seconds)`` is
    called after each replication.
    """
    args = [(cfg, rep) for rep in range(cfg.replications)]
    if workers > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_one, args))
    else:
        outs = []
        for a in args:
            outs.append(_run_one(a))
            if progress:
                progress(a[1], outs[-1][2])
    per_rep = {}
    nonconv = {f: 0 for f in cfg.families}
    for records, flags, _ in outs:
        for fam, metric, method, ncl, mode, v in records:
            per_rep.setdefault((fam, metric, method, ncl, mode), []).append(v)
        for f, ok in flags.items():
            nonconv[f] += not ok
    records = [dict(scheme=cfg.scheme, n_m=cfg.n_m, family=k[0], metric=k[1], method=k[2],
                    ncl=k[3], mode=k[4], value=float(np.mean(v)), reps=len(v))
               for k, v in per_rep.items()]
    seconds = [o[2] for o in outs]
    runtime = dict(total=float(np.sum(seconds)), per_rep_mean=float(np.mean(seconds)),
                   per_rep_max=float(np.max(seconds)))
    return BenchReport(cfg, records, {k: np.array(v) for k, v in per_rep.items()},
                       nonconv, runtime)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
