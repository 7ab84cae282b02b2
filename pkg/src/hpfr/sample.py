"""A bundled synthetic dataset shaped like a dose-response anaemia study:
monthly haemoglobin readings ``y`` for patients with a time-varying dose,
a handful of which follow a far noisier path than the rest."""
from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path

import numpy as np

from .kernels import CovParams, SqExpParams, sigma_from_covariates

CSV_NAME = "renal_like.csv"
CONFIG_NAME = "renal_like.ini"
TARGETS_NAME = "renal_like_targets.csv"
OUTLIER_IDS = ("p07", "p19", "p26", "p33")


def sample_paths():
    """``(data_csv, config_ini, targets_csv)`` of the bundled sample."""
    root = resources.files("hpfr") / "sample_data"
    return tuple(Path(str(root / name)) for name in (CSV_NAME, CONFIG_NAME, TARGETS_NAME))


def generate_renal_like(seed=20150101, M=40, months=13):
    """Rows ``(id, t, y, dose, dose2)``; some months are missing at random."""
    rng = np.random.default_rng(seed)
    cov = CovParams(SqExpParams(0.25, [0.08]), [0.0015], 0.04)
    rows = []
    for m in range(M):
        sid = f"p{m + 1:02d}"
        t = np.arange(months, dtype=float)
        keep = np.sort(np.concatenate([[0], 1 + rng.choice(months - 1, months - 3,
                                                            replace=False)]))
        t = t[keep]
        dose = np.clip(1.0 + 0.6 * rng.standard_normal()
                       + 0.15 * np.cumsum(rng.standard_normal(len(t))), 0.0, 3.0)
        mean = 11.5 - 0.036 * t + 0.86 * dose - 0.2 * dose ** 2
        S = sigma_from_covariates(t[:, None], t[:, None], cov)
        scale = 3.0 if sid in OUTLIER_IDS else 1.0
        y = mean + scale * np.linalg.cholesky(S) @ rng.standard_normal(len(t))
        rows += [(sid, ti, round(yi, 3), round(di, 3), round(di * di, 4))
                 for ti, yi, di in zip(t, y, dose)]
    return rows


def write_renal_like(path, **kwargs):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "t", "y", "dose", "dose2"))
        for sid, t, y, d, d2 in generate_renal_like(**kwargs):
            w.writerow((sid, f"{t:g}", f"{y:.3f}", f"{d:.3f}", f"{d2:.4f}"))


def write_extrapolation_targets(path, months=(13, 14), **kwargs):
    """Targets at future months holding each patient's last dose fixed."""
    last = {}
    for sid, t, y, d, d2 in generate_renal_like(**kwargs):
        last[sid] = (d, d2)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "t", "dose", "dose2"))
        for sid, (d, d2) in last.items():
            for t in months:
                w.writerow((sid, t, f"{d:.3f}", f"{d2:.4f}"))
