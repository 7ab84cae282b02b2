"""Fit Gaussian and Student-t models to the bundled synthetic dataset and
predict two months ahead for the subjects flagged as outlying.

Run with ``python3 demos/sample_walkthrough.py``.
"""
import numpy as np

from hpfr import ColumnSchema, FitConfig, MixingFamily, Targets, fit, load_dataset, sample_paths
from hpfr.data import BasisConfig
from hpfr.predict import PredictionJob, predict_jobs
from hpfr.sample import OUTLIER_IDS

csv_path, _, _ = sample_paths()
schema = ColumnSchema(v_cols=("dose", "dose2"), w_cols=("t",), x_cols=("t",))
ds = load_dataset(csv_path, schema)
basis = BasisConfig((0.0, 14.0), 3, 2)
print(f"{ds.M} subjects, {sum(s.n for s in ds)} observations")

fits = {}
for label, fam in (("N", MixingFamily.gaussian()), ("T", MixingFamily.student_t())):
    fits[label] = res = fit(ds, basis, fam, FitConfig())
    print(f"{label}: loglik {res.loglik:.2f}  BIC {res.bic:.2f}  iterations {res.iterations}")
print(f"estimated nu = {fits['T'].params.fam.nu:.2f}")

# subjects with small posterior weight are the ones the t model discounts
w = fits["T"].weights
order = np.argsort(w)[:4]
print("lowest weights:", ", ".join(f"{ds[i].id} ({w[i]:.2f})" for i in order))
print("planted outliers:", ", ".join(OUTLIER_IDS))

# extrapolate each planted outlier to months 13 and 14, holding its last dose
for sid in OUTLIER_IDS:
    s = next(s for s in ds if s.id == sid)
    t = np.array([13.0, 14.0])
    dose = s.V[-1, 0]
    tg = Targets(t, t[:, None], t[:, None], V=np.column_stack([[dose] * 2, [dose ** 2] * 2]))
    for label, res in fits.items():
        (p,) = predict_jobs(res, [PredictionJob(s, tg, s.u)], ncls=(0.95,),
                            methods=("PL0", "BTS"), rng=0)
        lo, hi = p.bounds("BTS", 0.95)
        print(f"{sid} {label}: mean {np.round(p.mean, 3)}  95% BTS "
              f"[{lo[0]:.2f}, {hi[0]:.2f}] / [{lo[1]:.2f}, {hi[1]:.2f}]")
