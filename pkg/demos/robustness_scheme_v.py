"""Small-scale look at Scheme V (two perturbed subjects, Gaussian
process deviations): how much the Gaussian fit is pulled by the outliers
compared with the Student-t fit.

Ten replications take a couple of minutes on one core; pass a number on
the command line to change that.
"""
import sys

from hpfr.sim import SchemeConfig, run_benchmark

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 10
cfg = SchemeConfig("V", 61, replications=reps, seed=0, families=("N", "T"),
                   methods=("PL0", "BTS"), J=20)
report = run_benchmark(cfg, progress=lambda rep, sec: print(f"  replication {rep + 1} "
                                                            f"({sec:.1f}s)", flush=True))
print(report.to_text())
for fam in ("N", "T"):
    print(f"{fam}: mean RMSE {report.value(fam, 'mean_rmse'):.4f}  "
          f"tau RMSE {report.value(fam, 'tau_rmse'):.4f}  "
          f"95% BTS coverage {report.value(fam, 'cp', 'BTS', '95'):.1f}%")
