"""Closed-loop catching: noisy ball tracking, replanning every 0.1 s, lagging joints.

Runs a shortened version of the bundled experiment_b scenario with and without
pre-shaping, then the low-level comparison of experiment_c. The full presets
are available through ``ballcatch simulate --preset ...``.

Run: python demos/04_catching_experiments.py [n_throws]
"""
import sys

from ballcatch.harness import load_preset, run_experiment
from ballcatch.robot_model import load_description

n = int(sys.argv[1]) if len(sys.argv) > 1 else 30
desc = load_description()


def show(label, rep):
    lat = rep["latency"]
    causes = ", ".join(f"{k} {v}" for k, v in rep["failure_causes"].items() if v)
    print(f"{label:<22} success {rep['success_rate']:.2f}  ({causes})  "
          f"replan {1e3 * lat['mean']:.1f} ms mean, {1e3 * lat['p95']:.1f} ms p95")


b = load_preset("experiment_b").with_overrides(n_throws=n)
on = run_experiment(b.with_overrides(learning=True), desc)
off = run_experiment(b.with_overrides(learning=False), desc)
show("with pre-shaping", on)
show("without pre-shaping", off)
print("end-effector RMSE [mm] with %.1f / without %.1f" % (
    1e3 * on["tracking_rmse"]["x"], 1e3 * off["tracking_rmse"]["x"]))

c = load_preset("experiment_c").with_overrides(n_throws=n)
qp = run_experiment(c, desc)
trap = run_experiment(c.with_overrides(low_level="trapezoid"), desc)
show("QP low level", qp)
show("trapezoid low level", trap)
s = qp["smoothness"]
print(f"smoothness cost QP {s['qp_mean']:.1f} vs trapezoid {s['trapezoid_mean']:.1f}, "
      f"QP lower in every episode: {s['qp_dominates_all']}")
