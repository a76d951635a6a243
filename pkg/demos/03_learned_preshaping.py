"""Learned reference pre-shaping on the simulated joint controllers.

The plant lags the reference by 8 control steps on the arm and 14 on the base.
A small network per joint learns which reference to send now so that the
output lands where the planner wants it r steps later.

Run: python demos/03_learned_preshaping.py
"""
import numpy as np

from ballcatch.robot_model import load_description
from ballcatch.tracking import (PlantConfig, TrainOptions, collect_dataset, held_out_rmse,
                                held_out_trajectories, run_closed_loop, train)

desc = load_description()
plant = PlantConfig.default(desc)
print("relative degree per joint:", plant.relative_degree.tolist())

data = collect_dataset(plant, desc, seed=0, n_trajectories=8)
print("training pairs per joint:", data.sizes())
model, report = train(data, TrainOptions(seed=0))
print("validation loss after 50 epochs:", np.round(report.final_val(), 4).tolist())

base, shaped = held_out_rmse(plant, desc, model, count=10)
print("\nheld-out point-to-point moves, RMSE per joint [mrad or mm]")
print("  baseline    ", np.round(1e3 * base.mean(axis=0), 1).tolist())
print("  pre-shaped  ", np.round(1e3 * shaped.mean(axis=0), 1).tolist())
print("  reduction    %.0f%% on average" % (100 * (1 - shaped.mean(axis=0) / base.mean(axis=0)).mean()))

# One move in detail: the elbow joint half-way through.
y_d = next(held_out_trajectories(desc, np.random.default_rng(5), 1, dt=plant.dt))
q_base, _ = run_closed_loop(plant, y_d)
q_nn, refs = run_closed_loop(plant, y_d, model)
k = len(y_d) // 3
print(f"\nelbow at t = {k * plant.dt:.2f} s: desired {y_d[k, 2]:.3f}, baseline {q_base[k, 2]:.3f}, "
      f"pre-shaped {q_nn[k, 2]:.3f} (reference sent {refs[k - 1, 2]:.3f})")
