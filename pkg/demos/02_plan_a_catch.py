"""Plan one catch: where and when to meet the ball, then how each joint gets there.

Run: python demos/02_plan_a_catch.py
"""
import time

import numpy as np

from ballcatch.ballistics import BallState, DragModel, predict
from ballcatch.planner import (PlannerConfig, check_goal, plan_catch, plan_path, plan_path_trapezoid,
                               reach_bounds, validate_trajectory)
from ballcatch.robot_model import fk_batch, load_description

desc = load_description()
cfg = PlannerConfig()
q0 = np.array([0.514, -1.575, -1.823, 0.712, 1.288, 0.0, 0.0, 0.0])
qd0 = np.zeros(8)
ball = BallState([2.441, 2.1332, 1.4334], [-2.5133, -2.9431, 3.2512])
pred = predict(DragModel(), ball, 1.2)

t = time.perf_counter()
goal = plan_catch(desc, cfg, q0, qd0, pred, 0.0)
t_high = time.perf_counter() - t
print(f"catch at t_f = {goal.t_f:.3f} s, {1e3 * t_high:.1f} ms, {goal.report.iterations} SQP iterations")
print("  joint motion   ", np.round(goal.q_f - q0, 3))
print("  reach allowed  ", np.round(reach_bounds(desc, qd0, goal.t_f, cfg.lam)[0], 3))
p, z, _ = (a[0] for a in fk_batch(desc, goal.q_f))
v = goal.ball_at_catch.b_dot
print("  gripper to ball %.2e m, axis off the incoming direction by %.2f deg"
      % (np.linalg.norm(p - goal.ball_at_catch.b), np.degrees(np.arccos(-z @ v / np.linalg.norm(v)))))
print("  independent check:", check_goal(desc, cfg, q0, qd0, 0.0, goal) or "all constraints hold")

t = time.perf_counter()
smooth = plan_path(desc, cfg, q0, qd0, goal, 0.0)
t_low = time.perf_counter() - t
trap = plan_path_trapezoid(desc, cfg, q0, qd0, goal, 0.0)
print(f"\n{smooth.K} waypoints every {cfg.gamma} s, eight QPs in {1e3 * t_low:.1f} ms")
print("  validator:", validate_trajectory(desc, smooth, q0, qd0, goal.q_f) or "ok")
print("  largest KKT residual %.1e" % max(r.kkt_residual for r in smooth.reports))

# The QP minimises squared changes of acceleration; the trapezoid profile jumps.
print("\nsum of squared acceleration changes per joint")
print("  QP        ", np.round(smooth.smoothness(), 2))
print("  trapezoid ", np.round(trap.smoothness(), 2))

print("\nbase and first arm joint along the way")
for k in range(0, smooth.K + 1, 3):
    print(f"  t={k * cfg.gamma:4.2f}  q1={smooth.q[k, 0]: .3f}  x={smooth.q[k, 6]: .3f}  y={smooth.q[k, 7]: .3f}")
