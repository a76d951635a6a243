"""Ball flight: drag, identification from tosses, and tracking noisy camera data.

Run: python demos/01_ball_flight.py
"""
import numpy as np

from ballcatch.ballistics import BallState, DragModel, estimate_drag, predict, query, simulate_toss
from ballcatch.estimation import BallTracker, NoiseConfig

rng = np.random.default_rng(0)
true_model = DragModel(K_D=0.0238)

# A throw from 3 m away towards the robot, with and without air drag.
s0 = BallState([3.0, 0.4, 1.3], [-4.2, -0.6, 3.6])
with_drag = predict(true_model, s0, 0.7)
vacuum = predict(DragModel(K_D=0.0), s0, 0.7)
print("position after 0.7 s")
print("  with drag   ", np.round(query(with_drag, 0.7).b, 4))
print("  in vacuum   ", np.round(query(vacuum, 0.7).b, 4))
print("  difference  %.1f cm" % (100 * np.linalg.norm(query(with_drag, 0.7).b - query(vacuum, 0.7).b)))

# Identify K_D from twenty recorded tosses (velocity samples with noise).
tosses = []
for i in range(20):
    start = BallState(rng.uniform([2.5, -1, 1.0], [3.5, 1, 1.6]), rng.uniform([-6, -1, 2], [-3, 1, 5]))
    tosses.append(simulate_toss(true_model, start, 0.6, 100.0, 0.05, rng))
fit = estimate_drag(tosses)
print(f"\nK_D from 20 noisy tosses: {fit.K_D:.5f} (generator 0.0238)")

# Track the first throw from 100 Hz position measurements with 2 mm noise.
tracker = BallTracker(fit, NoiseConfig.default(0.01))
for ms in range(0, 301, 10):
    z = with_drag.pos[ms] + rng.normal(0.0, 0.002, 3)
    tracker.step(z, ms / 1000)
est = tracker.state
print("\nafter 0.3 s of tracking")
print("  velocity estimate ", np.round(est.mean[3:], 3))
print("  true velocity     ", np.round(with_drag.vel[300], 3))
print("  mean NIS %.2f (3 expected for a consistent filter)" % np.mean(tracker.nis))

# Predict the rest of the flight from the estimate and compare the landing point.
ahead = predict(fit, est.ball_state(), 0.4)
print("  predicted position at 0.7 s", np.round(query(ahead, 0.7).b, 4),
      "error %.1f mm" % (1000 * np.linalg.norm(query(ahead, 0.7).b - query(with_drag, 0.7).b)))
