"""The tuning target moves: Riccati-optimal gains under a friction ramp.

Pole friction stays at its nominal value for 50 steps, ramps up over the next
50 and then oscillates. Re-solving the Riccati equation at every step shows
how far the optimal angle gains travel, and what a frozen initial gain costs.

Run:  python demos/03_lqr_drift.py
"""
from tvbo import lqr

problem = lqr.make_problem("lqr2d")
k0 = problem.optimum(0)
print("tuned entries: angle and angular-velocity gains")
print("box:", problem.lower.round(2), "to", problem.upper.round(2))
print(f"\n{'t':>4} {'friction':>9} {'optimal gain':>22} {'f_opt':>8} {'frozen regret':>14}")
for t in (0, 49, 60, 75, 90, 100, 125, 150):
    theta = problem.optimum(t)
    f_opt = problem.f_opt(t)
    print(f"{t:4d} {lqr.friction(t):9.2e} {str(theta.round(3)):>22} {f_opt:8.4f}"
          f" {problem.f(k0, t) - f_opt:14.2e}")
