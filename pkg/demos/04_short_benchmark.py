"""A short benchmark sweep, driven from Python rather than the command line.

This runs uncertainty injection, back-to-prior and the frozen-gain baseline
for 80 steps on two seeds, then prints the summary table and the running
average regret. It takes about half a minute on one core.

The same sweep from a shell:

    tvbo-experiment --methods ui,b2p,baseline-k0 --seeds 0-1 --horizon 80 --out runs/demo

Run:  python demos/04_short_benchmark.py
"""
import tempfile

from tvbo.experiment import ExperimentConfig, normalized_regret_curves, run_experiment

with tempfile.TemporaryDirectory() as out:
    cfg = ExperimentConfig(methods=("ui", "b2p", "baseline-k0"), seeds=(0, 1), horizon=80,
                           output_dir=out)
    results, summary = run_experiment(cfg)

for row in summary:
    print(f"{row.method:12s} regret {row.regret_mean:8.4f} +/- {row.regret_std:.4f}"
          f"   unstable {row.unstable_mean:.1f}")

print("\nregret / t at t = 20, 50, 80 (mean over seeds)")
for method in cfg.methods:
    t, _, mean = normalized_regret_curves([r for r in results if r.method == method])
    print(f"{method:12s}", "  ".join(f"{mean[k - 1]:.5f}" for k in (20, 50, 80)))
