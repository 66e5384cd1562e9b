"""
Mode coverage on the 25-Gaussian grid
======================================

Short plain / SS / MS runs with the same seed. Pass a step count to
run longer; the defaults finish in about a minute.
"""

import sys

from mslab.config import TrainConfig
from mslab.experiments import coverage_experiment, summarize_coverage

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
base = TrainConfig(steps=steps, eval_every=steps)

rows = coverage_experiment(base, seeds=range(1))
for r in rows:
    print(f"{r.mode:5s} seed {r.seed}: {r.covered:2d}/25 modes, mode KL {r.kl:.3f}")

for mode, (cov, kl) in summarize_coverage(rows).items():
    print(f"mean {mode:5s}: {cov:.1f} modes, KL {kl:.3f}")
