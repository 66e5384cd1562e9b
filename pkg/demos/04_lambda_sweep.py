"""
Weight ablation
================

Sweep the discriminator and generator weights of the MS terms and
write the comparison table. Equivalent to ``mslab sweep``.
"""

import sys

from mslab.config import TrainConfig
from mslab.experiments import lambda_sweep, sweep_csv

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
rows = lambda_sweep(TrainConfig(steps=steps, eval_every=steps, eval_samples=2000))
print(sweep_csv(rows))
