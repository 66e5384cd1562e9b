"""Rotation self-supervision for GANs: exact finite-support analysis and a small numpy training stack.

Modules:

- ``autodiff``: reverse-mode tensors, MLPs, Adam, finite-difference checks
- ``transforms``: the four rotations on points and images
- ``analytic``: optimal classifiers and value functions on finite distributions
- ``gan``: networks, the GAN/SS/MS losses and the training loop
- ``evaluation``: mode coverage, the collapsed-vs-diverse comparison, probes, sample dumps
- ``config``, ``io``: config text, checkpoints, metrics CSV, IDX files
- ``experiments``, ``verify``: pipelines and self-check suites used by the CLI
"""

__version__ = "0.1.0"
