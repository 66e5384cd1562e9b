"""
Optimal rotation classifiers on a finite distribution
======================================================

Closed-form classifiers for the self-supervised (SS) and multi-class
minimax (MS) rotation games, and how a collapsed generator scores
under each.
"""

import numpy as np

from mslab import analytic as an

# three atoms, no two related by a quarter turn
atoms = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 1.0]])
P_d = an.FiniteDistribution(atoms, np.full(3, 1 / 3))

# the SS classifier is certain about every rotated data point
C_ss = an.optimal_classifier_ss(P_d)
print("SS rows on the orbit atoms:")
for a, row in zip(C_ss.atoms, C_ss.table):
    print(f"  {a}  {np.round(row, 3)}")

# a generator emitting only the first atom is never penalized by SS
collapsed, cert = an.loophole_construct(P_d)
print(f"\nSS value, collapsed: {cert.phi_collapsed}   data: {cert.phi_data}")
print(f"KL(collapsed || data) = {cert.kl:.4f}")

# the MS game separates them, since its value tracks KL to the data
for name, P_g in [("data", P_d), ("collapsed", collapsed)]:
    dec = an.phi_ms_value(P_g, P_d)
    print(f"MS value, {name:9s}: {dec.total:.4f}  (kl {dec.kl_term:.4f}, residual {dec.residual_term:.4f})")
