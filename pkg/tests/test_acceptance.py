"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test logs a PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria". Budgets are CPU seconds.
"""

import math
import time

import numpy as np

from mslab import analytic as an
from mslab.cli import run_cli
from mslab.config import TrainConfig
from mslab.experiments import (LAMBDA_D_GRID, LAMBDA_G_GRID, classifier_convergence, coverage_experiment,
                               loophole_pipeline, summarize_coverage)
from mslab.gan import train
from mslab.io import read_metrics
from mslab.transforms import K
from mslab.verify import gradcheck_suite, prop1_tv, prop2_tv, random_distribution, random_pair


class Budget:
    def __enter__(self):
        self.start = time.process_time()
        return self

    def __exit__(self, *exc):
        self.seconds = time.process_time() - self.start


def test_criterion_01_gradient_suite(record):
    with Budget() as b:
        checks = gradcheck_suite(range(50), tolerance=1e-4)
    bad = [c.name for c in checks if not c.passed]
    ok = not bad and b.seconds < 60
    record(1, ok, f"{len(checks)} cases x 50 seeds, failing {bad or 'none'}, {b.seconds:.0f}s cpu")
    assert ok, [c for c in checks if not c.passed]


def test_criterion_02_prop1_oracle(record):
    rng = np.random.default_rng(2)
    with Budget() as b:
        tvs = [prop1_tv(random_distribution(rng, max_atoms=12)) for _ in range(20)]
    ok = max(tvs) <= 1e-3 and b.seconds < 120
    record(2, ok, f"max row TV {max(tvs):.2e} over 20 distributions, {b.seconds:.0f}s cpu")
    assert ok


def test_criterion_03_prop2_oracle(record):
    rng = np.random.default_rng(3)
    with Budget() as b:
        tvs = []
        for _ in range(20):
            P_g, P_d = random_pair(rng, max_atoms=12)
            tvs.append(prop2_tv(P_d, P_g))
    ok = max(tvs) <= 1e-3 and b.seconds < 120
    record(3, ok, f"max row TV {max(tvs):.2e} over 20 pairs, {b.seconds:.0f}s cpu")
    assert ok


def test_criterion_04_decomposition(record):
    rng = np.random.default_rng(4)
    worst, exact = 0.0, True
    for _ in range(100):
        P_g, P_d = random_pair(rng)
        dec = an.phi_ms_value(P_g, P_d)
        worst = max(worst, abs(dec.total - (-dec.kl_term + dec.residual_term)))
        kl = an.kl_divergence(P_g, P_d)
        exact &= dec.kl_term == kl
        for k in range(1, K + 1):
            exact &= an.kl_divergence(an.transformed_marginal(P_g, k), an.transformed_marginal(P_d, k)) == kl
    ok = worst <= 1e-10 and exact
    record(4, ok, f"max |total + kl - residual| {worst:.1e}, per-rotation KL exact: {exact}")
    assert ok


def _disjoint_atoms(n):
    # same direction, growing radius: no atom is a rotation of another
    return np.array([[float(i + 1), 0.5 * i] for i in range(n)])


def test_criterion_05_loophole_certificate(record):
    lines, ok = [], True
    for n in (2, 3, 5):
        atoms = _disjoint_atoms(n)
        P_d = an.FiniteDistribution(atoms, np.full(n, 1.0 / n))
        collapsed = an.FiniteDistribution.point_mass(atoms[0])
        phi = an.phi_ss_value(collapsed, an.optimal_classifier_ss(P_d)).value
        kl = an.kl_divergence(collapsed, P_d)
        ms_c = an.phi_ms_value(collapsed, P_d).total
        ms_d = an.phi_ms_value(P_d, P_d).total
        good = phi == 0.0 and math.isclose(kl, math.log(n), rel_tol=1e-15) and kl > 0 and ms_d > ms_c
        ok &= good
        lines.append(f"n={n}: phi {phi}, kl {kl:.4f}, ms {ms_d:.3f} > {ms_c:.3f}")
    record(5, ok, "; ".join(lines))
    assert ok


def test_criterion_06_fig3_direction(record):
    with Budget() as b:
        runs = [loophole_pipeline(seed) for seed in range(5)]
    ss_ok = [r.ss.some_collapsed_not_worse for r in runs]
    margins = [r.ms.margin for r in runs]
    ms_wins = sum(m > 0 for m in margins)
    ok = ms_wins >= 4 and sum(ss_ok) >= 4 and b.seconds < 600
    record(6, ok, f"ss collapsed<=diverse {sum(ss_ok)}/5, ms margins {np.round(margins, 3).tolist()}, "
                  f"{b.seconds:.0f}s cpu")
    assert ok


def test_criterion_07_mode_coverage(record):
    base = TrainConfig(steps=20000, eval_every=20000)
    with Budget() as b:
        rows = coverage_experiment(base, seeds=range(5))
    s = summarize_coverage(rows)
    cov = {m: s[m][0] for m in s}
    kl = {m: s[m][1] for m in s}
    ok = cov["ms"] >= cov["ss"] >= cov["plain"] and kl["ms"] <= kl["ss"] and b.seconds < 1800
    detail = ", ".join(f"{m} {cov[m]:.1f} modes kl {kl[m]:.3f}" for m in s)
    record(7, ok, f"{detail}, {b.seconds:.0f}s cpu")
    assert ok, rows


def test_criterion_08_classifier_convergence(record):
    with Budget() as b:
        res = classifier_convergence()
    ok = res.max_tv <= 0.05 and b.seconds < 300
    record(8, ok, f"max row TV {res.max_tv:.4f} on {len(res.atoms)} atoms, {b.seconds:.0f}s cpu")
    assert ok


def test_criterion_09_determinism_and_resume(tmp_path, record):
    cfg = TrainConfig(mode="ms", steps=600, eval_every=100, eval_samples=2000, seed=9)
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    train(cfg, out_dir=tmp_path / "c", stop_at=300)
    resumed = train(cfg, out_dir=tmp_path / "d", resume=tmp_path / "c" / "final.ckpt")
    full = read_metrics(tmp_path / "a" / "metrics.csv")
    after = [m for m in full if m.step > 300]
    resume_ok = resumed.metrics == after and read_metrics(tmp_path / "d" / "metrics.csv") == after
    final_same = ((tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "d" / "final.ckpt").read_bytes())
    ok = same and resume_ok and final_same
    record(9, ok, f"bit-identical csv {same}, resumed rows match {resume_ok}, final checkpoint match {final_same}")
    assert ok


def test_criterion_10_lambda_sweep(tmp_path, record):
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text("steps = 300\neval_every = 300\neval_samples = 2000\n")
    assert run_cli(["sweep", "--config", str(cfg), "--out-dir", str(tmp_path / "grid")]) == 0
    rows = (tmp_path / "grid" / "sweep.csv").read_text().splitlines()
    cells = {tuple(map(float, r.split(",")[:2])) for r in rows[1:]}
    complete = cells == {(ld, lg) for ld in LAMBDA_D_GRID for lg in LAMBDA_G_GRID}

    # forced blow-up at the heaviest weight: the abort path must be flagged, not crash the sweep
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps = 300\neval_every = 300\nlr = 1e200\n")
    assert run_cli(["sweep", "--config", str(bad), "--lambda-d-grid", "7", "--lambda-g-grid", "0.1,0.3",
                    "--out-dir", str(tmp_path / "bad")]) == 0
    flagged = [r.split(",")[2] for r in (tmp_path / "bad" / "sweep.csv").read_text().splitlines()[1:]]
    statuses = sorted({r.split(",")[2] for r in rows[1:]})
    ok = complete and flagged == ["diverged", "diverged"]
    record(10, ok, f"{len(rows) - 1} grid rows ({', '.join(statuses)}), injected runs {flagged}")
    assert ok
