"""End-to-end pipelines shared by the CLI, the demos and the acceptance tests."""

from __future__ import annotations

import csv
import io as _io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .analytic import FiniteDistribution, optimal_classifier_ss, total_variation
from .config import TrainConfig
from .datasets import GlyphImages
from .evaluation import LoopholeResult, loophole_experiment
from .gan import TrainingDiverged, fit_classifier, train
from .io import atomic_write

ASYMMETRIC_GLYPHS = ("L", "T", "F", "arrow")


# ---------------------------------------------------------------------------
# collapsed vs diverse generators on toy images


@dataclass
class LoopholeRun:
    seed: int
    ss: LoopholeResult
    ms: LoopholeResult


def loophole_pipeline(seed: int = 0, glyphs=ASYMMETRIC_GLYPHS, n_train: int = 512, n_eval: int = 512,
                      steps: int = 1500, hidden: int = 64, noise: float = 0.1) -> LoopholeRun:
    """Score a diverse sample set against single-glyph sets with trained classifiers.

    The SS classifier learns rotations of real data only. Each MS classifier
    is trained with real data against one candidate set as the fake class,
    then scores a fresh draw of that candidate.
    """
    data = GlyphImages(list(glyphs), noise=noise)
    rng = np.random.default_rng([seed, 3])
    real = data.sample(n_train, rng)
    n_modes = len(data.names)

    def candidate(m: int | None, n: int) -> np.ndarray:
        return data.sample(n, rng, modes=None if m is None else [m])

    eval_diverse = candidate(None, n_eval)
    eval_collapsed = [candidate(m, n_eval) for m in range(n_modes)]
    ss_clf = fit_classifier(real, "ss", hidden=hidden, steps=steps, batch_size=64, seed=seed,
                            image_shape=data.image_shape)
    ss = loophole_experiment(ss_clf, eval_diverse, eval_collapsed, "ss", data.image_shape)

    # train-time fake sets are independent of the evaluation draws
    fakes = {id(eval_diverse): candidate(None, n_train)}
    for m, s in enumerate(eval_collapsed):
        fakes[id(s)] = candidate(m, n_train)

    def fit(fake_eval_set):
        return fit_classifier(real, "ms", fake=fakes[id(fake_eval_set)], hidden=hidden, steps=steps,
                              batch_size=64, seed=seed, image_shape=data.image_shape)

    ms = loophole_experiment(fit, eval_diverse, eval_collapsed, "ms", data.image_shape)
    return LoopholeRun(seed, ss, ms)


# ---------------------------------------------------------------------------
# trained classifier vs the closed form


def six_atom_distribution() -> FiniteDistribution:
    """Fixed 6-atom set with partly overlapping rotation orbits."""
    atoms = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [-1.0, 2.0], [1.0, 1.0], [3.0, -1.0]])
    probs = np.array([0.25, 0.10, 0.20, 0.15, 0.18, 0.12])
    return FiniteDistribution(atoms, probs)


@dataclass
class ConvergenceResult:
    atoms: np.ndarray
    learned: np.ndarray
    closed_form: np.ndarray
    tv: np.ndarray

    @property
    def max_tv(self) -> float:
        return float(self.tv.max())


def classifier_convergence(P_d: FiniteDistribution | None = None, steps: int = 4000, hidden: int = 64,
                           lr: float = 3e-3, seed: int = 0) -> ConvergenceResult:
    """Train a rotation classifier on exact (full-batch, probability-weighted) data."""
    P_d = P_d or six_atom_distribution()
    clf = fit_classifier(P_d.support, "ss", real_weights=P_d.probs, hidden=hidden, steps=steps, lr=lr,
                         seed=seed)
    star = optimal_classifier_ss(P_d)
    learned = clf.probs(star.atoms)
    return ConvergenceResult(star.atoms, learned, star.table, total_variation(learned, star.table))


# ---------------------------------------------------------------------------
# mode coverage across objectives


@dataclass
class CoverageRow:
    mode: str
    seed: int
    covered: int
    kl: float
    diverged: bool = False


def coverage_experiment(base: TrainConfig, modes=("plain", "ss", "ms"), seeds=range(5)) -> list[CoverageRow]:
    rows = []
    for mode in modes:
        for seed in seeds:
            cfg = base.replace(mode=mode, seed=seed)
            try:
                rep = train(cfg).last_report
                rows.append(CoverageRow(mode, seed, rep.covered, rep.kl))
            except TrainingDiverged:
                rows.append(CoverageRow(mode, seed, 0, math.nan, True))
    return rows


def summarize_coverage(rows: list[CoverageRow]) -> dict[str, tuple[float, float]]:
    """Mean covered modes and mean mode KL per objective."""
    out = {}
    for mode in dict.fromkeys(r.mode for r in rows):
        sel = [r for r in rows if r.mode == mode]
        out[mode] = (float(np.mean([r.covered for r in sel])), float(np.nanmean([r.kl for r in sel])))
    return out


# ---------------------------------------------------------------------------
# lambda ablation


LAMBDA_D_GRID = (0.5, 1.0, 4.0, 7.0)
LAMBDA_G_GRID = (0.0, 0.01, 0.1, 0.3)
SWEEP_HEADER = ["lambda_d", "lambda_g", "status", "diverged_step", "modes_covered", "mode_kl",
                "d_gan_loss", "g_gan_loss", "ss_component", "g_ss_component"]


@dataclass
class SweepRow:
    lambda_d: float
    lambda_g: float
    status: str              # ok | collapsed | diverged
    diverged_step: int | None = None
    modes_covered: int | None = None
    mode_kl: float | None = None
    d_gan_loss: float | None = None
    g_gan_loss: float | None = None
    ss_component: float | None = None
    g_ss_component: float | None = None


def lambda_sweep(base: TrainConfig, lambda_d=LAMBDA_D_GRID, lambda_g=LAMBDA_G_GRID,
                 collapse_fraction: float = 0.5) -> list[SweepRow]:
    """Train one run per (lambda_d, lambda_g) pair.

    A run that hits a non-finite loss is ``diverged``; a finished run
    covering no modes, or fewer than ``collapse_fraction`` of the best
    run's modes, is ``collapsed``.
    """
    rows = []
    for ld, lg in itertools.product(lambda_d, lambda_g):
        cfg = base.replace(lambda_d=float(ld), lambda_g=float(lg))
        try:
            run = train(cfg)
        except TrainingDiverged as exc:
            rows.append(SweepRow(ld, lg, "diverged", diverged_step=exc.step))
            continue
        last = run.metrics[-1]
        rows.append(SweepRow(ld, lg, "ok", None, last.modes_covered, last.mode_kl, last.d_gan_loss,
                             last.g_gan_loss, last.ss_component, last.g_ss_component))
    best = max((r.modes_covered for r in rows if r.status == "ok"), default=0)
    for r in rows:
        if r.status == "ok" and (r.modes_covered == 0 or r.modes_covered < collapse_fraction * best):
            r.status = "collapsed"
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([_cell(getattr(r, h)) for h in SWEEP_HEADER])
    return buf.getvalue()


def write_sweep(rows: list[SweepRow], path) -> str:
    atomic_write(path, sweep_csv(rows).encode("ascii"))
    return str(path)
