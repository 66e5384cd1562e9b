"""Generator/discriminator networks, the GAN, SS and MS losses, and the training loop.

Every loss here is minimized. In value-function terms the discriminator
maximizes ``V + lambda_d * Psi`` and the generator minimizes
``V - lambda_g * Phi``; with ``Psi`` and ``Phi`` mean log-likelihoods, the
minimized forms are ``d_gan + lambda_d * (-Psi)`` and
``g_gan + lambda_g * (-Phi)``, so each SS/MS loss below is a negated
log-likelihood (or, for the matching objective, an absolute difference).

Rotation labels are 1-based throughout; class ``K + 1`` (column ``K``) is
the fake class.
"""

from __future__ import annotations

import math
import os
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ContractError, ParamSet, Tensor
from .config import TrainConfig, serialize_config
from .datasets import StackedDigits, make_dataset
from .evaluation import mode_coverage
from .io import MetricsRow, load_checkpoint, load_idx, save_checkpoint, write_metrics
from .transforms import K, augment_batch, inverse, rotate_batch


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, losses: dict, checkpoint: str | None):
        self.step = step
        self.losses = losses
        self.checkpoint = checkpoint
        where = f"; diagnostic checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}: {losses}{where}")


# ---------------------------------------------------------------------------
# networks


def _dense_stack(params: ParamSet, x, prefix: str, n_layers: int, activation: str,
                 final_activation: bool) -> Tensor:
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = ad.linear(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])
        if i < n_layers - 1 or final_activation:
            h = ad.activate(h, activation)
    return h


def build_generator(latent_dim: int, hidden: int, n_hidden: int, out_dim: int, seed: int,
                    output: str = "linear") -> ParamSet:
    G = ad.build_mlp([latent_dim] + [hidden] * n_hidden + [out_dim], "relu", seed)
    G.meta["output"] = output
    return G


def generate(G: ParamSet, z) -> Tensor:
    out = ad.mlp_apply(G, z)
    return ad.sigmoid(out) if G.meta.get("output") == "sigmoid" else out


def build_discriminator(in_dim: int, hidden: int, n_hidden: int, n_classes: int, seed: int) -> ParamSet:
    """Shared lReLU trunk with a real/fake head and a classifier head.

    ``n_classes`` is K for the SS task, K + 1 for MS, 0 for a plain GAN.
    """
    trunk = ad.build_mlp([in_dim] + [hidden] * n_hidden, "lrelu", seed, prefix="trunk.")
    rf = ad.build_mlp([hidden, 1], "linear", seed + 1, prefix="rf.")
    D = ParamSet(meta={"in_dim": in_dim, "hidden": hidden, "n_hidden": n_hidden, "n_classes": n_classes})
    D.update(trunk)
    D.update(rf)
    if n_classes:
        D.update(ad.build_mlp([hidden, n_classes], "linear", seed + 2, prefix="cls."))
    return D


class TwoHeadOutput(NamedTuple):
    rf_logit: Tensor | None
    class_logits: Tensor | None
    features: Tensor


def features(D: ParamSet, x) -> Tensor:
    return _dense_stack(D, x, "trunk.", D.meta["n_hidden"], "lrelu", True)


def discriminate(D: ParamSet, x, heads: str = "both") -> TwoHeadOutput:
    h = features(D, x)
    rf = cls = None
    if heads in ("both", "rf"):
        rf = ad.reshape(ad.linear(h, D["rf.W0"], D["rf.b0"]), (-1,))
    if heads in ("both", "cls"):
        if not D.meta["n_classes"]:
            raise ContractError("discriminator has no classifier head")
        cls = ad.linear(h, D["cls.W0"], D["cls.b0"])
    return TwoHeadOutput(rf, cls, h)


def rotate_tensor(x, ks: np.ndarray, image_shape=None) -> Tensor:
    """Differentiable per-row rotation; the backward pass applies the inverse rotation."""
    x = ad.as_tensor(x)
    ks = np.asarray(ks)
    inv = np.array([inverse(k) for k in range(1, K + 1)])[ks - 1]

    def backward(g):
        x._accumulate(rotate_batch(g, inv, image_shape))

    return ad._make(rotate_batch(x.data, ks, image_shape), (x,), backward, "rotate")


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"need one label per sample ({n}), got shape {labels.shape}")
    if labels.size and (labels.min() < 1 or labels.max() > K):
        raise ContractError(f"rotation labels must lie in 1..{K}")
    return labels.astype(np.int64)


def class_log_probs(logits) -> Tensor:
    """``log softmax`` with the log argument clamped at 1e-12."""
    return ad.log(ad.softmax(logits))


def gan_losses(rf_real, rf_fake) -> tuple[Tensor, Tensor]:
    """Discriminator BCE and the non-saturating generator loss, from logits."""
    rf_real, rf_fake = ad.as_tensor(rf_real), ad.as_tensor(rf_fake)
    if rf_real.data.size == 0 or rf_fake.data.size == 0:
        raise ContractError("gan_losses needs non-empty batches")
    d_loss = -ad.mean(ad.log(ad.sigmoid(rf_real))) - ad.mean(ad.log(ad.sigmoid(-rf_fake)))
    g_loss = -ad.mean(ad.log(ad.sigmoid(rf_fake)))
    return d_loss, g_loss


def generator_gan_loss(rf_fake) -> Tensor:
    return -ad.mean(ad.log(ad.sigmoid(rf_fake)))


def discriminator_gan_loss(rf_real, rf_fake) -> Tensor:
    return -ad.mean(ad.log(ad.sigmoid(rf_real))) - ad.mean(ad.log(ad.sigmoid(-rf_fake)))


def ss_psi_loss(class_logits_real, labels) -> Tensor:
    """Mean cross-entropy of rotated real samples against their rotation labels."""
    logits = ad.as_tensor(class_logits_real)
    labels = _check_labels(labels, logits.shape[0])
    return -ad.mean(ad.pick(class_log_probs(logits), labels - 1))


def ss_phi_loss(class_logits_fake, labels) -> Tensor:
    """Same cross-entropy on rotated fakes; the generator minimizes it with C held fixed."""
    return ss_psi_loss(class_logits_fake, labels)


def ms_psi_loss(class_logits_real, labels, class_logits_fake) -> Tensor:
    """Rotated reals to their rotation class, rotated fakes to class K+1."""
    real = ad.as_tensor(class_logits_real)
    fake = ad.as_tensor(class_logits_fake)
    labels = _check_labels(labels, real.shape[0])
    real_term = -ad.mean(ad.pick(class_log_probs(real), labels - 1))
    fake_term = -ad.mean(ad.column(class_log_probs(fake), K))
    return real_term + fake_term


def ms_phi_loss(class_logits_fake, labels) -> Tensor:
    """``mean[-log C_k(fake)] + mean[log C_{K+1}(fake)]``: toward the rotation class, away from fake."""
    fake = ad.as_tensor(class_logits_fake)
    labels = _check_labels(labels, fake.shape[0])
    logp = class_log_probs(fake)
    return -ad.mean(ad.pick(logp, labels - 1)) + ad.mean(ad.column(logp, K))


class SSStats(NamedTuple):
    """Mean ``log C_k`` at the true rotation and mean ``log C_{K+1}`` over a rotated batch."""

    log_ck: Tensor
    log_cfake: Tensor
    n: int


def ms_stats(class_logits, labels) -> SSStats:
    logits = ad.as_tensor(class_logits)
    labels = _check_labels(labels, logits.shape[0])
    logp = class_log_probs(logits)
    return SSStats(ad.mean(ad.pick(logp, labels - 1)), ad.mean(ad.column(logp, K)), logits.shape[0])


def ms_matching_loss(stats_fake: SSStats, stats_real: SSStats) -> Tensor:
    """l1 gap between the fake and real values of ``mean log C_k - mean log C_{K+1}``."""
    if stats_fake.n != stats_real.n:
        raise ContractError(f"batch sizes differ: {stats_fake.n} fake vs {stats_real.n} real")
    gap = (stats_fake.log_ck - stats_fake.log_cfake) - (stats_real.log_ck - stats_real.log_cfake)
    return ad.abs_(gap)


# ---------------------------------------------------------------------------
# stand-alone rotation classifier (no generator)


@dataclass
class FittedClassifier:
    D: ParamSet
    image_shape: tuple[int, ...] | None = None

    def log_probs(self, x) -> np.ndarray:
        with ad.frozen(self.D):
            logits = discriminate(self.D, np.asarray(x, dtype=np.float64), heads="cls").class_logits
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self, x) -> np.ndarray:
        return np.exp(self.log_probs(x))


def fit_classifier(real, mode: str = "ss", fake=None, real_weights=None, fake_weights=None,
                   hidden: int = 64, n_hidden: int = 2, steps: int = 2000, lr: float = 1e-3,
                   batch_size: int | None = None, seed: int = 0, image_shape=None,
                   D: ParamSet | None = None) -> FittedClassifier:
    """Train the classifier head and trunk on the SS (``Psi``) or MS (``Psi+``) loss alone.

    Samples are expanded under all four rotations. ``batch_size=None`` uses
    the full (optionally weighted) set each step; otherwise minibatches of
    that many original samples are drawn with replacement.
    """
    real = np.asarray(real, dtype=np.float64)
    n_classes = K if mode == "ss" else K + 1
    if mode == "ms" and fake is None:
        raise ContractError("ms classifier needs a fake set")
    D = D or build_discriminator(real.shape[1], hidden, n_hidden, n_classes, seed)
    adam = AdamState(lr=lr, beta1=0.9, beta2=0.999)
    rng = np.random.default_rng([seed, 17])
    aug_r = augment_batch(real, "all_k", image_shape=image_shape)
    w_r = np.ones(len(real)) if real_weights is None else np.asarray(real_weights, dtype=np.float64)
    w_r = np.tile(w_r / w_r.sum(), K) / 1.0
    if mode == "ms":
        fake = np.asarray(fake, dtype=np.float64)
        aug_f = augment_batch(fake, "all_k", image_shape=image_shape)
        w_f = np.ones(len(fake)) if fake_weights is None else np.asarray(fake_weights, dtype=np.float64)
        w_f = np.tile(w_f / w_f.sum(), K)
    for _ in range(steps):
        D.zero_grad()
        if batch_size is None:
            xr, lr_, wr = aug_r.inputs, aug_r.labels, w_r
        else:
            idx = rng.choice(len(aug_r.labels), size=batch_size * K, p=w_r / w_r.sum())
            xr, lr_, wr = aug_r.inputs[idx], aug_r.labels[idx], np.full(len(idx), 1.0 / len(idx))
        loss = _weighted_ce(discriminate(D, xr, "cls").class_logits, lr_ - 1, wr)
        if mode == "ms":
            if batch_size is None:
                xf, wf = aug_f.inputs, w_f
            else:
                idx = rng.choice(len(aug_f.labels), size=batch_size * K, p=w_f / w_f.sum())
                xf, wf = aug_f.inputs[idx], np.full(len(idx), 1.0 / len(idx))
            fake_cls = np.full(len(xf), K)
            loss = loss + _weighted_ce(discriminate(D, xf, "cls").class_logits, fake_cls, wf)
        ad.backward(loss, D)
        ad.adam_step(adam, D)
    return FittedClassifier(D, image_shape)


def _weighted_ce(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """``-sum_i w_i log C_{t_i}(x_i)`` with ``sum w = 1`` per rotation block times K, averaged."""
    picked = ad.pick(class_log_probs(logits), targets)
    return -ad.sum_(ad.mul(picked, weights / weights.sum()))


# ---------------------------------------------------------------------------
# training


@dataclass
class RunArtifacts:
    config: TrainConfig
    G: ParamSet
    D: ParamSet
    adam_g: AdamState
    adam_d: AdamState
    step: int = 0
    metrics: list[MetricsRow] = field(default_factory=list)
    totals: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    samples: list[str] = field(default_factory=list)
    last_report: object = None


def dataset_from_config(config: TrainConfig):
    name = config.dataset
    if name.startswith("ring"):
        return make_dataset(name, radius=2.0 * config.data_scale, sigma=config.data_sigma,
                            offset=config.data_offset)
    if name.startswith("grid"):
        return make_dataset(name, spacing=config.data_scale, sigma=config.data_sigma,
                            offset=config.data_offset)
    if name == "glyphs":
        return make_dataset(name, noise=config.data_sigma)
    if name == "stacked":
        if not (config.idx_images and config.idx_labels):
            raise ContractError("dataset = stacked needs idx_images and idx_labels")
        images, labels = load_idx(config.idx_images, config.idx_labels)
        return StackedDigits(images, labels)
    raise ContractError(f"unknown dataset {name!r}")


def init_run(config: TrainConfig, dataset) -> RunArtifacts:
    dim = dataset.dim
    image_shape = getattr(dataset, "image_shape", None)
    n_classes = {"plain": 0, "ss": K, "ms": K + 1}[config.mode]
    G = build_generator(config.latent_dim, config.g_hidden, config.n_hidden, dim, config.seed,
                        "sigmoid" if image_shape else "linear")
    D = build_discriminator(dim, config.d_hidden, config.n_hidden, n_classes, config.seed + 1000)
    return RunArtifacts(config, G, D,
                        AdamState(config.lr, config.beta1, config.beta2),
                        AdamState(config.lr, config.beta1, config.beta2))


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    """Independent stream per (seed, step, purpose) so runs can resume mid-way."""
    return np.random.default_rng([seed, step, stream])


def sample_latent(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(n, dim))


def generate_samples(G: ParamSet, n: int, seed: int, latent_dim: int | None = None) -> np.ndarray:
    latent_dim = latent_dim or G.meta["layer_sizes"][0]
    z = sample_latent(np.random.default_rng([seed, 99]), n, latent_dim)
    with ad.frozen(G):
        return generate(G, z).data


def _finite(losses: dict) -> bool:
    return all(v is None or math.isfinite(v) for v in losses.values())


def _d_step(run: RunArtifacts, dataset, rng: np.random.Generator, image_shape):
    cfg, G, D = run.config, run.G, run.D
    n = cfg.batch_size
    real = dataset.sample(n, rng)
    with ad.frozen(G):
        fake = generate(G, sample_latent(rng, n, cfg.latent_dim)).data
    ks = augment_batch(real, "random_one", rng, image_shape=image_shape).labels
    ks_fake = ks if cfg.pair_k else augment_batch(real, "random_one", rng).labels
    D.zero_grad()
    G.zero_grad()
    if cfg.mode == "plain":
        out = discriminate(D, np.concatenate([real, fake]), heads="rf")
        d_gan = discriminator_gan_loss(ad.rows(out.rf_logit, 0, n), ad.rows(out.rf_logit, n, 2 * n))
        ss = None
        total = d_gan
    else:
        parts = [real, fake, rotate_batch(real, ks, image_shape)]
        if cfg.mode == "ms":
            parts.append(rotate_batch(fake, ks_fake, image_shape))
        h = features(D, np.concatenate(parts))
        rf = ad.reshape(ad.linear(ad.rows(h, 0, 2 * n), D["rf.W0"], D["rf.b0"]), (-1,))
        cls = ad.linear(ad.rows(h, 2 * n, len(parts) * n), D["cls.W0"], D["cls.b0"])
        d_gan = discriminator_gan_loss(ad.rows(rf, 0, n), ad.rows(rf, n, 2 * n))
        if cfg.mode == "ss":
            ss = ss_psi_loss(cls, ks)
        else:
            ss = ms_psi_loss(ad.rows(cls, 0, n), ks, ad.rows(cls, n, 2 * n))
        total = d_gan + cfg.lambda_d * ss
    values = {"d_gan": float(d_gan.data), "ss": None if ss is None else float(ss.data),
              "d_total": float(total.data)}
    if not _finite(values):
        return values, (real, ks)
    ad.backward(total, D)
    if any(t.grad is not None for t in G.values()):
        raise ContractError("discriminator step leaked gradient into the generator")
    ad.adam_step(run.adam_d, D)
    return values, (real, ks)


def _g_step(run: RunArtifacts, rng: np.random.Generator, image_shape, real_batch):
    cfg, G, D = run.config, run.G, run.D
    n = cfg.batch_size
    real, ks = real_batch
    G.zero_grad()
    D.zero_grad()
    with ad.frozen(D):
        fake = generate(G, sample_latent(rng, n, cfg.latent_dim))
        if cfg.mode == "plain":
            g_gan = generator_gan_loss(discriminate(D, fake, heads="rf").rf_logit)
            g_ss = None
            total = g_gan
        else:
            rot_fake = rotate_tensor(fake, ks, image_shape)
            h = features(D, ad.concat([fake, rot_fake]))
            rf = ad.reshape(ad.linear(ad.rows(h, 0, n), D["rf.W0"], D["rf.b0"]), (-1,))
            cls_fake = ad.linear(ad.rows(h, n, 2 * n), D["cls.W0"], D["cls.b0"])
            g_gan = generator_gan_loss(rf)
            if cfg.mode == "ss":
                g_ss = ss_phi_loss(cls_fake, ks)
            elif cfg.g_objective == "direct":
                g_ss = ms_phi_loss(cls_fake, ks)
            else:
                real_cls = discriminate(D, rotate_batch(real, ks, image_shape), heads="cls").class_logits
                g_ss = ms_matching_loss(ms_stats(cls_fake, ks), ms_stats(real_cls, ks))
            total = g_gan + cfg.lambda_g * g_ss
        values = {"g_gan": float(g_gan.data), "g_ss": None if g_ss is None else float(g_ss.data),
                  "g_total": float(total.data)}
        if not _finite(values):
            return values
        # backprop while D is still frozen so its leaves stay untouched
        ad.backward(total, G)
    if any(t.grad is not None for t in D.values()):
        raise ContractError("generator step leaked gradient into the discriminator")
    ad.adam_step(run.adam_g, G)
    return values


def _save(run: RunArtifacts, path: str) -> str:
    return save_checkpoint({"G": run.G, "D": run.D}, {"G": run.adam_g, "D": run.adam_d},
                           run.config, path, extra={"meta.step": float(run.step)})


def evaluate_modes(run: RunArtifacts, dataset, step: int):
    cfg = run.config
    x = generate_samples(run.G, cfg.eval_samples, cfg.seed * 1_000_003 + step, cfg.latent_dim)
    if hasattr(dataset, "mode_report"):
        return dataset.mode_report(x)
    return mode_coverage(x, dataset.mode_spec())


def train(config: TrainConfig, dataset=None, out_dir: str | None = None,
          resume: str | None = None, stop_at: int | None = None) -> RunArtifacts:
    """Alternate ``d_steps_per_g`` discriminator updates with one generator update.

    Metrics are emitted every ``eval_every`` steps and at the last step.
    With ``out_dir`` set, ``metrics.csv`` and ``final.ckpt`` are written there.
    ``resume`` continues from a checkpoint written by a run with the same
    config; ``stop_at`` ends early (for producing such a checkpoint).
    Raises :class:`TrainingDiverged` on a non-finite loss, after writing a
    diagnostic checkpoint when ``out_dir`` is given.
    """
    dataset = dataset if dataset is not None else dataset_from_config(config)
    image_shape = getattr(dataset, "image_shape", None)
    run = init_run(config, dataset)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        run.G = ckpt.paramset("G.", run.G)
        run.D = ckpt.paramset("D.", run.D)
        run.adam_g = ckpt.adam_state("adam.G.")
        run.adam_d = ckpt.adam_state("adam.D.")
        run.step = int(ckpt.optim["meta.step"][0])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last = config.steps if stop_at is None else min(stop_at, config.steps)
    t0 = time.perf_counter()
    for step in range(run.step + 1, last + 1):
        d_vals, g_vals = {}, {}
        # overflow shows up as a non-finite loss, which is checked below
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(config.d_steps_per_g):
                d_vals, real_batch = _d_step(run, dataset, step_rng(config.seed, step, j), image_shape)
                if not _finite(d_vals):
                    break
            if _finite(d_vals):
                g_vals = _g_step(run, step_rng(config.seed, step, 1000), image_shape, real_batch)
        run.step = step
        losses = {**d_vals, **g_vals}
        if not _finite(losses):
            path = _save(run, os.path.join(out_dir, "diverged.ckpt")) if out_dir else None
            raise TrainingDiverged(step, losses, path)
        if step % config.eval_every == 0 or step == config.steps:
            report = evaluate_modes(run, dataset, step)
            run.last_report = report
            wall = (time.perf_counter() - t0) * 1000.0 if config.timing else None
            run.metrics.append(MetricsRow(step, losses["d_gan"], losses["g_gan"], losses["ss"],
                                          losses["g_ss"], report.covered,
                                          report.kl if report.kl_defined else None, wall))
            run.totals.append({"step": step, **losses})
        if out_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            run.checkpoints.append(_save(run, os.path.join(out_dir, f"step{step:07d}.ckpt")))
    if out_dir:
        write_metrics(run.metrics, os.path.join(out_dir, "metrics.csv"))
        run.checkpoints.append(_save(run, os.path.join(out_dir, "final.ckpt")))
    return run


def config_text(config: TrainConfig) -> str:
    return serialize_config(config)
