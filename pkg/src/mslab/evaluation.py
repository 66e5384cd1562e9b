"""Mode coverage, the collapsed-versus-diverse loss comparison, linear probes and sample dumps."""

from __future__ import annotations

import math
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .transforms import K, augment_batch


@dataclass
class ModeSpec:
    centers: np.ndarray
    assign_radius: float

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if len(self.centers) < 1:
            raise ContractError("ModeSpec needs at least one center")

    @property
    def n_modes(self) -> int:
        return len(self.centers)


@dataclass
class ModeReport:
    covered: int
    kl: float            # nan when no sample was assigned
    assigned_fraction: float
    counts: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def kl_defined(self) -> bool:
        return not math.isnan(self.kl)


def histogram_kl(counts: np.ndarray) -> float:
    """KL(empirical histogram || uniform) in nats; nan for an empty histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return math.nan
    h = counts[counts > 0] / total
    return float(np.sum(h * np.log(h * len(counts))))


def assign_modes(samples: np.ndarray, spec: ModeSpec) -> np.ndarray:
    """Nearest-center mode per sample, or -1 beyond ``assign_radius``."""
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    c = spec.centers
    out = np.empty(len(x), dtype=np.int64)
    c_sq = (c * c).sum(axis=1)
    for start in range(0, len(x), 4096):
        block = x[start:start + 4096]
        d2 = (block * block).sum(axis=1)[:, None] - 2 * block @ c.T + c_sq[None, :]
        nearest = d2.argmin(axis=1)
        dist = np.sqrt(np.maximum(d2[np.arange(len(block)), nearest], 0.0))
        out[start:start + 4096] = np.where(dist <= spec.assign_radius, nearest, -1)
    return out


def report_from_codes(codes: np.ndarray, n_modes: int, n_samples: int | None = None) -> ModeReport:
    codes = np.asarray(codes)
    n_samples = len(codes) if n_samples is None else n_samples
    assigned = codes[codes >= 0]
    counts = np.bincount(assigned, minlength=n_modes)[:n_modes]
    return ModeReport(int(np.count_nonzero(counts)), histogram_kl(counts),
                      len(assigned) / max(n_samples, 1), counts)


def mode_coverage(samples, spec: ModeSpec) -> ModeReport:
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ContractError("mode_coverage needs at least one sample")
    return report_from_codes(assign_modes(samples, spec), spec.n_modes)


# ---------------------------------------------------------------------------
# collapsed vs diverse generators under a fixed rotation classifier


@dataclass
class LoopholeResult:
    mode: str
    diverse: float
    collapsed: list[float]

    @property
    def some_collapsed_not_worse(self) -> bool:
        return any(c <= self.diverse for c in self.collapsed)

    @property
    def margin(self) -> float:
        """Smallest collapsed loss minus the diverse loss (> 0: diverse strictly best)."""
        return min(self.collapsed) - self.diverse


def rotation_set_loss(classifier, samples: np.ndarray, mode: str, image_shape=None) -> float:
    """Mean ``-Phi`` (ss) or ``-Phi+`` (ms) of a sample set over all four rotations."""
    aug = augment_batch(samples, "all_k", image_shape=image_shape)
    logp = classifier.log_probs(aug.inputs)
    own = logp[np.arange(len(aug.labels)), aug.labels - 1]
    if mode == "ss":
        return float(-own.mean())
    if mode == "ms":
        return float(-(own - logp[:, K]).mean())
    raise ContractError(f"unknown mode {mode!r}")


def loophole_experiment(classifier, diverse_set, collapsed_sets: Sequence, mode: str = "ss",
                        image_shape=None) -> LoopholeResult:
    """Score a diverse set and several collapsed sets as if each were a generator's output.

    ``classifier`` exposes ``log_probs(x) -> (n, n_classes)``. In ``ms``
    mode it may instead be a callable ``fit(fake_set) -> classifier``: each
    candidate set then gets the classifier trained against it as the fake
    class, which is the equilibrium the minimax value assumes.
    """
    def score(s):
        clf = classifier if hasattr(classifier, "log_probs") else classifier(np.asarray(s))
        return rotation_set_loss(clf, s, mode, image_shape)

    return LoopholeResult(mode, score(diverse_set), [score(s) for s in collapsed_sets])


# ---------------------------------------------------------------------------
# linear probe


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 500,
                 lr: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent from zero weights."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(train_features, train_labels, test_features, test_labels, epochs: int = 500,
                 lr: float = 0.1) -> float:
    """Top-1 test accuracy of a logistic-regression probe on frozen features."""
    xtr = np.asarray(train_features, dtype=np.float64)
    xte = np.asarray(test_features, dtype=np.float64)
    ytr = np.asarray(train_labels)
    yte = np.asarray(test_labels)
    classes = np.unique(np.concatenate([ytr, yte]))
    if len(np.unique(ytr)) < 2:
        raise ContractError("linear_probe needs at least two classes in the training split")
    lookup = {c: i for i, c in enumerate(classes)}
    ytr_i = np.array([lookup[c] for c in ytr])
    yte_i = np.array([lookup[c] for c in yte])
    xtr, xte = _standardize(xtr, xte)
    w, b = fit_logistic(xtr, ytr_i, len(classes), epochs, lr)
    pred = np.argmax(xte @ w + b, axis=1)
    return float(np.mean(pred == yte_i))


# ---------------------------------------------------------------------------
# sample dumps


def tile_images(images: np.ndarray, image_shape: tuple[int, ...]) -> np.ndarray:
    """Arrange ``n`` images on a ``ceil(sqrt(n))``-wide grid (blank cells are 0)."""
    imgs = np.asarray(images, dtype=np.float64).reshape((-1,) + tuple(image_shape))
    if imgs.ndim == 4:
        imgs = imgs.mean(axis=-1)
    n, h, w = imgs.shape
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    canvas = np.zeros((rows * h, cols * w))
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = imgs[i]
    return canvas


def pgm_bytes(canvas: np.ndarray) -> bytes:
    pix = np.clip(np.round(np.asarray(canvas) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def sample_grid(sample_fn: Callable[[int, int], np.ndarray], n: int, seed: int, path,
                image_shape: tuple[int, ...] | None = None) -> str:
    """Dump ``n`` generated samples: a tiled PGM for images, ``x,y`` CSV for points.

    ``sample_fn(n, seed)`` must be deterministic in its arguments.
    """
    if n < 1:
        raise ContractError("sample_grid needs n >= 1")
    x = np.asarray(sample_fn(n, seed), dtype=np.float64)
    path = str(path)
    if image_shape is not None:
        _atomic_write(path, pgm_bytes(tile_images(x, image_shape)))
    else:
        lines = ["x,y"] + [",".join(repr(float(v)) for v in row) for row in x]
        _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
    return path
