"""Synthetic data sources.

Each source samples float64 arrays of shape ``(n, dim)`` from a caller
supplied generator and knows its own modes, so generated samples can be
scored with :func:`mslab.evaluation.mode_coverage`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import ModeSpec


@dataclass
class GaussianMixture:
    """Equal-weight isotropic Gaussians in the plane."""

    centers: np.ndarray
    sigma: float = 0.05
    name: str = "mixture"
    image_shape: tuple[int, ...] | None = None

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, len(self.centers), size=n)
        return self.centers[idx] + self.sigma * rng.standard_normal((n, self.dim))

    def mode_spec(self) -> ModeSpec:
        return ModeSpec(self.centers, 3.0 * self.sigma)


def ring(n_modes: int = 8, radius: float = 2.0, sigma: float = 0.05, offset=(0.0, 0.0)) -> GaussianMixture:
    theta = 2 * np.pi * np.arange(n_modes) / n_modes
    centers = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1) + np.asarray(offset, dtype=np.float64)
    return GaussianMixture(centers, sigma, f"ring{n_modes}")


def grid(side: int = 5, spacing: float = 2.0, sigma: float = 0.05, offset=(0.0, 0.0)) -> GaussianMixture:
    """``side x side`` grid centred on ``offset``."""
    ticks = (np.arange(side) - (side - 1) / 2) * spacing
    xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
    centers = np.stack([xx.ravel(), yy.ravel()], axis=1) + np.asarray(offset, dtype=np.float64)
    return GaussianMixture(centers, sigma, f"grid{side * side}")


@dataclass
class FiniteAtoms:
    """Draws atoms of a fixed finite set with given probabilities (no noise)."""

    atoms: np.ndarray
    probs: np.ndarray | None = None
    name: str = "atoms"
    image_shape: tuple[int, ...] | None = None

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = None if self.probs is None else np.asarray(self.probs) / np.sum(self.probs)
        return self.atoms[rng.choice(len(self.atoms), size=n, p=p)]

    def mode_spec(self) -> ModeSpec:
        return ModeSpec(self.atoms, 1e-6)


# 8x8 binary glyphs; rows top-down. Several are rotation-asymmetric, the
# last two are invariant under quarter turns.
_GLYPHS = {
    "L": ["#.......",
          "#.......",
          "#.......",
          "#.......",
          "#.......",
          "#.......",
          "#.......",
          "#######."],
    "T": ["########",
          "...##...",
          "...##...",
          "...##...",
          "...##...",
          "...##...",
          "...##...",
          "........"],
    "F": ["######..",
          "#.......",
          "#.......",
          "#####...",
          "#.......",
          "#.......",
          "#.......",
          "........"],
    "arrow": ["...#....",
              "..###...",
              ".#####..",
              "#.###.#.",
              "..###...",
              "..###...",
              "..###...",
              "........"],
    "plus": ["........",
             "...##...",
             "...##...",
             ".######.",
             ".######.",
             "...##...",
             "...##...",
             "........"],
    "ring": ["........",
             ".######.",
             ".#....#.",
             ".#....#.",
             ".#....#.",
             ".#....#.",
             ".######.",
             "........"],
}


def glyph_templates(names=None) -> tuple[list[str], np.ndarray]:
    names = list(_GLYPHS) if names is None else list(names)
    imgs = np.array([[[c == "#" for c in row] for row in _GLYPHS[n]] for n in names], dtype=np.float64)
    return names, imgs.reshape(len(names), -1)


@dataclass
class GlyphImages:
    """Noisy 8x8 glyph images, one mode per glyph; values clipped to [0, 1]."""

    names: list[str] = field(default_factory=lambda: list(_GLYPHS))
    noise: float = 0.1
    name: str = "glyphs"

    def __post_init__(self):
        self.names, self.templates = glyph_templates(self.names)

    @property
    def dim(self) -> int:
        return self.templates.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return (8, 8)

    def sample(self, n: int, rng: np.random.Generator, modes=None) -> np.ndarray:
        choices = np.arange(len(self.names)) if modes is None else np.atleast_1d(modes)
        idx = choices[rng.integers(0, len(choices), size=n)]
        x = self.templates[idx] + self.noise * rng.standard_normal((n, self.dim))
        return np.clip(x, 0.0, 1.0)

    def mode_spec(self) -> ModeSpec:
        # noise of std `noise` over 64 pixels has norm ~ 8*noise; leave headroom
        return ModeSpec(self.templates, 3.0 * self.noise * np.sqrt(self.dim))


@dataclass
class StackedDigits:
    """Three random digit images stacked as channels, after 2x2 mean pooling.

    The mode of a sample is the base-10 code of its three digits (1000 modes).
    """

    images: np.ndarray   # N x H x W in [0, 1]
    labels: np.ndarray
    name: str = "stacked"

    def __post_init__(self):
        n, h, w = self.images.shape
        pooled = self.images[:, : h - h % 2, : w - w % 2].reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        self.pooled = pooled

    @property
    def image_shape(self) -> tuple[int, int, int]:
        side = self.pooled.shape[1]
        return (side, side, 3)

    @property
    def dim(self) -> int:
        return int(np.prod(self.image_shape))

    def sample_with_codes(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.pooled), size=(n, 3))
        stack = np.stack([self.pooled[idx[:, c]] for c in range(3)], axis=-1)
        codes = (self.labels[idx] * np.array([100, 10, 1])).sum(axis=1)
        return stack.reshape(n, -1), codes

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_with_codes(n, rng)[0]

    def _digit_model(self):
        if getattr(self, "_model", None) is None:
            from .evaluation import fit_logistic
            n = min(len(self.pooled), 5000)
            x = self.pooled[:n].reshape(n, -1)
            mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-6
            w, b = fit_logistic((x - mu) / sd, self.labels[:n], 10, epochs=200, lr=0.5)
            self._model = (mu, sd, w, b)
        return self._model

    def codes(self, batch: np.ndarray) -> np.ndarray:
        """Three-digit code per sample from a logistic digit classifier on each channel."""
        mu, sd, w, b = self._digit_model()
        digits = np.argmax(((self.channels(batch) - mu) / sd) @ w + b, axis=1).reshape(-1, 3)
        return digits @ np.array([100, 10, 1])

    def mode_report(self, samples: np.ndarray):
        from .evaluation import report_from_codes
        return report_from_codes(self.codes(samples), 1000)

    def channels(self, batch: np.ndarray) -> np.ndarray:
        """``(n*3, side*side)`` single-digit images, channel-major per sample."""
        side = self.image_shape[0]
        x = np.asarray(batch).reshape(-1, side, side, 3)
        return np.moveaxis(x, -1, 1).reshape(-1, side * side)


def make_dataset(name: str, **kw):
    if name.startswith("ring"):
        return ring(int(name[4:] or 8), **kw)
    if name.startswith("grid"):
        n = int(name[4:] or 25)
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError(f"grid size must be a square, got {n}")
        return grid(side, **kw)
    if name == "glyphs":
        return GlyphImages(**kw)
    raise ValueError(f"unknown dataset {name!r}")
