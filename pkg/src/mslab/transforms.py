"""The rotation family T_1..T_4 (0, 90, 180, 270 degrees) and pseudo-label augmentation.

Rotation index ``k`` is 1-based; ``k = 1`` is the identity. Rotations are
counterclockwise. For images (rows top-down) a single quarter turn maps
``out[r][c] = in[c][H-1-r]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, ShapeError

K = 4
POLICIES = ("random_one", "all_k")


def check_index(k: int) -> int:
    if not (1 <= int(k) <= K) or int(k) != k:
        raise ContractError(f"rotation index must be in 1..{K}, got {k}")
    return int(k)


def compose(j: int, k: int) -> int:
    """Index of ``T_k`` applied after ``T_j``."""
    return ((check_index(j) - 1 + check_index(k) - 1) % K) + 1


def inverse(k: int) -> int:
    return ((K - (check_index(k) - 1)) % K) + 1


def rotate_image(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate an ``H x W`` or ``H x W x C`` array counterclockwise by ``90*(k-1)`` degrees."""
    image = np.asarray(image)
    if image.ndim < 2 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"rotate_image needs a square image, got shape {image.shape}")
    # np.rot90 on axes (0, 1) is exactly out[r][c] = in[c][H-1-r]
    return np.rot90(image, check_index(k) - 1, axes=(0, 1)).copy()


def rotate_images(images: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """Rotate a stack ``N x H x W[...]`` with per-image indices."""
    images = np.asarray(images)
    ks = np.asarray(ks)
    if images.ndim < 3 or images.shape[1] != images.shape[2]:
        raise ShapeError(f"rotate_images needs N x H x H[...] input, got {images.shape}")
    out = np.empty_like(images)
    for k in range(1, K + 1):
        sel = ks == k
        if sel.any():
            out[sel] = np.rot90(images[sel], k - 1, axes=(1, 2))
    return out


_QUARTER = {
    1: np.array([[1.0, 0.0], [0.0, 1.0]]),
    2: np.array([[0.0, -1.0], [1.0, 0.0]]),
    3: np.array([[-1.0, 0.0], [0.0, -1.0]]),
    4: np.array([[0.0, 1.0], [-1.0, 0.0]]),
}


def rotation_matrix(k: int) -> np.ndarray:
    return _QUARTER[check_index(k)].copy()


def rotate_point(p, k: int) -> np.ndarray:
    """Rotate a 2-vector about the origin; ``k = 2`` maps ``(x, y)`` to ``(-y, x)``."""
    return _QUARTER[check_index(k)] @ np.asarray(p, dtype=np.float64)


def rotate_points(points: np.ndarray, ks) -> np.ndarray:
    """Rotate an ``N x 2`` array; ``ks`` is a scalar or one index per row.

    Entries are exact permutations/negations, so no rounding is introduced.
    """
    points = np.asarray(points, dtype=np.float64)
    ks = np.broadcast_to(np.asarray(ks), (points.shape[0],))
    if not np.all((ks >= 1) & (ks <= K)):
        raise ContractError("rotation indices must be in 1..4")
    x, y = points[:, 0], points[:, 1]
    out = np.empty_like(points)
    for k, (nx, ny) in {1: (x, y), 2: (-y, x), 3: (-x, -y), 4: (y, -x)}.items():
        sel = ks == k
        out[sel, 0] = nx[sel]
        out[sel, 1] = ny[sel]
    return out


def image_side(dim: int) -> int:
    side = int(round(np.sqrt(dim)))
    if side * side != dim:
        raise ShapeError(f"flattened length {dim} is not a square image")
    return side


def rotate_batch(batch: np.ndarray, ks, image_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Rotate a batch of samples, whatever their layout.

    Rows of length 2 are points. Other flat rows are images of
    ``image_shape`` (default: square, single channel). 3-D and 4-D arrays
    are image stacks.
    """
    batch = np.asarray(batch, dtype=np.float64)
    ks = np.broadcast_to(np.asarray(ks), (batch.shape[0],))
    if batch.ndim == 2 and batch.shape[1] == 2 and image_shape is None:
        return rotate_points(batch, ks)
    if batch.ndim == 2:
        if image_shape is None:
            side = image_side(batch.shape[1])
            image_shape = (side, side)
        stack = batch.reshape((-1,) + tuple(image_shape))
        return rotate_images(stack, ks).reshape(batch.shape)
    return rotate_images(batch, ks)


@dataclass
class AugmentedBatch:
    inputs: np.ndarray
    labels: np.ndarray          # 1-based rotation index per row
    source: str = "real"
    index: np.ndarray | None = None  # row of the original batch each input came from
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ContractError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > K):
            raise ContractError("labels must lie in 1..4")

    def decode(self) -> np.ndarray:
        """Undo each sample's rotation."""
        inv = np.array([inverse(k) for k in range(1, K + 1)])[self.labels - 1]
        return rotate_batch(self.inputs, inv, self.image_shape)


def draw_labels(n: int, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.integers(1, K + 1, size=n)


def augment_batch(batch, policy: str = "random_one", seed=0, source: str = "real",
                  labels: np.ndarray | None = None, image_shape=None) -> AugmentedBatch:
    """Rotate each sample and attach its pseudo-label.

    ``random_one`` draws one label per sample (or reuses ``labels``, so the
    same sequence can be applied to a paired fake batch); ``all_k`` emits
    every sample under all four rotations, label-major.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    if n == 0:
        raise ContractError("augment_batch needs a non-empty batch")
    if policy == "random_one":
        ks = draw_labels(n, seed) if labels is None else np.asarray(labels)
        if ks.shape != (n,):
            raise ContractError("labels must provide one index per sample")
        return AugmentedBatch(rotate_batch(batch, ks, image_shape), ks, source, np.arange(n), image_shape)
    if policy == "all_k":
        ks = np.repeat(np.arange(1, K + 1), n)
        tiled = np.concatenate([batch] * K, axis=0)
        return AugmentedBatch(rotate_batch(tiled, ks, image_shape), ks, source, np.tile(np.arange(n), K),
                              image_shape)
    raise ContractError(f"unknown policy {policy!r}; expected one of {POLICIES}")
