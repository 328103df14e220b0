"""Deterministic synthetic digit images for offline runs.

Digits are drawn as seven-segment stroke sets, jittered by a small random
affine map, and rasterized with a soft pen profile. This is a stand-in used
when the real handwritten sets are not on disk: same shapes, same label
space, fully seeded. Classes are balanced by construction (class = index
mod 10).

The strokes are deliberately faint and thin: the clean task stays easy, but
the corruption grids (noise std up to 0.30, salt at full brightness) push a
clean-trained model well out of distribution, which is the regime the
robustness comparisons need.
"""

import numpy as np

from .data import Dataset
from .rng import child_rng
from .tensor import Tensor

# seven-segment endpoints in unit coordinates, y pointing down
_SEGS = {
    "A": ((0.30, 0.20), (0.70, 0.20)),
    "B": ((0.70, 0.20), (0.70, 0.50)),
    "C": ((0.70, 0.50), (0.70, 0.80)),
    "D": ((0.30, 0.80), (0.70, 0.80)),
    "E": ((0.30, 0.50), (0.30, 0.80)),
    "F": ((0.30, 0.20), (0.30, 0.50)),
    "G": ((0.30, 0.50), (0.70, 0.50)),
}

_DIGIT_SEGS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGEDC",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}


def _render(segments: np.ndarray, size: int, width: float, ink: float) -> np.ndarray:
    """Soft-stroke rasterization from point-to-segment distances."""
    centers = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(centers, centers)  # [size,size], x along columns
    p = np.stack([px, py], axis=-1).reshape(-1, 1, 2)

    a = segments[:, 0][None, :, :]
    b = segments[:, 1][None, :, :]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    d = np.sqrt(((p - closest) ** 2).sum(-1)).min(axis=1).reshape(size, size)

    return np.clip(ink * np.exp(-0.5 * (d / width) ** 2), 0.0, 1.0)


def _jitter(segments: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.85, 1.10)
    shift = rng.uniform(-0.06, 0.06, size=2)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]]) * scale
    return (segments - 0.5) @ rot.T + 0.5 + shift


def synth_image(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    segs = np.array([_SEGS[s] for s in _DIGIT_SEGS[digit]])
    segs = _jitter(segs, rng)
    width = rng.uniform(0.032, 0.050)
    ink = rng.uniform(0.25, 0.55)
    return _render(segs, size, width, ink)


def make_synthetic(n: int, seed: int, size: int = 28) -> Dataset:
    images = np.zeros((n, 1, size, size))
    labels = np.arange(n, dtype=np.int64) % 10
    rng = child_rng(seed, "synth")
    for i in range(n):
        images[i, 0] = synth_image(int(labels[i]), rng, size)
    return Dataset(Tensor(images), labels, provenance="synthetic")
