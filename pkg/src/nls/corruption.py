"""Parameterized image corruptions whose parameters become free labels.

Each corruption family draws its strength from a fixed discrete grid; the
grid index IS the nuisance class, so labels are exact by construction and
chance level is 1/len(grid). `augment_batch` corrupts a declared fraction of
a batch, one family and one grid value per corrupted sample, and attaches the
resulting sparse labels under the family's factor name.

Blur families pad by edge reflection (half-sample symmetry), which makes a
normalized symmetric kernel conserve total intensity exactly.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .objective import BatchWithLabels, NuisanceFactorSpec
from .tensor import Tensor

FAMILIES = ("gaussian_noise", "salt_pepper", "gaussian_blur", "median_blur",
            "motion_blur_1d")
FACTOR_IDS = {name: i for i, name in enumerate(FAMILIES)}
BLUR_FAMILIES = ("gaussian_blur", "median_blur", "motion_blur_1d")

# parameter grids; the grid index is the nuisance class
DEFAULT_GRIDS = {
    "gaussian_noise": (0.05, 0.10, 0.15, 0.20, 0.25, 0.30),
    "salt_pepper": (0.05, 0.10, 0.15, 0.20),
    "gaussian_blur": (3, 5, 7),
    "median_blur": (3, 5, 7),
    "motion_blur_1d": (3, 5, 7),
}

_FACTOR_SUFFIX = {
    "gaussian_noise": "std",
    "salt_pepper": "amount",
    "gaussian_blur": "kernel",
    "median_blur": "kernel",
    "motion_blur_1d": "kernel",
}


def factor_name_of(family: str) -> str:
    return f"{family}_{_FACTOR_SUFFIX[family]}"


def family_of_factor(factor: str) -> str:
    for family in FAMILIES:
        if factor_name_of(family) == factor:
            return family
    raise KeyError(f"unknown nuisance factor {factor!r}")


@dataclass(frozen=True)
class CorruptionOp:
    """One family plus its parameter grid."""

    family: str
    grid: tuple = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown corruption family {self.family!r}")
        if self.grid is None:
            object.__setattr__(self, "grid", DEFAULT_GRIDS[self.family])
        if len(self.grid) == 0:
            raise ValueError(f"{self.family}: empty parameter grid")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError(f"{self.family}: grid must be strictly increasing")
        if self.family in BLUR_FAMILIES:
            for k in self.grid:
                _check_kernel(k)

    @property
    def factor_name(self) -> str:
        return factor_name_of(self.family)

    @property
    def factor_id(self) -> int:
        return FACTOR_IDS[self.family]

    def spec(self) -> NuisanceFactorSpec:
        return NuisanceFactorSpec(self.factor_name, tuple(self.grid))

    def apply(self, image, param, rng: np.random.Generator):
        if self.family == "gaussian_noise":
            return apply_gaussian_noise(image, param, rng)
        if self.family == "salt_pepper":
            return apply_salt_pepper(image, param, rng)
        return apply_blur(image, self.family, param)


def label_of(op: CorruptionOp, param) -> int:
    """Grid index of param; off-grid values are a contract error."""
    return op.spec().class_of(param)


def _as_array(image):
    if isinstance(image, Tensor):
        return image.data, True
    return np.asarray(image, dtype=np.float64), False


def _wrap(arr, was_tensor):
    return Tensor(arr) if was_tensor else arr


def apply_gaussian_noise(image, std: float, rng: np.random.Generator):
    """x + N(0, std^2) pixelwise, clipped to [0,1]."""
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    arr, wrap = _as_array(image)
    out = np.clip(arr + rng.normal(0.0, std, arr.shape), 0.0, 1.0)
    return _wrap(out, wrap)


def apply_salt_pepper(image, amount: float, rng: np.random.Generator):
    """Replace round(amount * npixels) pixels, each with 0 or 1 at even odds."""
    if not 0 <= amount <= 1:
        raise ValueError(f"amount must be in [0,1], got {amount}")
    arr, wrap = _as_array(image)
    out = arr.copy()
    flat = out.reshape(-1)
    k = int(np.floor(amount * flat.size + 0.5))
    if k:
        hit = rng.choice(flat.size, size=k, replace=False)
        flat[hit] = (rng.random(k) < 0.5).astype(np.float64)
    return _wrap(out, wrap)


def _check_kernel(k):
    if int(k) != k or k < 3 or k % 2 == 0:
        raise ValueError(f"kernel size must be an odd int >= 3, got {k}")
    return int(k)


def _reflect_blur_1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (half, half)
    padded = np.pad(arr, pad, mode="symmetric")
    win = np.moveaxis(np.lib.stride_tricks.sliding_window_view(
        padded, len(kernel), axis=axis), -1, 0)
    return np.tensordot(kernel, win, axes=(0, 0))


def apply_blur(image, family: str, kernel_size: int):
    """Gaussian (sigma = k/6), median, or horizontal 1-d motion blur."""
    if family not in BLUR_FAMILIES:
        raise ValueError(f"not a blur family: {family!r}")
    k = _check_kernel(kernel_size)
    arr, wrap = _as_array(image)

    if family == "gaussian_blur":
        sigma = k / 6.0
        t = np.arange(k) - (k - 1) / 2.0
        g = np.exp(-0.5 * (t / sigma) ** 2)
        g /= g.sum()
        out = _reflect_blur_1d(_reflect_blur_1d(arr, g, arr.ndim - 2), g, arr.ndim - 1)
    elif family == "motion_blur_1d":
        box = np.full(k, 1.0 / k)
        out = _reflect_blur_1d(arr, box, arr.ndim - 1)
    else:
        half = k // 2
        pad = [(0, 0)] * (arr.ndim - 2) + [(half, half), (half, half)]
        padded = np.pad(arr, pad, mode="symmetric")
        win = np.lib.stride_tricks.sliding_window_view(padded, (k, k),
                                                       axis=(arr.ndim - 2, arr.ndim - 1))
        out = np.median(win, axis=(-2, -1))
    return _wrap(out, wrap)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which families are active, their grids, and how much of a batch to hit."""

    corrupt_fraction: float
    ops: tuple = ()

    def __post_init__(self):
        if not 0 <= self.corrupt_fraction <= 1:
            raise ValueError(
                f"corrupt_fraction must be in [0,1], got {self.corrupt_fraction}")
        fams = [op.family for op in self.ops]
        if len(set(fams)) != len(fams):
            raise ValueError(f"duplicate families in policy: {fams}")

    def factor_specs(self) -> dict:
        return {op.factor_name: op.spec() for op in self.ops}


def gnt_policy(corrupt_fraction: float = 0.5) -> AugmentationPolicy:
    """Gaussian-noise-only training augmentation."""
    return AugmentationPolicy(corrupt_fraction, (CorruptionOp("gaussian_noise"),))


def policy_from_families(families, corrupt_fraction: float = 0.5) -> AugmentationPolicy:
    return AugmentationPolicy(corrupt_fraction,
                              tuple(CorruptionOp(f) for f in families))


def augment_batch(images, task_labels, policy: AugmentationPolicy,
                  rng: np.random.Generator) -> BatchWithLabels:
    """Corrupt round(fraction*N) samples; labels attach only to those.

    Each corrupted sample gets one family (uniform over active families) and
    one grid value (uniform over that family's grid). A zero fraction or an
    empty family set is a no-op. Input images are never mutated.
    """
    arr, _ = _as_array(images)
    labels = np.asarray(task_labels)
    n = arr.shape[0]
    out = arr.copy()
    nuis = {op.factor_name: [] for op in policy.ops}

    k = int(np.floor(policy.corrupt_fraction * n + 0.5))
    if policy.ops and policy.corrupt_fraction > 0:
        if k < 1:
            raise ValueError(
                f"corrupt_fraction {policy.corrupt_fraction} picks no samples "
                f"from a batch of {n}")
        chosen = np.sort(rng.choice(n, size=k, replace=False))
        for idx in chosen:
            op = policy.ops[int(rng.integers(len(policy.ops)))]
            cls = int(rng.integers(len(op.grid)))
            out[idx] = op.apply(out[idx], op.grid[cls], rng)
            nuis[op.factor_name].append((int(idx), cls))

    return BatchWithLabels(Tensor(out), labels,
                           {f: v for f, v in nuis.items() if v})


# --------------------------------------------------------------------------
# sidecar nuisance-label file: magic "NLS1", u32 LE record count, then
# 6-byte records (image index u32 LE, factor id u8, class u8)

SIDECAR_MAGIC = b"NLS1"


class SidecarFormatError(ValueError):
    pass


def write_sidecar(path, records) -> None:
    """records: iterable of (image_index, factor_id, class_index)."""
    recs = list(records)
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<I", len(recs)))
        for idx, fid, cls in recs:
            if not 0 <= fid < 256 or not 0 <= cls < 256:
                raise ValueError(f"factor id / class out of u8 range: {(fid, cls)}")
            fh.write(struct.pack("<IBB", idx, fid, cls))


def read_sidecar(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SIDECAR_MAGIC:
        raise SidecarFormatError(f"{path}: bad sidecar magic {blob[:4]!r}")
    if len(blob) < 8:
        raise SidecarFormatError(f"{path}: truncated sidecar header")
    (count,) = struct.unpack("<I", blob[4:8])
    need = 8 + 6 * count
    if len(blob) != need:
        raise SidecarFormatError(
            f"{path}: expected {need} bytes for {count} records, got {len(blob)}")
    out = []
    for i in range(count):
        idx, fid, cls = struct.unpack("<IBB", blob[8 + 6 * i: 14 + 6 * i])
        out.append((idx, fid, cls))
    return out


def sidecar_to_nuisance(records) -> dict:
    """Group raw sidecar records into the sparse per-factor label mapping."""
    by_factor = {}
    id_to_family = {i: f for f, i in FACTOR_IDS.items()}
    for idx, fid, cls in records:
        if fid not in id_to_family:
            raise SidecarFormatError(f"unknown factor id {fid}")
        by_factor.setdefault(factor_name_of(id_to_family[fid]), []).append((idx, cls))
    return by_factor
