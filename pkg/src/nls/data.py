"""Bit-exact dataset I/O (IDX, NPY u8) plus deterministic subset/split.

The canonical on-disk layout is `data/mnist/` holding the four classic IDX
files and `data/mnist_c/<name>/` holding NPY test sets. The root defaults to
./data and can be moved with the NLS_DATA_DIR environment variable.
"""

import ast
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import child_rng
from .tensor import Tensor

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimError(IdxFormatError):
    pass


class UnsupportedNpyError(ValueError):
    pass


@dataclass
class Dataset:
    """Images in [0,1], task labels in [0,10), optional sparse nuisance labels."""

    images: Tensor
    task_labels: np.ndarray
    nuisance: dict = field(default_factory=dict)
    provenance: str = "clean"

    def __post_init__(self):
        self.task_labels = np.asarray(self.task_labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,1,H,W], got {list(self.images.shape)}")
        n = self.images.shape[0]
        if self.task_labels.shape != (n,):
            raise ValueError(f"{n} images but {len(self.task_labels)} labels")
        if n and (self.images.data.min() < 0 or self.images.data.max() > 1):
            raise ValueError("pixel values outside [0,1]")
        if n and (self.task_labels.min() < 0 or self.task_labels.max() > 9):
            raise ValueError("task labels outside [0,10)")

    def __len__(self) -> int:
        return self.images.shape[0]


def data_root() -> Path:
    return Path(os.environ.get("NLS_DATA_DIR", "data"))


# ---------------------------------------------------------------------------
# IDX


def read_idx(path) -> np.ndarray:
    """Parse one IDX file.

    Images (magic 0x00000803) come back as float64 [N,1,H,W] scaled by /255;
    labels (magic 0x00000801) as int64 [N].
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: too short for a magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise IdxMagicError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = 3 if magic == IMAGES_MAGIC else 1
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) != header + count:
        raise IdxTruncatedError(
            f"{path}: payload is {len(blob) - header} bytes, expected {count}")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=header)
    if magic == LABELS_MAGIC:
        return raw.astype(np.int64)
    n, h, w = dims
    return raw.reshape(n, 1, h, w).astype(np.float64) / 255.0


def write_idx(path, arr: np.ndarray) -> None:
    """Inverse of read_idx; 4-d float [0,1] arrays or 1-d integer labels."""
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        if arr.ndim == 4:
            if arr.shape[1] != 1:
                raise IdxDimError(f"expected a single channel, got {arr.shape[1]}")
            n, _, h, w = arr.shape
            fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
            fh.write(np.round(arr[:, 0] * 255.0).astype(np.uint8).tobytes())
        elif arr.ndim == 1:
            fh.write(struct.pack(">II", LABELS_MAGIC, arr.shape[0]))
            fh.write(arr.astype(np.uint8).tobytes())
        else:
            raise IdxDimError(f"cannot write ndim {arr.ndim} as IDX")


# ---------------------------------------------------------------------------
# NPY (version 1.0 subset, C-order)


def _read_npy(path, descrs) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != b"\x93NUMPY":
        raise UnsupportedNpyError(f"{path}: not an NPY file")
    if blob[6:8] != b"\x01\x00":
        raise UnsupportedNpyError(
            f"{path}: unsupported NPY version {blob[6]}.{blob[7]}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    header = ast.literal_eval(blob[10:10 + hlen].decode("latin1"))
    if header["descr"] not in descrs:
        raise UnsupportedNpyError(f"{path}: unsupported dtype {header['descr']!r}")
    if header["fortran_order"]:
        raise UnsupportedNpyError(f"{path}: fortran order is not supported")
    shape = header["shape"]
    dtype = np.dtype(header["descr"])
    count = int(np.prod(shape)) if shape else 1
    payload = blob[10 + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise UnsupportedNpyError(
            f"{path}: payload is {len(payload)} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def read_npy_u8(path) -> np.ndarray:
    return _read_npy(path, {"|u1"})


def normalize_image_layout(raw: np.ndarray) -> np.ndarray:
    """[N,H,W,1] or [N,H,W] u8 to float [N,1,H,W] in [0,1]."""
    if raw.ndim == 4 and raw.shape[-1] == 1:
        raw = raw[..., 0]
    if raw.ndim != 3:
        raise ValueError(f"cannot normalize image array of shape {list(raw.shape)}")
    return raw[:, None, :, :].astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset roots


def load_mnist(root=None, split: str = "train") -> Dataset:
    root = Path(root) if root is not None else data_root() / "mnist"
    prefix = {"train": "train", "test": "t10k"}[split]
    images = read_idx(root / f"{prefix}-images-idx3-ubyte")
    labels = read_idx(root / f"{prefix}-labels-idx1-ubyte")
    if images.shape[0] != labels.shape[0]:
        raise IdxDimError(
            f"{root}: {images.shape[0]} images vs {labels.shape[0]} labels")
    return Dataset(Tensor(images), labels, provenance="clean")


def load_mnist_c(name: str, root=None) -> Dataset:
    root = Path(root) if root is not None else data_root() / "mnist_c"
    images = normalize_image_layout(read_npy_u8(root / name / "test_images.npy"))
    # labels ship as u8 or little-endian int64 depending on the packaging
    labels = _read_npy(root / name / "test_labels.npy", {"|u1", "<i8"}).astype(np.int64)
    return Dataset(Tensor(images), labels, provenance=f"mnist-c:{name}")


def load_generated(images_path, labels_path, sidecar_path=None,
                   provenance: str = "generated") -> Dataset:
    from .corruption import read_sidecar, sidecar_to_nuisance
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    nuis = {}
    if sidecar_path is not None:
        nuis = sidecar_to_nuisance(read_sidecar(sidecar_path))
    return Dataset(Tensor(images), labels, nuisance=nuis, provenance=provenance)


# ---------------------------------------------------------------------------
# subset / split


def _remap_nuisance(nuisance: dict, chosen: np.ndarray) -> dict:
    pos = {int(old): new for new, old in enumerate(chosen)}
    out = {}
    for factor, pairs in nuisance.items():
        kept = [(pos[i], c) for i, c in pairs if i in pos]
        if kept:
            out[factor] = sorted(kept)
    return out


def _take(ds: Dataset, chosen: np.ndarray) -> Dataset:
    return Dataset(Tensor(ds.images.data[chosen]), ds.task_labels[chosen],
                   nuisance=_remap_nuisance(ds.nuisance, chosen),
                   provenance=ds.provenance)


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified sample of n items: each class gets n//K, +1 for the
    first n%K classes. Deterministic under seed."""
    if n > len(ds):
        raise ValueError(f"cannot take {n} from a dataset of {len(ds)}")
    classes = np.unique(ds.task_labels)
    base, extra = divmod(n, len(classes))
    chosen = []
    for j, k in enumerate(classes):
        quota = base + (1 if j < extra else 0)
        pool = np.flatnonzero(ds.task_labels == k)
        if quota > len(pool):
            raise ValueError(f"class {k} has only {len(pool)} samples, need {quota}")
        rng = child_rng(seed, "subset", int(k))
        chosen.append(rng.choice(pool, size=quota, replace=False))
    return _take(ds, np.sort(np.concatenate(chosen)))


def split(ds: Dataset, fraction: float, seed: int):
    """Stratified split into (first, second) with |first| = round(fraction*N);
    parts are disjoint and exhaustive."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    n = len(ds)
    target = int(np.floor(fraction * n + 0.5))
    classes = np.unique(ds.task_labels)
    takes, fracs, pools = [], [], []
    for k in classes:
        pool = np.flatnonzero(ds.task_labels == k)
        want = fraction * len(pool)
        takes.append(int(np.floor(want)))
        fracs.append(want - np.floor(want))
        pools.append(pool)
    short = target - sum(takes)
    # hand the leftovers to the classes that lost the most to the floor
    order = np.argsort([-f for f in fracs], kind="stable")
    for j in order[:short]:
        takes[j] += 1
    first, second = [], []
    for take, pool, k in zip(takes, pools, classes):
        rng = child_rng(seed, "split", int(k))
        perm = rng.permutation(len(pool))
        first.append(pool[perm[:take]])
        second.append(pool[perm[take:]])
    return (_take(ds, np.sort(np.concatenate(first))),
            _take(ds, np.sort(np.concatenate(second))))
