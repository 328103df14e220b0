"""Dependency-degree probe.

Freezes a trained feature extractor, attaches a fresh nuisance classifier,
trains only the classifier, and reports Dep = ln(precision / chance): how
recoverable a nuisance factor is from the features at the probe's capacity.
Zero means the probe does no better than guessing.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corruption import DEFAULT_GRIDS, family_of_factor
from .data import Dataset
from .layers import build_nuisance_head
from .objective import ModelBundle
from .rng import child_rng
from .trainer import sgd_step

LOG_BASE = "e"


@dataclass(frozen=True)
class ProbeConfig:
    """Fixed probe budget; kept identical across compared models on purpose."""

    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    holdout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.holdout < 1:
            raise ValueError(f"holdout must be in (0,1), got {self.holdout}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "holdout": self.holdout, "seed": self.seed}


def factor_num_classes(factor: str) -> int:
    """Grid size of one of the built-in nuisance factors."""
    return len(DEFAULT_GRIDS[family_of_factor(factor)])


def extract_features(bundle: ModelBundle, ds: Dataset,
                     batch_size: int = 256) -> np.ndarray:
    """Feature matrix [N, dim] for the whole dataset; backbone untouched."""
    rows = []
    with T.no_grad():
        for lo in range(0, len(ds), batch_size):
            x = T.Tensor(ds.images.data[lo:lo + batch_size])
            rows.append(bundle.features(x).data)
    return np.concatenate(rows, axis=0)


def _stratified_split(labels, holdout, rng):
    # every class with >= 2 members keeps at least one sample on each side
    train_idx, test_idx = [], []
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        members = members[rng.permutation(len(members))]
        n_hold = int(np.floor(holdout * len(members) + 0.5))
        n_hold = min(max(n_hold, 1), len(members) - 1)
        test_idx.append(members[:n_hold])
        train_idx.append(members[n_hold:])
    return (np.sort(np.concatenate(train_idx)),
            np.sort(np.concatenate(test_idx)))


def train_probe(features, factor_labels, num_classes: int,
                config: ProbeConfig = None):
    """Train the 3-layer MLP probe on an 80/20 stratified split.

    Returns (probe, precision) where precision is top-1 accuracy on the
    held-out 20%. The features are plain arrays, so nothing upstream of the
    probe can receive gradient.
    """
    cfg = config if config is not None else ProbeConfig()
    feats = features.data if isinstance(features, T.Tensor) else np.asarray(
        features, dtype=np.float64)
    labels = np.asarray(factor_labels)
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-d [N, dim], got shape {feats.shape}")
    if len(labels) != len(feats):
        raise ValueError(
            f"{len(feats)} feature rows but {len(labels)} labels")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    if len(feats) < 10 * num_classes:
        raise ValueError(
            f"probe needs at least {10 * num_classes} samples for "
            f"{num_classes} classes, got {len(feats)}")
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError(
            f"degenerate labels: every sample is class {int(present[0])}")

    tr, te = _stratified_split(labels, cfg.holdout,
                               child_rng(cfg.seed, "probe", "split"))
    probe = build_nuisance_head(feats.shape[1], num_classes, seed=cfg.seed,
                                tag="probe")
    params = dict(probe.params())
    state = {}
    for epoch in range(1, cfg.epochs + 1):
        perm = child_rng(cfg.seed, "probe", "shuffle", epoch).permutation(len(tr))
        order = tr[perm]
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = T.softmax_cross_entropy(probe(T.Tensor(feats[idx])),
                                           labels[idx])
            if not np.isfinite(loss.data).all():
                raise RuntimeError(f"non-finite probe loss at epoch {epoch}")
            T.backward(loss)
            sgd_step(params, state, cfg.lr, cfg.momentum, cfg.weight_decay)
            for p in params.values():
                p.grad = None

    hits = 0
    with T.no_grad():
        for lo in range(0, len(te), 256):
            idx = te[lo:lo + 256]
            pred = np.argmax(probe(T.Tensor(feats[idx])).data, axis=1)
            hits += int((pred == labels[idx]).sum())
    return probe, hits / len(te)


def chance_level(num_classes: int) -> float:
    return 1.0 / num_classes


def dep_degree(precision: float, num_classes: int) -> float:
    """ln(precision / chance); 0 at chance, ln K at perfect recovery."""
    if not 0 <= precision <= 1:
        raise ValueError(f"precision must be in [0,1], got {precision}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if precision == 0:
        warnings.warn("probe precision is exactly 0 (finite-sample artifact); "
                      "dependency degree reported as -inf")
        return float("-inf")
    return math.log(precision / chance_level(num_classes))


@dataclass(frozen=True)
class DependencyReport:
    factor: str
    precision: float
    chance: float
    dep_degree: float
    log_base: str = LOG_BASE
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.precision <= 1:
            raise ValueError(f"precision {self.precision} outside [0,1]")
        if not 0 < self.chance < 1:
            raise ValueError(f"chance {self.chance} outside (0,1)")
        if self.log_base != LOG_BASE:
            raise ValueError(f"unsupported log base {self.log_base!r}")
        want = (float("-inf") if self.precision == 0
                else math.log(self.precision / self.chance))
        if self.dep_degree != want:
            raise ValueError(
                f"dep_degree {self.dep_degree} is not ln(precision/chance) = {want}")


def dependency_report(factor: str, precision: float, num_classes: int,
                      config: ProbeConfig = None) -> DependencyReport:
    cfg = config if config is not None else ProbeConfig()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dep = dep_degree(precision, num_classes)
    return DependencyReport(factor, precision, chance_level(num_classes), dep,
                            LOG_BASE, cfg.to_dict())


def probe_factor(bundle: ModelBundle, ds: Dataset, factor: str,
                 config: ProbeConfig = None,
                 num_classes: int = None) -> DependencyReport:
    """Extract features for the rows labeled with `factor`, train a probe on
    them, and wrap the result. num_classes defaults to the built-in grid."""
    if factor not in ds.nuisance:
        raise KeyError(f"dataset has no labels for factor {factor!r}; "
                       f"available: {sorted(ds.nuisance)}")
    pairs = ds.nuisance[factor]
    idx = np.array([i for i, _ in pairs], dtype=np.int64)
    labels = np.array([c for _, c in pairs], dtype=np.int64)
    k = num_classes if num_classes is not None else factor_num_classes(factor)
    feats = extract_features(bundle, ds)[idx]
    _, precision = train_probe(feats, labels, k, config)
    return dependency_report(factor, precision, k, config)


def append_report(report: DependencyReport, path, label: str = None) -> None:
    """Append one JSON record per line; -inf is stored as the string "-inf"
    so every line stays valid JSON. label tags the probed model, if any."""
    rec = {"factor": report.factor, "precision": report.precision,
           "chance": report.chance,
           "dep_degree": ("-inf" if math.isinf(report.dep_degree)
                          else report.dep_degree),
           "log_base": report.log_base, "config": report.config}
    if label is not None:
        rec["label"] = label
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_report_records(path) -> list:
    """Raw JSONL records, -inf widened back to float."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["dep_degree"] == "-inf":
                rec["dep_degree"] = float("-inf")
            records.append(rec)
    return records


def read_reports(path) -> list:
    return [DependencyReport(r["factor"], r["precision"], r["chance"],
                             r["dep_degree"], r["log_base"], r["config"])
            for r in read_report_records(path)]
