"""Task loss, per-factor nuisance adversarial losses, and their combination.

The combined objective is T = L_cls + lam * sum_p L_psi^p where every L_psi^p
is computed through the gradient reversal layer. Minimizing T with one
optimizer realizes the min-max: nuisance heads descend their own loss while
the feature extractor ascends it (scaled by lam * alpha), and the task head
sees only L_cls.

A factor with no labeled samples in the batch is "absent": its loss is not a
zero tensor but a None marker, and it contributes nothing to T or to any
gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import GrlConfig, LayerStack, grl_forward
from .tensor import Tensor


@dataclass(frozen=True)
class NuisanceFactorSpec:
    """A named nuisance factor with its discrete parameter grid.

    The grid doubles as the bucketing rule: class index = position of the
    drawn parameter value in `values`.
    """

    name: str
    values: tuple

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError(f"factor {self.name!r} needs >= 2 grid values")
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"factor {self.name!r} grid has duplicates")

    @property
    def num_classes(self) -> int:
        return len(self.values)

    def class_of(self, value) -> int:
        for i, v in enumerate(self.values):
            if v == value or abs(float(v) - float(value)) <= 1e-12:
                return i
        raise ValueError(f"value {value!r} not on the grid of factor {self.name!r}")

    def param_of(self, cls: int):
        if not 0 <= cls < len(self.values):
            raise ValueError(f"class {cls} out of range for factor {self.name!r}")
        return self.values[cls]


class ModelBundle:
    """Backbone + task head + one nuisance head per factor, plus GRL config."""

    def __init__(self, backbone: LayerStack, task_head: LayerStack,
                 nuisance_heads: dict, factors: dict, grl: GrlConfig):
        if set(nuisance_heads) != set(factors):
            raise ValueError(
                f"heads {sorted(nuisance_heads)} do not match factors {sorted(factors)}")
        feat_dim = backbone.out_shape[1]
        if task_head.in_shape[1] != feat_dim:
            raise ValueError(
                f"task head expects dim {task_head.in_shape[1]}, backbone gives {feat_dim}")
        for name, head in nuisance_heads.items():
            if head.in_shape[1] != feat_dim:
                raise ValueError(
                    f"head {name!r} expects dim {head.in_shape[1]}, backbone gives {feat_dim}")
            if head.out_shape[1] != factors[name].num_classes:
                raise ValueError(
                    f"head {name!r} emits {head.out_shape[1]} classes, "
                    f"factor has {factors[name].num_classes}")
        self.backbone = backbone
        self.task_head = task_head
        self.nuisance_heads = dict(nuisance_heads)
        self.factors = dict(factors)
        self.grl = grl

    def features(self, images: Tensor) -> Tensor:
        return self.backbone(images)

    def task_logits(self, feats: Tensor) -> Tensor:
        return self.task_head(feats)

    def nuisance_logits(self, factor: str, feats: Tensor) -> Tensor:
        """Head applied to the features THROUGH the reversal layer."""
        if factor not in self.nuisance_heads:
            raise KeyError(f"unknown nuisance factor {factor!r}")
        return self.nuisance_heads[factor](grl_forward(feats, self.grl))

    def named_params(self) -> dict:
        out = {}
        for name, p in self.backbone.params().items():
            out[f"backbone.{name}"] = p
        for name, p in self.task_head.params().items():
            out[f"task_head.{name}"] = p
        for factor in sorted(self.nuisance_heads):
            for name, p in self.nuisance_heads[factor].params().items():
                out[f"head.{factor}.{name}"] = p
        return out


@dataclass
class BatchWithLabels:
    """Images, task labels, and sparse per-factor nuisance labels.

    `nuisance` maps factor name -> list of (sample index, class index); only
    samples actually corrupted by that factor carry a label.
    """

    images: Tensor
    task_labels: np.ndarray
    nuisance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-d, got shape {list(self.images.shape)}")
        n = self.images.shape[0]
        self.task_labels = np.asarray(self.task_labels)
        if self.task_labels.shape != (n,):
            raise ValueError(
                f"task_labels shape {list(self.task_labels.shape)} does not match batch {n}")
        for factor, pairs in self.nuisance.items():
            idxs = [i for i, _ in pairs]
            if any(not 0 <= i < n for i in idxs):
                raise ValueError(f"factor {factor!r} has a sample index out of range")
            if len(set(idxs)) != len(idxs):
                raise ValueError(f"factor {factor!r} labels a sample twice")

    def __len__(self) -> int:
        return self.images.shape[0]


def task_loss(bundle: ModelBundle, batch: BatchWithLabels) -> Tensor:
    """Mean cross-entropy of the task head over ALL samples in the batch."""
    if len(batch) == 0:
        raise ValueError("task_loss needs a nonempty batch")
    return T.softmax_cross_entropy(
        bundle.task_logits(bundle.features(batch.images)), batch.task_labels)


def _factor_loss(bundle: ModelBundle, grl_feats: Tensor, batch: BatchWithLabels,
                 factor: str):
    pairs = batch.nuisance.get(factor, [])
    if not pairs:
        return None, 0
    idxs = [i for i, _ in pairs]
    classes = np.array([c for _, c in pairs], dtype=np.int64)
    sub = T.gather_rows(grl_feats, idxs)
    return T.softmax_cross_entropy(bundle.nuisance_heads[factor](sub), classes), len(pairs)


def nuisance_loss(bundle: ModelBundle, batch: BatchWithLabels, factor: str):
    """Mean CE of one factor's head over its labeled subset, through the GRL.

    Returns None (the "absent" marker) when no sample carries this factor's
    label; raises KeyError for a factor the bundle does not know.
    """
    if factor not in bundle.nuisance_heads:
        raise KeyError(f"unknown nuisance factor {factor!r}")
    feats = bundle.features(batch.images)
    loss, _ = _factor_loss(bundle, grl_forward(feats, bundle.grl), batch, factor)
    return loss


def total_loss(bundle: ModelBundle, batch: BatchWithLabels, lam: float):
    """T = L_cls + lam * sum_p L_psi^p, plus a per-term float report.

    With lam == 0 the nuisance branch is skipped entirely: T is L_cls itself,
    no head graph is built, and the run is step-identical to one with no
    heads at all.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if len(batch) == 0:
        raise ValueError("total_loss needs a nonempty batch")

    feats = bundle.features(batch.images)
    l_cls = T.softmax_cross_entropy(bundle.task_logits(feats), batch.task_labels)
    report = {"l_cls": l_cls.item(), "l_psi": {}, "n_psi": {}}

    total = l_cls
    if lam > 0 and bundle.nuisance_heads:
        grl_feats = grl_forward(feats, bundle.grl)
        for factor in sorted(bundle.nuisance_heads):
            l_p, n_p = _factor_loss(bundle, grl_feats, batch, factor)
            report["l_psi"][factor] = None if l_p is None else l_p.item()
            report["n_psi"][factor] = n_p
            if l_p is not None:
                total = T.add(total, T.scale(l_p, lam))
    else:
        for factor in sorted(bundle.nuisance_heads):
            report["l_psi"][factor] = None
            report["n_psi"][factor] = 0

    report["total"] = total.item()
    return total, report
