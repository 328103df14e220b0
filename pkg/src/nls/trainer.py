"""SGD-with-momentum training loop for the combined adversarial objective.

One optimizer covers every parameter; the min-max split is carried entirely
by the reversal layer's sign, never by alternating freezes. The lambda
warm-up keeps the nuisance branch off for the first epochs, and parameters
plus optimizer velocities are rounded to f32 at every epoch boundary, which
is what makes a resumed run bit-identical to an uninterrupted one.

Randomness is derived per (seed, purpose, epoch, batch) so shuffling,
augmentation, and init never share or shift each other's streams.
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .corruption import (AugmentationPolicy, CorruptionOp, augment_batch,
                         gnt_policy, policy_from_families)
from .data import Dataset
from .evaluate import evaluate
from .layers import GrlConfig, build_backbone, build_nuisance_head, grl_forward
from .objective import BatchWithLabels, ModelBundle, total_loss
from .rng import child_rng
from .tensor import ShapeError, Tensor

MODES = ("baseline", "gnt", "gnt-nls", "aug-nls")

# all families except salt_pepper, which stays held out as an unseen corruption
AUG_NLS_FAMILIES = ("gaussian_noise", "gaussian_blur", "median_blur",
                    "motion_blur_1d")


def default_policy(mode: str) -> AugmentationPolicy:
    if mode == "baseline":
        return AugmentationPolicy(0.0, ())
    if mode in ("gnt", "gnt-nls"):
        return gnt_policy(0.5)
    if mode == "aug-nls":
        return policy_from_families(AUG_NLS_FAMILIES, 0.5)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class TrainConfig:
    mode: str
    epochs: int = 3
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda_warmup_epochs: int = 1
    lambda_value: float = 0.05
    grl_alpha: float = 0.5
    seed: int = 0
    arch: str = "mnist-small"
    decay_on_plateau: bool = False
    policy: AugmentationPolicy = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; known: {list(MODES)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.lambda_value < 0:
            raise ValueError(f"lambda_value must be nonnegative, got {self.lambda_value}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.lambda_warmup_epochs < 0:
            raise ValueError("lambda_warmup_epochs must be nonnegative")
        if self.policy is None:
            self.policy = default_policy(self.mode)
        if self.mode == "baseline" and self.policy.ops and self.policy.corrupt_fraction > 0:
            raise ValueError("baseline mode trains on clean data only")

    @property
    def uses_nls(self) -> bool:
        return self.mode.endswith("-nls")

    def lam_at(self, epoch: int) -> float:
        """Effective lambda for a 1-based epoch number."""
        if not self.uses_nls:
            return 0.0
        return 0.0 if epoch <= self.lambda_warmup_epochs else self.lambda_value

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("mode", "epochs", "batch_size", "lr", "momentum", "weight_decay",
              "lambda_warmup_epochs", "lambda_value", "grl_alpha", "seed",
              "arch", "decay_on_plateau")}
        d["policy"] = {
            "corrupt_fraction": self.policy.corrupt_fraction,
            "ops": [{"family": op.family, "grid": list(op.grid)}
                    for op in self.policy.ops],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        pol = d.pop("policy")
        ops = tuple(CorruptionOp(o["family"], tuple(o["grid"])) for o in pol["ops"])
        return cls(policy=AugmentationPolicy(pol["corrupt_fraction"], ops), **d)


def build_bundle(config: TrainConfig) -> ModelBundle:
    features, task_head = build_backbone(config.arch, seed=config.seed)
    heads, factors = {}, {}
    if config.uses_nls:
        factors = config.policy.factor_specs()
        for name in sorted(factors):
            heads[name] = build_nuisance_head(
                features.out_shape[1], factors[name].num_classes,
                seed=config.seed, tag=name)
    return ModelBundle(features, task_head, heads, factors,
                       GrlConfig(config.grl_alpha))


def sgd_step(params: dict, state: dict, lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    Parameters with no gradient this step (absent-factor heads) are left
    untouched, velocity included. Updates replace the data array so saved
    graph views keep their forward values.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: grad shape {list(g.shape)} "
                             f"does not match param {list(p.data.shape)}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + (g + weight_decay * p.data)
        state[name] = v
        p.data = p.data - lr * v


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list
    velocities: dict
    config: TrainConfig


def _quantize_f32(bundle: ModelBundle, velocities: dict) -> None:
    for p in bundle.named_params().values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for name in velocities:
        velocities[name] = velocities[name].astype(np.float32).astype(np.float64)


def _nls_feature_grad_norm(bundle: ModelBundle, batch: BatchWithLabels,
                           lam: float) -> float:
    """Norm of the lambda-scaled reversed-branch gradient on the backbone.

    Runs its own backward on a separate graph and zeroes everything after,
    so the training trajectory is untouched.
    """
    if lam == 0.0 or not bundle.nuisance_heads:
        return 0.0
    feats = bundle.features(batch.images)
    grl_feats = grl_forward(feats, bundle.grl)
    acc = None
    for factor in sorted(bundle.nuisance_heads):
        pairs = batch.nuisance.get(factor, [])
        if not pairs:
            continue
        sub = T.gather_rows(grl_feats, [i for i, _ in pairs])
        l_p = T.softmax_cross_entropy(bundle.nuisance_heads[factor](sub),
                                      np.array([c for _, c in pairs]))
        acc = l_p if acc is None else T.add(acc, l_p)
    if acc is None:
        return 0.0
    T.backward(T.scale(acc, lam))
    sq = 0.0
    for name, p in bundle.named_params().items():
        if name.startswith("backbone.") and p.grad is not None:
            sq += float((p.grad * p.grad).sum())
        p.zero_grad()
    return math.sqrt(sq)


def train(config: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          checkpoint_path=None, resume_from=None) -> TrainResult:
    """Run the full loop; returns the bundle, per-epoch metrics, velocities.

    `checkpoint_path` saves (overwrites) a checkpoint at every epoch
    boundary; `resume_from` continues a previous run from its saved epoch.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("datasets must be nonempty")
    bundle = build_bundle(config)
    params = bundle.named_params()
    velocities = {}
    metrics = []
    start_epoch = 1
    lr = config.lr
    plateau = {"best": -1.0, "stall": 0}

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        saved = TrainConfig.from_dict(ck.config)
        core = lambda c: {k: v for k, v in c.to_dict().items() if k != "epochs"}
        if core(saved) != core(config):
            raise ValueError("checkpoint config does not match the requested run")
        for name, arr in ck.params.items():
            if name not in params:
                raise ValueError(f"checkpoint has unknown parameter {name!r}")
            params[name].data = arr.astype(np.float64)
        velocities = {n: a.astype(np.float64) for n, a in ck.velocities.items()}
        start_epoch = ck.epoch + 1
        lr = ck.state["lr"]
        plateau = {"best": ck.state["best_val"], "stall": ck.state["stall"]}

    n = len(train_ds)
    for epoch in range(start_epoch, config.epochs + 1):
        lam = config.lam_at(epoch)
        perm = child_rng(config.seed, "shuffle", epoch).permutation(n)
        sum_cls, n_batches = 0.0, 0
        psi_sums, psi_counts = {}, {}
        grad_norm = None

        for b, lo in enumerate(range(0, n, config.batch_size)):
            take = perm[lo:lo + config.batch_size]
            batch = augment_batch(train_ds.images.data[take],
                                  train_ds.task_labels[take], config.policy,
                                  child_rng(config.seed, "augment", epoch, b))
            if grad_norm is None:
                grad_norm = _nls_feature_grad_norm(bundle, batch, lam)
            loss, report = total_loss(bundle, batch, lam)
            if not math.isfinite(report["l_cls"]):
                raise RuntimeError(
                    f"non-finite task loss {report['l_cls']} at epoch {epoch} batch {b}")
            for factor, v in report["l_psi"].items():
                if v is not None and not math.isfinite(v):
                    raise RuntimeError(
                        f"non-finite nuisance loss for {factor!r} "
                        f"({v}) at epoch {epoch} batch {b}")
                if v is not None:
                    psi_sums[factor] = psi_sums.get(factor, 0.0) + v
                    psi_counts[factor] = psi_counts.get(factor, 0) + 1
            T.backward(loss)
            sgd_step(params, velocities, lr, config.momentum,
                     config.weight_decay)
            for p in params.values():
                p.zero_grad()
            sum_cls += report["l_cls"]
            n_batches += 1

        _quantize_f32(bundle, velocities)
        val_acc = evaluate(bundle, val_ds)
        row = {"epoch": epoch, "l_cls": sum_cls / n_batches, "val_acc": val_acc,
               "lr": lr, "nls_feature_grad_norm": grad_norm or 0.0}
        for factor in sorted(bundle.nuisance_heads):
            key = f"l_psi.{factor}"
            row[key] = (psi_sums[factor] / psi_counts[factor]
                        if psi_counts.get(factor) else None)
        metrics.append(row)

        if config.decay_on_plateau:
            if val_acc > plateau["best"] + 1e-6:
                plateau["best"] = val_acc
                plateau["stall"] = 0
            else:
                plateau["stall"] += 1
                if plateau["stall"] >= 2:
                    lr *= 0.1
                    plateau["stall"] = 0

        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, bundle, config, epoch, velocities,
                            state={"lr": lr, "best_val": plateau["best"],
                                   "stall": plateau["stall"]})

    return TrainResult(bundle, metrics, velocities, config)


# ---------------------------------------------------------------------------
# checkpoint file: magic "NLSCKPT", version u16 LE, config JSON, epoch u32,
# trainer-state JSON, then sorted name-length-prefixed f32 parameter records
# (velocities stored under an "opt." name prefix)

CKPT_MAGIC = b"NLSCKPT"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    state: dict
    params: dict
    velocities: dict = field(default_factory=dict)


def _write_blob(fh, blob: bytes) -> None:
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def save_checkpoint(path, bundle: ModelBundle, config: TrainConfig, epoch: int,
                    velocities: dict, state: dict = None) -> None:
    records = {name: p.data for name, p in bundle.named_params().items()}
    for name, v in velocities.items():
        records[f"opt.{name}"] = v
    state = state if state is not None else {"lr": config.lr, "best_val": -1.0,
                                             "stall": 0}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    _write_blob(buf, json.dumps(config.to_dict(), sort_keys=True).encode())
    buf.write(struct.pack("<I", epoch))
    _write_blob(buf, json.dumps(state, sort_keys=True).encode())
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:7] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic {blob[:7]!r}")
    (version,) = struct.unpack("<H", blob[7:9])
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = 9

    def read_blob():
        nonlocal pos
        (ln,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        out = blob[pos:pos + ln]
        if len(out) != ln:
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        pos += ln
        return out

    config = json.loads(read_blob())
    (epoch,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    state = json.loads(read_blob())
    (count,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    params, velocities = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", blob[pos:pos + 2])
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack("<B", blob[pos:pos + 1])
        pos += 1
        dims = struct.unpack(f"<{ndim}I", blob[pos:pos + 4 * ndim])
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims)) if ndim else 4
        raw = blob[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise CheckpointFormatError(f"{path}: truncated record {name!r}")
        pos += nbytes
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
        if name.startswith("opt."):
            velocities[name[4:]] = arr
        else:
            params[name] = arr
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return Checkpoint(config, epoch, state, params, velocities)


def bundle_from_checkpoint(ck: Checkpoint) -> ModelBundle:
    """Rebuild a bundle and install the saved parameters (f32 widened)."""
    config = TrainConfig.from_dict(ck.config)
    bundle = build_bundle(config)
    params = bundle.named_params()
    if set(params) != set(ck.params):
        missing = set(params) ^ set(ck.params)
        raise CheckpointFormatError(f"parameter names do not match: {sorted(missing)}")
    for name, arr in ck.params.items():
        if tuple(arr.shape) != tuple(params[name].shape):
            raise CheckpointFormatError(
                f"{name}: saved shape {list(arr.shape)} vs model {list(params[name].shape)}")
        params[name].data = arr.astype(np.float64)
    return bundle
