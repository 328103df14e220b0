import numpy as np
import pytest

from nls.corruption import AugmentationPolicy, CorruptionOp, gnt_policy
from nls.data import Dataset
from nls.synth import make_synthetic
from nls.tensor import ShapeError, Tensor
from nls.trainer import (Checkpoint, CheckpointFormatError, TrainConfig,
                         build_bundle, bundle_from_checkpoint, default_policy,
                         load_checkpoint, save_checkpoint, sgd_step, train)


def tiny_data(n=120, seed=0):
    ds = make_synthetic(n, seed=seed)
    val = make_synthetic(60, seed=seed + 1000)
    return ds, val


def small_config(**kw):
    base = dict(mode="gnt-nls", epochs=2, batch_size=64, lr=0.05, seed=0,
                lambda_warmup_epochs=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# sgd_step


def make_param(data):
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    return t


def test_sgd_vanilla_step():
    p = make_param([1.0, 2.0])
    p.grad = np.array([0.5, -0.5])
    sgd_step({"p": p}, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.data.tolist() == [1.0 - 0.05, 2.0 + 0.05]


def test_sgd_momentum_recurrence():
    p = make_param([0.0])
    state = {}
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step({"p": p}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert state["p"].tolist() == [1.9]
    assert p.data.tolist() == [-0.1 * 1.0 - 0.1 * 1.9]


def test_sgd_decay_only():
    p = make_param([2.0])
    p.grad = np.array([0.0])
    sgd_step({"p": p}, {}, lr=0.5, momentum=0.0, weight_decay=1e-4)
    assert p.data.tolist() == [2.0 * (1 - 0.5 * 1e-4)]


def test_sgd_skips_gradless_params_and_checks_shapes():
    p = make_param([1.0, 1.0])
    q = make_param([3.0])
    state = {}
    sgd_step({"p": p, "q": q}, state, 0.1, 0.9, 0.0)
    assert p.data.tolist() == [1.0, 1.0] and "p" not in state
    q.grad = np.array([1.0, 2.0])
    with pytest.raises(ShapeError, match="grad shape"):
        sgd_step({"q": q}, state, 0.1, 0.9, 0.0)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError, match="unknown mode"):
        TrainConfig(mode="dropout")
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(mode="gnt", lr=0.0)
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig(mode="gnt", momentum=1.0)
    with pytest.raises(ValueError, match="lambda_value"):
        TrainConfig(mode="gnt-nls", lambda_value=-0.1)
    with pytest.raises(ValueError, match="clean data"):
        TrainConfig(mode="baseline", policy=gnt_policy(0.5))


def test_default_policies_per_mode():
    assert default_policy("baseline").ops == ()
    assert [op.family for op in default_policy("gnt").ops] == ["gaussian_noise"]
    aug = [op.family for op in default_policy("aug-nls").ops]
    assert "salt_pepper" not in aug and "gaussian_noise" in aug


def test_lambda_schedule():
    cfg = small_config(epochs=3, lambda_warmup_epochs=1, lambda_value=0.05)
    assert [cfg.lam_at(e) for e in (1, 2, 3)] == [0.0, 0.05, 0.05]
    gnt = TrainConfig(mode="gnt", epochs=3)
    assert gnt.lam_at(3) == 0.0


def test_config_dict_round_trip():
    cfg = small_config(mode="aug-nls", lr=0.01)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_bundle_heads_follow_mode():
    assert build_bundle(TrainConfig(mode="gnt")).nuisance_heads == {}
    b = build_bundle(small_config())
    assert list(b.nuisance_heads) == ["gaussian_noise_std"]
    assert b.nuisance_heads["gaussian_noise_std"].out_shape[1] == 6


# ---------------------------------------------------------------------------
# training loop


def test_train_is_deterministic_and_checkpoints_byte_stable(tmp_path):
    ds, val = tiny_data()
    paths = []
    for run in range(2):
        path = tmp_path / f"run{run}.ckpt"
        train(small_config(), ds, val, checkpoint_path=path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]


def test_metrics_rows_and_warmup_boundary(tmp_path):
    ds, val = tiny_data()
    res = train(small_config(epochs=2), ds, val)
    assert [r["epoch"] for r in res.metrics] == [1, 2]
    first, second = res.metrics
    assert first["nls_feature_grad_norm"] == 0.0
    assert second["nls_feature_grad_norm"] > 0.0
    assert first["l_psi.gaussian_noise_std"] is None
    assert second["l_psi.gaussian_noise_std"] > 0.0
    for row in res.metrics:
        assert set(row) >= {"epoch", "l_cls", "val_acc", "lr"}
        assert 0 <= row["val_acc"] <= 1


def test_switch_off_matches_gnt_bit_for_bit():
    ds, val = tiny_data()
    gnt = train(TrainConfig(mode="gnt", epochs=2, batch_size=64, seed=3), ds, val)
    off = train(TrainConfig(mode="gnt-nls", epochs=2, batch_size=64, seed=3,
                            lambda_value=0.0), ds, val)
    for name, p in gnt.bundle.named_params().items():
        assert np.array_equal(p.data, off.bundle.named_params()[name].data), name
    # and the heads never moved from their init
    init = build_bundle(TrainConfig(mode="gnt-nls", epochs=2, batch_size=64,
                                    seed=3, lambda_value=0.0))
    for name, p in off.bundle.named_params().items():
        if name.startswith("head."):
            want = init.named_params()[name].data.astype(np.float32).astype(np.float64)
            assert np.array_equal(p.data, want), name


def test_train_loss_decreases_smoke():
    wins = 0
    for seed in range(5):
        ds, val = tiny_data(seed=seed)
        res = train(TrainConfig(mode="baseline", epochs=2, batch_size=64,
                                seed=seed), ds, val)
        wins += res.metrics[1]["l_cls"] <= res.metrics[0]["l_cls"]
    assert wins >= 4


def test_non_finite_loss_aborts_with_term_name():
    ds, val = tiny_data()
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RuntimeError, match="non-finite task loss"):
            train(TrainConfig(mode="baseline", epochs=3, batch_size=32, lr=1e9,
                              seed=0), ds, val)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip(tmp_path):
    ds, val = tiny_data()
    cfg = small_config()
    res = train(cfg, ds, val, checkpoint_path=tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.epoch == 2
    assert TrainConfig.from_dict(ck.config).to_dict() == cfg.to_dict()
    for name, p in res.bundle.named_params().items():
        assert np.array_equal(ck.params[name].astype(np.float64), p.data), name
    for name, v in res.velocities.items():
        assert np.array_equal(ck.velocities[name].astype(np.float64), v), name


def test_checkpoint_reload_reproduces_forward_exactly(tmp_path):
    ds, val = tiny_data()
    res = train(small_config(), ds, val, checkpoint_path=tmp_path / "m.ckpt")
    again = bundle_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    x = Tensor(val.images.data[:16])
    a = res.bundle.task_logits(res.bundle.features(x))
    b = again.task_logits(again.features(x))
    assert np.array_equal(a.data, b.data)


def test_resume_reproduces_uninterrupted_trajectory(tmp_path):
    ds, val = tiny_data()
    full = train(small_config(epochs=3), ds, val,
                 checkpoint_path=tmp_path / "full.ckpt")
    train(small_config(epochs=2), ds, val, checkpoint_path=tmp_path / "part.ckpt")
    resumed = train(small_config(epochs=3), ds, val,
                    checkpoint_path=tmp_path / "resumed.ckpt",
                    resume_from=tmp_path / "part.ckpt")
    assert resumed.metrics[-1] == full.metrics[-1]
    assert ((tmp_path / "resumed.ckpt").read_bytes()
            == (tmp_path / "full.ckpt").read_bytes())


def test_resume_rejects_mismatched_config(tmp_path):
    ds, val = tiny_data()
    train(small_config(epochs=1), ds, val, checkpoint_path=tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="does not match"):
        train(small_config(epochs=2, lr=0.01), ds, val,
              resume_from=tmp_path / "m.ckpt")


def test_checkpoint_rejects_corrupt_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)
    ds, val = tiny_data()
    train(small_config(epochs=1), ds, val, checkpoint_path=path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)
