import numpy as np
import pytest

from nls import tensor as T
from nls.layers import (Flatten, GrlConfig, LayerStack, Linear, ReLU,
                        build_backbone, build_nuisance_head)
from nls.objective import (BatchWithLabels, ModelBundle, NuisanceFactorSpec,
                           nuisance_loss, task_loss, total_loss)
from nls.rng import child_rng
from nls.tensor import Tensor


FAC_A = NuisanceFactorSpec("fac_a", (0.05, 0.10, 0.15, 0.20, 0.25, 0.30))
FAC_B = NuisanceFactorSpec("fac_b", (3, 5, 7))


def tiny_bundle(seed=0, alpha=0.5, factors=(FAC_A, FAC_B)):
    """4x4 inputs, 12-d features, 10 task classes; fast enough for loops."""
    def rng(tag):
        return child_rng(seed, "tiny", tag)

    backbone = LayerStack(
        [("flat", Flatten()), ("fc1", Linear(16, 12, rng("fc1"))), ("relu1", ReLU())],
        in_shape=(None, 1, 4, 4))
    task_head = LayerStack([("fc2", Linear(12, 10, rng("fc2")))], in_shape=(None, 12))
    heads = {f.name: build_nuisance_head(12, f.num_classes, seed=seed, tag=f.name)
             for f in factors}
    return ModelBundle(backbone, task_head, heads,
                       {f.name: f for f in factors}, GrlConfig(alpha))


def tiny_batch(seed=0, n=8):
    rng = np.random.default_rng(seed)
    images = Tensor(rng.uniform(0, 1, (n, 1, 4, 4)))
    labels = rng.integers(0, 10, n)
    nuis = {"fac_a": [(1, 2), (4, 0), (6, 5)], "fac_b": [(0, 1), (5, 2)]}
    return BatchWithLabels(images, labels, nuis)


# ---------------------------------------------------------------------------
# factor spec


def test_factor_spec_bucketing_round_trip():
    assert FAC_A.num_classes == 6
    for i, v in enumerate(FAC_A.values):
        assert FAC_A.class_of(v) == i
        assert FAC_A.param_of(i) == v


def test_factor_spec_rejects_off_grid_value():
    with pytest.raises(ValueError, match="not on the grid"):
        FAC_A.class_of(0.17)


def test_factor_spec_rejects_bad_grids():
    with pytest.raises(ValueError, match=">= 2"):
        NuisanceFactorSpec("x", (1,))
    with pytest.raises(ValueError, match="duplicates"):
        NuisanceFactorSpec("x", (1, 1, 2))


def test_factor_spec_param_of_range():
    with pytest.raises(ValueError, match="out of range"):
        FAC_B.param_of(3)


# ---------------------------------------------------------------------------
# bundle and batch validation


def test_bundle_rejects_mismatched_head_dim():
    b = tiny_bundle()
    bad_head = build_nuisance_head(13, 6, seed=0)
    with pytest.raises(ValueError, match="expects dim 13"):
        ModelBundle(b.backbone, b.task_head, {"fac_a": bad_head},
                    {"fac_a": FAC_A}, GrlConfig(0.5))


def test_bundle_rejects_wrong_class_count():
    b = tiny_bundle()
    bad_head = build_nuisance_head(12, 4, seed=0)
    with pytest.raises(ValueError, match="emits 4 classes"):
        ModelBundle(b.backbone, b.task_head, {"fac_a": bad_head},
                    {"fac_a": FAC_A}, GrlConfig(0.5))


def test_bundle_rejects_head_factor_key_mismatch():
    b = tiny_bundle()
    with pytest.raises(ValueError, match="do not match"):
        ModelBundle(b.backbone, b.task_head, {}, {"fac_a": FAC_A}, GrlConfig(0.5))


def test_named_params_prefixes_and_order():
    names = list(tiny_bundle().named_params())
    assert names[0].startswith("backbone.")
    assert any(n.startswith("task_head.") for n in names)
    factors_in_order = [n.split(".")[1] for n in names if n.startswith("head.")]
    assert factors_in_order == sorted(factors_in_order)
    assert "head.fac_a.fc3.b" in names
    assert len(set(names)) == len(names)


def test_batch_rejects_out_of_range_index():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="out of range"):
        BatchWithLabels(Tensor(rng.uniform(0, 1, (4, 1, 4, 4))),
                        rng.integers(0, 10, 4), {"fac_a": [(4, 0)]})


def test_batch_rejects_duplicate_label():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="twice"):
        BatchWithLabels(Tensor(rng.uniform(0, 1, (4, 1, 4, 4))),
                        rng.integers(0, 10, 4), {"fac_a": [(1, 0), (1, 3)]})


# ---------------------------------------------------------------------------
# task loss


def test_task_loss_near_ln10_at_init():
    # near-uniform logits at init; empirical over 10 seeds
    for seed in range(10):
        features, head = build_backbone("mnist-small", seed=seed)
        bundle = ModelBundle(features, head, {}, {}, GrlConfig(0.5))
        rng = np.random.default_rng(seed)
        batch = BatchWithLabels(Tensor(rng.uniform(0, 1, (16, 1, 28, 28))),
                                rng.integers(0, 10, 16))
        assert abs(task_loss(bundle, batch).item() - np.log(10)) <= 0.3


def test_task_loss_saturated_correct_logit():
    bundle = tiny_bundle()
    images = Tensor(np.zeros((1, 1, 4, 4)))  # zero input -> logits = fc2 bias
    bias = bundle.task_head.params()["fc2.b"]
    bias.data = np.zeros(10)
    bias.data[7] = 30.0
    batch = BatchWithLabels(images, np.array([7]))
    assert task_loss(bundle, batch).item() == pytest.approx(0.0, abs=1e-8)


def test_task_loss_mean_invariant_under_duplication():
    bundle = tiny_bundle()
    batch = tiny_batch()
    doubled = BatchWithLabels(
        Tensor(np.concatenate([batch.images.data, batch.images.data])),
        np.concatenate([batch.task_labels, batch.task_labels]))
    single = BatchWithLabels(batch.images, batch.task_labels)
    assert abs(task_loss(bundle, doubled).item()
               - task_loss(bundle, single).item()) <= 1e-12


def test_task_loss_rejects_empty_batch():
    bundle = tiny_bundle()
    batch = BatchWithLabels(Tensor(np.zeros((0, 1, 4, 4))), np.zeros(0, dtype=int))
    with pytest.raises(ValueError, match="nonempty"):
        task_loss(bundle, batch)


# ---------------------------------------------------------------------------
# nuisance loss


def test_nuisance_loss_near_ln_k_at_init():
    for seed in range(10):
        bundle = tiny_bundle(seed=seed)
        rng = np.random.default_rng(seed)
        batch = BatchWithLabels(
            Tensor(rng.uniform(0, 1, (12, 1, 4, 4))), rng.integers(0, 10, 12),
            {"fac_a": [(i, int(rng.integers(0, 6))) for i in range(12)]})
        loss = nuisance_loss(bundle, batch, "fac_a")
        assert abs(loss.item() - np.log(6)) <= 0.3


def test_nuisance_loss_absent_marker():
    bundle = tiny_bundle()
    batch = BatchWithLabels(Tensor(np.zeros((4, 1, 4, 4))), np.zeros(4, dtype=int))
    assert nuisance_loss(bundle, batch, "fac_a") is None


def test_nuisance_loss_unknown_factor():
    with pytest.raises(KeyError, match="unknown nuisance factor"):
        nuisance_loss(tiny_bundle(), tiny_batch(), "contrast")


def test_nuisance_head_overfits_constant_class():
    # 8 samples all labeled class 3: head alone driven to saturation
    bundle = tiny_bundle(seed=2)
    rng = np.random.default_rng(2)
    batch = BatchWithLabels(
        Tensor(rng.uniform(0, 1, (8, 1, 4, 4))), rng.integers(0, 10, 8),
        {"fac_a": [(i, 3) for i in range(8)]})
    head_params = list(bundle.nuisance_heads["fac_a"].params().values())
    for _ in range(80):
        loss = nuisance_loss(bundle, batch, "fac_a")
        T.backward(loss)
        for p in head_params:
            p.data = p.data - 0.5 * p.grad
            p.zero_grad()
        for p in bundle.backbone.params().values():
            p.zero_grad()
    assert nuisance_loss(bundle, batch, "fac_a").item() < 0.05


# ---------------------------------------------------------------------------
# total loss


def grads_of(bundle):
    return {n: (None if p.grad is None else p.grad.copy())
            for n, p in bundle.named_params().items()}


def zero_all(bundle):
    for p in bundle.named_params().values():
        p.zero_grad()


def plain_nuisance_sum(bundle, batch):
    """Sum of per-factor losses with NO reversal layer, for the oracle."""
    feats = bundle.features(batch.images)
    acc = None
    for factor in sorted(bundle.nuisance_heads):
        pairs = batch.nuisance.get(factor, [])
        if not pairs:
            continue
        sub = T.gather_rows(feats, [i for i, _ in pairs])
        l_p = T.softmax_cross_entropy(bundle.nuisance_heads[factor](sub),
                                      np.array([c for _, c in pairs]))
        acc = l_p if acc is None else T.add(acc, l_p)
    return acc


def test_total_loss_switch_off_lambda_zero():
    bundle = tiny_bundle()
    batch = tiny_batch()
    loss, report = total_loss(bundle, batch, 0.0)
    assert loss.item() == task_loss(bundle, batch).item()
    T.backward(loss)
    for name, p in bundle.named_params().items():
        if name.startswith("head."):
            assert p.grad is None  # branch never built
    assert report["l_psi"] == {"fac_a": None, "fac_b": None}


def test_total_loss_additivity():
    bundle = tiny_bundle()
    batch = tiny_batch()
    lam = 0.05
    loss, report = total_loss(bundle, batch, lam)
    by_hand = (task_loss(bundle, batch).item()
               + lam * sum(nuisance_loss(bundle, batch, f).item()
                           for f in ("fac_a", "fac_b")))
    assert abs(loss.item() - by_hand) <= 1e-12
    assert report["total"] == loss.item()
    assert report["n_psi"] == {"fac_a": 3, "fac_b": 2}


def test_total_loss_rejects_negative_lambda():
    with pytest.raises(ValueError, match="nonnegative"):
        total_loss(tiny_bundle(), tiny_batch(), -0.01)


def test_gradient_contract_against_decomposed_backward():
    lam, alpha = 0.05, 0.5
    bundle = tiny_bundle(alpha=alpha)
    batch = tiny_batch()

    loss, _ = total_loss(bundle, batch, lam)
    T.backward(loss)
    g_total = grads_of(bundle)
    zero_all(bundle)

    T.backward(task_loss(bundle, batch))
    g_cls = grads_of(bundle)
    zero_all(bundle)

    T.backward(plain_nuisance_sum(bundle, batch))
    g_psi = grads_of(bundle)
    zero_all(bundle)

    for name in g_total:
        if name.startswith("backbone."):
            want = g_cls[name] - lam * alpha * g_psi[name]
            assert np.max(np.abs(g_total[name] - want)) <= 1e-10, name
        elif name.startswith("task_head."):
            assert np.max(np.abs(g_total[name] - g_cls[name])) <= 1e-12, name
        else:
            assert g_cls[name] is None
            want = lam * g_psi[name]
            assert np.max(np.abs(g_total[name] - want)) <= 1e-10, name


def test_head_step_decreases_nuisance_loss():
    wins = 0
    for seed in range(10):
        bundle = tiny_bundle(seed=seed)
        batch = tiny_batch(seed=seed)
        before = sum(nuisance_loss(bundle, batch, f).item() for f in ("fac_a", "fac_b"))
        loss, _ = total_loss(bundle, batch, 0.05)
        T.backward(loss)
        for name, p in bundle.named_params().items():
            if name.startswith("head."):
                p.data = p.data - 1e-3 * p.grad
            p.zero_grad()
        after = sum(nuisance_loss(bundle, batch, f).item() for f in ("fac_a", "fac_b"))
        wins += after < before
    assert wins >= 9


def test_feature_step_increases_nuisance_loss():
    # task loss detached: only the reversed branch drives the backbone
    wins = 0
    for seed in range(10):
        bundle = tiny_bundle(seed=seed)
        batch = tiny_batch(seed=seed)
        before = sum(nuisance_loss(bundle, batch, f).item() for f in ("fac_a", "fac_b"))
        feats = bundle.features(batch.images)
        grl_feats = T.grl(feats, bundle.grl.alpha)
        acc = None
        for factor in sorted(bundle.nuisance_heads):
            pairs = batch.nuisance[factor]
            sub = T.gather_rows(grl_feats, [i for i, _ in pairs])
            l_p = T.softmax_cross_entropy(bundle.nuisance_heads[factor](sub),
                                          np.array([c for _, c in pairs]))
            acc = l_p if acc is None else T.add(acc, l_p)
        T.backward(T.scale(acc, 0.05))
        for name, p in bundle.named_params().items():
            if name.startswith("backbone."):
                p.data = p.data - 1e-3 * p.grad
            p.zero_grad()
        after = sum(nuisance_loss(bundle, batch, f).item() for f in ("fac_a", "fac_b"))
        wins += after > before
    assert wins >= 9


def test_unlabeled_samples_contribute_no_head_gradient():
    bundle = tiny_bundle(seed=9)
    rng = np.random.default_rng(9)
    images = rng.uniform(0, 1, (8, 1, 4, 4))
    labels = rng.integers(0, 10, 8)
    keep = [1, 4, 6]

    full = BatchWithLabels(Tensor(images), labels,
                           {"fac_a": [(1, 2), (4, 0), (6, 5)]})
    masked = BatchWithLabels(Tensor(images[keep]), labels[keep],
                             {"fac_a": [(0, 2), (1, 0), (2, 5)]})

    T.backward(nuisance_loss(bundle, full, "fac_a"))
    g_full = {n: p.grad.copy()
              for n, p in bundle.nuisance_heads["fac_a"].params().items()}
    zero_all(bundle)
    T.backward(nuisance_loss(bundle, masked, "fac_a"))
    for n, p in bundle.nuisance_heads["fac_a"].params().items():
        assert np.max(np.abs(g_full[n] - p.grad)) <= 1e-12, n
