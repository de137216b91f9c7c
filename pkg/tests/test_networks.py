"""Models, optimizer schedule, source training, checkpoints."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from bbadapt.data import SyntheticShiftSpec, make_synthetic_shift
from bbadapt.networks import (
    OptimConfig,
    RowNormLinear,
    SourceModel,
    TargetModel,
    accuracy,
    forward_logits,
    load_checkpoint,
    lr_at,
    make_optimizer,
    predict_probs,
    save_checkpoint,
    set_progress,
    smoothed_cross_entropy,
    state_checksum,
    train_source,
)


def test_row_norm_linear_rows_are_unit():
    layer = RowNormLinear(8, 5)
    w = layer.effective_weight
    np.testing.assert_allclose(w.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)
    # stays unit after an arbitrary raw-weight update
    with torch.no_grad():
        layer.weight_raw.mul_(3.7).add_(0.5)
    np.testing.assert_allclose(layer.effective_weight.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)


def test_row_norm_linear_has_no_bias():
    layer = RowNormLinear(4, 3)
    out = layer(torch.zeros(2, 4))
    np.testing.assert_allclose(out.detach().numpy(), 0.0, atol=1e-7)


def test_row_norm_logits_equal_scaled_cosine_direction():
    layer = RowNormLinear(6, 4)
    x = torch.randn(3, 6)
    want = x @ F.normalize(layer.weight_raw, dim=1).T
    np.testing.assert_allclose(layer(x).detach().numpy(), want.detach().numpy(), atol=1e-6)


def test_source_model_shapes():
    model = SourceModel(in_dim=5, num_classes=3, hidden=16)
    out = model(torch.randn(7, 5))
    assert out.shape == (7, 3)
    assert model.arch["kind"] == "source"


def test_target_model_shapes_and_feature_space():
    model = TargetModel(in_dim=5, num_classes=3, hidden=16, bottleneck_dim=12)
    x = torch.randn(7, 5)
    assert model(x).shape == (7, 3)
    assert model.features(x).shape == (7, 16)
    assert isinstance(model.bottleneck[0], torch.nn.BatchNorm1d)


def test_lr_schedule_endpoints():
    cfg = OptimConfig()
    lr_b, lr_n = lr_at(cfg, 0.0)
    assert lr_b == pytest.approx(1e-3)
    assert lr_n == pytest.approx(1e-2)
    lr_b, lr_n = lr_at(cfg, 1.0)
    decay = 11.0 ** -0.75
    assert lr_b == pytest.approx(1e-3 * decay)
    assert lr_n == pytest.approx(1e-2 * decay)
    with pytest.raises(ValueError):
        lr_at(cfg, 1.5)


def test_optimizer_groups_and_progress():
    model = TargetModel(4, 3, hidden=8, bottleneck_dim=6)
    cfg = OptimConfig()
    opt = make_optimizer(model, cfg)
    tags = {g["tag"] for g in opt.param_groups}
    assert tags == {"backbone", "new_layers"}
    n_backbone = sum(len(g["params"]) for g in opt.param_groups if g["tag"] == "backbone")
    assert n_backbone == sum(1 for n, _ in model.named_parameters() if n.startswith("encoder."))
    set_progress(opt, cfg, 0.5)
    decay = 6.0 ** -0.75
    by_tag = {g["tag"]: g["lr"] for g in opt.param_groups}
    assert by_tag["backbone"] == pytest.approx(1e-3 * decay)
    assert by_tag["new_layers"] == pytest.approx(1e-2 * decay)


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(momentum=1.0)
    with pytest.raises(ValueError):
        OptimConfig(batch_size=0)


def test_smoothed_ce_epsilon_zero_is_plain_ce():
    torch.manual_seed(0)
    logits = torch.randn(10, 4)
    labels = torch.randint(0, 4, (10,))
    got = smoothed_cross_entropy(logits, labels, epsilon=0.0)
    want = F.cross_entropy(logits, labels)
    assert float(got) == pytest.approx(float(want), abs=1e-7)


def test_smoothed_ce_matches_manual_targets():
    torch.manual_seed(1)
    logits = torch.randn(6, 3)
    labels = torch.randint(0, 3, (6,))
    eps = 0.1
    target = torch.full((6, 3), eps / 3)
    target[torch.arange(6), labels] += 1 - eps
    want = -(target * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    got = smoothed_cross_entropy(logits, labels, eps)
    assert float(got) == pytest.approx(float(want), abs=1e-6)


def test_forward_logits_eval_mode_and_dtype():
    model = TargetModel(4, 3, hidden=8)
    model.train()
    x = np.random.default_rng(0).normal(size=(9, 4)).astype(np.float32)
    out = forward_logits(model, x, batch_size=4)
    assert out.shape == (9, 3)
    assert out.dtype == np.float64
    assert model.training  # train flag restored
    probs = predict_probs(model, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_train_source_learns_separable_blobs():
    spec = SyntheticShiftSpec(num_classes=3, dim=2, samples_per_class=40,
                              noise_scale=0.3, seed=0)
    src, _ = make_synthetic_shift(spec)
    model, history = train_source(src, epochs=20, seed=1, hidden=32)
    acc = accuracy(model, src.inputs_array(), src.eval_labels)
    assert acc >= 0.9
    assert len(history["loss"]) == 20
    assert history["loss"][-1] < history["loss"][0]


def test_train_source_deterministic():
    spec = SyntheticShiftSpec(num_classes=3, samples_per_class=10, seed=1)
    src, _ = make_synthetic_shift(spec)
    a, _ = train_source(src, epochs=3, seed=7, hidden=8)
    b, _ = train_source(src, epochs=3, seed=7, hidden=8)
    assert state_checksum(a) == state_checksum(b)
    c, _ = train_source(src, epochs=3, seed=8, hidden=8)
    assert state_checksum(a) != state_checksum(c)


def test_checkpoint_roundtrip(tmp_path):
    model = TargetModel(4, 3, hidden=8, bottleneck_dim=6)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, note="x")
    back, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert state_checksum(back) == state_checksum(model)
    assert back.arch == model.arch


def test_checkpoint_roundtrip_source(tmp_path):
    model = SourceModel(4, 3, hidden=8)
    save_checkpoint(model, tmp_path / "s.pt")
    back, _ = load_checkpoint(tmp_path / "s.pt")
    assert isinstance(back, SourceModel)
    x = np.zeros((2, 4), dtype=np.float32)
    np.testing.assert_allclose(forward_logits(back, x), forward_logits(model, x), atol=0)


def test_state_checksum_sensitivity():
    a = TargetModel(4, 3, hidden=8)
    ck = state_checksum(a)
    with torch.no_grad():
        next(a.parameters()).add_(1e-3)
    assert state_checksum(a) != ck
