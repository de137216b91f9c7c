"""Datasets: label gating, shift generators, augmentation."""

import numpy as np
import pytest

from bbadapt.data import (
    AugmentationPolicy,
    Dataset,
    LabelAccessError,
    LabelShiftParams,
    SyntheticShiftSpec,
    apply_label_shift,
    augment,
    augment_batch,
    load_image_list,
    make_synthetic_shift,
    save_image_list,
)


def toy_dataset(role="target", n=8, k=3, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"e{i}" for i in range(n)]
    inputs = [rng.normal(size=4).astype(np.float32) for _ in range(n)]
    labels = [int(rng.integers(k)) for _ in range(n)]
    return Dataset(ids, inputs, labels, k, role)


def test_target_train_labels_are_gated():
    ds = toy_dataset(role="target")
    with pytest.raises(LabelAccessError):
        _ = ds.train_labels
    assert not ds.is_labeled
    # evaluation accessor still works and returns a copy
    labels = ds.eval_labels
    labels[0] = -1
    assert ds.eval_labels[0] != -1


def test_target_getitem_hides_label():
    ds = toy_dataset(role="target")
    assert ds[0].label is None


def test_source_train_labels_are_open():
    ds = toy_dataset(role="source")
    assert ds.is_labeled
    np.testing.assert_array_equal(ds.train_labels, ds.eval_labels)
    assert ds[0].label == int(ds.eval_labels[0])


def test_unlabeled_dataset_raises_everywhere():
    ds = Dataset(["a"], [np.zeros(2, dtype=np.float32)], None, 2, "target")
    with pytest.raises(LabelAccessError):
        _ = ds.eval_labels


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        Dataset(["a", "a"], [np.zeros(2)] * 2, [0, 1], 2, "source")


def test_fingerprint_ignores_labels():
    ds = toy_dataset(role="source", seed=1)
    flipped = Dataset(ds.ids, ds._inputs, [(l + 1) % 3 for l in ds.eval_labels], 3, "source")
    assert ds.fingerprint() == flipped.fingerprint()
    assert ds.fingerprint() != toy_dataset(role="source", seed=2).fingerprint()


def test_subset_keeps_order_and_role():
    ds = toy_dataset(role="target")
    sub = ds.subset([3, 1])
    assert sub.ids == ["e3", "e1"]
    assert sub.role == "target"
    np.testing.assert_array_equal(sub.eval_labels, ds.eval_labels[[3, 1]])


def test_inputs_array_stacks_float32():
    ds = toy_dataset(n=5)
    arr = ds.inputs_array()
    assert arr.shape == (5, 4)
    assert arr.dtype == np.float32


def test_image_list_roundtrip(tmp_path):
    path = tmp_path / "list.txt"
    path.write_text("imgs/a 1.png 0\nimgs/b.png 2\n\n")
    ds = load_image_list(path, role="source")
    assert len(ds) == 2
    assert ds.num_classes == 3
    assert ds._inputs[0] == "imgs/a 1.png"  # spaces in paths survive rsplit
    np.testing.assert_array_equal(ds.eval_labels, [0, 2])

    out = tmp_path / "copy.txt"
    save_image_list(ds, out)
    again = load_image_list(out, role="source")
    assert again._inputs == ds._inputs
    np.testing.assert_array_equal(again.eval_labels, ds.eval_labels)


def test_image_list_root_prefix(tmp_path):
    path = tmp_path / "list.txt"
    path.write_text("a.png 0\nb.png 1\n")
    ds = load_image_list(path, root="/data", role="target")
    assert ds._inputs[0] == "/data/a.png"
    assert ds[0].label is None  # target labels stay gated


def test_image_list_bad_lines(tmp_path):
    path = tmp_path / "list.txt"
    path.write_text("imgs/a.png notanint\n")
    with pytest.raises(ValueError, match="non-integer"):
        load_image_list(path)
    path.write_text("onetokenonly\n")
    with pytest.raises(ValueError, match="expected"):
        load_image_list(path)
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_image_list(path)


def test_inputs_array_needs_loader_for_paths(tmp_path):
    path = tmp_path / "list.txt"
    path.write_text("a.png 0\nb.png 1\n")
    ds = load_image_list(path)
    with pytest.raises(ValueError, match="loader"):
        ds.inputs_array()
    arr = ds.inputs_array(loader=lambda p: np.zeros((2, 2), dtype=np.float32))
    assert arr.shape == (2, 2, 2)


def test_synthetic_shift_shapes_and_roles():
    spec = SyntheticShiftSpec(num_classes=4, dim=3, samples_per_class=10, rotation_deg=30.0, seed=0)
    src, tgt = make_synthetic_shift(spec)
    assert src.role == "source" and tgt.role == "target"
    assert len(src) == len(tgt) == 40
    assert src.inputs_array().shape == (40, 3)
    assert src.ids[0].startswith("s") and tgt.ids[0].startswith("t")
    assert np.bincount(src.eval_labels, minlength=4).tolist() == [10] * 4
    assert np.bincount(tgt.eval_labels, minlength=4).tolist() == [10] * 4


def test_synthetic_shift_rotation_moves_means():
    spec = SyntheticShiftSpec(num_classes=2, dim=2, samples_per_class=300, rotation_deg=90.0,
                              noise_scale=0.01, seed=1)
    src, tgt = make_synthetic_shift(spec)
    sx, tx = src.inputs_array(), tgt.inputs_array()
    src_mean = sx[src.eval_labels == 0].mean(axis=0)
    tgt_mean = tx[tgt.eval_labels == 0].mean(axis=0)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]], dtype=np.float32)
    np.testing.assert_allclose(tgt_mean, rot @ src_mean, atol=0.05)


def test_synthetic_shift_deterministic():
    a = make_synthetic_shift(SyntheticShiftSpec(seed=5))
    b = make_synthetic_shift(SyntheticShiftSpec(seed=5))
    assert a[0].fingerprint() == b[0].fingerprint()
    assert a[1].fingerprint() == b[1].fingerprint()
    c = make_synthetic_shift(SyntheticShiftSpec(seed=6))
    assert a[0].fingerprint() != c[0].fingerprint()


def test_label_shift_rsut_reverses_profiles():
    spec = SyntheticShiftSpec(num_classes=4, samples_per_class=64, seed=2)
    src, tgt = make_synthetic_shift(spec)
    params = LabelShiftParams(ratio=0.5, seed=0)
    src2 = apply_label_shift(src, "rsut", params)
    tgt2 = apply_label_shift(tgt, "rsut", params)
    src_counts = np.bincount(src2.eval_labels, minlength=4)
    tgt_counts = np.bincount(tgt2.eval_labels, minlength=4)
    # geometric decay of 64 by rank, ranks reversed between the domains
    assert src_counts.tolist() == [64, 32, 16, 8]
    assert tgt_counts.tolist() == [8, 16, 32, 64]


def test_label_shift_partial_keeps_prefix_classes():
    spec = SyntheticShiftSpec(num_classes=4, samples_per_class=16, seed=3)
    _, tgt = make_synthetic_shift(spec)
    tgt2 = apply_label_shift(tgt, "partial", LabelShiftParams(fraction=0.5))
    assert set(tgt2.eval_labels.tolist()) == {0, 1}
    assert len(tgt2) == 32


def test_label_shift_rejects_emptying_ratio():
    spec = SyntheticShiftSpec(num_classes=4, samples_per_class=4, seed=5)
    src, _ = make_synthetic_shift(spec)
    with pytest.raises(ValueError, match="emptied"):
        apply_label_shift(src, "rsut", LabelShiftParams(ratio=0.01))


def test_label_shift_unknown_mode():
    src, _ = make_synthetic_shift(SyntheticShiftSpec(samples_per_class=4))
    with pytest.raises(ValueError, match="unknown"):
        apply_label_shift(src, "sideways")


def test_feature_augment_weak_is_jitter():
    policy = AugmentationPolicy(kind="weak", sigma=0.1, seed=0)
    x = np.zeros(16, dtype=np.float32)
    out = augment(x, policy, seed=1)
    assert out.shape == x.shape
    assert 0 < np.abs(out).max() < 1.0
    np.testing.assert_array_equal(out, augment(x, policy, seed=1))
    assert not np.array_equal(out, augment(x, policy, seed=2))


def test_feature_augment_strong_masks_coordinates():
    policy = AugmentationPolicy(kind="strong", sigma=0.1, mask_fraction=0.25, seed=0)
    x = np.ones(16, dtype=np.float32)
    out = augment(x, policy, seed=3)
    assert (out == 0.0).sum() == 4  # int(0.25 * 16)
    assert np.abs(out[out != 0.0] - 1.0).max() < 2.0  # jitter runs at 4 sigma


def test_augment_batch_deterministic():
    policy = AugmentationPolicy(kind="strong", sigma=0.1, seed=0)
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    batch = augment_batch(x, policy, seed=9)
    assert batch.shape == x.shape
    np.testing.assert_array_equal(batch, augment_batch(x, policy, seed=9))
    assert not np.array_equal(batch, augment_batch(x, policy, seed=10))


def test_image_augment_shapes():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    weak = augment(img, AugmentationPolicy(kind="weak", crop_pad=2, seed=0), seed=1)
    strong = augment(img, AugmentationPolicy(kind="strong", crop_pad=2, seed=0), seed=1)
    assert weak.shape == img.shape
    assert strong.shape == img.shape
    assert (strong == 0.0).sum() >= (0.3 * 16) ** 2  # cutout zeroes a square


def test_augment_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(kind="medium")
    with pytest.raises(ValueError):
        AugmentationPolicy(kind="weak", mask_fraction=1.0)
    with pytest.raises(ValueError):
        augment(np.zeros((2, 2, 2, 2)), AugmentationPolicy(kind="weak"), seed=0)
