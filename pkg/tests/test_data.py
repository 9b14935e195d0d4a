import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqdetect.attacks import AttackOutcome
from freqdetect.data import (CIFAR_RECORD, DetectionDataset, LabeledImages, build_detection_dataset,
                             decode_cifar10_binary, encode_cifar10_binary, load_cifar10_binary,
                             quantize_8bit, split_labeled, stratified_split, synth_dataset)
from freqdetect.errors import DataError
from freqdetect.smallnet import Network, default_architecture


def test_cifar_single_record(tmp_path):
    rec = bytes([3]) + bytes([255]) * 3072
    path = tmp_path / "b.bin"
    path.write_bytes(rec)
    ds = load_cifar10_binary(path)
    assert len(ds) == 1 and ds.labels[0] == 3 and ds.images.shape == (1, 3, 32, 32)
    assert np.all(ds.images == 1.0)


def test_cifar_channel_major_layout():
    pix = np.zeros(3072, dtype=np.uint8)
    pix[1024 + 32 * 5 + 7] = 51  # green channel, row 5, column 7
    ds = decode_cifar10_binary(bytes([0]) + pix.tobytes())
    assert ds.images[0, 1, 5, 7] == pytest.approx(0.2)
    assert ds.images.sum() == pytest.approx(0.2)


def test_cifar_length_and_label_errors():
    with pytest.raises(DataError, match="3072"):
        decode_cifar10_binary(bytes(CIFAR_RECORD - 1))
    with pytest.raises(DataError):
        decode_cifar10_binary(b"")
    bad = bytes([1]) + bytes(3072) + bytes([10]) + bytes(3072)
    with pytest.raises(DataError, match="record 1"):
        decode_cifar10_binary(bad)


def test_cifar_roundtrip_is_byte_identical():
    rng = np.random.default_rng(0)
    raw = np.concatenate([rng.integers(0, 10, size=(6, 1)), rng.integers(0, 256, size=(6, 3072))], axis=1)
    data = raw.astype(np.uint8).tobytes()
    assert encode_cifar10_binary(decode_cifar10_binary(data)) == data


def test_synthetic_export_is_lossless():
    ds = synth_dataset(per_class=3, seed=1)
    back = decode_cifar10_binary(encode_cifar10_binary(LabeledImages(ds.images, ds.labels, 10)))
    assert np.array_equal(back.images, ds.images)


def test_synth_determinism_and_range():
    a, b = synth_dataset(per_class=1, seed=5), synth_dataset(per_class=1, seed=5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = synth_dataset(classes=3, per_class=20, size=16, seed=2)
    assert c.images.min() >= 0 and c.images.max() <= 1 and c.images.shape == (60, 3, 16, 16)
    assert np.bincount(c.labels).tolist() == [20, 20, 20]
    assert not np.array_equal(synth_dataset(per_class=1, seed=6).images, a.images)


def test_labeled_images_validation():
    with pytest.raises(DataError):
        LabeledImages(np.zeros((2, 1, 2, 2)), [0], 2)
    with pytest.raises(DataError):
        LabeledImages(np.zeros((1, 1, 2, 2)), [2], 2)
    with pytest.raises(DataError):
        LabeledImages(np.full((1, 1, 2, 2), 1.5), [0], 2)


def test_quantize():
    assert np.array_equal(quantize_8bit([0.0, 0.5, 1.0, 0.0019]), np.array([0, 128, 255, 0]) / 255)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=80), st.integers(0, 1000))
def test_stratified_split(labels, seed):
    labels = np.array(labels)
    mask = stratified_split(labels, 0.2, seed)
    for v in np.unique(labels):
        n = np.sum(labels == v)
        assert abs(np.sum(mask[labels == v]) - 0.2 * n) <= 1
    assert np.array_equal(mask, stratified_split(labels, 0.2, seed))


def test_split_labeled_disjoint():
    ds = synth_dataset(per_class=10, size=8, seed=0)
    tr, te = split_labeled(ds, 0.2, 1)
    assert len(tr) == 16 and len(te) == 4
    assert np.bincount(te.labels).tolist() == [2, 2]


def _outcomes(n, success=True, shape=(3, 8, 8), name="pgd", seed=0):
    rng = np.random.default_rng(seed)
    outs = []
    for i in range(n):
        x = rng.random(shape)
        adv = np.clip(x + rng.choice([-0.03, 0.03], size=shape), 0, 1)
        outs.append(AttackOutcome(x, adv, success, name, 10, 0, i, 0.03))
    return outs


def test_detection_dataset_protocol():
    clean = np.random.default_rng(1).random((150, 3, 8, 8))
    outs = _outcomes(100) + _outcomes(20, success=False)
    ds = build_detection_dataset(clean, outs, seed=3)
    Xtr, ytr = ds.train()
    Xte, yte = ds.test()
    assert len(ytr) == 160 and len(yte) == 40
    assert ytr.mean() == 0.5 and yte.mean() == 0.5
    assert ds.dimension == 3 * 8 * 8
    assert [p[1] for p in ds.provenance].count("clean") == 100
    again = build_detection_dataset(clean, outs, seed=3)
    assert np.array_equal(again.test_mask, ds.test_mask) and np.array_equal(again.features, ds.features)


def test_detection_dataset_white_box_dimension():
    net = Network.initialize(default_architecture(input_shape=(3, 8, 8)), 0)
    clean = np.random.default_rng(1).random((10, 3, 8, 8))
    ds = build_detection_dataset(clean, _outcomes(10), net, "white", ["relu1", "relu3"], seed=0)
    assert ds.dimension == 16 * 8 * 8 + 32 * 4 * 4
    assert ds.layers == ("relu1", "relu3")


def test_detection_dataset_skips_failures_and_clean_errors():
    clean = np.random.default_rng(1).random((10, 3, 8, 8))
    outs = _outcomes(4) + _outcomes(3, name="clean-error") + _outcomes(3, success=False)
    ds = build_detection_dataset(clean, outs, seed=0)
    assert ds.labels.sum() == 4 and len(ds.labels) == 8


def test_detection_dataset_errors():
    clean = np.random.default_rng(1).random((5, 3, 8, 8))
    with pytest.raises(DataError):
        build_detection_dataset(clean, _outcomes(3, success=False))
    with pytest.raises(DataError):
        build_detection_dataset(clean, _outcomes(6))
    with pytest.raises(DataError):
        build_detection_dataset(clean, _outcomes(3), mode="grey")


def test_quantize_applies_to_both_classes():
    clean = np.random.default_rng(1).random((10, 3, 8, 8))
    ds = build_detection_dataset(clean, _outcomes(5), seed=0, quantize=True)
    raw = build_detection_dataset(clean, _outcomes(5), seed=0)
    assert not np.array_equal(ds.features, raw.features)
    # quantized images have DC terms that are multiples of 1/255
    dc = ds.features[:, 0] * 255
    assert np.allclose(dc, np.round(dc), atol=1e-9)


def test_detection_dataset_npz_roundtrip(tmp_path):
    clean = np.random.default_rng(1).random((10, 3, 8, 8))
    ds = build_detection_dataset(clean, _outcomes(5), seed=2**63 + 5)
    ds.save(tmp_path / "f.npz")
    back = DetectionDataset.load(tmp_path / "f.npz")
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.test_mask, ds.test_mask)
    assert back.provenance == ds.provenance and back.seed == ds.seed and back.mode == "black"
