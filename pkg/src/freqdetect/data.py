"""Datasets: CIFAR-10 binary records, a synthetic stand-in, and detector datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .spectral import blackbox_features, whitebox_features

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10


def check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or min(image.shape) < 1:
        raise DataError(f"image must be (C, H, W) with positive dims, got {image.shape}")
    if not np.all((image >= 0.0) & (image <= 1.0)):
        raise DataError("image pixels must lie in [0, 1]")
    return image


def quantize_8bit(x):
    """Round pixel values to the nearest of 256 levels."""
    return np.rint(np.asarray(x, dtype=np.float64) * 255.0) / 255.0


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be stacked as (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledImages(self.images[idx], self.labels[idx], self.class_count)


# -- CIFAR-10 binary batches ----------------------------------------------------

def decode_cifar10_binary(data):
    n_bytes = len(data)
    if n_bytes == 0 or n_bytes % CIFAR_RECORD:
        expected = max(1, round(n_bytes / CIFAR_RECORD)) * CIFAR_RECORD
        raise DataError(f"CIFAR-10 batch length {n_bytes} is not a multiple of {CIFAR_RECORD} "
                        f"(expected e.g. {expected}, got {n_bytes})")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DataError(f"record {int(bad[0])}: label byte {int(labels[bad[0]])} >= {CIFAR_CLASSES}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImages(images, labels, CIFAR_CLASSES)


def load_cifar10_binary(path):
    return decode_cifar10_binary(Path(path).read_bytes())


def encode_cifar10_binary(dataset):
    """Serialize 3x32x32 images into CIFAR-10 records; pixels are rounded to 8 bits."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise DataError(f"CIFAR records hold 3x32x32 images, got {dataset.images.shape[1:]}")
    if len(dataset) and dataset.labels.max() > 255:
        raise DataError("labels must fit in one byte")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


# -- synthetic data -------------------------------------------------------------

SYNTH_BASE = 0.10
SYNTH_CONTRAST = 0.10
SYNTH_BASE_JITTER = 0.4
SYNTH_COLOR_JITTER = 0.05
SYNTH_NOISE = 0.008
SYNTH_MIN_STRENGTH = 0.02
SYNTH_FREQ_RANGE = (2, 6)


def _class_template(rng, channels, size, terms=3):
    """Random sum of a few cosines with 2..6 cycles per image, peak-normalized."""
    fmin, fmax = SYNTH_FREQ_RANGE
    coords = np.arange(size) / size
    t = np.zeros((channels, size, size))
    for _ in range(terms):
        while True:
            fy, fx = rng.integers(-fmax, fmax + 1, size=2)
            if max(abs(fy), abs(fx)) >= fmin:
                break
        phase = rng.uniform(0, 2 * np.pi, size=(channels, 1, 1))
        amp = rng.uniform(0.5, 1.0, size=(channels, 1, 1))
        t += amp * np.cos(2 * np.pi * (fy * coords[:, None] + fx * coords[None, :]) + phase)
    return t / np.abs(t).max()


def synth_dataset(classes=2, per_class=500, size=32, seed=0, channels=3):
    """Texture-mixture images whose class is the dominant template.

    Every class owns a smooth random template. An image contains a randomly
    shifted copy of every template; its own class's copy is stronger by a
    per-image contrast drawn uniformly from [0.02, 1] * 0.10, so some images
    sit close to the decision boundary. A per-image channel offset and
    Gaussian pixel noise are added, then pixels are clipped and rounded to 8
    bits (lossless export to CIFAR-style records). Samples come out shuffled.
    """
    if classes < 2 or per_class < 1 or size < 1:
        raise DataError("synthetic dataset needs classes >= 2, per_class >= 1, size >= 1")
    rng = np.random.default_rng(seed)
    templates = [_class_template(rng, channels, size) for _ in range(classes)]
    labels = np.repeat(np.arange(classes), per_class)
    n = len(labels)
    strength = SYNTH_MIN_STRENGTH + (1 - SYNTH_MIN_STRENGTH) * rng.random(n)
    images = np.empty((n, channels, size, size))
    for i in range(n):
        base = SYNTH_BASE * rng.uniform(1 - SYNTH_BASE_JITTER, 1 + SYNTH_BASE_JITTER)
        d = SYNTH_CONTRAST * strength[i]
        weights = np.full(classes, base - d / (2 * (classes - 1)))
        weights[labels[i]] = base + d / 2
        img = np.zeros((channels, size, size))
        for k in range(classes):
            shift = tuple(rng.integers(0, size, size=2))
            img += weights[k] * np.roll(templates[k], shift, axis=(1, 2))
        images[i] = img
    images += 0.5 + rng.uniform(-SYNTH_COLOR_JITTER, SYNTH_COLOR_JITTER, size=(n, channels, 1, 1))
    images += rng.normal(0.0, SYNTH_NOISE, size=images.shape)
    images = quantize_8bit(np.clip(images, 0.0, 1.0))
    order = rng.permutation(n)
    return LabeledImages(images[order], labels[order], classes)


# -- splits -------------------------------------------------------------------------

def stratified_split(labels, test_fraction, seed):
    """Boolean test mask with ``round(test_fraction * n)`` members per label stratum."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(labels), dtype=bool)
    for value in np.unique(labels):
        idx = np.nonzero(labels == value)[0]
        idx = idx[rng.permutation(len(idx))]
        test[idx[:int(round(test_fraction * len(idx)))]] = True
    return test


def split_labeled(dataset, test_fraction=0.2, seed=0):
    test = stratified_split(dataset.labels, test_fraction, seed)
    return dataset.subset(np.nonzero(~test)[0]), dataset.subset(np.nonzero(test)[0])


# -- detector datasets --------------------------------------------------------------

@dataclass
class DetectionDataset:
    features: np.ndarray
    labels: np.ndarray
    test_mask: np.ndarray
    provenance: list = field(default_factory=list)  # (sample_id, source, epsilon)
    mode: str = "black"
    layers: tuple = ()
    seed: int = 0

    @property
    def dimension(self):
        return self.features.shape[1]

    def train(self):
        return self.features[~self.test_mask], self.labels[~self.test_mask]

    def test(self):
        return self.features[self.test_mask], self.labels[self.test_mask]

    def save(self, path):
        np.savez(path, features=self.features, labels=self.labels, test_mask=self.test_mask,
                 sample_ids=np.array([p[0] for p in self.provenance], dtype=np.int64),
                 sources=np.array([p[1] for p in self.provenance]),
                 epsilons=np.array([p[2] for p in self.provenance], dtype=np.float64),
                 mode=self.mode, layers=np.array(self.layers, dtype=str), seed=self.seed)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            prov = list(zip(z["sample_ids"].tolist(), z["sources"].tolist(), z["epsilons"].tolist()))
            return cls(z["features"], z["labels"], z["test_mask"], prov, str(z["mode"]),
                       tuple(z["layers"].tolist()), int(z["seed"]))


def extract_features(images, mode="black", net=None, layers=(), log_scale=False, batch=200):
    """Feature matrix for a stack of images in black- or white-box mode."""
    images = np.asarray(images, dtype=np.float64)
    if mode == "black":
        return blackbox_features(images, log_scale)
    if mode != "white":
        raise DataError(f"unknown feature mode '{mode}'")
    if net is None:
        raise DataError("white-box features need the target network")
    chunks = []
    for i in range(0, len(images), batch):
        _, trace = net.forward(images[i:i + batch], capture=layers)
        chunks.append(whitebox_features(trace, layers, log_scale, batched=True))
    return np.concatenate(chunks, axis=0)


def build_detection_dataset(clean_images, outcomes, net=None, mode="black", layers=(), seed=0,
                            quantize=False, log_scale=False, test_fraction=0.2, clean_ids=None):
    """Balanced clean/adversarial feature set with a stratified train/test split.

    Positives are the successful adversarial images (zero-perturbation
    ``clean-error`` outcomes are not perturbations and are skipped); negatives
    are an equally sized seeded draw from ``clean_images``.
    """
    positives = [o for o in outcomes if o.success and o.attack_name != "clean-error"]
    if not positives:
        raise DataError("no successful adversarial examples to build a detector dataset from")
    clean_images = np.asarray(clean_images, dtype=np.float64)
    if len(clean_images) < len(positives):
        raise DataError(f"cannot balance {len(positives)} adversarial samples with "
                        f"{len(clean_images)} clean images")
    if clean_ids is None:
        clean_ids = np.arange(len(clean_images))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(clean_images), size=len(positives), replace=False))
    adv = np.stack([o.adversarial for o in positives])
    clean = clean_images[pick]
    if quantize:
        adv, clean = quantize_8bit(adv), quantize_8bit(clean)
    layers = tuple(layers)
    feats = extract_features(np.concatenate([clean, adv]), mode, net, layers, log_scale)
    labels = np.concatenate([np.zeros(len(clean), np.int64), np.ones(len(adv), np.int64)])
    prov = [(int(clean_ids[i]), "clean", 0.0) for i in pick]
    prov += [(int(o.sample_id), o.attack_name, float(o.epsilon)) for o in positives]
    test_mask = stratified_split(labels, test_fraction, seed + 1)
    return DetectionDataset(feats, labels, test_mask, prov, mode, layers if mode == "white" else (), seed)
