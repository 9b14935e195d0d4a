"""2D Fourier transforms, magnitude spectra and spectral feature vectors.

Coefficients are kept in natural order (DC at index ``[0, 0]``, no centre
shift). Every transform here works on the last two axes, so stacks of
channels or whole batches go through in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchitectureError, DataError


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


def _phase_matrix(n):
    # reduce l*m mod n before scaling so large products keep full precision
    idx = np.arange(n)
    return np.exp(-2j * np.pi * (np.outer(idx, idx) % n) / n)


def dft2_brute(x):
    """Direct evaluation of every 2D DFT coefficient, O(N^2 M^2).

    Reference path for tests; builds the full (N, M, N, M) kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise DataError(f"dft2_brute expects a non-empty 2D matrix, got shape {x.shape}")
    n, m = x.shape
    rows = (np.outer(np.arange(n), np.arange(n)) % n) / n
    cols = (np.outer(np.arange(m), np.arange(m)) % m) / m
    phase = rows[:, None, :, None] + cols[None, :, None, :]
    kernel = np.exp(-2j * np.pi * phase)
    return np.einsum("lkmn,mn->lk", kernel, x)


def _bit_reverse(n):
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
    return rev


def _fft_last_axis(a):
    n = a.shape[-1]
    if not _is_pow2(n):
        return a @ _phase_matrix(n).T
    a = a[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(a.shape[:-1] + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(a.shape)
        size *= 2
    return a


def fft2(x):
    """2D DFT over the last two axes.

    Radix-2 row-column transform for power-of-two sides; other sides use a
    direct DFT along that dimension.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise DataError(f"fft2 expects at least 2 dimensions, got shape {x.shape}")
    a = x.astype(np.complex128)
    a = _fft_last_axis(a)
    a = np.swapaxes(_fft_last_axis(np.swapaxes(a, -1, -2)), -1, -2)
    return a


def magnitude(coeffs):
    """Elementwise modulus sqrt(re^2 + im^2)."""
    coeffs = np.asarray(coeffs)
    return np.sqrt(coeffs.real ** 2 + coeffs.imag ** 2)


def magnitude_spectrum(x, log_scale=False):
    m = magnitude(fft2(x))
    return np.log1p(m) if log_scale else m


@dataclass
class FeatureVector:
    values: np.ndarray
    label: int
    sample_id: int = -1
    source: str = "clean"
    epsilon: float = 0.0


def blackbox_features(image, log_scale=False):
    """Concatenated per-channel magnitude spectra of a ``(C, H, W)`` image.

    A batch ``(B, C, H, W)`` gives a ``(B, C*H*W)`` matrix.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (3, 4):
        raise DataError(f"expected (C, H, W) or (B, C, H, W), got shape {image.shape}")
    spec = magnitude_spectrum(image, log_scale)
    if image.ndim == 3:
        return spec.reshape(-1)
    return spec.reshape(image.shape[0], -1)


def whitebox_dimension(shapes, layers):
    return sum(int(np.prod(shapes[name])) for name in layers)


def whitebox_features(trace, layers, log_scale=False, batched=False):
    """Spectra of captured feature maps, concatenated in the given layer order.

    ``trace`` maps layer names to ``(C, H, W)`` activations, or to
    ``(B, C, H, W)`` when ``batched`` is set.
    """
    layers = list(layers)
    if not layers:
        raise ArchitectureError("white-box features need at least one layer")
    parts = []
    for name in layers:
        if name not in trace:
            raise ArchitectureError(f"layer '{name}' missing from activation trace")
        maps = np.asarray(trace[name], dtype=np.float64)
        if maps.ndim != (4 if batched else 3):
            raise ArchitectureError(f"layer '{name}' is not a stack of 2D feature maps")
        spec = magnitude_spectrum(maps, log_scale)
        parts.append(spec.reshape(spec.shape[0], -1) if batched else spec.reshape(-1))
    return np.concatenate(parts, axis=-1)


def diff_heatmaps(clean, adv):
    """Mean spatial difference and summed spectral-difference magnitude per channel.

    Both inputs are paired image stacks ``(P, C, H, W)``; outputs are ``(C, H, W)``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if clean.shape != adv.shape:
        raise DataError(f"clean/adversarial lists differ: {clean.shape} vs {adv.shape}")
    if clean.ndim != 4 or clean.shape[0] < 1:
        raise DataError("need at least one (C, H, W) image pair")
    diff = adv - clean
    return diff.mean(axis=0), magnitude(fft2(diff)).sum(axis=0)


def normalized_cross_correlation(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / denom) if denom > 0 else 0.0


def write_pgm(path, matrix):
    """Write a binary PGM, min-max scaled to 0..255, plus a ``.txt`` sidecar.

    A constant matrix is written all black.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DataError("PGM output needs a 2D matrix")
    lo, hi = float(matrix.min()), float(matrix.max())
    if hi > lo:
        scaled = np.rint((matrix - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(matrix)
    path = Path(path)
    h, w = matrix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.astype(np.uint8).tobytes())
    path.with_suffix(".txt").write_text(f"min={lo!r}\nmax={hi!r}\n")
    return path


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
