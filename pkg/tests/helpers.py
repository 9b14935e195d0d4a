"""Small fixtures shared by the unit tests."""

import numpy as np

from freqdetect.smallnet import Architecture, Layer, Network


def tiny_arch(channels=3, size=8, classes=2, relu=True):
    layers = [Layer("conv", "conv1", out=4, kernel=3, stride=1, pad=1)]
    if relu:
        layers.append(Layer("relu", "relu1"))
    layers += [Layer("conv", "conv2", out=4, kernel=3, stride=2, pad=1)]
    if relu:
        layers.append(Layer("relu", "relu2"))
    layers += [Layer("gap", "pool"), Layer("dense", "fc", out=classes)]
    return Architecture((channels, size, size), classes, tuple(layers))


def tiny_net(seed=0, **kw):
    return Network.initialize(tiny_arch(**kw), seed)


def rel_err(a, b, floor=1e-8):
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f, x, idx, h=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)
