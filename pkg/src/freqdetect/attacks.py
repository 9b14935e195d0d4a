"""L-infinity attacks on the small CNN: FGSM, PGD, a square-patch random search,
and the standard-mode cascade that chains them.

Batch functions take stacked images and return one :class:`AttackOutcome`
per sample. Per-sample randomness comes from ``(budget.seed, sample_id)``,
so an outcome does not depend on which other samples share its batch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .smallnet import log_softmax

OUTCOME_MAGIC = b"SSADV1"


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    steps: int = 40
    step_size: float | None = None
    seed: int = 0
    random_start: bool = True
    early_stop: bool = True

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise DataError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise DataError("step_size must be > 0")

    @property
    def alpha(self):
        return self.epsilon / 4 if self.step_size is None else self.step_size


@dataclass
class AttackOutcome:
    original: np.ndarray
    adversarial: np.ndarray
    success: bool
    attack_name: str
    queries_or_steps: int
    label: int
    sample_id: int = 0
    epsilon: float = 0.0

    @property
    def linf(self):
        return float(np.max(np.abs(self.adversarial - self.original)))


class ForwardOnly:
    """Exposes logits and nothing else; used to prove an attack is gradient-free."""

    def __init__(self, net):
        self._net = net
        self.classes = net.classes

    def logits(self, x):
        return self._net.logits(x)

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


def _prepare(images, labels, sample_ids):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.ndim != 4 or len(images) != len(labels):
        raise DataError("attacks expect (N, C, H, W) images with N labels")
    if sample_ids is None:
        sample_ids = np.arange(len(labels))
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    return images, labels, sample_ids


def _outcomes(name, images, adv, labels, preds, counts, ids, eps):
    return [AttackOutcome(images[i], adv[i], bool(preds[i] != labels[i]), name, int(counts[i]),
                          int(labels[i]), int(ids[i]), eps) for i in range(len(labels))]


def _sample_rng(seed, sample_id):
    return np.random.default_rng([int(seed), int(sample_id)])


def fgsm_batch(net, images, labels, budget, sample_ids=None):
    images, labels, ids = _prepare(images, labels, sample_ids)
    _, grad = net.loss_and_input_grad(images, labels)
    adv = np.clip(images + budget.epsilon * np.sign(grad), 0.0, 1.0)
    return _outcomes("fgsm", images, adv, labels, net.predict(adv), np.ones(len(labels)), ids,
                     budget.epsilon)


def pgd_batch(net, images, labels, budget, sample_ids=None):
    """Sign-gradient ascent on cross-entropy, projected onto the eps-ball and [0, 1].

    With ``early_stop`` a sample stops moving once a completed step has made
    it misclassified; the first step is always taken.
    """
    images, labels, ids = _prepare(images, labels, sample_ids)
    eps = budget.epsilon
    lo = np.maximum(images - eps, 0.0)
    hi = np.minimum(images + eps, 1.0)
    x = images.copy()
    if budget.random_start:
        for i, sid in enumerate(ids):
            noise = _sample_rng(budget.seed, sid).uniform(-eps, eps, size=images.shape[1:])
            x[i] = np.clip(images[i] + noise, lo[i], hi[i])
    active = np.ones(len(labels), dtype=bool)
    steps = np.zeros(len(labels), dtype=np.int64)
    for t in range(budget.steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        _, grad, logits = net.loss_and_input_grad(x[idx], labels[idx], return_logits=True)
        if budget.early_stop and t > 0:
            fooled = np.argmax(logits, axis=1) != labels[idx]
            active[idx[fooled]] = False
            idx, grad = idx[~fooled], grad[~fooled]
        x[idx] = np.clip(x[idx] + budget.alpha * np.sign(grad), lo[idx], hi[idx])
        steps[idx] += 1
        assert np.all(np.abs(x - images) <= eps + 1e-9)
    return _outcomes("pgd", images, x, labels, net.predict(x), steps, ids, eps)


def _cross_entropy(logits, labels):
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def square_batch(net, images, labels, budget, sample_ids=None):
    """Random search over solid square patches of +-eps; uses logits only.

    A proposal overwrites one square of the current perturbation with a
    per-channel random sign and is kept when the cross-entropy increases.
    The square side starts at ceil(0.3 * W) and halves every steps/5 proposals.
    """
    images, labels, ids = _prepare(images, labels, sample_ids)
    eps = budget.epsilon
    n, c, h, w = images.shape
    rngs = [_sample_rng(budget.seed, sid) for sid in ids]
    delta = np.zeros_like(images)
    x = images.copy()
    logits = net.logits(x)
    loss = _cross_entropy(logits, labels)
    active = np.argmax(logits, axis=1) == labels
    queries = np.ones(n, dtype=np.int64)
    first_side = math.ceil(0.3 * w)
    period = max(1, budget.steps // 5)
    for i in range(budget.steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        side = max(1, first_side >> (i // period))
        side_h, side_w = min(side, h), min(side, w)
        proposal = delta[idx].copy()
        for j, k in enumerate(idx):
            rng = rngs[k]
            r = rng.integers(0, h - side_h + 1)
            col = rng.integers(0, w - side_w + 1)
            signs = rng.choice(np.array([-1.0, 1.0]), size=c)
            proposal[j, :, r:r + side_h, col:col + side_w] = signs[:, None, None] * eps
        x_new = np.clip(images[idx] + proposal, 0.0, 1.0)
        new_logits = net.logits(x_new)
        new_loss = _cross_entropy(new_logits, labels[idx])
        queries[idx] += 1
        accept = new_loss > loss[idx]
        acc = idx[accept]
        delta[acc] = proposal[accept]
        x[acc] = x_new[accept]
        loss[acc] = new_loss[accept]
        fooled = np.argmax(new_logits[accept], axis=1) != labels[acc]
        active[acc[fooled]] = False
    return _outcomes("square", images, x, labels, net.predict(x), queries, ids, eps)


ATTACKS = {"fgsm": fgsm_batch, "pgd": pgd_batch, "square": square_batch}


def get_attack(name):
    try:
        return ATTACKS[name]
    except KeyError:
        raise DataError(f"unknown attack '{name}'; choose from {sorted(ATTACKS)}") from None


def run_attack(name, net, images, labels, budget, sample_ids=None):
    return get_attack(name)(net, images, labels, budget, sample_ids)


def _single(batch_fn, net, image, label, budget, sample_id):
    return batch_fn(net, np.asarray(image)[None], [label], budget, [sample_id])[0]


def fgsm(net, image, label, budget, sample_id=0):
    return _single(fgsm_batch, net, image, label, budget, sample_id)


def pgd(net, image, label, budget, sample_id=0):
    return _single(pgd_batch, net, image, label, budget, sample_id)


def square_attack(net, image, label, budget, sample_id=0):
    return _single(square_batch, net, image, label, budget, sample_id)


def standard_cascade(net, images, labels, attacks, budget, sample_ids=None):
    """Run ``attacks`` in order, handing only the failures to the next one.

    ``attacks`` holds names or batch callables; ``budget`` is one
    :class:`AttackBudget` or a mapping from attack name to budget. Samples the
    clean network already gets wrong are reported as ``clean-error``
    successes with zero perturbation.
    """
    if not attacks:
        raise DataError("cascade needs at least one attack")
    images, labels, ids = _prepare(images, labels, sample_ids)
    fns = [(a, get_attack(a)) if isinstance(a, str) else (getattr(a, "__name__", "attack"), a)
           for a in attacks]
    results = [None] * len(labels)
    eps0 = (budget if isinstance(budget, AttackBudget) else next(iter(budget.values()))).epsilon
    preds = net.predict(images) if len(labels) else np.zeros(0, dtype=np.int64)
    for i in np.nonzero(preds != labels)[0]:
        results[i] = AttackOutcome(images[i], images[i].copy(), True, "clean-error", 0,
                                   int(labels[i]), int(ids[i]), eps0)
    remaining = np.nonzero(preds == labels)[0]
    last = {}
    for name, fn in fns:
        if remaining.size == 0:
            break
        b = budget if isinstance(budget, AttackBudget) else budget[name]
        for i, out in zip(remaining, fn(net, images[remaining], labels[remaining], b, ids[remaining])):
            if out.success:
                results[i] = out
            else:
                last[i] = out
        remaining = np.array([i for i in remaining if results[i] is None], dtype=np.int64)
    for i in remaining:
        results[i] = last[i]
    return results


# -- outcome dumps --------------------------------------------------------------------

def write_outcomes(path_bin, path_csv, outcomes, epsilon, steps, seed):
    """Binary dump (header + little-endian records) and a CSV index."""
    shape = outcomes[0].original.shape if outcomes else (0, 0, 0)
    with open(path_bin, "wb") as f:
        f.write(OUTCOME_MAGIC)
        f.write(struct.pack("<dqQI3I", float(epsilon), int(steps), int(seed), len(outcomes), *shape))
        for o in outcomes:
            name = o.attack_name.encode("utf-8")
            f.write(struct.pack("<qqBqH", o.sample_id, o.label, int(o.success), o.queries_or_steps, len(name)))
            f.write(name)
            f.write(np.ascontiguousarray(o.original, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(o.adversarial, dtype="<f8").tobytes())
    lines = ["sample_id,attack_name,success,linf"]
    lines += [f"{o.sample_id},{o.attack_name},{int(o.success)},{o.linf!r}" for o in outcomes]
    with open(path_csv, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_outcomes(path_bin):
    """Inverse of :func:`write_outcomes`; returns ``(outcomes, header)``."""
    data = open(path_bin, "rb").read()
    if data[:6] != OUTCOME_MAGIC:
        raise DataError("not an outcome dump (bad magic)")
    head = struct.Struct("<dqQI3I")
    eps, steps, seed, count, c, h, w = head.unpack_from(data, 6)
    pos = 6 + head.size
    rec = struct.Struct("<qqBqH")
    size = c * h * w
    outcomes = []
    for _ in range(count):
        sid, label, success, queries, name_len = rec.unpack_from(data, pos)
        pos += rec.size
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        orig = np.frombuffer(data, "<f8", size, pos).reshape(c, h, w).copy()
        pos += 8 * size
        adv = np.frombuffer(data, "<f8", size, pos).reshape(c, h, w).copy()
        pos += 8 * size
        outcomes.append(AttackOutcome(orig, adv, bool(success), name, queries, label, sid, eps))
    if pos != len(data):
        raise DataError("trailing bytes in outcome dump")
    return outcomes, {"epsilon": eps, "steps": steps, "seed": seed}
