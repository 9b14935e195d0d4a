import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqdetect.attacks import (AttackBudget, AttackOutcome, ForwardOnly, fgsm, fgsm_batch, pgd, pgd_batch,
                                read_outcomes, run_attack, square_attack, square_batch, standard_cascade,
                                write_outcomes)
from freqdetect.errors import DataError
from freqdetect.smallnet import Network

from helpers import tiny_arch, tiny_net


def _batch(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, 8, 8)), rng.integers(0, 2, size=n)


def _check(outcome, eps):
    assert outcome.linf <= eps + 1e-9
    assert outcome.adversarial.min() >= 0.0 and outcome.adversarial.max() <= 1.0


def test_budget_validation():
    for bad in (dict(epsilon=0.0), dict(epsilon=1.5), dict(epsilon=0.1, steps=0),
                dict(epsilon=0.1, step_size=-1.0)):
        with pytest.raises(DataError):
            AttackBudget(**bad)
    assert AttackBudget(0.08).alpha == pytest.approx(0.02)


def test_fgsm_zero_gradient_leaves_image():
    net = Network.zeros(tiny_arch())
    x = np.random.default_rng(0).random((3, 8, 8))
    out = fgsm(net, x, 0, AttackBudget(1e-300))
    assert np.array_equal(out.adversarial, x) and not out.success


def test_fgsm_is_signed_step():
    net = tiny_net(seed=1)
    x, y = _batch()
    eps = 4 / 255
    _, g = net.loss_and_input_grad(x, y)
    outs = fgsm_batch(net, x, y, AttackBudget(eps))
    for o, xi, gi in zip(outs, x, g):
        assert np.array_equal(o.adversarial, np.clip(xi + eps * np.sign(gi), 0, 1))
        assert o.success == (net.predict(o.adversarial[None])[0] != o.label)


@pytest.mark.parametrize("seed", range(5))
def test_pgd_one_step_equals_fgsm(seed):
    net = tiny_net(seed=seed)
    x, y = _batch(seed=seed)
    eps = (seed + 1) / 255
    a = fgsm_batch(net, x, y, AttackBudget(eps))
    b = pgd_batch(net, x, y, AttackBudget(eps, steps=1, step_size=eps, random_start=False))
    for oa, ob in zip(a, b):
        assert np.array_equal(oa.adversarial, ob.adversarial)
        assert oa.success == ob.success


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["fgsm", "pgd", "square"]), st.floats(1e-4, 0.5), st.integers(1, 8),
       st.integers(0, 2**31), st.booleans())
def test_outcome_invariants(name, eps, steps, seed, random_start):
    net = tiny_net(seed=seed % 7)
    x, y = _batch(4, seed)
    budget = AttackBudget(eps, steps=steps, seed=seed, random_start=random_start)
    for o in run_attack(name, net, x, y, budget):
        _check(o, eps)
        if o.success:
            assert net.predict(o.adversarial[None])[0] != o.label


def test_attacks_are_deterministic_per_seed():
    net = tiny_net(seed=2)
    x, y = _batch()
    for fn in (pgd_batch, square_batch):
        a = fn(net, x, y, AttackBudget(0.05, steps=10, seed=4), np.arange(12) + 100)
        b = fn(net, x, y, AttackBudget(0.05, steps=10, seed=4), np.arange(12) + 100)
        assert all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b))


def test_per_sample_randomness_independent_of_batch():
    net = tiny_net(seed=2)
    x, y = _batch()
    budget = AttackBudget(0.05, steps=5, seed=4)
    whole = square_batch(net, x, y, budget, np.arange(12))
    alone = square_attack(net, x[5], y[5], budget, sample_id=5)
    assert np.array_equal(whole[5].adversarial, alone.adversarial)
    whole = pgd_batch(net, x, y, budget, np.arange(12))
    assert np.array_equal(whole[3].adversarial, pgd(net, x[3], y[3], budget, sample_id=3).adversarial)


def test_square_single_rejected_step_returns_original():
    net = Network.zeros(tiny_arch())  # constant loss: every proposal is rejected
    x = np.random.default_rng(0).random((3, 8, 8))
    out = square_attack(net, x, 0, AttackBudget(0.1, steps=1))
    assert np.array_equal(out.adversarial, x)
    assert not out.success and out.queries_or_steps == 2


def test_square_is_gradient_free():
    net = tiny_net(seed=6)
    x, y = _batch()
    budget = AttackBudget(0.1, steps=30, seed=1)
    a = square_batch(net, x, y, budget)
    b = square_batch(ForwardOnly(net), x, y, budget)
    assert not hasattr(ForwardOnly(net), "loss_and_input_grad")
    assert all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b))


def test_square_patches_are_plus_minus_eps():
    net = tiny_net(seed=6)
    x = np.full((4, 3, 8, 8), 0.5)
    outs = square_batch(net, x, np.zeros(4, dtype=int), AttackBudget(0.1, steps=20, seed=2))
    for o in outs:
        d = np.round(o.adversarial - o.original, 12)
        assert set(np.unique(np.abs(d))) <= {0.0, 0.1}


class Counter:
    def __init__(self, fn, name):
        self.fn, self.calls, self.__name__ = fn, 0, name

    def __call__(self, *args):
        self.calls += 1
        return self.fn(*args)


def _always(net, images, labels, budget, ids):
    # pretend success without moving: stands in for an attack that always wins
    return [AttackOutcome(x, x.copy(), True, "always", 1, int(l), int(i), budget.epsilon)
            for x, l, i in zip(images, labels, ids)]


def test_cascade_single_attack_equals_attack_alone():
    net = tiny_net(seed=3)
    x, y = _batch(16)
    ok = net.predict(x) == y
    budget = AttackBudget(0.05, steps=5, seed=2)
    casc = standard_cascade(net, x[ok], y[ok], ["pgd"], budget, np.nonzero(ok)[0])
    alone = pgd_batch(net, x[ok], y[ok], budget, np.nonzero(ok)[0])
    for c, a in zip(casc, alone):
        assert np.array_equal(c.adversarial, a.adversarial) and c.success == a.success


def test_cascade_short_circuits():
    net = tiny_net(seed=3)
    x, y = _batch(16)
    first, second = Counter(_always, "always"), Counter(pgd_batch, "pgd")
    outs = standard_cascade(net, x, y, [first, second], AttackBudget(0.05))
    assert first.calls == 1 and second.calls == 0
    assert all(o.success for o in outs)


def test_cascade_marks_clean_errors():
    net = tiny_net(seed=3)
    x, y = _batch(16)
    wrong = net.predict(x) != y
    assert wrong.any()
    outs = standard_cascade(net, x, y, ["fgsm"], AttackBudget(0.01))
    for o, w in zip(outs, wrong):
        if w:
            assert o.attack_name == "clean-error" and o.success and o.linf == 0.0


def test_cascade_dominates_individual_attacks():
    net = tiny_net(seed=8)
    x, y = _batch(40, seed=8)
    ok = net.predict(x) == y
    x, y = x[ok], y[ok]
    budgets = {"fgsm": AttackBudget(0.02), "square": AttackBudget(0.02, steps=20, seed=1)}
    casc = standard_cascade(net, x, y, ["fgsm", "square"], budgets)
    solo = {a: run_attack(a, net, x, y, b) for a, b in budgets.items()}
    union = [s1.success or s2.success for s1, s2 in zip(solo["fgsm"], solo["square"])]
    assert [o.success for o in casc] == union
    assert np.mean(union) >= max(np.mean([o.success for o in s]) for s in solo.values())
    for o, f in zip(casc, solo["fgsm"]):
        assert o.attack_name == ("fgsm" if f.success else "square")


def test_cascade_needs_attacks():
    with pytest.raises(DataError):
        standard_cascade(tiny_net(), *_batch(2), [], AttackBudget(0.1))


def test_outcome_dump_roundtrip(tmp_path):
    net = tiny_net(seed=1)
    x, y = _batch(5)
    outs = standard_cascade(net, x, y, ["pgd", "square"], AttackBudget(0.03, steps=3, seed=5),
                            np.arange(5) * 7)
    write_outcomes(tmp_path / "o.bin", tmp_path / "o.csv", outs, 0.03, 3, 5)
    back, header = read_outcomes(tmp_path / "o.bin")
    assert len(back) == 5
    for a, b in zip(outs, back):
        assert (a.sample_id, a.attack_name, a.success, a.label) == (b.sample_id, b.attack_name, b.success, b.label)
        assert np.array_equal(a.adversarial, b.adversarial) and np.array_equal(a.original, b.original)
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "sample_id,attack_name,success,linf" and len(lines) == 6
    write_outcomes(tmp_path / "p.bin", tmp_path / "p.csv", back, 0.03, 3, 5)
    assert (tmp_path / "p.bin").read_bytes() == (tmp_path / "o.bin").read_bytes()
