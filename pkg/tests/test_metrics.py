import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqdetect.attacks import AttackOutcome
from freqdetect.errors import DataError
from freqdetect.metrics import EvalReport, asrd, compute_asr, confusion, evaluate_detector, f1_score, pct


def test_asr_counts():
    assert compute_asr([True] * 5) == 1.0
    assert compute_asr([False] * 5) == 0.0
    assert compute_asr([True] * 496 + [False] * 504) == 0.496
    x = np.zeros((1, 2, 2))
    outs = [AttackOutcome(x, x, s, "pgd", 1, 0) for s in (True, False, True, True)]
    assert compute_asr(outs) == 0.75
    with pytest.raises(DataError):
        compute_asr([])


def _preds(fnr_hits, positives, fps=0, negatives=10):
    probs = [0.9] * (positives - fnr_hits) + [0.1] * fnr_hits + [0.9] * fps + [0.1] * (negatives - fps)
    labels = [1] * positives + [0] * negatives
    return np.array(probs), np.array(labels)


def test_full_asr_zero_fnr_gives_zero_asrd():
    rep = evaluate_detector(*_preds(0, 20), asr=1.0)
    assert (rep.fnr, rep.asrd, rep.f1) == (0.0, 0.0, 1.0)
    assert rep.csv_row()["ASRD"] == "00.0"


def test_asrd_rows_from_tables():
    assert asrd(0.227, 0.496) == pytest.approx(0.112592)
    assert pct(asrd(0.227, 0.496)) == "11.3"
    assert asrd(0.420, 0.969) == pytest.approx(0.40698)
    assert pct(asrd(0.420, 0.969)) == "40.7"


def test_counts_and_formulas():
    probs = np.array([0.9, 0.5, 0.49, 0.1, 0.7, 0.2])
    labels = np.array([1, 1, 1, 1, 0, 0])
    assert confusion(probs, labels) == (2, 1, 1, 2)
    rep = evaluate_detector(probs, labels, asr=0.8, config={"mode": "black"})
    assert rep.f1 == pytest.approx(4 / 7)
    assert rep.fnr == 0.5 and rep.asrd == 0.5 * 0.8
    assert rep.config == {"mode": "black"}


def test_single_class_ground_truth_rejected():
    with pytest.raises(DataError):
        evaluate_detector([0.9, 0.1], [1, 1], asr=0.5)
    with pytest.raises(DataError):
        evaluate_detector([0.9, 0.1], [0, 0], asr=0.5)
    with pytest.raises(DataError):
        evaluate_detector([0.9], [0, 1], asr=0.5)
    with pytest.raises(DataError):
        evaluate_detector([0.9, 0.1], [0, 1], asr=1.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40),
       st.floats(0, 1), st.randoms(use_true_random=False))
def test_report_invariants(pairs, asr, rnd):
    probs = np.array([p for p, _ in pairs])
    labels = np.array([l for _, l in pairs])
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    rep = evaluate_detector(probs, labels, asr)
    assert rep.fnr == rep.fn / (rep.fn + rep.tp)
    assert rep.asrd == rep.fnr * rep.asr
    denom = 2 * rep.tp + rep.fp + rep.fn
    assert rep.f1 == (2 * rep.tp / denom if denom else 0.0)
    # swapping predictions with identical (decision, label) signature changes nothing
    order = list(range(len(probs)))
    rnd.shuffle(order)
    shuffled = evaluate_detector(probs[order], labels[order], asr)
    assert shuffled.to_dict() == rep.to_dict()


def test_perfect_detector():
    labels = np.array([0, 1, 1, 0, 1])
    rep = evaluate_detector(labels.astype(float), labels, asr=0.7)
    assert (rep.f1, rep.fnr, rep.asrd) == (1.0, 0.0, 0.0)


def test_f1_degenerate_denominator():
    assert f1_score(0, 0, 0) == 0.0


def test_pct_format():
    assert pct(0.0) == "00.0" and pct(0.003) == "00.3" and pct(1.0) == "100.0" and pct(0.982) == "98.2"


def test_report_serialization():
    rep = EvalReport(3, 1, 4, 2, 0.6, 0.4, 0.5, 0.2, {"epsilon": "8/255", "seed": 0})
    d = json.loads(rep.to_json())
    assert d["tp"] == 3 and d["config"]["epsilon"] == "8/255"
    lines = rep.to_csv().splitlines()
    assert lines[0] == "epsilon,seed,tp,fp,tn,fn,F1,FNR,ASR,ASRD"
    assert lines[1] == "8/255,0,3,1,4,2,60.0,40.0,50.0,20.0"
