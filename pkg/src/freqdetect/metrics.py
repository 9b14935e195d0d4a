"""Attack success rate, detection counts, and the detection-adjusted success rate.

ASR is the fraction of attacked samples that were successfully perturbed;
ASRD = FNR * ASR is the fraction that are both perturbed and missed by the
detector.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError

THRESHOLD = 0.5


def compute_asr(outcomes):
    """Fraction of successes; accepts outcomes or plain booleans."""
    flags = [o if isinstance(o, (bool, np.bool_)) else o.success for o in outcomes]
    if not flags:
        raise DataError("ASR of an empty outcome list is undefined")
    return sum(bool(f) for f in flags) / len(flags)


def asrd(fnr, asr):
    return fnr * asr


def pct(value):
    """Percentage with one decimal, zero padded like the result tables: 0.003 -> '00.3'."""
    return f"{100.0 * value:04.1f}"


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    f1: float
    fnr: float
    asr: float
    asrd: float
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "F1": pct(self.f1), "FNR": pct(self.fnr), "ASR": pct(self.asr), "ASRD": pct(self.asrd)}

    def to_csv(self):
        buf = io.StringIO()
        row = {**{k: self.config[k] for k in sorted(self.config)}, **self.csv_row()}
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def confusion(probs, labels, threshold=THRESHOLD):
    pred = np.asarray(probs, dtype=np.float64) >= threshold
    truth = np.asarray(labels).astype(bool)
    return (int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
            int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))


def f1_score(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate_detector(probs, labels, asr, config=None):
    """Confusion counts at threshold 0.5, then F1, FNR and ASRD = FNR * ASR.

    ``labels`` uses 1 for adversarial. Both classes must be present.
    """
    labels = np.asarray(labels)
    if len(np.asarray(probs)) != len(labels):
        raise DataError("predictions and labels differ in length")
    if not (labels == 1).any() or not (labels == 0).any():
        raise DataError("evaluation needs both clean and adversarial ground truth")
    if not 0.0 <= asr <= 1.0:
        raise DataError(f"ASR must lie in [0, 1], got {asr}")
    tp, fp, tn, fn = confusion(probs, labels)
    fnr = fn / (fn + tp)
    return EvalReport(tp, fp, tn, fn, f1_score(tp, fp, fn), fnr, asr, asrd(fnr, asr), dict(config or {}))
