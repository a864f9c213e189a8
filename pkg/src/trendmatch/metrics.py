"""Confusion counting and P / R / F / IoU / OA, globally and per trend."""

import json
from dataclasses import dataclass, field

import numpy as np

from .trend import APPEAR, DISAPPEAR, TRANSFORM, trend_to_change

CLASS_TAGS = {"change": "C", APPEAR: "A", DISAPPEAR: "D", TRANSFORM: "T"}
METRIC_NAMES = ("P", "R", "F", "IoU", "OA")


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _binary(x, what):
    x = np.asarray(x)
    if x.dtype == bool:
        return x
    if not np.isin(x, (0, 1)).all():
        raise ValueError(f"{what} must be a binary map")
    return x.astype(bool)


def accumulate(conf, pred, truth):
    """Add the pixel counts of one prediction/truth pair into ``conf``."""
    p = _binary(pred, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    conf.tp += tp
    conf.fp += fp
    conf.fn += fn
    conf.tn += p.size - tp - fp - fn
    return conf


@dataclass
class MetricRow:
    tag: str
    P: float
    R: float
    F: float
    IoU: float
    OA: float
    degenerate: tuple = field(default_factory=tuple)
    confusion: Confusion = None

    @property
    def is_degenerate(self):
        return bool(self.degenerate)

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def as_percent(self):
        return {k: round(100.0 * getattr(self, k), 2) for k in METRIC_NAMES}


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def finalize(conf, tag="change"):
    """Precision, recall, F1, IoU and overall accuracy; any 0/0 ratio is reported as 0 and flagged."""
    if conf.total <= 0:
        raise ValueError("cannot finalize an empty confusion")
    flags = []
    p = _ratio(conf.tp, conf.tp + conf.fp, "P", flags)
    r = _ratio(conf.tp, conf.tp + conf.fn, "R", flags)
    f = _ratio(2 * p * r, p + r, "F", flags)
    iou = _ratio(conf.tp, conf.tp + conf.fp + conf.fn, "IoU", flags)
    oa = (conf.tp + conf.tn) / conf.total
    return MetricRow(tag, p, r, f, iou, oa, tuple(flags), Confusion(conf.tp, conf.fp, conf.tn, conf.fn))


def _check_codes(m, what):
    m = np.asarray(m)
    if m.size and (m.min() < 0 or m.max() > 3):
        raise ValueError(f"{what} contains trend codes outside 0..3")
    return m


def trend_confusions(pred, truth, confs=None):
    """Accumulate change + one-vs-rest trend confusions keyed by tag."""
    pred = _check_codes(pred, "prediction")
    truth = _check_codes(truth, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if confs is None:
        confs = {tag: Confusion() for tag in CLASS_TAGS.values()}
    accumulate(confs["C"], trend_to_change(pred), trend_to_change(truth))
    for code in (APPEAR, DISAPPEAR, TRANSFORM):
        accumulate(confs[CLASS_TAGS[code]], pred == code, truth == code)
    return confs


def per_trend(pred, truth):
    """Rows for C (change), A, D and T, in that order."""
    confs = trend_confusions(pred, truth)
    return [finalize(c, tag) for tag, c in confs.items()]


def format_table(rows, title=None):
    """Fixed-width text table with percentages to two decimals."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'':<12}" + "".join(f"{m:>9}" for m in METRIC_NAMES))
    for row in rows:
        pct = row.as_percent()
        mark = " *" if row.is_degenerate else ""
        lines.append(f"{row.tag:<12}" + "".join(f"{pct[m]:>9.2f}" for m in METRIC_NAMES) + mark)
    if any(r.is_degenerate for r in rows):
        lines.append("* degenerate: at least one 0/0 ratio reported as 0")
    return "\n".join(lines)


def rows_to_json(rows, extra=None):
    report = {row.tag: row.as_percent() for row in rows}
    if extra:
        report.update(extra)
    return json.dumps(report, indent=2, sort_keys=True)
