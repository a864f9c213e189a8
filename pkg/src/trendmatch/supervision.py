"""Training losses driven only by binary change labels.

Three terms:

* ``l_gcd``: binary cross-entropy between the distance map of the common
  features and the change label;
* ``l_tcd``: the same loss on the softmatch map of the independent features;
* ``l_bg``: cross-entropy that pushes the fixed background channel of each
  independent stream up on unchanged pixels only (the flipped change label,
  positives only).  Changed pixels are left unconstrained because background
  legitimately occurs inside appear/disappear regions.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .distances import distance, softmatch
from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_result, weighted_sum

logger = logging.getLogger(__name__)

BG_INDEX = 2
CLAMP_EPS = 1e-7


def _label_array(label, shape):
    y = label.data if isinstance(label, Tensor) else np.asarray(label)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != tuple(shape):
        raise DimensionError("label shape does not match the map", axis="shape", expected=tuple(shape), got=y.shape)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("change labels must be binary (0/1)")
    return y.astype(np.float64)


def bce_map_loss(dm, change_label):
    """Mean binary cross-entropy using distance values as probabilities.

    Values are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm; the
    gradient is evaluated at the clamped value and passed straight through.
    """
    values = dm.values if hasattr(dm, "values") else dm
    y = _label_array(change_label, values.shape)
    d = np.clip(values.data.astype(np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    m = d.size
    loss = -(y * np.log(d) + (1.0 - y) * np.log1p(-d)).mean()

    def bw(g):
        return (g * (-(y / d) + (1.0 - y) / (1.0 - d)) / m,)

    return make_result(np.asarray(loss), (values,), bw)


def _background_stream(f, unchanged, tau, bg_index):
    # -log softmax_tau(f)[bg] averaged over each sample's unchanged pixels
    z = f.data.astype(np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[:, bg_index]
    counts = unchanged.sum(axis=(1, 2))
    w = np.divide(unchanged, counts[:, None, None], out=np.zeros_like(unchanged), where=counts[:, None, None] > 0)
    w /= f.shape[0]
    loss = (nll * w).sum()

    def bw(g):
        s = np.exp(z - lse[:, None])
        s[:, bg_index] -= 1.0
        return (g * s * w[:, None] / tau,)

    return make_result(np.asarray(loss), (f,), bw)


def background_loss(fi, change_label, tau=0.1, bg_index=BG_INDEX):
    """Average over both streams of the positive-only background loss."""
    f1, f2 = fi
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if not 0 <= bg_index < f1.shape[1]:
        raise ConfigError(f"background index {bg_index} outside 0..{f1.shape[1] - 1}")
    y = _label_array(change_label, (f1.shape[0], 1) + f1.shape[2:])[:, 0]
    unchanged = 1.0 - y
    empty = int((unchanged.sum(axis=(1, 2)) == 0).sum())
    if empty:
        logger.warning("%d sample(s) have no unchanged pixels; they add nothing to the background loss", empty)
    l1 = _background_stream(f1, unchanged, tau, bg_index)
    l2 = _background_stream(f2, unchanged, tau, bg_index)
    return weighted_sum([l1, l2], [0.5, 0.5])


@dataclass
class LossReport:
    l_gcd: float
    l_tcd: float
    l_bg: float
    total: float
    weights: tuple
    n_pixels: int
    n_changed: int
    n_unchanged: int
    loss: Tensor = field(default=None, repr=False)

    def as_dict(self):
        return {"l_gcd": self.l_gcd, "l_tcd": self.l_tcd, "l_bg": self.l_bg, "total": self.total}


def total_loss(fc, fi, change_label, weights=(1.0, 1.0, 1.0), tau=0.1, gcd_metric="softmatch", bg_index=BG_INDEX):
    """Weighted sum of the three supervision terms.

    ``report.loss`` is the differentiable scalar; the float fields are copies
    for logging.
    """
    l_gcd = bce_map_loss(distance(fc[0], fc[1], gcd_metric, tau), change_label)
    l_tcd = bce_map_loss(softmatch(fi[0], fi[1], tau), change_label)
    l_bg = background_loss(fi, change_label, tau, bg_index)
    total = weighted_sum([l_gcd, l_tcd, l_bg], weights)
    y = _label_array(change_label, (fi[0].shape[0], 1) + fi[0].shape[2:])
    n_changed = int(y.sum())
    return LossReport(
        l_gcd=l_gcd.item(),
        l_tcd=l_tcd.item(),
        l_bg=l_bg.item(),
        total=total.item(),
        weights=tuple(float(w) for w in weights),
        n_pixels=int(y.size),
        n_changed=n_changed,
        n_unchanged=int(y.size) - n_changed,
        loss=total,
    )
