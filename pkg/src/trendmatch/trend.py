"""Inference-time decoding of change maps and trend maps.

Maps are plain ``uint8`` arrays shaped ``[N, H, W]`` (or ``[H, W]``).
Trend codes: 0 unchanged, 1 appear, 2 disappear, 3 transform.
"""

import numpy as np

from .errors import ConfigError
from .ops import _softmax
from .tensor import Tensor

UNCHANGED, APPEAR, DISAPPEAR, TRANSFORM = 0, 1, 2, 3
TREND_NAMES = {UNCHANGED: "unchanged", APPEAR: "appear", DISAPPEAR: "disappear", TRANSFORM: "transform"}


def _arr(x):
    if hasattr(x, "values"):  # DistanceMap
        x = x.values
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def decode_change(dm, threshold=0.5):
    """Binary change map: 1 where the distance is >= ``threshold``."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    d = _arr(dm)
    if d.ndim == 4:
        d = d[:, 0]
    return (d >= threshold).astype(np.uint8)


def trend_from_argmax(a1, a2, bg_index=2):
    a1 = np.asarray(a1)
    a2 = np.asarray(a2)
    bg1 = a1 == bg_index
    bg2 = a2 == bg_index
    out = np.full(a1.shape, TRANSFORM, dtype=np.uint8)
    out[bg1 & ~bg2] = APPEAR
    out[~bg1 & bg2] = DISAPPEAR
    out[a1 == a2] = UNCHANGED
    return out


def decode_trend(fi, bg_index=2):
    """Trend map from which channel each stream of ``F_I`` highlights.

    The argmax of the logits equals the argmax of their tempered softmax, so
    the temperature does not enter.  Ties go to the lowest channel index.
    """
    f1, f2 = (_arr(f) for f in fi)
    if not 0 <= bg_index < f1.shape[1]:
        raise ConfigError(f"background index {bg_index} outside 0..{f1.shape[1] - 1}")
    return trend_from_argmax(f1.argmax(axis=1), f2.argmax(axis=1), bg_index)


def trend_to_change(tm):
    tm = np.asarray(tm)
    return (tm != UNCHANGED).astype(np.uint8)


def background_probability(f, tau=0.1, bg_index=2):
    """Tempered-softmax value of the background channel, ``[N, H, W]``."""
    return _softmax(_arr(f).astype(np.float64), tau, 1)[:, bg_index]


def disagreement_rate(change_map, trend_map):
    """Fraction of pixels where the change map and the trend map's change
    component disagree."""
    a = np.asarray(change_map).astype(bool)
    b = trend_to_change(trend_map).astype(bool)
    return float((a != b).mean()) if a.size else 0.0
