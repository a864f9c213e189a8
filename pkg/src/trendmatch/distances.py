"""Pixelwise distance maps between paired feature tensors.

All three metrics reduce the channel axis of two ``[N, C, H, W]`` tensors to a
``[N, 1, H, W]`` map in ``[0, 1]`` that can be read as a change probability.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import _softmax
from .tensor import Tensor, make_result

METRICS = ("softmatch", "cosine", "euclidean")


@dataclass
class DistanceMap:
    values: Tensor
    metric: str

    @property
    def shape(self):
        return self.values.shape

    def numpy(self):
        return self.values.data[:, 0]


def _check_pair(f1, f2):
    if f1.ndim != 4:
        raise DimensionError("features must be rank 4 (N, C, H, W)", axis="rank", expected=4, got=f1.ndim)
    if f1.shape != f2.shape:
        for ax, name in enumerate(("batch", "channel", "height", "width")):
            if f1.shape[ax] != f2.shape[ax]:
                raise DimensionError("paired features differ in shape", axis=name, expected=f1.shape[ax], got=f2.shape[ax])


def _open_unit(d, dtype):
    # the true value lies in (0, 1); round to the nearest representable value inside it
    d = d.astype(dtype)
    lo = np.finfo(dtype).tiny
    hi = np.nextafter(dtype.type(1), dtype.type(0))
    return np.clip(d, lo, hi)


def softmatch_values(p1, p2, tau):
    """Softmatch distance over axis 1 of two float arrays (no autodiff).

    Computed as the sum over unordered channel pairs ``i < j`` of
    ``s1_i s2_j + s1_j s2_i``, which equals ``1 - <s1, s2>`` without the
    cancellation near 0 and is exactly symmetric in its arguments.
    """
    s1 = _softmax(np.asarray(p1, dtype=np.float64), tau, 1)
    s2 = _softmax(np.asarray(p2, dtype=np.float64), tau, 1)
    return _pairwise_mismatch(s1, s2), s1, s2


def _pairwise_mismatch(s1, s2):
    c = s1.shape[1]
    d = np.zeros(s1.shape[:1] + (1,) + s1.shape[2:], dtype=np.float64)
    for i in range(c):
        for j in range(i + 1, c):
            d[:, 0] += s1[:, i] * s2[:, j] + s1[:, j] * s2[:, i]
    return d


def softmatch(f1, f2, tau=0.1):
    """``1 - <softmax(f1 / tau), softmax(f2 / tau)>`` at every pixel."""
    _check_pair(f1, f2)
    if f1.shape[1] < 2:
        raise DimensionError("softmatch needs at least two channels", axis="channel", expected=">= 2", got=f1.shape[1])
    if not tau > 0:
        raise ConfigError(f"softmatch temperature must be positive, got {tau}")
    d, s1, s2 = softmatch_values(f1.data, f2.data, tau)
    dtype = np.result_type(f1.data.dtype, f2.data.dtype)
    out = _open_unit(d, dtype)
    ip = (s1 * s2).sum(axis=1, keepdims=True)

    def bw(g):
        g = g.astype(np.float64) / tau
        return -g * s1 * (s2 - ip), -g * s2 * (s1 - ip)

    return DistanceMap(make_result(out, (f1, f2), bw), "softmatch")


def cosine_dist(f1, f2):
    """``(1 - cos) / 2``; pixels where either vector is zero get 0.5 and no gradient."""
    _check_pair(f1, f2)
    u = f1.data.astype(np.float64)
    v = f2.data.astype(np.float64)
    nu = np.sqrt((u * u).sum(axis=1, keepdims=True))
    nv = np.sqrt((v * v).sum(axis=1, keepdims=True))
    valid = (nu > 0) & (nv > 0)
    safe_u = np.where(valid, nu, 1.0)
    safe_v = np.where(valid, nv, 1.0)
    cos = np.where(valid, (u * v).sum(axis=1, keepdims=True) / (safe_u * safe_v), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    d = 0.5 * (1.0 - cos)
    dtype = np.result_type(f1.data.dtype, f2.data.dtype)

    def bw(g):
        g = np.where(valid, g.astype(np.float64), 0.0)
        gu = -0.5 * g * (v / (safe_u * safe_v) - cos * u / safe_u ** 2)
        gv = -0.5 * g * (u / (safe_u * safe_v) - cos * v / safe_v ** 2)
        return gu, gv

    return DistanceMap(make_result(d.astype(dtype), (f1, f2), bw), "cosine")


def euclid_dist(f1, f2):
    """``1 - exp(-||f1 - f2||)``; the gradient at coincident vectors is taken as 0."""
    _check_pair(f1, f2)
    delta = f1.data.astype(np.float64) - f2.data.astype(np.float64)
    r = np.sqrt((delta * delta).sum(axis=1, keepdims=True))
    e = np.exp(-r)
    d = 1.0 - e
    dtype = np.result_type(f1.data.dtype, f2.data.dtype)

    def bw(g):
        scale = np.where(r > 0, g * e / np.where(r > 0, r, 1.0), 0.0)
        gd = scale * delta
        return gd, -gd

    return DistanceMap(make_result(d.astype(dtype), (f1, f2), bw), "euclidean")


def distance(f1, f2, metric="softmatch", tau=0.1):
    if metric == "softmatch":
        return softmatch(f1, f2, tau)
    if metric == "cosine":
        return cosine_dist(f1, f2)
    if metric == "euclidean":
        return euclid_dist(f1, f2)
    raise ConfigError(f"unknown distance metric {metric!r}; expected one of {METRICS}")
