"""Differentiable layers over NCHW tensors.

Convolutions are computed as im2col followed by one BLAS matrix product; the
column buffer is kept for the weight gradient.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_result

_AXES = ("batch", "channel", "height", "width")


def _check_rank4(x, what="input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (N, C, H, W)", axis="rank", expected=4, got=x.ndim)


def _im2col(xd, kh, kw, stride, ph, pw):
    """Channel-major columns [C*kH*kW, N*Ho*Wo]; every copy runs along width rows."""
    n, c = xd.shape[:2]
    if kh == kw == 1 and stride == 1 and ph == pw == 0:
        return np.ascontiguousarray(xd.transpose(1, 0, 2, 3)).reshape(c, -1)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, -1)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kH,kW]."""
    _check_rank4(x)
    _check_rank4(weight, "weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError("conv2d weight/input channel mismatch", axis="channel", expected=cin, got=wcin)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv2d bias must have one entry per output channel", axis="channel", expected=(cout,), got=bias.shape)
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise DimensionError("kernel taller than padded input", axis="height", expected=f"<= {hp}", got=kh)
    if kw > wp:
        raise DimensionError("kernel wider than padded input", axis="width", expected=f"<= {wp}", got=kw)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd, wd = x.data, weight.data
    wmat = wd.reshape(cout, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    # cheaper than scattering kH*kW column blocks once the output is not much wider than the input
    full_conv = stride == 1 and padding < min(kh, kw) and cout <= cin

    cols = _im2col(xd, kh, kw, stride, padding, padding)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    # an NCHW view over channel-major memory; the next im2col reads it without a copy-back
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gt @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if pointwise:
                gx = (wmat.T @ gt).reshape(cin, n, h, w)
            elif full_conv:
                # input gradient as a stride-1 correlation of g with the flipped, transposed kernel
                gcols = _im2col(g, kh, kw, 1, kh - 1 - padding, kw - 1 - padding)
                wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1)
                gx = (wflip @ gcols).reshape(cin, n, h, w)
            else:
                dcols = wmat.T @ gt
                dcols = dcols.reshape(cin, kh, kw, n, ho, wo)
                gx = np.zeros((cin, n, hp, wp), dtype=dcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            gx = gx.transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gw
        return gx, gw, gt.sum(axis=1)

    return make_result(out, parents, bw)


def maxpool2(x):
    """2x2 max pooling with stride 2; ties route the gradient to the first
    element in row-major order."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2:
        raise DimensionError("maxpool2 needs an even extent", axis="height", expected="even", got=h)
    if w % 2:
        raise DimensionError("maxpool2 needs an even extent", axis="width", expected="even", got=w)
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        mask = idx[..., None] == np.arange(4)
        gb = mask * g[..., None]
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gb.astype(x.data.dtype, copy=False),)

    return make_result(out, (x,), bw)


def upsample2(x):
    """Nearest-neighbour 2x spatial upsampling."""
    _check_rank4(x)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw)


def relu(x):
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(a, b):
    """Concatenate along the channel axis, ``a``'s channels first."""
    _check_rank4(a)
    _check_rank4(b)
    for ax in (0, 2, 3):
        if a.shape[ax] != b.shape[ax]:
            raise DimensionError("concat_channels extents differ", axis=_AXES[ax], expected=a.shape[ax], got=b.shape[ax])
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x, gamma, beta, stats, training):
    """Per-channel normalisation; batch statistics when ``training``,
    running averages otherwise.  Running variance tracks the unbiased
    batch variance."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batchnorm affine parameters must match channels", axis="channel", expected=(c,), got=gamma.shape)
    xd = x.data
    eps = stats.eps
    if training:
        m = n * h * w
        if m <= 1:
            raise DimensionError("batchnorm training needs more than one value per channel", axis="batch", expected="> 1", got=m)
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
        mom = stats.momentum
        stats.mean[:] = (1 - mom) * stats.mean + mom * mean
        stats.var[:] = (1 - mom) * stats.var + mom * var * m / (m - 1)
    else:
        mean = stats.mean.astype(np.float64)
        var = stats.var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    mean = mean.astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd[None, :, None, None]
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw)


def softmax_tau(x, tau, axis=1):
    """Tempered softmax along ``axis`` after subtracting the per-position max."""
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    s = _softmax(x.data, tau, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)) / x.data.dtype.type(tau),)

    return make_result(s, (x,), bw)


def _softmax(a, tau, axis):
    z = (a - a.max(axis=axis, keepdims=True)) / a.dtype.type(tau)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
