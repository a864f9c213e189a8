"""Siamese U-shaped feature extractor with a common (fusion) decoder.

Layout for ``depth = L`` levels with widths ``w_i = base * 2**(i-1)``:

* shared encoder, applied to each image: ``e_1 = Convs(x)``,
  ``e_i = Convs(maxpool(e_{i-1}))``;
* shared decoder, applied to each stream: ``d_L = Convs(Up(e_L) + e_{L-1})``
  and ``d_i = Convs(Up(d_{i+1}) + e_{i-1})`` down to ``d_2`` (``+`` is channel
  concatenation);
* common decoder with the same scheme over ``e_i^c = e_i^1 + e_i^2``;
* 1x1 heads: ``F_I^k = head_i(d_2^k)`` (shared) and
  ``F_C^k = head_ck(d_2^k + d_2^c)``.

``Convs`` is two (3x3 conv, batch-norm, ReLU) groups; ``Up`` is nearest 2x
upsampling followed by one such group.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import BatchNormStats, batchnorm, concat_channels, conv2d, maxpool2, relu, upsample2
from .tensor import Tensor, no_grad


@dataclass
class NetConfig:
    depth: int = 3
    base_channels: int = 16
    feature_channels: int = 3
    use_batchnorm: bool = True
    tau: float = 0.1
    input_size: int = 64

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 2:
            raise ConfigError(f"depth must be an integer >= 2, got {self.depth}")
        if self.feature_channels != 3:
            raise ConfigError(f"feature_channels is fixed at 3, got {self.feature_channels}")
        if self.base_channels < self.feature_channels:
            raise ConfigError(f"base_channels must be >= {self.feature_channels}, got {self.base_channels}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.input_size is not None:
            check_spatial(self.input_size, self.input_size, self.depth, exc=ConfigError)

    @property
    def widths(self):
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)


def check_spatial(h, w, depth, exc=DimensionError):
    q = 2 ** (depth - 1)
    for name, v in (("height", h), ("width", w)):
        if v <= 0 or v % q:
            if exc is DimensionError:
                raise DimensionError(f"spatial extent must be a positive multiple of {q}", axis=name, expected=f"multiple of {q}", got=v)
            raise exc(f"{name} {v} is not a positive multiple of 2**(depth-1) = {q}")


def layer_specs(config):
    """Ordered ``(name, cin, cout, k)`` for every convolution in the model."""
    w = config.widths
    L = config.depth
    specs = []

    def convs(prefix, cin, cout):
        specs.append((f"{prefix}.0", cin, cout, 3))
        specs.append((f"{prefix}.1", cout, cout, 3))

    convs("enc1", 3, w[0])
    for i in range(2, L + 1):
        convs(f"enc{i}", w[i - 2], w[i - 1])
    for i in range(L, 1, -1):
        # the deepest stage upsamples e_L, shallower ones upsample d_{i+1}
        cin_up = w[i - 1]
        specs.append((f"dec{i}.up", cin_up, w[i - 2], 3))
        convs(f"dec{i}.convs", 2 * w[i - 2], w[i - 2])
    for i in range(L, 1, -1):
        cin_up = 2 * w[i - 1] if i == L else w[i - 1]
        specs.append((f"com{i}.up", cin_up, w[i - 2], 3))
        convs(f"com{i}.convs", 3 * w[i - 2], w[i - 2])
    c = config.feature_channels
    specs.append(("head_i", w[0], c, 1))
    specs.append(("head_c1", 2 * w[0], c, 1))
    specs.append(("head_c2", 2 * w[0], c, 1))
    return specs


def parameter_count(config):
    """Closed-form count: conv weights + biases + batch-norm affine pairs."""
    total = 0
    for name, cin, cout, k in layer_specs(config):
        total += cin * cout * k * k + cout
        if k == 3 and config.use_batchnorm:
            total += 2 * cout
    return total


class TrendNet:
    """All trainable parameters and normalisation statistics (the model state)."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.bn = OrderedDict()
        rng = np.random.default_rng(seed)
        for name, cin, cout, k in layer_specs(config):
            fan_in = cin * k * k
            bound = np.sqrt(6.0 / fan_in)
            wt = rng.uniform(-bound, bound, size=(cout, cin, k, k))
            self.params[f"{name}.weight"] = Tensor(wt.astype(self.dtype), requires_grad=True, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=f"{name}.bias")
            if k == 3 and config.use_batchnorm:
                self.params[f"{name}.gamma"] = Tensor(np.ones(cout, self.dtype), requires_grad=True, name=f"{name}.gamma")
                self.params[f"{name}.beta"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=f"{name}.beta")
                self.bn[name] = BatchNormStats(cout, dtype=self.dtype)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    # -- building blocks -------------------------------------------------
    def _cbr(self, name, x, training):
        p = self.params
        y = conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=1)
        if self.config.use_batchnorm:
            y = batchnorm(y, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], training)
        return relu(y)

    def _convs(self, prefix, x, training):
        return self._cbr(f"{prefix}.1", self._cbr(f"{prefix}.0", x, training), training)

    def _head(self, name, x):
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def encode(self, x, training):
        feats = [self._convs("enc1", x, training)]
        for i in range(2, self.config.depth + 1):
            feats.append(self._convs(f"enc{i}", maxpool2(feats[-1]), training))
        return feats

    def _decode(self, prefix, enc, training):
        L = self.config.depth
        d = enc[L - 1]
        for i in range(L, 1, -1):
            up = self._cbr(f"{prefix}{i}.up", upsample2(d), training)
            d = self._convs(f"{prefix}{i}.convs", concat_channels(up, enc[i - 2]), training)
        return d

    def forward(self, t1, t2, training=False):
        """Return ``((F_I^1, F_I^2), (F_C^1, F_C^2))``, each ``[N, 3, H, W]``."""
        t1 = t1 if isinstance(t1, Tensor) else Tensor(np.asarray(t1, self.dtype))
        t2 = t2 if isinstance(t2, Tensor) else Tensor(np.asarray(t2, self.dtype))
        if t1.shape != t2.shape:
            raise DimensionError("bi-temporal inputs differ in shape", axis="shape", expected=t1.shape, got=t2.shape)
        if t1.ndim != 4 or t1.shape[1] != 3:
            raise DimensionError("inputs must be [N, 3, H, W]", axis="channel", expected=3, got=t1.shape[1] if t1.ndim == 4 else t1.ndim)
        check_spatial(t1.shape[2], t1.shape[3], self.config.depth)
        e1 = self.encode(t1, training)
        e2 = self.encode(t2, training)
        d1 = self._decode("dec", e1, training)
        d2 = self._decode("dec", e2, training)
        ec = [concat_channels(a, b) for a, b in zip(e1, e2)]
        dc = self._decode("com", ec, training)
        fi = (self._head("head_i", d1), self._head("head_i", d2))
        fc = (self._head("head_c1", concat_channels(d1, dc)), self._head("head_c2", concat_channels(d2, dc)))
        return fi, fc

    __call__ = forward

    def infer(self, t1, t2):
        with no_grad():
            return self.forward(t1, t2, training=False)

    # -- state -----------------------------------------------------------
    def state_arrays(self):
        """Named arrays covering parameters and running statistics."""
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.mean
            out[f"{k}.running_var"] = s.var
        return out

    def load_state_arrays(self, arrays):
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, dst in expected.items():
            src = np.asarray(arrays[k])
            if src.shape != dst.shape:
                raise DimensionError(f"state tensor {k} has the wrong shape", axis="shape", expected=dst.shape, got=src.shape)
            dst[...] = src


def init_model(config, seed=0, dtype=np.float32):
    return TrendNet(config, seed=seed, dtype=dtype)


def forward(state, t1, t2, training=False):
    return state.forward(t1, t2, training=training)
