"""Binary "TCDW" checkpoints.

Layout, all integers little-endian ``u32`` unless noted::

    b"TCDW"
    version
    net config          : len, UTF-8 JSON
    parameter table     : count, then per tensor
                          name_len, UTF-8 name, rank, dims[rank], f32 payload
    running-stat table  : same encoding as the parameter table
    has_adam (u8)       : if 1, step (u32), lr (f64), then a table with
                          entries "m/<param>" and "v/<param>"
    rng state           : len, UTF-8 JSON
    epoch
"""

import io
import json
import struct

import numpy as np

from .errors import ConfigError, DataError
from .network import NetConfig, TrendNet

MAGIC = b"TCDW"
VERSION = 1


def _write_table(fh, items):
    fh.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise DataError("truncated checkpoint")
    return b


def _u32(fh):
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def _read_table(fh):
    out = {}
    for _ in range(_u32(fh)):
        name = _read_exact(fh, _u32(fh)).decode("utf-8")
        rank = _u32(fh)
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return out


def _write_str(fh, s):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def save_checkpoint(path, model, optimizer=None, rng_state=None, epoch=0):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, json.dumps(model.config.to_dict(), sort_keys=True))
    _write_table(buf, [(k, v.data) for k, v in model.params.items()])
    stats = []
    for k, s in model.bn.items():
        stats.append((f"{k}.running_mean", s.mean))
        stats.append((f"{k}.running_var", s.var))
    _write_table(buf, stats)
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<I", optimizer.t))
        buf.write(struct.pack("<d", optimizer.lr))
        names = list(model.params)
        table = [(f"m/{n}", m) for n, m in zip(names, optimizer.m)] + [(f"v/{n}", v) for n, v in zip(names, optimizer.v)]
        _write_table(buf, table)
    _write_str(buf, json.dumps(rng_state or {}, sort_keys=True))
    buf.write(struct.pack("<I", int(epoch)))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class Checkpoint:
    """Decoded checkpoint contents."""

    def __init__(self, net_config, params, stats, adam, rng_state, epoch):
        self.net_config = net_config
        self.params = params
        self.stats = stats
        self.adam = adam
        self.rng_state = rng_state
        self.epoch = epoch

    def build_model(self):
        model = TrendNet(self.net_config)
        arrays = dict(self.params)
        arrays.update(self.stats)
        model.load_state_arrays(arrays)
        return model

    def adam_state(self, model):
        if self.adam is None:
            return None
        names = list(model.params)
        return {
            "t": self.adam["t"],
            "lr": self.adam["lr"],
            "m": [self.adam["table"][f"m/{n}"] for n in names],
            "v": [self.adam["table"][f"v/{n}"] for n in names],
        }


def read_checkpoint(path):
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if _read_exact(fh, 4) != MAGIC:
            raise DataError(f"{path} is not a TCDW checkpoint")
        version = _u32(fh)
        if version != VERSION:
            raise DataError(f"checkpoint version {version} is not supported (expected {VERSION})")
        try:
            net_config = NetConfig(**json.loads(_read_exact(fh, _u32(fh)).decode("utf-8")))
        except (TypeError, ConfigError) as exc:
            raise DataError(f"checkpoint carries an invalid net config: {exc}") from exc
        params = _read_table(fh)
        stats = _read_table(fh)
        adam = None
        if struct.unpack("<B", _read_exact(fh, 1))[0]:
            t = _u32(fh)
            lr = struct.unpack("<d", _read_exact(fh, 8))[0]
            adam = {"t": t, "lr": lr, "table": _read_table(fh)}
        rng_state = json.loads(_read_exact(fh, _u32(fh)).decode("utf-8"))
        epoch = _u32(fh)
        if fh.read(1):
            raise DataError("trailing bytes after checkpoint payload")
    return Checkpoint(net_config, params, stats, adam, rng_state, epoch)


def load_checkpoint(path):
    """Return ``(model, checkpoint)``."""
    ckpt = read_checkpoint(path)
    return ckpt.build_model(), ckpt
