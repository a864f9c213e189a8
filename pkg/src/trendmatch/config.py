"""Run configuration: JSON in, validated dataclasses out."""

import json
from dataclasses import asdict, dataclass, field, fields

from .distances import METRICS
from .errors import ConfigError
from .network import NetConfig


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_step_epochs: int = 60
    lr_gamma: float = 0.1
    batch_size: int = 16
    epochs: int = 60
    loss_weights: tuple = (1.0, 1.0, 1.0)
    tau: float = 0.1
    threshold: float = 0.5
    seed: int = 0
    augment: bool = True
    crop_size: int = 32
    gcd_metric: str = "softmatch"
    bg_index: int = 2
    val_every: int = 1

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = net_from_dict(self.net)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.lr > 0, f"lr must be positive, got {self.lr}")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)")
        need(self.eps > 0, "eps must be positive")
        need(isinstance(self.lr_step_epochs, int) and self.lr_step_epochs >= 1, "lr_step_epochs must be an integer >= 1")
        need(0 < self.lr_gamma <= 1, "lr_gamma must lie in (0, 1]")
        need(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size must be an integer >= 1")
        need(isinstance(self.epochs, int) and self.epochs >= 0, "epochs must be an integer >= 0")
        need(len(self.loss_weights) == 3 and all(w >= 0 for w in self.loss_weights), "loss_weights needs three non-negative values")
        need(self.tau > 0, "tau must be positive")
        need(abs(self.tau - self.net.tau) < 1e-15, f"tau ({self.tau}) must match net.tau ({self.net.tau})")
        need(0 < self.threshold < 1, "threshold must lie in (0, 1)")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(self.gcd_metric in METRICS, f"gcd_metric must be one of {METRICS}")
        need(self.bg_index in (0, 1, 2), "bg_index must be 0, 1 or 2")
        need(isinstance(self.val_every, int) and self.val_every >= 1, "val_every must be an integer >= 1")
        if self.crop_size is not None:
            q = 2 ** (self.net.depth - 1)
            need(isinstance(self.crop_size, int) and self.crop_size > 0 and self.crop_size % q == 0,
                 f"crop_size must be a positive multiple of {q}")

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


def net_from_dict(d):
    known = {f.name for f in fields(NetConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown net config keys: {sorted(unknown)}")
    try:
        return NetConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    d = dict(d)
    net = d.pop("net", {})
    if not isinstance(net, dict):
        raise ConfigError("net must be a JSON object")
    if "tau" in d and "tau" not in net:
        net["tau"] = d["tau"]
    if "tau" in net and "tau" not in d:
        d["tau"] = net["tau"]
    try:
        return RunConfig(net=net_from_dict(net), **d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)
