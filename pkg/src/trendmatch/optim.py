"""Adam optimiser and step learning-rate schedule."""

import numpy as np

from .errors import ConfigError
from .tensor import get_tape


class Adam:
    """Bias-corrected Adam over a fixed, ordered list of parameters.

    ``step`` consumes each parameter's ``.grad``, updates ``.data`` in place,
    resets the gradients and clears the tape.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
            raise ConfigError(f"invalid Adam hyperparameters lr={lr} betas=({beta1}, {beta2}) eps={eps}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype, copy=False)
        self.zero_grad()
        get_tape().clear()

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state):
        if len(state["m"]) != len(self.params):
            raise ConfigError("optimizer state does not match the parameter list")
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def step_lr(base_lr, epoch, step_size=60, gamma=0.1):
    """Learning rate after ``epoch`` completed epochs of a step schedule."""
    return base_lr * gamma ** (epoch // step_size)
