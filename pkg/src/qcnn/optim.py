"""Optimizers and learning-rate schedules.

Weight decay is decoupled from the gradient in both optimizers: the update
subtracts lr * wd * w alongside the gradient step.
"""

import numpy as np

from .errors import ConfigurationError

_F32 = np.float32


class SGDMomentum:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(t.data) for t in params]

    def step(self):
        lr = _F32(self.lr)
        mu = _F32(self.momentum)
        wd = _F32(self.weight_decay)
        for t, v in zip(self.params, self.velocity):
            g = t.grad
            v *= mu
            v += g
            t.data -= lr * v
            if wd:
                t.data -= lr * wd * t.data

    def state_dict(self):
        return {"kind": "sgd_momentum", "velocity": [v.copy() for v in self.velocity]}

    def load_state_dict(self, state):
        for v, saved in zip(self.velocity, state["velocity"]):
            v[...] = saved


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in params]
        self.v = [np.zeros_like(t.data) for t in params]

    def step(self):
        self.t += 1
        lr = _F32(self.lr)
        b1, b2 = _F32(self.beta1), _F32(self.beta2)
        wd = _F32(self.weight_decay)
        c1 = _F32(1.0 - self.beta1**self.t)
        c2 = _F32(1.0 - self.beta2**self.t)
        for t, m, v in zip(self.params, self.m, self.v):
            g = t.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + _F32(self.eps))
            if wd:
                t.data -= lr * wd * t.data

    def state_dict(self):
        return {
            "kind": "adam",
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state):
        self.t = state["t"]
        for m, saved in zip(self.m, state["m"]):
            m[...] = saved
        for v, saved in zip(self.v, state["v"]):
            v[...] = saved


OPTIMIZERS = ("sgd_momentum", "adam")


def make_optimizer(name, params, lr, momentum=0.9, weight_decay=0.0):
    if name == "sgd_momentum":
        return SGDMomentum(params, lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")


def make_schedule(kind, initial_lr, epochs, milestones=(0.5, 0.75), gamma=0.1):
    """Per-epoch learning rate. step: multiply by gamma at the milestone
    fractions of the run; cosine: half-cosine decay to zero."""
    if kind == "constant":
        return lambda epoch: initial_lr
    if kind == "step":
        points = sorted(int(np.floor(m * epochs)) for m in milestones)

        def step_lr(epoch):
            lr = initial_lr
            for p in points:
                if epoch >= p:
                    lr *= gamma
            return lr

        return step_lr
    if kind == "cosine":
        return lambda epoch: initial_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs, 1)))
    raise ConfigurationError(f"unknown lr schedule {kind!r}")
