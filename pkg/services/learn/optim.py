"""
services/learn/optim.py - Adam with L2 weight decay and per-epoch exponential decay
"""

from typing import List, Sequence

import numpy as np

from utils.exceptions import ConfigError


class Adam:
    """Adam updating parameter arrays in place.

    Weight decay is the coupled L2 form (grad += wd * param) applied before
    the moment updates.
    """

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if not lr > 0:
            raise ConfigError("learning rate must be positive", {"lr": lr})
        if weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative", {"weight_decay": weight_decay})
        self.params: List[np.ndarray] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigError("gradient list does not match the parameter list")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ExponentialLR:
    def __init__(self, optimizer: Adam, gamma: float):
        if not 0.0 < gamma <= 1.0:
            raise ConfigError("learning-rate decay must lie in (0, 1]", {"gamma": gamma})
        self.optimizer = optimizer
        self.gamma = gamma
        self.base_lr = optimizer.lr
        self.epoch = 0

    def step(self) -> None:
        self.epoch += 1
        self.optimizer.lr = self.base_lr * self.gamma ** self.epoch
