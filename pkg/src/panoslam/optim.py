"""Adam over named numpy parameter arrays."""
from __future__ import annotations

import numpy as np
from scipy.special import expit, logit


class Adam:
    """Per-parameter-group Adam; moments keyed by name and resized on map growth.

    Groups listed in ``log_domain`` hold positive values and are stepped on
    their logarithm, so the learning rate is a relative step size.  Groups in
    ``logit_domain`` hold values in (0, 1) and are stepped on their logit.
    """

    def __init__(self, lrs: dict[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15,
                 log_domain: tuple[str, ...] = (), logit_domain: tuple[str, ...] = ()):
        self.lrs = dict(lrs)
        self.log_domain = frozenset(log_domain)
        self.logit_domain = frozenset(logit_domain)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0.0:
                continue
            p = params[name]
            in_log = name in self.log_domain
            in_logit = name in self.logit_domain
            if in_log:
                g = g * p
            elif in_logit:
                g = g * p * (1 - p)
            m = self.m.get(name)
            if m is None or m.shape != p.shape:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if in_log:
                p *= np.exp(-step)
            elif in_logit:
                moved = step != 0
                p[moved] = expit(logit(p[moved]) - step[moved])
            else:
                p -= step

    def scale_lr(self, factor: float) -> None:
        for k in self.lrs:
            self.lrs[k] *= factor
