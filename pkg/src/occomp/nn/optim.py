"""SGD/momentum and Adam updates plus piecewise-constant learning rates."""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError


class LrSchedule:
    """Piecewise-constant learning rate over (start_step, rate) segments."""

    def __init__(self, entries: list[tuple[int, float]]):
        if not entries:
            raise ParameterError("schedule needs at least one (step, rate) entry")
        steps = [int(s) for s, _ in entries]
        rates = [float(r) for _, r in entries]
        if steps[0] != 0:
            raise ParameterError("first schedule threshold must be step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ParameterError(f"thresholds must be strictly increasing: {steps}")
        if any(r <= 0 for r in rates):
            raise ParameterError(f"rates must be positive: {rates}")
        self.entries = list(zip(steps, rates))

    def rate(self, step: int) -> float:
        current = self.entries[0][1]
        for threshold, r in self.entries:
            if step >= threshold:
                current = r
            else:
                break
        return current

    @classmethod
    def constant(cls, rate: float) -> "LrSchedule":
        return cls([(0, rate)])


class Sgd:
    """SGD with classical momentum: v <- mu*v + g, w <- w - lr*v."""

    kind = "sgd"

    def __init__(self, momentum: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, model, lr: float) -> None:
        if lr <= 0:
            raise ParameterError(f"learning rate must be > 0, got {lr}")
        self.t += 1
        for layer in model.layers:
            for pname, grad in layer.grads.items():
                key = f"{layer.name}.{pname}"
                if self.momentum > 0:
                    v = self.velocity.get(key)
                    v = grad.copy() if v is None else self.momentum * v + grad
                    self.velocity[key] = v
                else:
                    v = grad
                layer.params[pname] = layer.params[pname] - lr * v

    def describe(self) -> dict:
        return {"kind": self.kind, "momentum": self.momentum}


class Adam:
    """Adam with standard bias correction."""

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self._scratch: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, model, lr: float) -> None:
        if lr <= 0:
            raise ParameterError(f"learning rate must be > 0, got {lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for layer in model.layers:
            for pname, grad in layer.grads.items():
                key = f"{layer.name}.{pname}"
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(grad)
                    self.v[key] = np.zeros_like(grad)
                    self._scratch[key] = np.empty_like(grad)
                v = self.v[key]
                buf = self._scratch[key]
                np.multiply(grad, 1 - b1, out=buf)
                m *= b1
                m += buf
                np.square(grad, out=buf)
                buf *= 1 - b2
                v *= b2
                v += buf
                np.divide(v, bias2, out=buf)
                np.sqrt(buf, out=buf)
                buf += self.eps
                np.divide(m, buf, out=buf)
                buf *= lr / bias1
                layer.params[pname] = layer.params[pname] - buf

    def describe(self) -> dict:
        return {"kind": self.kind, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def make_optimizer(kind: str, **kwargs):
    if kind == "sgd":
        return Sgd(momentum=kwargs.get("momentum", 0.0))
    if kind == "adam":
        return Adam(
            beta1=kwargs.get("beta1", 0.9),
            beta2=kwargs.get("beta2", 0.999),
            eps=kwargs.get("eps", 1e-8),
        )
    raise ParameterError(f"unknown optimizer kind {kind!r}")
