"""Named trainable parameters and the AdamW optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, UsageError

__all__ = ["Parameter", "AdamW"]


class Parameter:
    """A named weight tensor with a freeze flag.

    Frozen parameters never accumulate gradient and are skipped by the
    optimizer, so their bytes are identical before and after any number
    of steps.
    """

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = bool(trainable)
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def trainable(self) -> bool:
        return self.value.requires_grad

    def set_trainable(self, flag: bool) -> None:
        self.value.requires_grad = bool(flag)

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            self.value.grad = np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class AdamW:
    """Adam with decoupled weight decay.

    Moments are tracked per parameter name; the step counter increases by
    one on every `step()` call. Non-trainable parameters are never touched.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise UsageError("optimizer parameters must have unique names")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            if not p.trainable:
                continue
            m = self._m[p.name]
            v = self._v[p.name]
            if m.shape != p.value.data.shape:
                raise UsageError(f"optimizer state shape mismatch for {p.name!r}")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.value.data -= self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value.data
            )
