"""Named parameter storage and Adam with linear warmup / linear decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Ordered map of named trainable tensors.

    Iteration order is insertion order, which fixes the serialization and
    update order for determinism.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self._params.items():
            out.add(name, p.data.copy())
        return out

    def detached(self) -> "ParameterStore":
        """Same arrays, requires_grad off — forward passes build no graph."""
        out = ParameterStore()
        for name, p in self._params.items():
            t = Tensor(p.data)
            out._params[name] = t
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self._params.items():
            out.add(name, p.data.astype(dtype))
        return out

    def load_values(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place from same-named arrays."""
        for name, p in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter in source: {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
            p.data = arrays[name].astype(p.data.dtype)

    def equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._params[n].data, other._params[n].data) for n in self._params)


class OptimizerState:
    """Adam moments plus the schedule horizon.

    Learning rate at step t:
        peak_lr * min(t / warmup_steps, 1)
                * max(0, 1 - max(0, t - warmup_steps) / (total_steps - warmup_steps))
    total_steps == 0 (or <= warmup) disables the decay leg.
    """

    def __init__(
        self,
        params: ParameterStore,
        peak_lr: float = 1e-4,
        warmup_steps: int = 1000,
        total_steps: int = 0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float | None = 1.0,
    ):
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def lr_at(self, step: int) -> float:
        warm = 1.0 if self.warmup_steps <= 0 else min(step / self.warmup_steps, 1.0)
        if self.total_steps <= self.warmup_steps or self.total_steps == 0:
            decay = 1.0
        else:
            over = max(0, step - self.warmup_steps)
            decay = max(0.0, 1.0 - over / (self.total_steps - self.warmup_steps))
        return self.peak_lr * warm * decay


def global_grad_norm(params: ParameterStore) -> float:
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float((g * g).sum())
    return total**0.5


def clip_grads(params: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm. Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


def adam_step(params: ParameterStore, state: OptimizerState) -> float:
    """One Adam update with bias correction; zeroes gradients afterwards.

    Missing gradients count as zero (the moments still decay, as usual).
    Returns the learning rate used.
    """
    if state.clip_norm is not None:
        clip_grads(params, state.clip_norm)
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    params.zero_grads()
    return lr
