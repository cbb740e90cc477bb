"""Parameter store, AdamW, gradient clipping, plateau scheduler, early stopping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor mapping. Declaration order is the serialization order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def to_vector(self) -> np.ndarray:
        """Flatten all parameters, declaration order, row-major within each."""
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def from_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_values():
            raise ValueError(f"expected {self.n_values()} values, got {vec.size}")
        off = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[off:off + n].reshape(t.data.shape).copy()
            off += n

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            t.data = np.asarray(values[k], dtype=np.float64).reshape(t.data.shape).copy()


@dataclass
class OptimConfig:
    lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    batch_size: int = 128
    epochs: int = 200
    plateau_factor: float = 0.5
    plateau_patience: int = 8
    early_stop_patience: int = 20

    def __post_init__(self):
        if not (0.0 < self.lr):
            raise ValueError("lr must be positive")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def clip_global_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is <= max_norm. Returns pre-clip norm."""
    sq = 0.0
    for t in params.tensors():
        if t.grad is not None:
            sq += float(np.sum(t.grad * t.grad))
    total = float(np.sqrt(sq))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for t in params.tensors():
            if t.grad is not None:
                t.grad *= scale
    return total


class AdamW:
    """Decoupled weight decay Adam.

    Update order per step, for each parameter p with gradient g:
        m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
        mhat = m / (1 - b1^t) ;  vhat = v / (1 - b2^t)
        p <- p (1 - lr wd)
        p <- p - lr mhat / (sqrt(vhat) + eps)
    """

    def __init__(self, params: ParamStore, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.cfg.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data *= (1.0 - self.lr * self.cfg.weight_decay)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.cfg.eps)


class PlateauScheduler:
    """Halve (by `factor`) the optimizer lr when the watched value stalls."""

    def __init__(self, opt: AdamW, factor: float = 0.5, patience: int = 8):
        self.opt = opt
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def step(self, value: float) -> None:
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.opt.lr *= self.factor
                self.stale = 0


class EarlyStopper:
    """Stop after `patience` epochs without a new best value."""

    def __init__(self, patience: int = 20):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch value; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience
