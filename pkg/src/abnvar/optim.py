"""RMSprop whose squared-gradient average is shared across workers."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class RMSpropConfig:
    lr: float = 7e-4
    alpha: float = 0.99
    eps: float = 1e-8
    max_grad_norm: float | None = 40.0


def rmsprop_step(param: np.ndarray, grad: np.ndarray, sq_avg: np.ndarray, lr, alpha, eps):
    """In-place update: v <- a*v + (1-a)*g^2;  p <- p - lr*g/(sqrt(v)+eps)."""
    sq_avg *= alpha
    sq_avg += (1.0 - alpha) * grad * grad
    param -= lr * grad / (np.sqrt(sq_avg) + eps)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: dict, max_norm):
    """Scale every gradient by max_norm/norm when the global L2 norm exceeds max_norm.

    Returns (grads, pre-clip norm).  ``max_norm=None`` disables clipping.
    """
    norm = global_norm(grads.values())
    if max_norm is None or norm <= max_norm:
        return grads, norm
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class SharedRMSprop:
    """Second-moment state mirroring a parameter dict, one array per tensor."""

    def __init__(self, params: dict, config: RMSpropConfig | None = None):
        self.config = config or RMSpropConfig()
        self.sq_avg = {k: np.zeros_like(v) for k, v in params.items()}
        self.rejected = 0

    def step_tensor(self, name, param, grad, lr=None):
        c = self.config
        rmsprop_step(param, grad, self.sq_avg[name], c.lr if lr is None else lr, c.alpha, c.eps)

    @staticmethod
    def finite(grads: dict) -> bool:
        return all(np.all(np.isfinite(g)) for g in grads.values())

    def reject(self, reason):
        self.rejected += 1
        logger.warning("rejected update (%s); %d rejected so far", reason, self.rejected)


def _checksum(a: np.ndarray) -> float:
    return float(np.sum(a))


class GlobalParams:
    """Parameters, shared RMSprop state and counters visible to every worker.

    Each tensor has its own lock; an update is a read-modify-write of one
    tensor at a time, so workers may interleave between tensors but never
    inside one.  A running checksum is kept per tensor to detect tearing.
    """

    def __init__(self, params: dict, buffers: dict | None = None, config: RMSpropConfig | None = None):
        self.params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
        self.shapes = {k: v.shape for k, v in self.params.items()}
        self.optimizer = SharedRMSprop(self.params, config)
        self._locks = {k: threading.Lock() for k in self.params}
        self._sums = {k: _checksum(v) for k, v in self.params.items()}
        self.buffers = {k: np.array(v, copy=True) for k, v in (buffers or {}).items()}
        self._buffer_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self.version = 0
        self.global_step = 0
        self.updates = 0
        self.torn = 0

    @property
    def config(self):
        return self.optimizer.config

    def snapshot(self, verify=False):
        """Copy every tensor under its lock.  Returns (params, version)."""
        version = self.version
        out = {}
        for k, lock in self._locks.items():
            with lock:
                arr = self.params[k].copy()
                expected = self._sums[k]
            if verify and _checksum(arr) != expected:
                with self._counter_lock:
                    self.torn += 1
            out[k] = arr
        return out, version

    def buffer_snapshot(self):
        with self._buffer_lock:
            return {k: v.copy() for k, v in self.buffers.items()}

    def publish_buffers(self, buffers: dict):
        with self._buffer_lock:
            for k, v in buffers.items():
                self.buffers[k] = np.array(v, copy=True)

    def apply_gradients(self, grads: dict, steps: int, lr=None) -> bool:
        """RMSprop-update every tensor, then advance the step counter by ``steps``.

        ``lr`` overrides the configured learning rate for this update only.

        Non-finite gradients are rejected (counted and logged), never applied.
        """
        for k, g in grads.items():
            if g.shape != self.shapes[k]:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {self.shapes[k]}")
        if not SharedRMSprop.finite(grads):
            self.optimizer.reject("non-finite gradient")
            return False
        for k, g in grads.items():
            with self._locks[k]:
                self.optimizer.step_tensor(k, self.params[k], g, lr)
                self._sums[k] = _checksum(self.params[k])
        with self._counter_lock:
            self.version += 1
            self.updates += 1
            self.global_step += steps
        return True

    def verify(self) -> bool:
        """True when every stored checksum matches its tensor and all values are finite."""
        for k, lock in self._locks.items():
            with lock:
                if _checksum(self.params[k]) != self._sums[k] or not np.all(np.isfinite(self.params[k])):
                    return False
        return True


def rmsprop_apply(store: GlobalParams, grads: dict, steps: int = 0) -> bool:
    return store.apply_gradients(grads, steps)
