"""Momentum-encoder machinery: EMA target updates and the FIFO memory bank."""

from __future__ import annotations

import torch
import torch.nn as nn

from .core import InputError


class MemoryBank:
    """Bounded FIFO ring of unit-norm key embeddings (single-writer).

    negatives() returns an immutable snapshot in queue order (oldest first);
    later enqueues never mutate a snapshot already handed out.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise InputError("bank capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.count = 0
        self.cursor = 0

    def enqueue(self, keys: torch.Tensor) -> None:
        """Append key rows, overwriting the oldest entries once full."""
        if keys.ndim == 1:
            keys = keys[None, :]
        if keys.shape[1] != self.dim:
            raise InputError(f"key dim {keys.shape[1]} != bank dim {self.dim}")
        norms = keys.norm(dim=1)
        off = (norms - 1.0).abs().max().item() if len(norms) else 0.0
        if off > 1e-4:
            raise InputError(f"keys must be unit-norm (max deviation {off:.2e})")
        keys = keys.detach().to(self.buffer.dtype)
        if keys.shape[0] >= self.capacity:
            # only the most recent `capacity` keys survive
            self.buffer.copy_(keys[-self.capacity:])
            self.count = self.capacity
            self.cursor = 0
            return
        for row in keys:  # small batches; clarity over vectorized wraparound
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def negatives(self) -> torch.Tensor:
        """Snapshot [count, dim] in FIFO order, oldest to newest."""
        if self.count < 1:
            raise InputError("bank is empty")
        if self.count < self.capacity:
            return self.buffer[: self.count].clone()
        return torch.cat([self.buffer[self.cursor:], self.buffer[: self.cursor]]).clone()

    def state(self) -> dict:
        return {
            "buffer": self.buffer.clone(),
            "count": self.count,
            "cursor": self.cursor,
            "capacity": self.capacity,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"], state["buffer"].shape[1], state["buffer"].dtype)
        bank.buffer.copy_(state["buffer"])
        bank.count = state["count"]
        bank.cursor = state["cursor"]
        return bank


@torch.no_grad()
def ema_update(momentum_model: nn.Module, online_model: nn.Module, m: float) -> None:
    """theta_momentum <- m * theta_momentum + (1 - m) * theta_online, elementwise."""
    if not (0.0 <= m <= 1.0):
        raise InputError("momentum coefficient must be in [0, 1]")
    mom = dict(momentum_model.named_parameters())
    onl = dict(online_model.named_parameters())
    if mom.keys() != onl.keys():
        missing = mom.keys() ^ onl.keys()
        raise InputError(f"parameter sets differ: {sorted(missing)}")
    for name, p_m in mom.items():
        p_o = onl[name]
        if p_m.shape != p_o.shape:
            raise InputError(
                f"shape mismatch for {name}: {tuple(p_m.shape)} vs {tuple(p_o.shape)}"
            )
        p_m.mul_(m).add_(p_o.detach(), alpha=1.0 - m)
