"""Vector-quantization bottleneck with an EMA-maintained codebook."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


class Codebook(nn.Module):
    """K code vectors of dimension d plus their EMA accumulators.

    Codes are buffers, not parameters: they move only through :meth:`ema_update`.
    """

    def __init__(self, K: int, d: int, decay: float = 0.99, eps: float = 1e-5, seed: int = 0):
        super().__init__()
        if K < 2:
            raise ValueError("codebook needs K >= 2")
        self.K, self.d, self.decay, self.eps = K, d, decay, eps
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("codes", torch.randn(K, d, generator=g))
        self.register_buffer("ema_counts", torch.zeros(K))
        self.register_buffer("ema_sums", torch.zeros(K, d))
        # total assignments ever seen per code; codes at zero are never rewritten
        self.register_buffer("lifetime", torch.zeros(K))

    def distances(self, z: torch.Tensor) -> torch.Tensor:
        return ((z[:, None, :] - self.codes[None].to(z.dtype)) ** 2).sum(-1)

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Nearest code per row of ``z`` (m, d); ties resolve to the lowest index."""
        if z.dim() != 2 or z.shape[1] != self.d:
            raise ValueError(f"expected latents of shape (m, {self.d}), got {tuple(z.shape)}")
        idx = torch.argmin(self.distances(z), dim=1)
        return idx, self.codes[idx].to(z.dtype)

    def lookup(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long)
        if bool((idx < 0).any()) or bool((idx >= self.K).any()):
            raise IndexError(f"code index out of range [0, {self.K})")
        return self.codes[idx]

    @torch.no_grad()
    def seed_from(self, z: torch.Tensor, rng: np.random.Generator) -> None:
        """k-means++ seeding of the codes from a batch of encoder outputs."""
        pts = z.detach().reshape(-1, self.d).to(self.codes.dtype)
        first = int(rng.integers(len(pts)))
        chosen = [pts[first]]
        for _ in range(1, self.K):
            c = torch.stack(chosen)
            d2 = ((pts[:, None] - c[None]) ** 2).sum(-1).min(1).values.double().numpy()
            total = d2.sum()
            j = int(rng.choice(len(pts), p=d2 / total)) if total > 0 else int(rng.integers(len(pts)))
            chosen.append(pts[j])
        self.codes.copy_(torch.stack(chosen))
        self.ema_sums.copy_(self.codes)
        self.ema_counts.fill_(1.0)
        self.lifetime.fill_(1.0)

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, assignments: torch.Tensor) -> None:
        z = z.detach().reshape(-1, self.d).to(self.codes.dtype)
        assignments = assignments.reshape(-1)
        if bool((assignments < 0).any()) or bool((assignments >= self.K).any()):
            raise IndexError("assignment index out of range")
        onehot = torch.nn.functional.one_hot(assignments, self.K).to(z.dtype)
        counts = onehot.sum(0)
        sums = onehot.T @ z
        g = self.decay
        self.ema_counts.mul_(g).add_((1 - g) * counts)
        self.ema_sums.mul_(g).add_((1 - g) * sums)
        self.lifetime.add_(counts)
        total = self.ema_counts.sum()
        smoothed = (self.ema_counts + self.eps) / (total + self.K * self.eps) * total
        live = self.lifetime > 0
        self.codes[live] = self.ema_sums[live] / smoothed[live, None]

    def state(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("codes", "ema_counts", "ema_sums", "lifetime")} | {
            "K": self.K, "d": self.d, "decay": self.decay, "eps": self.eps}

    @classmethod
    def from_state(cls, st: dict) -> "Codebook":
        book = cls(st["K"], st["d"], st["decay"], st["eps"])
        for k in ("codes", "ema_counts", "ema_sums", "lifetime"):
            getattr(book, k).copy_(torch.tensor(st[k], dtype=torch.float32))
        return book


def quantize(z, book: Codebook):
    return book.quantize(z)


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; backward treats the quantizer as identity."""
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_q.shape)}")
    # z - z.detach() is exactly zero, so the forward value is z_q bit for bit
    return z_q.detach() + (z - z.detach())


def commitment_loss(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Mean squared distance to the (gradient-blocked) assigned codes."""
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return ((z - z_q.detach()) ** 2).mean()
