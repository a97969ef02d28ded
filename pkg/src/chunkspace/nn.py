"""Small differentiable layer set for the chunk transformers.

Tensors and reverse-mode gradients come from torch; the layers, masking
convention and optimizer are defined here so their behaviour is pinned
independently of torch's own transformer modules.
"""

from __future__ import annotations

import math
import os
from typing import Iterable

import torch
from torch import nn
from torch.nn import functional as F


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def configure_threads() -> int:
    """Apply the ``CHUNKSPACE_THREADS`` cap to torch; returns the thread count in use."""
    cap = os.environ.get("CHUNKSPACE_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))
    return torch.get_num_threads()


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, name: str = "dense"):
        super().__init__()
        self.d_in, self.d_out, self.name = d_in, d_out, name
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name}: expected last dim {self.d_in}, got {tuple(x.shape)}")
        return F.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d))
        self.shift = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, x.shape[-1:], self.gain, self.shift, self.eps)


class Embedding(nn.Module):
    """Learned table of ``count`` vectors."""

    def __init__(self, count: int, d: int, std: float = 0.02):
        super().__init__()
        self.table = nn.Parameter(torch.randn(count, d) * std)

    def forward(self, idx: torch.Tensor | None = None) -> torch.Tensor:
        return self.table if idx is None else self.table[idx]


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact (erf) form
    return F.gelu(x)


def check_mask(mask: torch.Tensor, length: int) -> None:
    if mask.shape[-2:] != (length, length):
        raise DimensionError(f"attention mask {tuple(mask.shape)} does not match {length} tokens")
    if not bool(mask.any(-1).all()):
        raise DimensionError("attention mask has a query row with no visible key")


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise DimensionError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Dense(d_model, d_model, name="attn.q")
        self.k = Dense(d_model, d_model, name="attn.k")
        self.v = Dense(d_model, d_model, name="attn.v")
        self.o = Dense(d_model, d_model, name="attn.o")

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, length, d = x.shape

        def split(t):
            return t.view(b, length, self.heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        m = None
        if mask is not None:
            check_mask(mask, length)
            # (L, L) or (B, L, L) -> broadcast over heads; False keys get -inf before softmax
            m = mask if mask.dim() == 2 else mask[:, None]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=m)
        out = out.transpose(1, 2).reshape(b, length, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.up = Dense(d_model, d_ff, name="ff.up")
        self.down = Dense(d_ff, d_model, name="ff.down")

    def forward(self, x):
        return self.down(gelu(self.up(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, heads: int, d_ff: int):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ff(self.norm2(x))


class Transformer(nn.Module):
    def __init__(self, d_model: int, layers: int, heads: int, d_ff: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(d_model, heads, d_ff) for _ in range(layers))
        self.norm = LayerNorm(d_model)

    def forward(self, x, mask=None):
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


def backward(output: torch.Tensor, grad: torch.Tensor | None = None) -> None:
    """Propagate ``grad`` (default ones) from ``output`` into parameter ``.grad`` fields."""
    if output.grad_fn is None and not output.requires_grad:
        raise StateError("backward called on a tensor that was not produced by a recorded forward pass")
    if grad is None:
        grad = torch.ones_like(output)
    output.backward(grad)


class Adam:
    """Bias-corrected Adam over a named parameter set.

    Parameters without a gradient are skipped; a non-finite gradient aborts
    the step before anything is modified.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NonFiniteError(f"non-finite gradient in parameter '{name}'")
        for name, p in self.params:
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "t": 0}
            st["t"] += 1
            g = p.grad
            st["m"].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            st["v"].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))


def adam_step(opt: Adam, lr: float | None = None) -> None:
    if lr is not None:
        opt.lr = lr
    opt.step()
