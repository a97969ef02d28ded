"""Conditional chunk autoencoder: transformer encoder to m latent tokens,
vector quantization, and a time-masked transformer decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .codebook import Codebook, commitment_loss, straight_through
from .nn import Dense, DimensionError, Embedding, NonFiniteError, Transformer


@dataclass
class ModelConfig:
    dof: int = 11
    n: int = 50
    m: int = 5
    K: int = 4
    d_latent: int = 16
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    d_ff: int = 128
    commit_weight: float = 0.1
    conditional: bool = True
    quantization: str = "vq"  # "vq" | "kl"
    kl_latent_dim: int = 6
    kl_weight: float = 1e-3
    ema_decay: float = 0.99
    ema_eps: float = 1e-5

    def __post_init__(self):
        if self.n % self.m:
            raise ValueError(f"chunk length n={self.n} must be a multiple of m={self.m}")
        if self.quantization not in ("vq", "kl"):
            raise ValueError(f"unknown quantization {self.quantization!r}")
        if self.quantization == "vq" and self.K < 2:
            raise ValueError("vq mode needs K >= 2")
        if self.d_latent <= 0 or self.kl_latent_dim <= 0:
            raise ValueError("latent dimensions must be positive")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        return cls(**({"d_model": 128, "layers": 3, "heads": 4, "d_ff": 512} | kw))

    @property
    def latent_dim(self) -> int:
        return self.d_latent if self.quantization == "vq" else self.kl_latent_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def latent_time(k: int, n: int, m: int) -> float:
    """Chunk-relative timestep of latent token ``k``."""
    if not 0 <= k < m:
        raise IndexError(f"latent index {k} outside [0, {m})")
    return k * n / m


def build_decoder_mask(times: Sequence[float], is_query: Sequence[bool] | None = None) -> np.ndarray:
    """``mask[i, j]`` is True when token i may attend to token j.

    Keys are visible when their time is not later than the query's. Output
    query tokens are only visible to themselves, so a query's result does not
    depend on which other steps are decoded alongside it.
    """
    t = np.asarray(times, dtype=np.float64)
    mask = t[None, :] <= t[:, None]
    if is_query is not None:
        q = np.asarray(is_query, dtype=bool)
        mask[:, q] = False
        mask[np.flatnonzero(q), np.flatnonzero(q)] = True
    return mask


class ChunkModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        D, dm = cfg.dof, cfg.d_model
        out_dim = cfg.d_latent if cfg.quantization == "vq" else 2 * cfg.kl_latent_dim
        # encoder
        self.enc_q0 = Dense(D, dm, name="enc_q0")
        self.enc_act = Dense(D, dm, name="enc_act")
        self.enc_queries = Embedding(cfg.m, dm)
        self.enc_pos = Embedding(cfg.n + 1, dm)
        self.encoder = Transformer(dm, cfg.layers, cfg.heads, cfg.d_ff)
        self.to_latent = Dense(dm, out_dim, name="to_latent")
        # decoder
        self.dec_q0 = Dense(D, dm, name="dec_q0")
        self.dec_latent = Dense(cfg.latent_dim, dm, name="dec_latent")
        self.dec_latent_pos = Embedding(cfg.m, dm)
        self.dec_queries = Embedding(cfg.n, dm)
        self.decoder = Transformer(dm, cfg.layers, cfg.heads, cfg.d_ff)
        self.head = Dense(dm, D, name="head")
        self.codebook = Codebook(cfg.K, cfg.d_latent, cfg.ema_decay, cfg.ema_eps, seed=seed) \
            if cfg.quantization == "vq" else None

    # -- encoder ---------------------------------------------------------
    def encode_raw(self, q0: torch.Tensor, chunk: torch.Tensor) -> torch.Tensor:
        """Pre-quantization encoder outputs, shape (B, m, d_latent) or (B, m, 2*kl_dim)."""
        cfg = self.cfg
        if chunk.dim() != 3 or chunk.shape[1:] != (cfg.n, cfg.dof) or q0.shape != (chunk.shape[0], cfg.dof):
            raise DimensionError(f"encode: expected q0 (B, {cfg.dof}) and chunk (B, {cfg.n}, {cfg.dof}), "
                                 f"got {tuple(q0.shape)} and {tuple(chunk.shape)}")
        B = chunk.shape[0]
        pos = self.enc_pos()
        if cfg.conditional:
            rel = chunk - q0[:, None, :]
            tokens = [self.enc_q0(q0)[:, None] + pos[0], self.enc_act(rel) + pos[1:]]
        else:
            tokens = [self.enc_act(chunk) + pos[1:]]
        x = torch.cat([self.enc_queries().expand(B, -1, -1)] + tokens, dim=1)
        h = self.encoder(x)
        return self.to_latent(h[:, :cfg.m])

    def encode(self, q0, chunk) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Returns ``(z, indices)``; in kl mode ``z`` is the posterior mean and indices is None."""
        raw = self.encode_raw(q0, chunk)
        if self.codebook is None:
            return raw[..., :self.cfg.kl_latent_dim], None
        B, m, d = raw.shape
        idx, _ = self.codebook.quantize(raw.reshape(B * m, d))
        return raw, idx.reshape(B, m)

    # -- decoder ---------------------------------------------------------
    def token_layout(self, query_steps: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Decoder token times and query flags for the given output steps."""
        return token_layout(self.cfg.conditional, self.cfg.n, self.cfg.m, query_steps)

    def decoder_mask(self, query_steps: Sequence[int]) -> torch.Tensor:
        return _cached_mask(self.cfg.conditional, self.cfg.n, self.cfg.m, tuple(int(s) for s in query_steps))

    def decode(self, q0: torch.Tensor, latents: torch.Tensor,
               query_steps: Sequence[int] | None = None) -> torch.Tensor:
        """Actions at ``query_steps`` (default all n) from continuous latent vectors (B, m, latent_dim)."""
        cfg = self.cfg
        steps = list(range(cfg.n)) if query_steps is None else [int(s) for s in query_steps]
        if any(s < 0 or s >= cfg.n for s in steps) or not steps:
            raise IndexError(f"query steps must lie in [0, {cfg.n})")
        if latents.dim() != 3 or latents.shape[1:] != (cfg.m, cfg.latent_dim):
            raise DimensionError(f"decode: latents must be (B, {cfg.m}, {cfg.latent_dim}), got {tuple(latents.shape)}")
        B = latents.shape[0]
        if q0.shape != (B, cfg.dof):
            raise DimensionError(f"decode: q0 must be ({B}, {cfg.dof}), got {tuple(q0.shape)}")
        lat = self.dec_latent(latents) + self.dec_latent_pos()
        qry = self.dec_queries(torch.as_tensor(steps)).expand(B, -1, -1)
        parts = [lat, qry]
        if cfg.conditional:
            parts.insert(0, self.dec_q0(q0)[:, None])
        x = torch.cat(parts, dim=1)
        h = self.decoder(x, self.decoder_mask(steps))
        out = self.head(h[:, -len(steps):])
        if cfg.conditional:
            out = out + q0[:, None, :]
        return out

    def decode_indices(self, q0: torch.Tensor, indices, query_steps=None) -> torch.Tensor:
        if self.codebook is None:
            raise ValueError("decode_indices requires a vq model")
        idx = torch.as_tensor(indices, dtype=torch.long)
        if idx.dim() == 1:
            idx = idx[None]
        z = self.codebook.lookup(idx).to(q0.dtype)
        return self.decode(q0, z, query_steps)

    # -- objective -------------------------------------------------------
    def loss(self, q0: torch.Tensor, chunk: torch.Tensor,
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
        """Training objective; returns ``(loss, parts)`` with parts holding the
        reconstruction/regularizer values and, in vq mode, ``z`` and ``indices``."""
        if chunk.shape[0] == 0:
            raise ValueError("empty batch")
        cfg = self.cfg
        raw = self.encode_raw(q0, chunk)
        parts: dict = {}
        if self.codebook is None:
            mu, logvar = raw[..., :cfg.kl_latent_dim], raw[..., cfg.kl_latent_dim:]
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype) if self.training else 0.0
            z = mu + torch.exp(0.5 * logvar) * noise
            reg = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).mean()
            weight = cfg.kl_weight
            parts["kl"] = reg
        else:
            B, m, d = raw.shape
            idx, z_q = self.codebook.quantize(raw.reshape(B * m, d))
            z_q = z_q.reshape(B, m, d)
            reg = commitment_loss(raw, z_q)
            z = straight_through(raw, z_q)
            weight = cfg.commit_weight
            parts.update(commit=reg, z=raw.detach(), indices=idx.reshape(B, m))
        recon = (self.decode(q0, z) - chunk).abs().mean()
        total = recon + weight * reg
        if not bool(torch.isfinite(total)):
            raise NonFiniteError(f"non-finite loss (recon={float(recon)}, reg={float(reg)}) "
                                 f"on batch of {chunk.shape[0]}")
        parts["recon"] = recon
        return total, parts

    @torch.no_grad()
    def reconstruct(self, q0: torch.Tensor, chunk: torch.Tensor) -> torch.Tensor:
        z, idx = self.encode(q0, chunk)
        if idx is not None:
            return self.decode_indices(q0, idx)
        return self.decode(q0, z)


def token_layout(conditional: bool, n: int, m: int, query_steps: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    # order: [q0 token], latent tokens, output queries; a query for step s sits at time s
    times = [latent_time(k, n, m) for k in range(m)] + [float(s) for s in query_steps]
    is_query = [False] * m + [True] * len(query_steps)
    if conditional:
        times, is_query = [0.0] + times, [False] + is_query
    return np.array(times), np.array(is_query)


@lru_cache(maxsize=256)
def _cached_mask(conditional: bool, n: int, m: int, steps: tuple[int, ...]) -> torch.Tensor:
    return torch.from_numpy(build_decoder_mask(*token_layout(conditional, n, m, steps)))


class FrozenDecoder:
    """Read-only numpy front end to a trained model's decoder.

    Safe to share between planners and rollout workers: it never mutates the
    wrapped model and runs under ``torch.no_grad``.
    """

    def __init__(self, model: ChunkModel):
        self.model = model.eval()
        self.cfg = model.cfg
        self.dtype = next(model.parameters()).dtype

    @property
    def K(self) -> int:
        return self.cfg.K

    def codes(self) -> np.ndarray:
        return self.model.codebook.codes.double().numpy()

    def decode_codes(self, q0: np.ndarray, indices: np.ndarray, steps: Sequence[int] | None = None) -> np.ndarray:
        """Decode code-index rows ``indices[B, m]`` from postures ``q0[B, D]`` (or one shared posture)."""
        idx = np.atleast_2d(np.asarray(indices, dtype=np.int64))
        q = np.broadcast_to(np.asarray(q0, dtype=np.float64), (len(idx), self.cfg.dof))
        with torch.no_grad():
            out = self.model.decode_indices(torch.tensor(q, dtype=self.dtype), torch.from_numpy(idx), steps)
        return out.double().numpy()

    def decode_latents(self, q0: np.ndarray, latents: np.ndarray, steps: Sequence[int] | None = None) -> np.ndarray:
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        q = np.broadcast_to(np.asarray(q0, dtype=np.float64), (len(z), self.cfg.dof))
        with torch.no_grad():
            out = self.model.decode(torch.tensor(q, dtype=self.dtype), torch.as_tensor(z, dtype=self.dtype), steps)
        return out.double().numpy()
