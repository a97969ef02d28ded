"""Seeded training loop for :class:`ChunkModel` with JSON-lines metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .corpus import MotionSequence, Normalizer, chunk_arrays
from .model import ChunkModel, ModelConfig
from .nn import Adam

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 2e-3
    stride: int = 50
    val_stride: int = 10
    holdout: float = 0.1
    seed: int = 0

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        return cls(**({"epochs": 200, "lr": 1e-4, "batch_size": 3072, "stride": 1} | kw))


@dataclass
class TrainResult:
    model: ChunkModel
    normalizer: Normalizer
    history: list[dict] = field(default_factory=list)

    @property
    def val_l1(self) -> float:
        return self.history[-1]["val_l1"]


def code_usage(model: ChunkModel, q0: torch.Tensor, chunk: torch.Tensor) -> list[float]:
    if model.codebook is None:
        return []
    with torch.no_grad():
        _, idx = model.encode(q0, chunk)
    counts = torch.bincount(idx.reshape(-1), minlength=model.cfg.K).double()
    return (counts / counts.sum()).tolist()


def evaluate_l1(model: ChunkModel, q0: torch.Tensor, chunk: torch.Tensor, batch: int = 1024) -> float:
    """Mean absolute reconstruction error (normalized units) at inference settings."""
    was = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(chunk), batch):
            rec = model.reconstruct(q0[i:i + batch], chunk[i:i + batch])
            total += float((rec - chunk[i:i + batch]).abs().sum())
    model.train(was)
    return total / chunk.numel()


def prepare_splits(corpus: MotionSequence, holdout: float):
    """Fit normalization on the training split and normalize both splits."""
    train, val = corpus.split(holdout)
    norm = Normalizer.fit(train)
    return norm.apply(train), norm.apply(val), norm


def train(cfg: ModelConfig, corpus: MotionSequence, tcfg: TrainConfig,
          metrics_path: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    gen = torch.Generator().manual_seed(tcfg.seed)
    train_seq, val_seq, norm = prepare_splits(corpus, tcfg.holdout)
    vq0, vact = (torch.tensor(a, dtype=torch.float32) for a in chunk_arrays(val_seq, cfg.n, tcfg.val_stride))

    model = ChunkModel(cfg, seed=tcfg.seed)
    opt = Adam(model.named_parameters(), lr=tcfg.lr)
    sink = open(metrics_path, "w") if metrics_path else None
    history: list[dict] = []
    initial_loss = None
    bad_epochs = 0
    try:
        for epoch in range(tcfg.epochs):
            offset = int(rng.integers(tcfg.stride))
            q0, act = chunk_arrays(train_seq, cfg.n, tcfg.stride, offset=offset)
            order = rng.permutation(len(q0))
            q0 = torch.tensor(q0[order], dtype=torch.float32)
            act = torch.tensor(act[order], dtype=torch.float32)
            if epoch == 0 and model.codebook is not None:
                with torch.no_grad():
                    z0 = model.encode_raw(q0[:tcfg.batch_size], act[:tcfg.batch_size])
                model.codebook.seed_from(z0, rng)
            model.train()
            loss_sum, l1_sum, batches = 0.0, 0.0, 0
            for i in range(0, len(q0), tcfg.batch_size):
                bq, ba = q0[i:i + tcfg.batch_size], act[i:i + tcfg.batch_size]
                loss, parts = model.loss(bq, ba, generator=gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if model.codebook is not None:
                    model.codebook.ema_update(parts["z"], parts["indices"])
                loss_sum += float(loss.detach())
                l1_sum += float(parts["recon"].detach())
                batches += 1
            epoch_loss = loss_sum / batches
            if initial_loss is None:
                initial_loss = epoch_loss
            bad_epochs = bad_epochs + 1 if epoch_loss > 10 * initial_loss else 0
            if bad_epochs >= 3:
                raise TrainingDiverged(f"loss {epoch_loss:.4g} exceeded 10x initial ({initial_loss:.4g}) "
                                       f"for 3 epochs")
            model.eval()
            rec = {"epoch": epoch, "train_l1": l1_sum / batches, "val_l1": evaluate_l1(model, vq0, vact),
                   "code_usage": code_usage(model, vq0, vact)}
            history.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(rec)
            log.debug("epoch %d train_l1 %.4f val_l1 %.4f", epoch, rec["train_l1"], rec["val_l1"])
    finally:
        if sink:
            sink.close()
    model.eval()
    return TrainResult(model, norm, history)


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
