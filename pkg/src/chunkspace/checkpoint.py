"""Binary checkpoint container.

Layout: magic ``VQACE1\\0``, a little-endian uint32 metadata length, the
UTF-8 JSON metadata block, then each tensor as little-endian float32 in the
order listed under ``metadata["tensors"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VQACE1\0"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict) -> None:
    arrays = {k: np.asarray(v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else v, dtype="<f4")
              for k, v in tensors.items()}
    meta = dict(meta, tensors=[{"name": k, "shape": list(a.shape)} for k, a in arrays.items()])
    blob = json.dumps(meta).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise CheckpointError(f"{path}: truncated header")
    (size,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        meta = json.loads(data[off:off + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    off += size
    tensors = {}
    for spec in meta.get("tensors", []):
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = off + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {spec['name']} truncated")
        tensors[spec["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(spec["shape"])
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return meta, tensors


def save_model(path: str | Path, model, normalizer=None, extra: dict | None = None) -> None:
    from .model import ChunkModel  # noqa: F401  (type only)

    meta = {"kind": "chunk_model", "model_config": model.cfg.to_dict(),
            "normalizer": normalizer.to_dict() if normalizer is not None else None,
            "codebook": model.codebook.state() if model.codebook is not None else None,
            "extra": extra or {}}
    save_checkpoint(path, dict(model.named_parameters()), meta)


def load_model(path: str | Path):
    """Returns ``(model, normalizer, meta)``."""
    from .codebook import Codebook
    from .corpus import Normalizer
    from .model import ChunkModel, ModelConfig

    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "chunk_model":
        raise CheckpointError(f"{path}: not a chunk model checkpoint")
    model = ChunkModel(ModelConfig(**meta["model_config"]))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            p.copy_(torch.from_numpy(tensors[name].copy()))
    if meta["codebook"] is not None:
        book = Codebook.from_state(meta["codebook"])
        model.codebook.load_state_dict(book.state_dict())
    norm = Normalizer.from_dict(meta["normalizer"]) if meta.get("normalizer") else None
    model.eval()
    return model, norm, meta
