"""Joint-trajectory corpora: synthetic generation, CSV ingestion, normalization
and chunking into (q0, action chunk) training samples."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CorpusError(ValueError):
    """Raised for invalid corpus arguments or unusable sequences."""


class CorpusParseError(CorpusError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class MotionSequence:
    rate_hz: float
    frames: np.ndarray  # (T, D)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise CorpusError(f"frames must be a non-empty (T, D) array, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise CorpusError("frames contain non-finite values")
        if not self.rate_hz > 0:
            raise CorpusError("rate_hz must be positive")

    @property
    def dof(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def split(self, holdout: float = 0.1) -> tuple["MotionSequence", "MotionSequence"]:
        """Split into (train, validation), holding out the trailing fraction."""
        cut = len(self) - int(round(holdout * len(self)))
        return (MotionSequence(self.rate_hz, self.frames[:cut]),
                MotionSequence(self.rate_hz, self.frames[cut:]))


@dataclass
class ChunkSample:
    q0: np.ndarray       # (D,)
    actions: np.ndarray  # (n, D)


@dataclass
class SynergyGenerator:
    """Low-rank motion source: B latent synergies mixed into D joints.

    Each synergy follows a piecewise minimum-jerk path between uniformly drawn
    waypoints in [-1, 1]; joint positions are the coupled mixture.
    """

    seed: int = 7
    dof: int = 11
    n_synergies: int = 3
    segment_len_range: tuple[float, float] = (1.0, 3.0)
    coupling: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.n_synergies < self.dof:
            raise CorpusError("need 0 < n_synergies < dof")
        lo, hi = self.segment_len_range
        if not 0 < lo <= hi:
            raise CorpusError("segment_len_range must satisfy 0 < lo <= hi")
        if self.coupling is None:
            rng = np.random.default_rng([self.seed, 0])
            c = rng.normal(size=(self.dof, self.n_synergies))
            self.coupling = c / np.linalg.norm(c, axis=0, keepdims=True)
        else:
            c = np.asarray(self.coupling, dtype=np.float64)
            if c.shape != (self.dof, self.n_synergies):
                raise CorpusError(f"coupling must be {self.dof}x{self.n_synergies}")
            self.coupling = c / np.linalg.norm(c, axis=0, keepdims=True)

    def synergy_path(self, n_frames: int, rate_hz: float, stream: int = 1) -> np.ndarray:
        rng = np.random.default_rng([self.seed, stream])
        lo, hi = self.segment_len_range
        out = np.empty((n_frames, self.n_synergies))
        start = rng.uniform(-1.0, 1.0, self.n_synergies)
        i = 0
        while i < n_frames:
            seg = max(1, int(round(rng.uniform(lo, hi) * rate_hz)))
            goal = rng.uniform(-1.0, 1.0, self.n_synergies)
            tau = np.arange(1, seg + 1) / seg
            shape = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
            pts = start + np.outer(shape, goal - start)
            take = min(seg, n_frames - i)
            out[i:i + take] = pts[:take]
            i += take
            start = goal
        return out

    def posture(self, rng: np.random.Generator) -> np.ndarray:
        """A single posture drawn from the generator's stationary waypoint distribution."""
        s = rng.uniform(-1.0, 1.0, self.n_synergies)
        return np.clip(self.coupling @ s, -1.0, 1.0)


def generate_corpus(gen: SynergyGenerator, duration_s: float, rate_hz: float = 50.0,
                    clip: bool = True, stream: int = 1) -> MotionSequence:
    if not duration_s > 0 or not rate_hz > 0:
        raise CorpusError("duration_s and rate_hz must be positive")
    n_frames = int(round(duration_s * rate_hz))
    if n_frames < 1:
        raise CorpusError("duration too short for a single frame")
    s = gen.synergy_path(n_frames, rate_hz, stream=stream)
    q = s @ gen.coupling.T
    if clip:
        q = np.clip(q, -1.0, 1.0)
    return MotionSequence(rate_hz, q)


def save_corpus(seq: MotionSequence, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"q{j}" for j in range(seq.dof)])
        for i, row in enumerate(seq.frames):
            w.writerow([repr(i / seq.rate_hz)] + [repr(float(v)) for v in row])


def load_corpus(path: str | Path) -> MotionSequence:
    path = Path(path)
    times: list[float] = []
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "time" or len(header) < 2:
            raise CorpusParseError(1, "header must be 'time,q0,...,q{D-1}'")
        dof = len(header) - 1
        if header[1:] != [f"q{j}" for j in range(dof)]:
            raise CorpusParseError(1, "joint columns must be named q0..q{D-1} in order")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dof + 1:
                raise CorpusParseError(lineno, f"expected {dof + 1} fields, got {len(rec)}")
            try:
                vals = [float(v) for v in rec]
            except ValueError as exc:
                raise CorpusParseError(lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in vals):
                raise CorpusParseError(lineno, "non-finite value")
            if times and vals[0] <= times[-1]:
                raise CorpusParseError(lineno, "time is not strictly increasing")
            times.append(vals[0])
            rows.append(vals[1:])
    if not rows:
        raise CorpusError(f"{path}: no frames")
    if len(times) > 1:
        rate = 1.0 / float(np.median(np.diff(times)))
    else:
        rate = 50.0
    return MotionSequence(rate, np.array(rows))


def chunk_count(n_frames: int, n: int, stride: int) -> int:
    if n_frames < n + 1:
        return 0
    return (n_frames - n - 1) // stride + 1


def extract_chunks(seq: MotionSequence, n: int, stride: int = 1) -> list[ChunkSample]:
    q0, actions = chunk_arrays(seq, n, stride)
    return [ChunkSample(a, b) for a, b in zip(q0, actions)]


def chunk_arrays(seq: MotionSequence, n: int, stride: int = 1,
                 offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form of :func:`extract_chunks`: returns ``(q0[N, D], actions[N, n, D])``."""
    if n < 1 or stride < 1:
        raise CorpusError("n and stride must be >= 1")
    frames = seq.frames[offset:]
    count = chunk_count(len(frames), n, stride)
    if count == 0:
        raise CorpusError(f"sequence of {len(frames)} frames is too short for chunks of {n}")
    starts = np.arange(count) * stride
    idx = starts[:, None] + np.arange(1, n + 1)[None, :]
    return frames[starts], frames[idx]


@dataclass
class Normalizer:
    """Per-joint affine map ``x -> (x - offset) / scale`` onto [-1, 1]."""

    offset: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, seq: MotionSequence | np.ndarray) -> "Normalizer":
        frames = seq.frames if isinstance(seq, MotionSequence) else np.asarray(seq)
        if frames.shape[0] < 2:
            raise CorpusError("normalization needs at least two frames")
        lo, hi = frames.min(axis=0), frames.max(axis=0)
        offset = 0.5 * (hi + lo)
        scale = 0.5 * (hi - lo)
        flat = hi == lo
        # constant joint: identity scale, offset at the constant
        scale[flat] = 1.0
        offset[flat] = lo[flat]
        return cls(offset, scale)

    def apply(self, x):
        if isinstance(x, MotionSequence):
            return MotionSequence(x.rate_hz, (x.frames - self.offset) / self.scale)
        return (np.asarray(x) - self.offset) / self.scale

    def invert(self, x):
        if isinstance(x, MotionSequence):
            return MotionSequence(x.rate_hz, x.frames * self.scale + self.offset)
        return np.asarray(x) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["offset"], dtype=np.float64), np.array(d["scale"], dtype=np.float64))


def normalize_stats(seq: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    norm = Normalizer.fit(seq)
    return norm.offset, norm.scale
