"""Run configuration and the glue that turns it into corpora, models and environments."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import MotionSequence, Normalizer, SynergyGenerator, generate_corpus, load_corpus
from .envs import EnvSpec, ReachHoldEnv, TrackingEnv
from .model import ModelConfig
from .mpc import PlannerConfig
from .rl import RLConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


@dataclass
class CorpusConfig:
    seed: int = 7
    dof: int = 11
    n_synergies: int = 3
    segment_len_range: tuple[float, float] = (1.0, 3.0)
    minutes: float = 60.0
    rate_hz: float = 50.0
    path: str | None = None  # load a CSV instead of generating


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    tracking_seconds: float = 10.0
    reach_episode_steps: int = 200
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    env: EnvSpec = field(default_factory=EnvSpec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kw[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def generator_for(cc: CorpusConfig) -> SynergyGenerator:
    return SynergyGenerator(seed=cc.seed, dof=cc.dof, n_synergies=cc.n_synergies,
                            segment_len_range=tuple(cc.segment_len_range))


def build_corpus(cc: CorpusConfig) -> MotionSequence:
    if cc.path:
        return load_corpus(cc.path)
    return generate_corpus(generator_for(cc), cc.minutes * 60.0, cc.rate_hz)


def tracking_env(cfg: RunConfig, normalizer: Normalizer, corpus: MotionSequence | None = None) -> TrackingEnv:
    """Tracking task whose references are the held-out tail of the corpus."""
    corpus = corpus if corpus is not None else build_corpus(cfg.corpus)
    _, val = corpus.split(cfg.train.holdout)
    steps = int(round(cfg.tracking_seconds / cfg.env.dt))
    return TrackingEnv(cfg.env, normalizer.apply(val.frames), episode_steps=steps)


def reach_env(cfg: RunConfig, normalizer: Normalizer) -> ReachHoldEnv:
    """Reach-and-hold task with goals from the corpus generator's posture distribution."""
    gen = generator_for(cfg.corpus)

    def sampler(rng: np.random.Generator) -> np.ndarray:
        return normalizer.apply(gen.posture(rng))

    return ReachHoldEnv(cfg.env, sampler, episode_steps=cfg.reach_episode_steps)
