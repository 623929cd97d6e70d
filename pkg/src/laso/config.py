"""Run configuration: YAML file with nested sections, presets and ``key=value`` overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .attention import AttentionConfig
from .data import SyntheticSpec
from .model import LasoConfig
from .numerics import ConfigurationError
from .training.augment import SpecAugmentConfig
from .training.loop import TrainConfig
from .training.teacher import TeacherConfig


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    d_inner: int = 256
    activation: str = "glu"
    dropout: float = 0.1
    n_enc: int = 2
    n_pds: int = 1
    n_dec: int = 2
    max_len: int = 24


@dataclass
class DataSection:
    vocab_size: int = 32
    d_feat: int = 40
    min_frames_per_token: int = 2
    max_frames_per_token: int = 5
    noise_sigma: float = 0.3
    train_utterances: int = 2000
    test_utterances: int = 200
    min_tokens: int = 3
    max_tokens: int = 20
    transition_concentration: float = 0.2


@dataclass
class TrainSection:
    epochs: int = 50
    warmup_steps: int = 800
    lr_factor: float = 1.0
    label_smoothing: float = 0.1
    lam: float = 0.0
    accum_steps: int = 1
    batch_seconds: float = 10.0
    avg_last_k: int = 5
    # Frequency masks only: a time mask of up to 10 frames erases whole 2-5 frame
    # tokens, which turns the augmented utterance's transcript into a wrong label.
    specaug: bool = True
    freq_width: int = 8
    time_width: int = 10
    n_freq_masks: int = 2
    n_time_masks: int = 0


@dataclass
class TeacherSection:
    d_model: int = 32
    n_heads: int = 2
    d_inner: int = 64
    n_blocks: int = 2
    mask_prob: float = 0.15
    epochs: int = 30
    batch_size: int = 64
    warmup: int = 200


@dataclass
class PathsSection:
    out: str = "run"
    train_corpus: str = "data/train.bin"
    test_corpus: str = "data/test.bin"


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "train": TrainSection,
    "teacher": TeacherSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- conversions into the library's own config objects ---------------

    def attention(self) -> AttentionConfig:
        m = self.model
        return AttentionConfig(m.d_model, m.n_heads, m.d_inner, m.activation, m.dropout)

    def laso(self) -> LasoConfig:
        m = self.model
        teacher_dim = self.teacher.d_model if self.train.lam > 0 else 0
        return LasoConfig(self.attention(), m.n_enc, m.n_pds, m.n_dec, m.max_len, self.data.vocab_size,
                          self.data.d_feat, teacher_dim=teacher_dim)

    def synthetic(self, n_utterances: int) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(
            vocab_size=d.vocab_size,
            d_feat=d.d_feat,
            frames_per_token=(d.min_frames_per_token, d.max_frames_per_token),
            noise_sigma=d.noise_sigma,
            n_utterances=n_utterances,
            length_range=(d.min_tokens, d.max_tokens),
            transition_concentration=d.transition_concentration,
            seed=self.seed,
        )

    def training(self) -> TrainConfig:
        t = self.train
        aug = SpecAugmentConfig(t.freq_width, t.time_width, t.n_freq_masks, t.n_time_masks) if t.specaug else None
        return TrainConfig(
            epochs=t.epochs, warmup_steps=t.warmup_steps, lr_factor=t.lr_factor, label_smoothing=t.label_smoothing,
            lam=t.lam, accum_steps=t.accum_steps, batch_seconds=t.batch_seconds, seed=self.seed, specaug=aug,
            avg_last_k=t.avg_last_k,
        )

    def teacher_config(self) -> TeacherConfig:
        t = self.teacher
        return TeacherConfig(
            d_model=t.d_model, n_heads=t.n_heads, d_inner=t.d_inner, n_blocks=t.n_blocks,
            vocab_size=self.data.vocab_size, max_len=self.model.max_len, mask_prob=t.mask_prob,
            epochs=t.epochs, batch_size=t.batch_size, warmup=t.warmup, seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail before any work starts."""
        try:
            self.laso()
            self.training()
            self.teacher_config().attention
            self.synthetic(1)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(str(exc)) from exc
        d = self.data
        if not 1 <= d.min_frames_per_token <= d.max_frames_per_token:
            raise ConfigurationError("frames per token range is empty")
        if d.max_tokens > self.model.max_len - 2:
            raise ConfigurationError(f"data.max_tokens {d.max_tokens} must be <= model.max_len - 2")
        if min(d.train_utterances, d.test_utterances) < 1:
            raise ConfigurationError("corpus sizes must be positive")
        return self


PROFILES: dict[str, dict] = {
    "tiny": {},
    "small": {
        "model": {"d_model": 128, "n_heads": 4, "d_inner": 512, "n_enc": 4, "n_pds": 1, "n_dec": 4, "max_len": 32},
        "data": {"max_tokens": 30},
    },
    "paper-shape": {
        "model": {"d_model": 256, "n_heads": 4, "d_inner": 2048, "activation": "glu",
                  "n_enc": 4, "n_pds": 1, "n_dec": 4, "max_len": 60},
        "data": {"d_feat": 80, "max_tokens": 40},
    },
}


def _coerce(value: Any, current: Any, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{key}: unsupported value {value!r}")


def _apply(cfg: RunConfig, tree: dict, where: str = "") -> None:
    if not isinstance(tree, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping")
    for key, value in tree.items():
        if key == "seed":
            cfg.seed = _coerce(value, cfg.seed, "seed")
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"{key}: expected a mapping")
            section = getattr(cfg, key)
            names = {f.name for f in fields(section)}
            for k, v in value.items():
                if k not in names:
                    raise ConfigurationError(f"unknown key {key}.{k}")
                setattr(section, k, _coerce(v, getattr(section, k), f"{key}.{k}"))
        else:
            raise ConfigurationError(f"unknown key {where}{key}")


def parse_override(text: str) -> dict:
    """``train.epochs=3`` -> ``{"train": {"epochs": 3}}``; the value is read as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else ""
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override {text!r}: {exc}") from exc
    parts = key.strip().split(".")
    tree: dict = value
    for p in reversed(parts):
        tree = {p: tree}
    return tree


def load_run_config(
    path=None, profile: str | None = None, overrides=(), seed: int | None = None
) -> RunConfig:
    """Defaults, then the profile, then the file, then overrides, then ``seed``."""
    cfg = RunConfig()
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        _apply(cfg, copy.deepcopy(PROFILES[profile]))
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        if isinstance(tree, dict) and "profile" in tree:
            tree = dict(tree)
            base = tree.pop("profile")
            if base not in PROFILES:
                raise ConfigurationError(f"unknown profile {base!r}")
            _apply(cfg, copy.deepcopy(PROFILES[base]))
        _apply(cfg, tree)
    for text in overrides:
        _apply(cfg, parse_override(text))
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def from_dict(tree: dict) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, tree)
    return cfg.validate()
