"""Run configuration, JSON loading and environment overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from .encoder import EncoderConfig

ENV_PREFIX = "PROMPTCL_"


class ConfigError(ValueError):
    """Bad configuration key or value."""


@dataclass
class TrainConfig:
    mode: str = "infocomp"
    p_len: int = 35
    s_len: int = 5
    lambda1: float = 0.05
    lambda2: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 40
    patience: int = 5
    eval_every: int = 1
    seed: int = 0
    p_info_form: str = "cosine"
    no_p_prompt: bool = False
    no_s_prompt: bool = False
    no_p_info: bool = False
    no_s_info: bool = False
    freeze_s_after_first: bool = False
    max_text_len: int = 64
    warmup_steps: int = 0
    warmup_lr: float = 1e-3
    warmup_batch: int = 32
    warmup_docs: int = 4000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.p_info_form not in ("raw", "cosine"):
            raise ConfigError(f"p_info_form must be 'raw' or 'cosine', got {self.p_info_form!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        enc = changes.pop("encoder", None)
        cfg = dataclasses.replace(self, **changes)
        if enc is not None:
            cfg.encoder = enc if isinstance(enc, EncoderConfig) else dataclasses.replace(self.encoder, **enc)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Digest of every field except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_TOP = {f.name: f for f in dataclasses.fields(TrainConfig)}
_ENC = {f.name: f for f in dataclasses.fields(EncoderConfig)}


def _coerce(name: str, raw, default):
    kind = type(default)
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {name!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {name!r}: cannot interpret {raw!r} as {kind.__name__}") from exc


def config_from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    top, enc = {}, {}
    for key, value in d.items():
        if key == "encoder":
            if not isinstance(value, dict):
                raise ConfigError("config key 'encoder' must be an object")
            for ek, ev in value.items():
                if ek not in _ENC:
                    raise ConfigError(f"unknown config key 'encoder.{ek}'")
                enc[ek] = _coerce(f"encoder.{ek}", ev, getattr(base.encoder, ek))
        elif key in _TOP:
            top[key] = _coerce(key, value, getattr(base, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return base.replace(**top, **({"encoder": enc} if enc else {}))


def load_config(path=None, env=None, **overrides) -> TrainConfig:
    """JSON file, then ``PROMPTCL_*`` environment variables, then explicit overrides."""
    cfg = TrainConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = config_from_dict(data, cfg)
    env = os.environ if env is None else env
    env_vals: dict = {}
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name.startswith("encoder__"):
            env_vals.setdefault("encoder", {})[name[len("encoder__"):]] = value
        else:
            env_vals[name] = value
    if env_vals:
        cfg = config_from_dict(env_vals, cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = config_from_dict(overrides, cfg)
    return cfg
