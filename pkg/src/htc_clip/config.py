"""Run configuration, named presets and the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoder import EncoderConfig
from .errors import InvalidConfig

TRAIN_POOLS = ("none", "avg", "max")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 56
    lam: float = 0.05
    gamma: float = 0.02
    tau: float = 1.0
    k: int = 8
    max_epochs: int = 20
    patience: int = 6
    seed: int = 7
    decision_threshold: float = 0.5
    gumbel_temperature: float = 1.0
    min_freq: int = 1
    # head structure
    relu_final: bool = False
    chain_input: str = "combined"
    use_chain: bool = True
    use_linear_head: bool = True
    use_hier_head: bool = True
    train_pool: str = "none"
    # loss terms on the positive view
    use_hat_linear: bool = True
    use_hat_hier: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidConfig("lam must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidConfig("gamma must lie in [0, 1)")
        if not self.tau > 0:
            raise InvalidConfig("tau must be > 0")
        if not self.gumbel_temperature > 0:
            raise InvalidConfig("gumbel_temperature must be > 0")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1 or self.k < 1:
            raise InvalidConfig("patience, max_epochs, batch_size and k must be >= 1")
        if not 0.0 < self.decision_threshold <= 1.0:
            raise InvalidConfig("decision_threshold must lie in (0, 1]")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if not (self.use_linear_head or self.use_hier_head):
            raise InvalidConfig("at least one classifier head is required")
        if self.train_pool not in TRAIN_POOLS:
            raise InvalidConfig(f"train_pool must be one of {TRAIN_POOLS}")
        if self.train_pool != "none" and not (self.use_linear_head and self.use_hier_head):
            raise InvalidConfig("train_pool needs both heads")
        if self.chain_input not in ("combined", "pooled"):
            raise InvalidConfig("chain_input must be 'combined' or 'pooled'")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder"] = self.encoder.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        enc = EncoderConfig(**data.pop("encoder", {}))
        return cls(encoder=enc, **data)


PRESETS: dict[str, dict] = {
    "desk": {},
    # full-scale profiles: BERT-base-shaped encoder and the published hyperparameters
    "wos": {
        "learning_rate": 3e-5, "batch_size": 56, "lam": 0.05, "gamma": 0.02, "tau": 1.0,
        "k": 128, "patience": 6, "max_epochs": 100,
        "d_h": 768, "n_layers": 12, "n_heads": 12, "feedforward_dim": 3072, "max_len": 512,
    },
    "nyt": {
        "learning_rate": 3e-5, "batch_size": 56, "lam": 0.3, "gamma": 0.005, "tau": 1.0,
        "k": 128, "patience": 6, "max_epochs": 100,
        "d_h": 768, "n_layers": 12, "n_heads": 12, "feedforward_dim": 3072, "max_len": 512,
    },
}

ALIASES = {"lambda": "lam", "lr": "learning_rate"}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "encoder"}
_ENCODER_KEYS = {f.name: f.type for f in fields(EncoderConfig)}


def _coerce(key: str, value, kind: str):
    if not isinstance(value, str):
        return value
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        if kind in ("bool", bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
    except ValueError:
        raise InvalidConfig(f"bad value for {key}: {value!r}") from None
    return value


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    train, enc = {}, {}
    for raw_key, value in overrides.items():
        key = ALIASES.get(raw_key, raw_key)
        if key in _TRAIN_KEYS:
            train[key] = _coerce(key, value, _TRAIN_KEYS[key])
        elif key in _ENCODER_KEYS:
            enc[key] = _coerce(key, value, _ENCODER_KEYS[key])
        else:
            raise InvalidConfig(f"unknown config key {raw_key!r}")
    encoder = replace(cfg.encoder, **enc) if enc else cfg.encoder
    return replace(cfg, encoder=encoder, **train)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"config line {n}: empty key")
        out[key] = value
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def resolve_config(preset: str = "desk", path: str | Path | None = None,
                   overrides: dict | None = None) -> TrainConfig:
    """Preset, then config file, then explicit overrides."""
    if preset not in PRESETS:
        raise InvalidConfig(f"unknown preset {preset!r}")
    cfg = apply_overrides(TrainConfig(), PRESETS[preset])
    if path is not None:
        cfg = apply_overrides(cfg, load_config_file(path))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items() if k != "encoder"]
    lines += [f"{k} = {v}" for k, v in cfg.encoder.to_dict().items()]
    return "\n".join(lines) + "\n"
