"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

ALL_CATEGORIES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "star",
    "crescent",
    "ellipse",
)


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class TrainConfig:
    # partition / sampling / loss
    delta: float = 0.1
    sigma: float = 0.3
    tau_easy: float = 0.7
    tau_hard: float = 0.3
    lambda_start: float = 0.25
    lambda_end: float = 1.0
    warmup_fraction: float = 0.5

    # model
    roi_resolution: int = 28
    channels: int = 64
    backbone_blocks: int = 3
    encoder_blocks: int = 8
    projector_layers: int = 3

    # optimisation
    epochs: int = 10
    max_steps: int = 0
    batch_size: int = 16
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    optimizer: str = "sgd"
    lr_schedule: str = "step"
    seed: int = 0
    roi_jitter: float = 0.15
    hflip: bool = True
    checkpoint_every: int = 0
    eval_every_epoch: bool = False

    # ablation switches
    use_cl: bool = True
    use_cam: bool = True
    supervision: str = "all"
    query_sharing: bool = True
    query_gradient: str = "stop"
    oracle_novel_masks: bool = False

    # synthetic data
    data_seed: int = 0
    image_size: int = 64
    n_train_scenes: int = 200
    n_val_scenes: int = 60
    max_instances: int = 5
    base_categories: tuple[str, ...] = ("disk", "square", "triangle", "ring")
    novel_categories: tuple[str, ...] = ("cross", "star", "crescent", "ellipse")

    def __post_init__(self) -> None:
        self.base_categories = tuple(self.base_categories)
        self.novel_categories = tuple(self.novel_categories)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.delta < 0.5:
            raise ConfigError(f"delta must lie in (0, 0.5), got {self.delta}")
        if not 0.0 < self.sigma <= 1.0:
            raise ConfigError(f"sigma must lie in (0, 1], got {self.sigma}")
        if self.tau_easy <= 0 or self.tau_hard <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1]")
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise ConfigError("lambda endpoints must be nonnegative")
        if self.roi_resolution < 2:
            raise ConfigError("roi_resolution must be at least 2")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.encoder_blocks < 1 or self.projector_layers < 1:
            raise ConfigError("encoder_blocks and projector_layers must be >= 1")
        if not 3 <= self.backbone_blocks <= 4:
            raise ConfigError("backbone_blocks must be 3 or 4")
        if not 0.0 <= self.roi_jitter <= 0.2:
            raise ConfigError("roi_jitter must lie in [0, 0.2]")
        if self.supervision not in ("base", "novel", "all"):
            raise ConfigError(f"unknown supervision {self.supervision!r}")
        if self.query_gradient not in ("stop", "flow"):
            raise ConfigError(f"unknown query_gradient {self.query_gradient!r}")
        if self.lr_schedule not in ("step", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        base, novel = set(self.base_categories), set(self.novel_categories)
        if not base or not novel:
            raise ConfigError("base and novel category sets must be nonempty")
        if base & novel:
            raise ConfigError(f"base and novel categories overlap: {sorted(base & novel)}")
        unknown = (base | novel) - set(ALL_CATEGORIES)
        if unknown:
            raise ConfigError(f"unknown categories: {sorted(unknown)}")
        if len(self.base_categories) != len(base) or len(self.novel_categories) != len(novel):
            raise ConfigError("duplicate category names")
        if self.n_train_scenes < 1 or self.n_val_scenes < 1:
            raise ConfigError("scene counts must be positive")
        if not 1 <= self.max_instances <= 5:
            raise ConfigError("max_instances must lie in [1, 5]")
        if self.image_size < 32:
            raise ConfigError("image_size must be at least 32")

    @property
    def categories(self) -> tuple[str, ...]:
        """Category names in class-id order: base first, then novel."""
        return self.base_categories + self.novel_categories

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def category_id(self, name: str) -> int:
        return self.categories.index(name)

    def is_base_id(self, category_id: int) -> bool:
        return category_id < len(self.base_categories)

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["base_categories"] = list(self.base_categories)
        d["novel_categories"] = list(self.novel_categories)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**{k: coerce_value(k, v) for k, v in d.items()})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        """Render as the flat ``key = value`` text format."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(v)}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def coerce_value(key: str, value: Any) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = str(_FIELD_TYPES[key])
    try:
        if typ == "bool":
            return value if isinstance(value, bool) else _parse_bool(str(value))
        if typ == "int":
            if isinstance(value, bool):
                raise ValueError
            return int(value)
        if typ == "float":
            return float(value)
        if typ.startswith("tuple"):
            if isinstance(value, str):
                return tuple(s.strip() for s in value.split(",") if s.strip())
            return tuple(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce_value(key, value)
    return out


def load_config(path: str | Path, **overrides: Any) -> TrainConfig:
    values = parse_config_text(Path(path).read_text())
    values.update({k: coerce_value(k, v) for k, v in overrides.items()})
    return TrainConfig(**values)


def desk_config(**overrides: Any) -> TrainConfig:
    """Small configuration used by the ablation harness and acceptance runs."""
    base = dict(
        channels=16,
        n_train_scenes=300,
        n_val_scenes=80,
        batch_size=16,
        epochs=8,
        learning_rate=1e-3,
        optimizer="adam",
    )
    base.update(overrides)
    return TrainConfig(**base)
