"""Pipeline configuration: a flat ``key = value`` file plus ``key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
import math
import types
import typing
from dataclasses import asdict, dataclass, field, fields

from .thresholding import DEFAULT_GRID


class ConfigError(ValueError):
    """Unknown key, bad value or inconsistent settings."""


@dataclass
class PipelineConfig:
    # data
    source_labeled: str = ""
    target_unlabeled: str = ""
    target_test: str = ""
    btf_corpus: str = ""
    base_checkpoint: str = ""
    num_classes: int = 2
    # synthetic task (``synth`` subcommand)
    synth_vocab: int = 200
    synth_signal: float = 0.5
    synth_n_source: int = 500
    synth_n_unlabeled: int = 2000
    synth_n_test: int = 500
    synth_n_btf: int = 2000
    # entity corpus (``make-corpus`` subcommand)
    bio_source: str = ""
    translation_table: str = ""
    target_corpus: str = ""
    entity_cap: int = 60000
    # model
    seed: int = 0
    dim: int = 32
    voters: int = 3
    base_hidden: int = 32
    hidden_step: int = 4
    init_scale: float = 0.05
    # bilingual task fitting
    btf: bool = True
    btf_epochs: int = 20
    btf_lr: float = 0.01
    mask_rate: float = 0.15
    # phases
    batch_size: int = 32
    warmup: float = 0.0
    lr_schedule: str = "linear"
    btf_weight_decay: float = 0.3
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    finetune_weight_decay: float = 0.0
    freeze_finetune: bool = True
    soft_epochs: int = 40
    soft_lr: float = 0.02
    soft_weight_decay: float = 0.0
    freeze_soft: bool = False
    hard_epochs: int = 10
    hard_lr: float = 0.01
    hard_weight_decay: float = 0.3
    freeze_hard: bool = False
    # self-training
    rounds: float = 1.5
    grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    min_recalled: int = 0
    fixed_alpha: float | None = None
    soft_target: str = "paired"
    consistency: str = "threshold"

    def validate(self):
        if self.rounds < 0.5 or not math.isclose(self.rounds * 2, round(self.rounds * 2)):
            raise ConfigError(f"rounds: must be a positive multiple of 0.5, got {self.rounds}")
        for key in ("btf_lr", "finetune_lr", "soft_lr", "hard_lr"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: learning rates must be > 0")
        for key in ("btf_epochs", "finetune_epochs", "soft_epochs", "hard_epochs", "entity_cap",
                    "min_recalled"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        for key in ("dim", "voters", "base_hidden", "batch_size", "num_classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes: need at least 2 classes")
        if self.base_hidden + (self.voters - 1) * self.hidden_step < 1:
            raise ConfigError("hidden_step: voter hidden sizes must stay positive")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError("mask_rate: must lie in (0, 1)")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup: must lie in [0, 1)")
        for key in ("btf_weight_decay", "finetune_weight_decay", "soft_weight_decay",
                    "hard_weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        if not self.grid or any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError("grid: must be a non-empty strictly increasing list")
        if any(not 0.0 <= t < 1.0 for t in self.grid):
            raise ConfigError("grid: thresholds must lie in [0, 1)")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha < 1.0:
            raise ConfigError("fixed_alpha: must lie in [0, 1)")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError("lr_schedule: expected 'linear' or 'constant'")
        if self.soft_target not in ("paired", "mean"):
            raise ConfigError("soft_target: expected 'paired' or 'mean'")
        if self.consistency not in ("threshold", "argmax"):
            raise ConfigError("consistency: expected 'threshold' or 'argmax'")
        return self

    @property
    def full_rounds(self):
        return int(math.floor(self.rounds + 1e-9))

    @property
    def trailing_soft(self):
        return not math.isclose(self.rounds, self.full_rounds)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dump(self):
        """Render in the same ``key = value`` syntax ``parse_config`` reads."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                text = "[" + ", ".join(repr(float(v)) for v in value) + "]"
            elif value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = typing.get_type_hints(PipelineConfig)


def _convert(key, raw):
    typ = _FIELD_TYPES[key]
    text = raw.strip()
    optional = False
    if isinstance(typ, types.UnionType) or typing.get_origin(typ) is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        typ, optional = args[0], True
    if optional and text.lower() in ("none", "auto", ""):
        return None
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typing.get_origin(typ) is list:
            body = text[1:-1] if text.startswith("[") and text.endswith("]") else text
            return [float(p) for p in body.split(",") if p.strip()]
        if typ is str:
            return text.strip('"').strip("'") if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'" else text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw.strip()!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type")


def _apply(values, key, raw, where):
    key = key.strip().replace("-", "_")
    if key not in _FIELD_TYPES:
        raise ConfigError(f"{key}: unknown configuration key ({where})")
    values[key] = _convert(key, raw)


def parse_config(path=None, overrides=()):
    """Resolve file values, then ``key=value`` overrides; the result is validated."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"line {lineno}: expected 'key = value'")
                key, raw = line.split("=", 1)
                _apply(values, key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        _apply(values, key, raw, "override")
    return PipelineConfig(**values).validate()
