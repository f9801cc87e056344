"""Flat key-value experiment configuration with dotted section keys.

Example::

    norm.kind = ilm+gn
    optimizer.lr = 0.1
    schedule.milestones = 15:0.1,25:0.1
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError

_NORM_KINDS = ("bn", "ln", "in", "gn", "ilm+ln", "ilm+in", "ilm+gn")


@dataclass
class ExperimentConfig:
    model_plan: str = "micro"
    norm_kind: str = "gn"
    norm_groups: int = 32
    ilm_key_group_size: int = 16
    ilm_embed_dim_rule: str = "n_over_16_min_1"
    ilm_act_mu: str = "tanh"
    ilm_act_gamma: str = "sigmoid"
    optimizer_lr: float = 0.1
    optimizer_momentum: float = 0.9
    optimizer_weight_decay: float = 0.0005
    optimizer_no_decay_base: bool = False
    schedule_milestones: str = "15:0.1,25:0.1"
    dataset_kind: str = "synthetic"
    dataset_path: str = ""
    dataset_seed: int = 0
    dataset_classes: int = 4
    dataset_samples: int = 2000
    dataset_noise_std: float = 0.6
    dataset_instance_gain: float = 0.0
    train_batch_size: int = 64
    train_epochs: int = 30
    train_seed: int = 0
    train_dtype: str = "float32"
    output_dir: str = "runs/default"

    def milestones(self) -> list[tuple[int, float]]:
        if not self.schedule_milestones.strip():
            return []
        out = []
        for part in self.schedule_milestones.split(","):
            epoch, mult = part.split(":")
            out.append((int(epoch), float(mult)))
        return out

    def validate(self) -> None:
        if self.norm_kind not in _NORM_KINDS:
            raise ConfigError(f"unknown norm.kind {self.norm_kind!r}")
        if self.dataset_kind not in ("synthetic", "cifar10_binary"):
            raise ConfigError(f"unknown dataset.kind {self.dataset_kind!r}")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown train.dtype {self.train_dtype!r}")
        try:
            self.milestones()
        except ValueError as exc:
            raise ConfigError(f"bad schedule.milestones: {exc}") from exc


def _key_map() -> dict:
    return {f.name.replace("_", ".", 1): f for f in fields(ExperimentConfig)}


def _parse_value(field, raw: str):
    if field.type == "bool" or isinstance(field.default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean for {field.name}, got {raw!r}")
    try:
        return type(field.default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {field.name}: {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse; unknown keys rejected, every field has a default."""
    keys = _key_map()
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, keys[key].name, _parse_value(keys[key], raw))
    cfg.validate()
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, f in _key_map().items():
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
