"""Run configuration: bracketed-section key = value files with strict keys.

Every field has a default; unknown sections or keys are errors. Values are
coerced to the type of the dataclass field they target.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    families: str = "sphere,cube,cylinder,cone,torus"
    samples_per_class: int = 40
    points: int = 512
    scale_jitter: float = 0.2

    def family_list(self) -> list[str]:
        return [f.strip() for f in self.families.split(",") if f.strip()]


@dataclass
class StageConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    min_lr: float = 1e-6


@dataclass
class Stage3Config(StageConfig):
    epochs: int = 100
    weight_decay: float = 5e-2
    global_loss_mode: str = "l2"  # l1 | l2 | l1+l2 | mmd
    global_weight: float = 1.0
    local_weight: float = 1.0


@dataclass
class FinetuneConfig(StageConfig):
    epochs: int = 30
    weight_decay: float = 5e-2
    warmup_epochs: int = 3
    holdout_fraction: float = 0.2
    train_per_class: int = 0  # 0 = use the full training split


@dataclass
class FewShotConfig:
    way: int = 5
    shot: int = 10
    query_per_class: int = 20
    episodes: int = 10
    head_epochs: int = 50
    head_lr: float = 1e-2


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(group_count=32, points_per_group=16))
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)


def _coerce(raw: str, target_type, where: str):
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {target_type.__name__}, got {raw!r}") from None
    return raw


def parse_config(path: str) -> RunConfig:
    """Parse a config file into a fully-populated RunConfig; strict keys."""
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    current = None
    current_name = ""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                current_name = stripped[1:-1].strip()
                if current_name not in sections:
                    raise ConfigError(f"{path}:{lineno}: unknown section [{current_name}]")
                current = sections[current_name]
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            if current is None:
                raise ConfigError(f"{path}:{lineno}: key outside any [section]")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            fields = {f.name: f for f in dataclasses.fields(current)}
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{current_name}]")
            value = _coerce(raw, type(getattr(current, key)), f"{path}:{lineno} [{current_name}] {key}")
            setattr(current, key, value)
    # re-run dataclass validation with the final field values
    for section in sections.values():
        post = getattr(section, "__post_init__", None)
        if post is not None:
            try:
                post()
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render a RunConfig back to the file format (used in run records)."""
    lines = []
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in dataclasses.fields(section):
            lines.append(f"{sf.name} = {getattr(section, sf.name)}")
        lines.append("")
    return "\n".join(lines)
