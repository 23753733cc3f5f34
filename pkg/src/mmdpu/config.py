"""One structured config file (YAML or JSON) covering every tunable section.

Environment variables override file values: ``MMDPU_<SECTION>__<KEY>=value``
(for example ``MMDPU_TRAIN__BATCH_SIZE=16`` or ``MMDPU_TRAIN__WEIGHTS__ALPHA=0.01``).
Values are parsed as YAML scalars.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .datamodel import ConfigError, LossWeights, SplitSpec
from .ingest import PreprocessConfig
from .manip_synth import CopyMoveParams
from .student import StudentConfig
from .teacher import TeacherConfig
from .trainer import TrainConfig

ENV_PREFIX = "MMDPU_"


@dataclass
class Config:
    data: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    copy_move: CopyMoveParams = field(default_factory=CopyMoveParams)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.teacher.image_size = self.data.image_size
        self.student.vocab_size = self.data.vocab_size

    def to_dict(self) -> dict:
        return _plain(asdict(self))


_SECTIONS = {f.name: f.default_factory for f in fields(Config)}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(section: str, values: dict):
    cls = _SECTIONS[section]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    values = dict(values)
    if section == "train" and isinstance(values.get("weights"), dict):
        values["weights"] = LossWeights(**values["weights"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _set_path(tree: dict, path: list[str], value) -> None:
    for key in path[:-1]:
        tree = tree.setdefault(key, {})
    tree[path[-1]] = value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
        _set_path(tree, path, yaml.safe_load(raw))
    return tree


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: Optional[os.PathLike] = None, environ=None) -> Config:
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = _merge(raw, env_overrides(environ))
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    weights = raw.get("train", {}).get("weights")
    if weights is not None and not isinstance(weights, dict) and not is_dataclass(weights):
        raise ConfigError("train.weights must be a mapping")
    return Config(**{name: _build(name, raw.get(name, {})) for name in _SECTIONS})


def dump_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
