"""Run configuration: nested dataclasses, a JSON config file, and matching CLI flags.

Every leaf field becomes a kebab-case flag. Sections listed in ``PREFIXES``
get a prefix so names stay unique (``--rgb-patch-size``, ``--moe-top-k``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
import typing

from .checkpoint import atomic_write_bytes
from .data import DataConfig
from .features import ModalityEncoderConfig
from .model import FusionConfig, ModelConfig
from .moe import MoeConfig
from .seq2seq import Seq2SeqConfig


@dataclass
class PathsConfig:
    data_dir: str = "data"
    cache_dir: str = "cache"
    run_dir: str = "runs/default"
    reports_dir: str = "reports"


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-2
    batch_size: int = 32
    epochs_phase1: int = 1
    epochs_phase2: int = 10
    phase1_enabled: bool = True
    phase2_enabled: bool = True
    max_grad_norm: float = 1.0
    drop_distance_head: int = 0
    max_new_tokens: int = 24
    label_scoring: bool = True
    distance_tolerance: float = 0.10
    mask_threshold: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    n_train: int = 512
    n_val: int = 128
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rgb: ModalityEncoderConfig = field(default_factory=lambda: ModalityEncoderConfig("rgb", 224, 14, 32, 1.0 / 255.0))
    depth: ModalityEncoderConfig = field(default_factory=lambda: ModalityEncoderConfig("depth", 384, 16, 32, 0.1))
    model: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return _build(cls, obj)

    def save(self, path) -> None:
        atomic_write_bytes(path, (self.to_json() + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


PREFIXES = {"rgb": "rgb-", "depth": "depth-", "moe": "moe-"}
# fields that are not user-settable
_SKIP = {("rgb", "modality"), ("depth", "modality"), ("model", "vocab_size"), ("model", "pad_id"), ("model", "eos_id")}


def _build(cls, obj: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in obj:
            continue
        value = obj[f.name]
        ftype = _resolve(cls, f)
        if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
            value = _build(ftype, value)
        kwargs[f.name] = value
    unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)


def _resolve(cls, f: dataclasses.Field):
    hints = _hints(cls)
    return hints.get(f.name, f.type)


_HINT_CACHE: dict[type, dict] = {}


def _hints(cls) -> dict:
    if cls not in _HINT_CACHE:
        _HINT_CACHE[cls] = typing.get_type_hints(cls)
    return _HINT_CACHE[cls]


def _leaves(cls, path=()):
    """(path tuple, flag name, type) for every settable leaf field."""
    for f in dataclasses.fields(cls):
        ftype = _resolve(cls, f)
        if dataclasses.is_dataclass(ftype):
            yield from _leaves(ftype, path + (f.name,))
            continue
        if (path[-1] if path else None, f.name) in _SKIP:
            continue
        prefix = PREFIXES.get(path[-1], "") if path else ""
        yield path + (f.name,), prefix + f.name.replace("_", "-"), ftype


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Add one flag per RunConfig leaf; unset flags stay absent from the namespace."""
    seen = set()
    for path, flag, ftype in _leaves(RunConfig):
        if flag in seen:
            raise RuntimeError(f"duplicate config flag --{flag}")
        seen.add(flag)
        dest = "cfg__" + "__".join(path)
        if ftype is bool:
            parser.add_argument(f"--{flag}", dest=dest, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif ftype in (int, float, str):
            parser.add_argument(f"--{flag}", dest=dest, type=ftype, default=argparse.SUPPRESS)
        else:
            # structured values (task_mix) are given as JSON
            parser.add_argument(f"--{flag}", dest=dest, type=json.loads, default=argparse.SUPPRESS, metavar="JSON")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- config file (``--config``) <- explicit flags."""
    base = RunConfig().to_dict()
    if getattr(args, "config", None):
        _merge(base, json.loads(Path(args.config).read_text(encoding="utf-8")))
    for key, value in vars(args).items():
        if not key.startswith("cfg__"):
            continue
        path = key[5:].split("__")
        node = base
        for part in path[:-1]:
            node = node[part]
        node[path[-1]] = value
    return RunConfig.from_dict(base)


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict) and k != "task_mix":
            _merge(dst[k], v)
        else:
            dst[k] = v


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    s2s = dataclasses.replace(cfg.model, vocab_size=vocab_size)
    return ModelConfig(seq2seq=s2s, fusion=cfg.fusion, moe=cfg.moe, rgb_dim=cfg.rgb.embed_dim, depth_dim=cfg.depth.embed_dim)


def flag_names() -> list[str]:
    return [flag for _, flag, _ in _leaves(RunConfig)]
