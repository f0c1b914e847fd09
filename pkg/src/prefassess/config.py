"""Run configuration: one TOML file of flat dotted keys, overridable from the command line.

Example::

    data.n_users = 512
    reward.w_p = 0.7
    grpo.beta = 0.04

Unknown keys are rejected so typos never pass silently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .reward import RewardConfig
from .trainer.loops import GRPOConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    vocab: str = ""  # empty means the bundled vocabulary
    prompts: str = ""  # empty means the bundled prompt corpus
    data_dir: str = "runs/data"
    checkpoints: str = "runs/ckpt"
    reports: str = "runs/reports"


@dataclass(frozen=True)
class DataConfig:
    n_users: int = 512
    multi_fraction: float = 0.25
    k_refs: int = 5
    unseen_fraction: float = 0.2
    reserved_fraction: float = 0.2


@dataclass(frozen=True)
class BackendConfig:
    t2i: str = "mock"  # mock | remote
    text_sim: str = "mock"  # mock | sentence
    annotator: str = "oracle"  # oracle | remote
    annotator_model: str = ""
    t2i_endpoint: str = ""


@dataclass(frozen=True)
class FilterConfig:
    tau: float = 1.0


@dataclass(frozen=True)
class SFTConfig:
    epochs: int = 1
    learning_rate: float = 3e-3
    batch_size: int = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000


@dataclass(frozen=True)
class EvalConfig:
    seen_sp: int = 50
    seen_mp: int = 25
    unseen_sp: int = 50
    unseen_mp: int = 25
    k_refs: int = 5
    seed_offset: int = 1000
    temperature: float = 0.0
    tau: float = 1.0

    def split_sizes(self) -> dict[str, int]:
        return {"seen-SP": self.seen_sp, "seen-MP": self.seen_mp, "unseen-SP": self.unseen_sp, "unseen-MP": self.unseen_mp}


DESK_GRPO = GRPOConfig(learning_rate=2e-2, max_len=64)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backends: BackendConfig = field(default_factory=BackendConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    grpo: GRPOConfig = DESK_GRPO
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if hasattr(value, "__dataclass_fields__"):
                for k, v in asdict(value).items():
                    out[f"{f.name}.{k}"] = v
            else:
                out[f.name] = value
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return from_flat({**self.to_flat(), **overrides})


def _coerce(key: str, value: Any, default: Any) -> Any:
    kind = type(default)
    if kind is bool:
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def from_flat(flat: Mapping[str, Any]) -> RunConfig:
    base = RunConfig()
    defaults = base.to_flat()
    unknown = sorted(set(flat) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, flat[k], defaults[k]) if k in flat else v for k, v in defaults.items()}
    kwargs: dict[str, Any] = {}
    for f in fields(base):
        section = getattr(base, f.name)
        if hasattr(section, "__dataclass_fields__"):
            sub = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(f.name + ".")}
            try:
                kwargs[f.name] = replace(section, **sub)
            except ValueError as exc:
                raise ConfigError(f"{f.name}: {exc}") from exc
        else:
            kwargs[f.name] = values[f.name]
    return RunConfig(**kwargs)


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                flat = _flatten(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(cfg: RunConfig) -> str:
    """Flat TOML with every key, suitable for replaying a run."""
    lines = []
    for k, v in cfg.to_flat().items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
