"""Experiment configuration files, run manifests and directory locking.

Configs are YAML mappings with nested sections that mirror the component
configs. Unknown keys anywhere are rejected before any compute starts,
and the config hash is taken over the canonicalized (sorted-key) JSON
form, so key order never matters.
"""

from __future__ import annotations

import contextlib
import dataclasses
import datetime
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import yaml

from calm.backbone import BackboneConfig
from calm.heads import HeadConfig
from calm.sources import SourceSpec
from calm.training import TrainConfig


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass
class SourceSection:
    kind: str = "gaussian-ar"
    latent_dim: int = 8
    seq_len: int = 64
    frame_rate: float = 25.0
    ar_coeff: float = 0.9
    innovation_scale: float = 1.0
    mixture_weights: tuple[float, ...] = (1.0,)
    mixture_means: tuple[float, ...] = (0.0,)
    count: int = 2048

    def spec(self) -> SourceSpec:
        return SourceSpec(
            kind=self.kind,
            latent_dim=self.latent_dim,
            seq_len=self.seq_len,
            frame_rate=self.frame_rate,
            ar_coeff=self.ar_coeff,
            innovation_scale=self.innovation_scale,
            mixture_weights=tuple(self.mixture_weights),
            mixture_means=tuple(self.mixture_means),
        )


@dataclass
class SampleSection:
    n_steps: int = 1
    temperature: float = 1.0
    max_frames: int = 64
    prompt_frames: int = 8


@dataclass
class EvalSection:
    embed_dim: int = 32
    window_len: int = 16
    embed_seed: int = 0
    n_generations: int = 100
    n_bootstrap: int = 200
    n_perm: int = 199
    oracle_n: int = 1000


@dataclass
class BenchSystem:
    name: str = ""
    checkpoint: str = ""
    n_steps: int = 1
    temperature: float = 1.0


@dataclass
class BenchSection:
    n_runs: int = 20
    n_warmup: int = 3
    baseline: str = ""
    systems: list[BenchSystem] = field(default_factory=list)


@dataclass
class VaeSection:
    window_len: int = 32
    hidden_dim: int = 32
    n_layers: int = 1
    n_heads: int = 2
    kl_weight: float = 0.01
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 16
    n_waveforms: int = 64
    use_samples: bool = True


@dataclass
class PathsSection:
    corpus: str = ""
    stats: str = ""
    checkpoint: str = ""
    vae_checkpoint: str = ""
    prompt: str = ""


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    source: SourceSection = field(default_factory=SourceSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    vae: VaeSection = field(default_factory=VaeSection)
    paths: PathsSection = field(default_factory=PathsSection)


_SECTION_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _build_dataclass(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{where}'")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if f.name == "systems" and cls is BenchSection:
            if not isinstance(value, list):
                raise ConfigError(f"'{where}.systems' must be a list")
            value = [_build_dataclass(BenchSystem, v, f"{where}.systems[{i}]") for i, v in enumerate(value)]
        elif isinstance(value, list):
            value = tuple(value) if "tuple" in str(f.type) else value
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid section '{where}': {err}") from err


def parse_config(data: dict[str, Any]) -> ExperimentConfig:
    """Validate a parsed mapping into an ExperimentConfig; unknown keys fail."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    sections = {
        "source": SourceSection,
        "backbone": BackboneConfig,
        "head": HeadConfig,
        "train": TrainConfig,
        "sample": SampleSection,
        "eval": EvalSection,
        "bench": BenchSection,
        "vae": VaeSection,
        "paths": PathsSection,
    }
    for name, value in data.items():
        if name in sections:
            kwargs[name] = _build_dataclass(sections[name], value, name)
        else:
            kwargs[name] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a YAML experiment file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML in {path}: {err}") from err
    cfg = parse_config(data or {})
    for name in ("corpus", "stats", "checkpoint", "vae_checkpoint", "prompt"):
        value = getattr(cfg.paths, name)
        if value and not Path(value).exists():
            raise ConfigError(f"paths.{name} does not exist: {value}")
    return cfg


def config_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form; stable under key reordering."""
    canon = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config_dict(cfg), sort_keys=True))


@dataclass
class RunManifest:
    """What a command ran, from what inputs, producing which artifacts."""

    config_hash: str
    code_version: str
    command: str
    started_at: str
    finished_at: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, cfg: ExperimentConfig, command: str) -> "RunManifest":
        from calm import __version__

        return cls(
            config_hash=config_hash(cfg),
            code_version=__version__,
            command=command,
            started_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        )

    def finish(self, path: str | Path) -> None:
        self.finished_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


@contextlib.contextmanager
def experiment_lock(out_dir: str | Path) -> Iterator[None]:
    """One mutating command per experiment directory at a time.

    The lock file records the owner pid; a lock whose process is gone is
    reclaimed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            break
        except FileExistsError:
            try:
                owner = int(lock.read_text().strip() or "0")
            except (ValueError, OSError):
                owner = 0
            if owner and _pid_alive(owner):
                raise ConfigError(f"experiment directory {out_dir} is locked by pid {owner}")
            lock.unlink(missing_ok=True)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
