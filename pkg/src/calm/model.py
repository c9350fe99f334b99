"""Bundled generative model: backbone, sampler head and normalization
stats, checkpointable as one self-describing file (the configuration
travels inside the checkpoint as a JSON payload)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from calm.backbone import Backbone, BackboneConfig
from calm.heads import HeadConfig, build_head
from calm.nn.checkpoint import CheckpointError, load_tensors, save_tensors
from calm.sources import NormStats

Tensor = torch.Tensor


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    head: HeadConfig

    def __post_init__(self):
        if self.head.kind in ("consistency", "trigflow", "rq"):
            if self.head.cond_dim != self.backbone.model_dim:
                raise ValueError(
                    f"head cond_dim {self.head.cond_dim} != backbone model_dim {self.backbone.model_dim}"
                )
            if self.head.latent_dim != self.backbone.latent_dim:
                raise ValueError(
                    f"head latent_dim {self.head.latent_dim} != backbone latent_dim {self.backbone.latent_dim}"
                )

    def to_json(self) -> str:
        return json.dumps(
            {"backbone": dataclasses.asdict(self.backbone), "head": dataclasses.asdict(self.head)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, raw: str) -> "ModelConfig":
        data = json.loads(raw)
        return cls(backbone=BackboneConfig(**data["backbone"]), head=HeadConfig(**data["head"]))


class Model(nn.Module):
    """Backbone plus head, with the corpus normalization baked in as buffers."""

    def __init__(self, config: ModelConfig, stats: NormStats | None = None):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        self.head = build_head(config.head)
        c = config.backbone.latent_dim
        stats = stats or NormStats.identity(c)
        self.register_buffer("norm_mean", stats.mean.clone().float())
        self.register_buffer("norm_std", stats.std.clone().float())
        # sentinel distinguishing trained checkpoints from fresh inits
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.int64))

    @property
    def head_kind(self) -> str:
        return self.config.head.kind

    @property
    def stats(self) -> NormStats:
        return NormStats(mean=self.norm_mean, std=self.norm_std)

    def normalize(self, x: Tensor) -> Tensor:
        return self.stats.normalize(x)

    def denormalize(self, x: Tensor) -> Tensor:
        return self.stats.denormalize(x)

    def save(self, path: str | Path, extra: dict[str, Tensor] | None = None) -> None:
        tensors = {"meta.config_json": _encode_json(self.config.to_json())}
        tensors.update({f"model.{k}": v for k, v in self.state_dict().items()})
        for key, value in (extra or {}).items():
            name = f"extra.{key}"
            if name in tensors:
                raise CheckpointError(f"duplicate extra tensor '{key}'")
            tensors[name] = value
        save_tensors(path, tensors)

    @classmethod
    def load(cls, path: str | Path) -> tuple["Model", dict[str, Tensor]]:
        tensors = load_tensors(path)
        if "meta.config_json" not in tensors:
            raise CheckpointError(f"{path} is not a model checkpoint (missing config)")
        config = ModelConfig.from_json(_decode_json(tensors.pop("meta.config_json")))
        model = cls(config)
        state = {}
        extra = {}
        for name, t in tensors.items():
            if name.startswith("model."):
                state[name.removeprefix("model.")] = t
            elif name.startswith("extra."):
                extra[name.removeprefix("extra.")] = t
        missing = set(model.state_dict()) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:8]}")
        model.load_state_dict(state)
        return model, extra


def _encode_json(raw: str) -> Tensor:
    return torch.frombuffer(bytearray(raw.encode("utf-8")), dtype=torch.uint8).clone()


def _decode_json(t: Tensor) -> str:
    return bytes(t.tolist()).decode("utf-8")
