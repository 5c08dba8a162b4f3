"""Flat key=value run configuration.

One dotted-namespace format serves config files and --override flags.
Every key is declared here with a default and a help line; unknown keys
are rejected, and the CLI --help prints the full table. The PMOE_SEED
environment variable overrides the seed key.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .blocks import NetworkConfig, StageConfig
from .errors import ConfigError
from .moe import MoEConfig
from .sampler import BatchPlan
from .syndata import AugmentConfig, DatasetSpec, default_specs
from .trainer import TrainConfig


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# key -> (default, parser, help)
KEYS: dict[str, tuple[str, object, str]] = {
    "seed": ("0", int, "global seed: model init, batches, augmentation"),
    "model.encoder": ("2x32w16,2x64w16", str,
                      "encoder stages as <blocks>x<dim>w<window>, comma separated"),
    "model.decoder": ("2x64w16,2x32w16", str,
                      "decoder stages (dims mirror the encoder)"),
    "model.pool_factor": ("2", int, "octree pooling factor between stages (power of 2)"),
    "model.embed_dim": ("32", int, "token embedding width"),
    "model.head_embed_dim": ("32", int, "shared class-embedding space width"),
    "model.num_heads": ("4", int, "attention heads per block"),
    "model.norm_kind": ("batch", str, "normalization: batch | layer | rms"),
    "model.activation": ("relu", str, "activation: relu | silu"),
    "model.moe_position": ("projection", str,
                           "expert mixture site: projection | ffn | none"),
    "model.ffn_multiplier": ("2.0", float, "dense feed-forward width multiplier"),
    "model.bits_per_axis": ("16", int, "voxel grid bits per axis (curve codes)"),
    "model.head_scale": ("10.0", float, "cosine logit scale of the class head"),
    "moe.num_experts": ("4", int, "experts per mixture layer"),
    "moe.top_k": ("2", int, "experts activated per token"),
    "moe.hidden_multiplier": ("1.0", float, "expert hidden width as multiple of dim"),
    "moe.num_shared_experts": ("0", int, "always-on experts added to every token"),
    "moe.aux_loss_alpha": ("0.0", float, "load-balancing loss strength (0 disables)"),
    "moe.gate_mode": ("selected", str,
                      "gate normalization: selected | renorm (renormalized full softmax)"),
    "train.variant": ("point_moe", str,
                      "model variant: point_moe | dense | conditioned_norm"),
    "train.lr_max": ("0.005", float, "one-cycle peak learning rate"),
    "train.weight_decay": ("0.05", float, "decoupled weight decay"),
    "train.beta1": ("0.9", float, "Adam beta1"),
    "train.beta2": ("0.999", float, "Adam beta2"),
    "train.eps": ("1e-8", float, "Adam epsilon"),
    "train.total_steps": ("500", int, "optimization steps"),
    "train.warmup_frac": ("0.1", float, "fraction of steps spent warming up"),
    "train.lr_floor_ratio": ("0.01", float, "final lr as a fraction of lr_max"),
    "train.grad_clip_norm": ("1.0", float, "global gradient-norm clip"),
    "train.checkpoint_every": ("0", int, "checkpoint interval in steps (0: final only)"),
    "train.eval_every": ("0", int, "mid-training eval interval (0: final only)"),
    "train.max_val_scenes": ("0", int, "cap validation scenes per dataset (0: all)"),
    "train.table_seed": ("7", int, "seed of the deterministic class-embedding table"),
    "batch.mode": ("mixed", str, "batch composition: mixed | homogeneous"),
    "batch.size": ("4", int, "samples per batch"),
    "batch.weights": ("", str, "comma floats aligned with data.train_datasets "
                              "(empty: equal)"),
    "batch.floor": ("true", _bool, "mixed mode: guarantee one sample per dataset"),
    "aug.enabled": ("true", _bool, "enable training augmentations"),
    "aug.rotate": ("true", _bool, "random z rotation"),
    "aug.scale_min": ("0.9", float, "uniform scale lower bound"),
    "aug.scale_max": ("1.1", float, "uniform scale upper bound"),
    "aug.jitter_sigma": ("0.005", float, "coordinate jitter sigma (metres)"),
    "data.train_datasets": ("roomsim,ringsim", str,
                            "datasets joined for training, comma separated"),
    "data.num_scenes": ("30", int, "scenes per training dataset"),
    "data.heldout_scenes": ("10", int, "scenes of the held-out domain"),
    "data.indoor.points_min": ("8000", int, "room domain: min points per scene"),
    "data.indoor.points_max": ("16000", int, "room domain: max points per scene"),
    "data.indoor.cell_size": ("0.3", float, "room domain: voxel size (metres)"),
    "data.outdoor.points_min": ("2000", int, "ring domain: min points per scene"),
    "data.outdoor.points_max": ("6000", int, "ring domain: max points per scene"),
    "data.outdoor.cell_size": ("1.0", float, "ring domain: voxel size (metres)"),
    "head.embeddings_path": ("", str,
                             "class-embedding file (empty: deterministic table "
                             "from train.table_seed)"),
    "eval.split": ("val", str, "evaluation split: val | train"),
    "analyze.top_m": ("100", int, "pathway rows kept in the report"),
}


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_sources(cls, config_path: str | None = None,
                     overrides: list[str] | None = None) -> "RunConfig":
        raw = {k: d for k, (d, _, _) in KEYS.items()}
        if config_path:
            with open(config_path) as fh:
                for ln_no, ln in enumerate(fh, 1):
                    ln = ln.strip()
                    if not ln or ln.startswith("#"):
                        continue
                    if "=" not in ln:
                        raise ConfigError(f"{config_path}:{ln_no}: expected key=value")
                    key, _, val = ln.partition("=")
                    key = key.strip()
                    if key not in KEYS:
                        raise ConfigError(f"{config_path}:{ln_no}: unknown key {key!r}")
                    raw[key] = val.strip()
        for ov in overrides or []:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r} must be key=value")
            key, _, val = ov.partition("=")
            if key not in KEYS:
                raise ConfigError(f"unknown override key {key!r}")
            raw[key] = val
        if "PMOE_SEED" in os.environ:
            raw["seed"] = os.environ["PMOE_SEED"]
        values: dict[str, object] = {}
        for key, (_, parser, _) in KEYS.items():
            try:
                values[key] = parser(raw[key])
            except ConfigError:
                raise
            except Exception as e:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({e})") from e
        return cls(values)

    # -- constructors for the module configs --------------------------------

    def moe_config(self) -> MoEConfig:
        return MoEConfig(num_experts=self["moe.num_experts"],
                         top_k=self["moe.top_k"],
                         expert_hidden_multiplier=self["moe.hidden_multiplier"],
                         num_shared_experts=self["moe.num_shared_experts"],
                         activation=self["model.activation"],
                         aux_loss_alpha=self["moe.aux_loss_alpha"],
                         gate_mode=self["moe.gate_mode"])

    def network_config(self) -> NetworkConfig:
        def stages(text: str) -> tuple[StageConfig, ...]:
            out = []
            for part in text.split(","):
                try:
                    nb, rest = part.split("x")
                    dim, win = rest.split("w")
                    out.append(StageConfig(int(nb), int(dim), int(win)))
                except ValueError as e:
                    raise ConfigError(f"bad stage spec {part!r}") from e
            return tuple(out)

        return NetworkConfig(encoder=stages(self["model.encoder"]),
                             decoder=stages(self["model.decoder"]),
                             pool_factor=self["model.pool_factor"],
                             embed_dim=self["model.embed_dim"],
                             head_embed_dim=self["model.head_embed_dim"],
                             num_heads=self["model.num_heads"],
                             norm_kind=self["model.norm_kind"],
                             activation=self["model.activation"],
                             moe_position=self["model.moe_position"],
                             moe=self.moe_config(),
                             ffn_multiplier=self["model.ffn_multiplier"],
                             bits_per_axis=self["model.bits_per_axis"],
                             head_scale=self["model.head_scale"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr_max=self["train.lr_max"],
                           weight_decay=self["train.weight_decay"],
                           beta1=self["train.beta1"], beta2=self["train.beta2"],
                           eps=self["train.eps"],
                           total_steps=self["train.total_steps"],
                           warmup_frac=self["train.warmup_frac"],
                           lr_floor_ratio=self["train.lr_floor_ratio"],
                           grad_clip_norm=self["train.grad_clip_norm"],
                           seed=self["seed"],
                           table_seed=self["train.table_seed"],
                           checkpoint_every=self["train.checkpoint_every"],
                           eval_every=self["train.eval_every"],
                           max_val_scenes=self["train.max_val_scenes"],
                           augment=self.augment_config())

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(enabled=self["aug.enabled"], rotate=self["aug.rotate"],
                             scale_min=self["aug.scale_min"],
                             scale_max=self["aug.scale_max"],
                             jitter_sigma=self["aug.jitter_sigma"])

    def dataset_specs(self) -> list[DatasetSpec]:
        return default_specs(
            indoor_points=(self["data.indoor.points_min"],
                           self["data.indoor.points_max"]),
            outdoor_points=(self["data.outdoor.points_min"],
                            self["data.outdoor.points_max"]),
            num_scenes=self["data.num_scenes"],
            indoor_cell=self["data.indoor.cell_size"],
            outdoor_cell=self["data.outdoor.cell_size"],
            heldout_scenes=self["data.heldout_scenes"])

    def batch_plan(self) -> BatchPlan:
        datasets = tuple(n.strip() for n in self["data.train_datasets"].split(",")
                         if n.strip())
        weights = None
        if self["batch.weights"]:
            weights = tuple(float(w) for w in self["batch.weights"].split(","))
        return BatchPlan(datasets=datasets, mode=self["batch.mode"],
                         batch_size=self["batch.size"], weights=weights,
                         seed=self["seed"], coverage_floor=self["batch.floor"])


def help_table() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["configuration keys (file lines or --override, key=value):"]
    for key, (default, _, text) in KEYS.items():
        lines.append(f"  {key.ljust(width)}  default={default!r:12}  {text}")
    return "\n".join(lines)
