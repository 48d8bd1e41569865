"""Experiment configuration schema shared by the command-line tools.

Files may be YAML or JSON.  Unknown keys are rejected and validation errors
name the offending field path (``train.lr``, ``gps.k`` ...).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .model import EncoderConfig
from .sampler import GPSConfig, PriorEncoder
from .train import TrainConfig

SEED_ENV = "GPS_SSL_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Strict):
    kind: Literal["synthetic", "manifest"] = "synthetic"
    path: Optional[str] = None
    num_chains: int = Field(4, ge=1)
    branches_per_chain: int = Field(4, ge=1)
    per_branch: int = Field(32, ge=1)
    image_hw: int = Field(16, ge=4)
    channels: int = Field(3, ge=1)
    noise_std: float = Field(0.25, ge=0)
    branch_spread: float = Field(0.35, ge=0)
    flip_closed: bool = False
    seed: Optional[int] = None


class SplitCfg(_Strict):
    mode: Literal["holdout", "hierarchical"] = "holdout"
    test_fraction: float = Field(0.25, gt=0, lt=1)
    chain_fraction: float = Field(0.25, gt=0, lt=1)
    branch_fraction: float = Field(0.25, gt=0, lt=1)
    sample_fraction: float = Field(0.25, gt=0, lt=1)
    seed: Optional[int] = None


class PriorSpec(_Strict):
    kind: Literal["identity_pixels", "pca", "random_net", "label_oracle", "file", "flip_invariant"] = "label_oracle"
    params: dict[str, Any] = Field(default_factory=dict)


class GPSSpec(_Strict):
    mode: Literal["knn_random", "tau_ball"] = "knn_random"
    tau: float = Field(1.0, gt=0)
    k: int = Field(4, ge=1)
    tie_break: Literal["prefer_nonself", "lowest_id"] = "prefer_nonself"
    include_self_in_knn: bool = True


class EncoderSpec(_Strict):
    arch: Literal["mlp", "small_conv"] = "small_conv"
    hidden_widths: list[int] = Field(default_factory=lambda: [16, 32])
    embed_dim: int = 32
    projector_widths: list[int] = Field(default_factory=lambda: [64, 64])
    predictor_widths: Optional[list[int]] = None


class TrainSpec(_Strict):
    objective: Literal["simclr", "byol", "barlow", "vicreg", "nnclr"] = "simclr"
    pair_mode: Literal["baseline", "gps", "nnclr"] = "baseline"
    aug_setting: Literal["strong", "rhflip", "none"] = "rhflip"
    aug_overrides: dict[str, dict[str, Any]] = Field(default_factory=dict)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(0.1, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    temperature: float = Field(0.5, gt=0)
    barlow_lambda: float = Field(5e-3, ge=0)
    vicreg_coeffs: list[float] = Field(default_factory=lambda: [25.0, 25.0, 1.0])
    vicreg_gamma: float = Field(1.0, gt=0)
    ema_momentum: float = Field(0.99, ge=0, lt=1)
    queue_capacity: Optional[int] = Field(None, ge=1)
    queue_prefill: bool = False
    init: str = "random"
    max_steps: Optional[int] = Field(None, ge=0)
    seed: Optional[int] = None

    @field_validator("vicreg_coeffs")
    @classmethod
    def _three_coeffs(cls, v):
        if len(v) != 3:
            raise ValueError("expected [sim, var, cov]")
        return v


class EvalSpec(_Strict):
    metrics: list[Literal["knn_accuracy", "linear_probe", "recall_at_1"]] = Field(
        default_factory=lambda: ["knn_accuracy"])
    knn_k: int = Field(5, ge=1)
    classifier_lr: float = Field(0.1, gt=0)
    probe_epochs: int = Field(200, ge=1)


class SweepSpec(_Strict):
    lrs: list[float] = Field(default_factory=lambda: [1e-3, 3e-3, 1e-2, 3e-2, 1e-1])
    ks: list[int] = Field(default_factory=lambda: [1, 4, 9, 49])


class ExperimentConfig(_Strict):
    name: str = "run"
    seed: int = Field(default_factory=default_seed)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    split: SplitCfg = Field(default_factory=SplitCfg)
    prior: PriorSpec = Field(default_factory=PriorSpec)
    gps: GPSSpec = Field(default_factory=GPSSpec)
    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    train: TrainSpec = Field(default_factory=TrainSpec)
    eval: EvalSpec = Field(default_factory=EvalSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)

    # per-section seeds fall back to the global one
    def dataset_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    def split_seed(self) -> int:
        return self.seed if self.split.seed is None else self.split.seed

    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    def encoder_config(self, image_hw: int, channels: int) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(arch=e.arch, hidden_widths=tuple(e.hidden_widths), embed_dim=e.embed_dim,
                             projector_widths=tuple(e.projector_widths),
                             predictor_widths=tuple(e.predictor_widths) if e.predictor_widths else None,
                             image_hw=image_hw, channels=channels)

    def prior_encoder(self) -> PriorEncoder:
        return PriorEncoder(self.prior.kind, dict(self.prior.params))

    def gps_config(self) -> GPSConfig:
        return GPSConfig(**self.gps.model_dump())

    def train_config(self, image_hw: int, channels: int) -> TrainConfig:
        t = self.train
        gps = t.pair_mode == "gps"
        return TrainConfig(
            objective=t.objective, pair_mode=t.pair_mode,
            gps=self.gps_config() if gps else None,
            prior=self.prior_encoder() if gps else None,
            aug_setting=t.aug_setting, aug_overrides=dict(t.aug_overrides),
            epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
            momentum=t.momentum, classifier_lr=self.eval.classifier_lr, seed=self.train_seed(),
            encoder=self.encoder_config(image_hw, channels), init=t.init, temperature=t.temperature,
            barlow_lambda=t.barlow_lambda, vicreg_coeffs=tuple(t.vicreg_coeffs), vicreg_gamma=t.vicreg_gamma,
            ema_momentum=t.ema_momentum,
            queue_capacity=t.queue_capacity if t.objective == "nnclr" else None,
            queue_prefill=t.queue_prefill, max_steps=t.max_steps,
        )


def _loc(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def validate_config(raw: Optional[dict]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw or {})
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{_loc(first)}: {first['msg']}") from None


def load_config(path) -> dict:
    """Raw mapping from a YAML or JSON file (validation happens separately)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse config ({exc})") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return raw


def leaf_paths(model: type[BaseModel] = ExperimentConfig, prefix: str = "") -> list[str]:
    """Dotted names of every settable config key."""
    out = []
    for name, f in model.model_fields.items():
        ann = f.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out.extend(leaf_paths(ann, f"{prefix}{name}."))
        else:
            out.append(prefix + name)
    return out


def set_path(tree: dict, dotted: str, value) -> None:
    node = tree
    *parents, last = dotted.split(".")
    for key in parents:
        child = node.get(key)
        if not isinstance(child, dict):
            child = node[key] = {}
        node = child
    node[last] = value
