"""Pair construction and the SSL training loop."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import objectives as obj
from .augment import AugmentationPipeline, apply, make_pipeline
from .data import Dataset, SplitSpec
from .errors import ConfigError, NumericError, TrainingError
from .model import EncoderConfig, ModelParams, ema_update, embed, forward, init_params, value_and_grad
from .sampler import EmbeddingBank, GPSConfig, PriorEncoder, SupportQueue, build_bank, select_positives

log = logging.getLogger(__name__)

PAIR_MODES = ("baseline", "gps", "nnclr")


@dataclass
class PairBatch:
    ids_a: np.ndarray
    ids_b: np.ndarray
    views_a: np.ndarray
    views_b: np.ndarray
    rng_trace: np.ndarray  # B x 2 augmentation seeds for (view a, view b)

    def __len__(self) -> int:
        return len(self.ids_a)


def build_pairs(
    mode: str,
    dataset: Dataset,
    batch_ids,
    pipeline: AugmentationPipeline,
    rng: np.random.Generator,
    *,
    bank: Optional[EmbeddingBank] = None,
    gps: Optional[GPSConfig] = None,
    queue: Optional[SupportQueue] = None,
    pipeline_b: Optional[AugmentationPipeline] = None,
    sample_rng: Optional[np.random.Generator] = None,
) -> PairBatch:
    """Positive pairs for one batch.

    Augmentation seeds are drawn from ``rng`` before any neighbor draw, so
    the views of a baseline batch and a GPS batch that picks the same ids are
    bit-identical.  ``bank`` rows must be indexed like ``dataset``.
    """
    if mode not in PAIR_MODES:
        raise ConfigError(f"unknown pair mode {mode!r}")
    ids_a = np.asarray(batch_ids, dtype=np.int64)
    seeds = rng.integers(0, 2**63 - 1, size=(len(ids_a), 2), dtype=np.int64)
    if mode == "gps":
        if bank is None or gps is None:
            raise ConfigError("gps pairing needs an embedding bank and a GPS config")
        srng = sample_rng if sample_rng is not None else rng
        ids_b = select_positives(bank, ids_a, gps, srng)
    else:
        if mode == "nnclr" and queue is None:
            raise ConfigError("nnclr pairing needs a support queue")
        ids_b = ids_a.copy()
    images = dataset.images
    pb = pipeline_b or pipeline
    views_a = np.stack([apply(pipeline, images[i], int(s)) for i, s in zip(ids_a, seeds[:, 0])])
    views_b = np.stack([apply(pb, images[i], int(s)) for i, s in zip(ids_b, seeds[:, 1])])
    return PairBatch(ids_a, ids_b, views_a, views_b, seeds)


@dataclass
class TrainConfig:
    objective: str = "simclr"
    pair_mode: str = "baseline"
    gps: Optional[GPSConfig] = None
    prior: Optional[PriorEncoder] = None
    aug_setting: str = "rhflip"
    aug_overrides: dict = field(default_factory=dict)
    aug_setting_b: Optional[str] = None  # second view; defaults to aug_setting
    aug_overrides_b: Optional[dict] = None
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.03
    weight_decay: float = 1e-4
    momentum: float = 0.9
    classifier_lr: float = 0.1
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    init: str = "random"
    temperature: float = 0.5
    barlow_lambda: float = 5e-3
    vicreg_coeffs: tuple = (25.0, 25.0, 1.0)
    vicreg_gamma: float = 1.0
    ema_momentum: float = 0.99
    queue_capacity: Optional[int] = None
    queue_prefill: bool = False
    bank_k_max: Optional[int] = None
    distance_only: bool = False
    max_steps: Optional[int] = None
    threads: int = 1

    def validate(self) -> None:
        if self.objective not in obj.OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.pair_mode not in PAIR_MODES:
            raise ConfigError(f"unknown pair_mode {self.pair_mode!r}")
        if (self.pair_mode == "gps") != (self.gps is not None):
            raise ConfigError("a GPS config is required exactly when pair_mode is 'gps'")
        if self.pair_mode == "nnclr" and self.objective != "nnclr":
            raise ConfigError("pair_mode 'nnclr' trains the nnclr objective")
        if (self.objective == "nnclr") != (self.queue_capacity is not None):
            raise ConfigError("queue_capacity is required exactly for the nnclr objective")
        if self.objective == "byol" and not self.encoder.predictor_widths:
            raise ConfigError("byol needs predictor_widths in the encoder config")
        if self.epochs < 0 or self.batch_size < 2 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("epochs >= 0, batch_size >= 2, lr >= 0, weight_decay >= 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gps"] = asdict(self.gps) if self.gps else None
        d["prior"] = {"kind": self.prior.kind, "params": dict(self.prior.params)} if self.prior else None
        return d


@dataclass
class MetricsLog:
    """Append-only training record."""

    steps: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def append_step(self, record: dict) -> None:
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append(record)

    @property
    def losses(self) -> list[float]:
        return [s["total"] for s in self.steps]

    @property
    def step_seconds(self) -> list[float]:
        return [s["seconds"] for s in self.steps]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.steps:
                fh.write(json.dumps({"kind": "step", **s}) + "\n")
            for e, sec in enumerate(self.epoch_seconds):
                fh.write(json.dumps({"kind": "epoch", "epoch": e, "seconds": sec}) + "\n")
            for ev in self.events:
                fh.write(json.dumps({"kind": "event", **ev}) + "\n")
            if self.final:
                fh.write(json.dumps({"kind": "final", **self.final}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "MetricsLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "step":
                out.append_step(rec)
            elif kind == "epoch":
                out.epoch_seconds.append(rec["seconds"])
            elif kind == "event":
                out.events.append(rec)
            elif kind == "final":
                out.final = rec
        return out


@contextlib.contextmanager
def _torch_threads(n: int):
    prev = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _rng_streams(seed: int):
    init, shuffle, sample, aug = np.random.SeedSequence(seed).spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(shuffle),
            np.random.default_rng(sample), np.random.default_rng(aug))


def compute_loss(config: TrainConfig, params: ModelParams, batch: PairBatch,
                 teacher: Optional[ModelParams] = None, queue: Optional[SupportQueue] = None):
    """Objective value for one PairBatch; returns (LossReport, projections of view a, nn queue positions)."""
    b = len(batch)
    _, z, p = forward(params, np.concatenate([batch.views_a, batch.views_b]))
    za, zb = z[:b], z[b:]
    nn_idx = None
    if config.objective == "simclr":
        rep = obj.infonce(za, zb, config.temperature)
    elif config.objective == "nnclr":
        nn, nn_idx = obj.queue_neighbors(za, queue)
        rep = obj.infonce(nn, zb, config.temperature)
    elif config.objective == "barlow":
        rep = obj.barlow(za, zb, config.barlow_lambda)
    elif config.objective == "vicreg":
        rep = obj.vicreg(za, zb, config.vicreg_coeffs, config.vicreg_gamma)
    else:
        with torch.no_grad():
            _, zt, _ = forward(teacher, np.concatenate([batch.views_a, batch.views_b]))
        r1 = obj.byol(p[:b], zt[b:])
        r2 = obj.byol(p[b:], zt[:b])
        total = 0.5 * (r1.total + r2.total)
        rep = obj.LossReport(total, total, r1.diversity_term,
                             {"cosine": 0.5 * (r1.per_component["cosine"] + r2.per_component["cosine"])})
    return rep, za, nn_idx


def _sgd_step(params: ModelParams, grads: ModelParams, velocity: dict, lr: float, momentum: float, wd: float) -> ModelParams:
    new = {}
    with torch.no_grad():
        for k, theta in params.items():
            g = grads[k] + wd * theta if wd else grads[k]
            velocity[k] = momentum * velocity[k] + g if k in velocity else g.clone()
            new[k] = theta - lr * velocity[k]
    return ModelParams(params.config, new)


def train(config: TrainConfig, dataset: Dataset, split: Optional[SplitSpec] = None,
          bank: Optional[EmbeddingBank] = None, init: Optional[ModelParams] = None):
    """Train an encoder with SGD + momentum; returns (ModelParams, MetricsLog).

    Only ``split.train_ids`` are used (all samples when ``split`` is None).
    A GPS bank is built from ``config.prior`` over the training images unless
    one is passed; its rows must then follow the sorted training ids.
    """
    config.validate()
    train_ids = np.arange(len(dataset)) if split is None else np.array(sorted(split.train_ids), dtype=np.int64)
    if len(train_ids) < 2:
        raise ConfigError("the training split needs at least two samples")
    train_ds = dataset.subset(train_ids, name=f"{dataset.name}-train")
    init_seed, shuffle_rng, sample_rng, aug_rng = _rng_streams(config.seed)
    params = init if init is not None else init_params(config.encoder, init_seed, config.init)
    hw = config.encoder.image_hw
    pipe_a = make_pipeline(config.aug_setting, hw, config.aug_overrides)
    if config.aug_overrides_b is not None:
        overrides_b = config.aug_overrides_b
    else:
        overrides_b = {} if config.aug_setting_b else config.aug_overrides
    pipe_b = make_pipeline(config.aug_setting_b or config.aug_setting, hw, overrides_b)

    if config.pair_mode == "gps" and bank is None:
        if config.prior is None:
            raise ConfigError("gps pairing needs a prior encoder")
        k_max = config.bank_k_max or min(len(train_ds) - 1, max(config.gps.k, 1) + 1)
        bank = build_bank(config.prior, train_ds, k_max)
    if bank is not None and config.gps is not None:
        if len(bank) != len(train_ds):
            raise ConfigError(f"bank has {len(bank)} rows for {len(train_ds)} training samples")
        config.gps.check(bank)

    teacher = params.clone() if config.objective == "byol" else None
    queue = SupportQueue(config.queue_capacity) if config.objective == "nnclr" else None
    if queue is not None and config.queue_prefill:
        queue.push(embed(params, train_ds.images, which="projection"), train_ids)

    log_ = MetricsLog()
    velocity: dict = {}
    bsz = min(config.batch_size, len(train_ds))
    steps_per_epoch = len(train_ds) // bsz
    step = 0
    done = False
    with _torch_threads(config.threads):
        for epoch in range(config.epochs):
            t_epoch = time.perf_counter()
            order = shuffle_rng.permutation(len(train_ds))
            for s in range(steps_per_epoch):
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
                t0 = time.perf_counter()
                local = order[s * bsz:(s + 1) * bsz]
                batch = build_pairs(config.pair_mode, train_ds, local, pipe_a, aug_rng, bank=bank,
                                    gps=config.gps, queue=queue, pipeline_b=pipe_b, sample_rng=sample_rng)
                if queue is not None and len(queue) < bsz:
                    with torch.no_grad():
                        _, z, _ = forward(params, batch.views_a)
                    queue.push(z.numpy(), train_ids[batch.ids_a])
                    log_.events.append({"event": "queue_warmup", "epoch": epoch, "queue_size": len(queue)})
                    continue
                captured = {}

                def closure(p):
                    rep, za, nn_idx = compute_loss(config, p, batch, teacher, queue)
                    captured["za"], captured["nn_idx"] = za.detach(), nn_idx
                    return rep

                try:
                    rep, grads = value_and_grad(
                        params, closure if not config.distance_only else
                        (lambda p: _DistanceOnly(closure(p))))
                except NumericError as exc:
                    raise TrainingError(step, str(exc)) from exc
                rep = getattr(rep, "report", rep)
                params = _sgd_step(params, grads, velocity, config.lr, config.momentum, config.weight_decay)
                if teacher is not None:
                    teacher = ema_update(teacher, params, config.ema_momentum)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "objective": config.objective,
                    **rep.as_dict(),
                    "ids_a": train_ids[batch.ids_a].tolist(),
                    "ids_b": train_ids[batch.ids_b].tolist(),
                }
                if queue is not None:
                    record["nn_ids"] = queue.ids[captured["nn_idx"]].tolist()
                    queue.push(captured["za"].numpy(), train_ids[batch.ids_a])
                record["seconds"] = time.perf_counter() - t0
                log_.append_step(record)
                step += 1
            log_.epoch_seconds.append(time.perf_counter() - t_epoch)
            if done:
                break
    log.debug("trained %d steps", step)
    return params, log_


class _DistanceOnly:
    """Wraps a LossReport so only its distance term is differentiated."""

    def __init__(self, report):
        self.report = report
        self.total = report.distance_term


def feature_std(params: ModelParams, images, which: str = "projection") -> float:
    """Mean over features of the per-feature standard deviation across ``images``."""
    return float(embed(params, images, which=which).std(axis=0).mean())


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    valid = {f.name for f in fields(TrainConfig)}
    bad = set(kw) - valid
    if bad:
        raise ConfigError(f"unknown TrainConfig fields {sorted(bad)}")
    return replace(config, **kw)
