"""Small float64 encoders with projector/predictor heads, exact gradients and EMA teachers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, FormatError, NumericError

DTYPE = torch.float64
_PARAM_MAGIC = "gps-params-1"


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "small_conv"
    hidden_widths: tuple = (16, 32)
    embed_dim: int = 32
    projector_widths: tuple = (128, 128)
    predictor_widths: Optional[tuple] = None
    activation: str = "relu"
    image_hw: int = 16
    channels: int = 3
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        for name in ("hidden_widths", "projector_widths", "predictor_widths"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(int(v) for v in val))
        if self.arch not in ("mlp", "small_conv"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        widths = list(self.hidden_widths) + list(self.projector_widths) + list(self.predictor_widths or ())
        if any(w < 1 for w in widths) or not self.projector_widths:
            raise ConfigError("layer widths must be positive and the projector non-empty")
        if self.arch == "small_conv" and not 2 <= len(self.hidden_widths) <= 3:
            raise ConfigError("small_conv takes 2 or 3 conv widths")
        if self.predictor_widths is not None and self.predictor_widths[-1] != self.projector_widths[-1]:
            raise ConfigError("predictor must end at the projection width")

    @property
    def projection_dim(self) -> int:
        return self.projector_widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def layer_shapes(config: EncoderConfig) -> dict[str, tuple]:
    """Ordered parameter names and shapes for ``config``."""
    shapes: dict[str, tuple] = {}
    if config.arch == "mlp":
        fan = config.image_hw * config.image_hw * config.channels
        for i, w in enumerate(config.hidden_widths):
            shapes[f"backbone.{i}.weight"] = (w, fan)
            shapes[f"backbone.{i}.bias"] = (w,)
            fan = w
    else:
        fan = config.channels
        for i, w in enumerate(config.hidden_widths):
            shapes[f"conv.{i}.weight"] = (w, fan, 3, 3)
            shapes[f"conv.{i}.bias"] = (w,)
            fan = w
    shapes["backbone.head.weight"] = (config.embed_dim, fan)
    shapes["backbone.head.bias"] = (config.embed_dim,)
    fan = config.embed_dim
    for i, w in enumerate(config.projector_widths):
        shapes[f"projector.{i}.weight"] = (w, fan)
        shapes[f"projector.{i}.bias"] = (w,)
        fan = w
    for i, w in enumerate(config.predictor_widths or ()):
        shapes[f"predictor.{i}.weight"] = (w, fan)
        shapes[f"predictor.{i}.bias"] = (w,)
        fan = w
    return shapes


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.detach().reshape(-1).numpy() for v in self.tensors.values()])

    def equal(self, other: "ModelParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            torch.equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def init_params(config: EncoderConfig, seed: int = 0, init: str = "random", path=None) -> ModelParams:
    """He-uniform init (biases +-1/sqrt(fan_in)), or weights loaded from a parameter file.

    ``init`` is ``"random"``, ``"from_file"`` (with ``path``) or
    ``"from_file(<path>)"``.
    """
    if init.startswith("from_file(") and init.endswith(")"):
        init, path = "from_file", init[len("from_file("):-1]
    if init == "from_file":
        if path is None:
            raise ConfigError("from_file init needs a path")
        loaded = load_params(path)
        expected = layer_shapes(config)
        got = {k: tuple(v.shape) for k, v in loaded.items()}
        if got != expected:
            raise ConfigError(f"{path}: parameter shapes {got} do not match config {expected}")
        return ModelParams(config, loaded.tensors)
    if init != "random":
        raise ConfigError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    tensors = {}
    shapes = layer_shapes(config)
    for name, shape in shapes.items():
        wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
        fan_in = int(np.prod(wshape[1:]))
        # He-uniform weights keep activation scale through ReLU layers
        bound = np.sqrt(6.0 / fan_in) if name.endswith("weight") else 1.0 / np.sqrt(fan_in)
        tensors[name] = torch.from_numpy(rng.uniform(-bound, bound, size=shape))
    return ModelParams(config, tensors)


def save_params(params: ModelParams, path) -> None:
    """JSON metadata line followed by the raw little-endian float64 payload."""
    meta = {
        "format": _PARAM_MAGIC,
        "config": params.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(meta).encode() + b"\n")
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v.detach().numpy(), dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    try:
        meta = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable parameter header") from exc
    if not sep or meta.get("format") != _PARAM_MAGIC:
        raise FormatError(f"{path}: not a parameter file")
    total = sum(int(np.prod(t["shape"])) for t in meta["tensors"])
    if len(payload) != total * 8:
        raise FormatError(f"{path}: expected {total * 8} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8")
    tensors, off = {}, 0
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"]))
        tensors[t["name"]] = torch.from_numpy(values[off:off + n].reshape(t["shape"]).astype(np.float64))
        off += n
    return ModelParams(EncoderConfig(**meta["config"]), tensors)


def _mlp(x: torch.Tensor, params: ModelParams, prefix: str, widths, final_linear: bool) -> torch.Tensor:
    for i in range(len(widths)):
        x = F.linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < len(widths) - 1 or not final_linear:
            x = F.relu(x)
    return x


def as_batch(images, config: Optional[EncoderConfig] = None) -> torch.Tensor:
    """B x H x W x C array-like -> float64 tensor."""
    x = images.to(DTYPE) if isinstance(images, torch.Tensor) else torch.tensor(np.asarray(images), dtype=DTYPE)
    if x.ndim == 3:
        x = x.unsqueeze(-1)
    if config is not None and tuple(x.shape[1:]) != (config.image_hw, config.image_hw, config.channels):
        raise ConfigError(f"images of shape {tuple(x.shape[1:])} do not match config "
                          f"{(config.image_hw, config.image_hw, config.channels)}")
    return x


def backbone(params: ModelParams, images) -> torch.Tensor:
    cfg = params.config
    x = (as_batch(images, cfg) - cfg.input_mean) / cfg.input_std
    if cfg.arch == "mlp":
        x = _mlp(x.reshape(x.shape[0], -1), params, "backbone", cfg.hidden_widths, final_linear=False)
    else:
        x = x.permute(0, 3, 1, 2)
        for i in range(len(cfg.hidden_widths)):
            x = F.relu(F.conv2d(x, params[f"conv.{i}.weight"], params[f"conv.{i}.bias"], stride=2, padding=1))
        x = x.mean(dim=(2, 3))
    return F.linear(x, params["backbone.head.weight"], params["backbone.head.bias"])


def forward(params: ModelParams, images):
    """Return ``(embeddings, projections, predictions)``; predictions is None without a predictor."""
    cfg = params.config
    h = backbone(params, images)
    z = _mlp(h, params, "projector", cfg.projector_widths, final_linear=True)
    p = None
    if cfg.predictor_widths:
        p = _mlp(z, params, "predictor", cfg.predictor_widths, final_linear=True)
    for name, out in (("embedding", h), ("projection", z), ("prediction", p)):
        if out is not None and not torch.isfinite(out).all():
            raise NumericError(f"non-finite {name} output")
    return h, z, p


def embed(params: ModelParams, images, which: str = "embedding", batch_size: int = 512) -> np.ndarray:
    """Gradient-free embeddings as a numpy array (``which``: embedding | projection)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            h, z, _ = forward(params, images[i:i + batch_size])
            out.append((h if which == "embedding" else z).numpy())
    return np.concatenate(out)


def value_and_grad(params: ModelParams, loss_closure: Callable):
    """Evaluate ``loss_closure(params)`` and its exact reverse-mode gradient.

    The closure may return a scalar tensor or any object with a ``total``
    tensor attribute (e.g. a LossReport); that object is returned as is.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    live = ModelParams(params.config, leaves)
    with torch.enable_grad():
        result = loss_closure(live)
        total = getattr(result, "total", result)
        if not isinstance(total, torch.Tensor) or total.ndim != 0:
            raise NumericError("loss closure must produce a scalar tensor")
        if not torch.isfinite(total):
            raise NumericError(f"non-finite loss {float(total.detach())}")
        needs = [k for k in leaves]
        if total.requires_grad:
            grads = torch.autograd.grad(total, [leaves[k] for k in needs], allow_unused=True)
        else:
            grads = [None] * len(needs)
    out = {}
    for k, g in zip(needs, grads):
        g = torch.zeros_like(params[k]) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k}")
        out[k] = g
    return result, ModelParams(params.config, out)


def loss_gradient(params: ModelParams, loss_closure: Callable) -> ModelParams:
    return value_and_grad(params, loss_closure)[1]


@dataclass
class TeacherState:
    params: ModelParams
    momentum: float = 0.99


def ema_update(teacher: ModelParams, student: ModelParams, m: float) -> ModelParams:
    """Return teacher' with t' = m * t + (1 - m) * s for every tensor."""
    if not 0.0 <= m < 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1), got {m}")
    with torch.no_grad():
        return ModelParams(
            teacher.config,
            {k: torch.lerp(t, student[k], 1.0 - m) for k, t in teacher.items()},
        )
