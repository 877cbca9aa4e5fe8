"""Squeeze-and-excitation block and a small dual-head backbone."""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autodiff import (
    Tape,
    Tensor,
    add_bias,
    as_tensor,
    channel_scale,
    conv2d,
    global_avg_pool,
    matmul,
    relu,
    reshape,
    sigmoid,
    transpose,
)
from .errors import ContractError, DimensionError, FormatError

logger = logging.getLogger("ComboLabModel")

INIT_SCHEME = "he_normal"
CONV_KERNEL = 3
CHECKPOINT_MAGIC = b"CLCK"
CHECKPOINT_VERSION = 1

Forward = Callable[..., Tuple[Tensor, Optional[Tensor]]]


class SEBlockConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: int = Field(..., ge=1)
    reduction: int = Field(16, ge=1)

    @property
    def hidden(self) -> int:
        """Bottleneck width C/r, floored, at least 1."""
        return max(self.channels // self.reduction, 1)


class BackboneConfig(BaseModel):
    """Stack of dense (flat input) or 3x3 conv (C0×H×W input) stages.

    ``se_after_stage`` defaults to an SE block after every stage. A missing
    ``input_shape`` is filled from the dataset by the trainer.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_shape: Optional[Tuple[int, ...]] = None
    stage_widths: Tuple[int, ...] = (64, 32)
    se_after_stage: Optional[Tuple[bool, ...]] = None
    reduction: int = Field(16, ge=1)
    num_classes: int = Field(5, ge=2)
    dual_head: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "BackboneConfig":
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage_widths must be a non-empty list of positive widths")
        if self.se_after_stage is not None and len(self.se_after_stage) != len(self.stage_widths):
            raise ValueError("se_after_stage needs one flag per stage ({0}), got {1}".format(
                len(self.stage_widths), len(self.se_after_stage)))
        if self.input_shape is not None:
            if len(self.input_shape) not in (1, 3) or any(d < 1 for d in self.input_shape):
                raise ValueError("input_shape must be (D,) or (C, H, W) with positive extents")
        return self

    @classmethod
    def reference(cls, num_classes: int = 5) -> "BackboneConfig":
        """Widths at the scale of a 50-layer SE-ResNeXt trunk (for size accounting)."""
        return cls(input_shape=(3, 224, 224), stage_widths=(256, 512, 1024, 2048),
                   reduction=16, num_classes=num_classes)

    @property
    def se_flags(self) -> Tuple[bool, ...]:
        if self.se_after_stage is None:
            return (True,) * len(self.stage_widths)
        return self.se_after_stage

    @property
    def is_image(self) -> bool:
        return self.input_shape is not None and len(self.input_shape) == 3

    def with_input_shape(self, shape: Tuple[int, ...]) -> "BackboneConfig":
        return BackboneConfig.model_validate({**self.model_dump(), "input_shape": tuple(shape)})


# -- squeeze and excitation -------------------------------------------------

def se_squeeze(u) -> Tensor:
    """z_c = mean of u_c over its H×W map."""
    return global_avg_pool(u)


def se_excite(z, w1, w2) -> Tensor:
    """s = sigmoid(W2 · relu(W1 · z)) for z of shape [C] or [N×C]."""
    z, w1, w2 = as_tensor(z), as_tensor(w1), as_tensor(w2)
    if z.ndim not in (1, 2):
        raise DimensionError("se_excite", z.shape)
    channels = z.shape[-1]
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != channels or w2.shape != (channels, w1.shape[0]):
        raise DimensionError("se_excite", z.shape, w1.shape, w2.shape)
    rows = z if z.ndim == 2 else reshape(z, (1, channels))
    hidden = relu(matmul(rows, transpose(w1)))
    s = sigmoid(matmul(hidden, transpose(w2)))
    return s if z.ndim == 2 else reshape(s, (channels,))


def se_rescale(u, s) -> Tensor:
    """x_c = s_c · u_c"""
    return channel_scale(u, s)


def se_block(u, w1, w2) -> Tensor:
    return se_rescale(u, se_excite(se_squeeze(u), w1, w2))


# -- parameters -------------------------------------------------------------

@dataclass
class Parameters:
    """Named weight arrays of one backbone instance."""

    tensors: Dict[str, np.ndarray]
    config: BackboneConfig
    init_scheme: str = INIT_SCHEME
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def bind(self, tape: Tape) -> Dict[str, Tensor]:
        """Fresh leaf tensors on ``tape`` so a backward sweep fills their grads."""
        return {name: tape.watch(Tensor(arr)) for name, arr in self.tensors.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(arr, copy=False) for name, arr in self.tensors.items()}

    def copy(self) -> "Parameters":
        return Parameters({n: a.copy() for n, a in self.tensors.items()}, self.config, self.init_scheme, self.seed)


def _stage_shapes(cfg: BackboneConfig) -> Dict[str, Tuple[int, ...]]:
    if cfg.input_shape is None:
        raise ContractError("backbone input_shape is not set")
    shapes: Dict[str, Tuple[int, ...]] = {}
    fan = cfg.input_shape[0]
    for i, (width, with_se) in enumerate(zip(cfg.stage_widths, cfg.se_flags)):
        if cfg.is_image:
            shapes["stage{0}.weight".format(i)] = (width, fan, CONV_KERNEL, CONV_KERNEL)
        else:
            shapes["stage{0}.weight".format(i)] = (fan, width)
        shapes["stage{0}.bias".format(i)] = (width,)
        if with_se:
            hidden = SEBlockConfig(channels=width, reduction=cfg.reduction).hidden
            shapes["stage{0}.se.w1".format(i)] = (hidden, width)
            shapes["stage{0}.se.w2".format(i)] = (width, hidden)
        fan = width
    return shapes


def parameter_shapes(cfg: BackboneConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes, without allocating anything."""
    shapes = _stage_shapes(cfg)
    features = cfg.stage_widths[-1]
    shapes["head.reg.weight"] = (features, 1)
    shapes["head.reg.bias"] = (1,)
    if cfg.dual_head:
        shapes["head.cls.weight"] = (features, cfg.num_classes)
        shapes["head.cls.bias"] = (cfg.num_classes,)
    return shapes


def count_parameters(cfg: BackboneConfig) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for s in parameter_shapes(cfg).values()))


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if name.endswith(".se.w1") or name.endswith(".se.w2"):
        return shape[1]
    return shape[0]


def init_parameters(cfg: BackboneConfig) -> Parameters:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / _fan_in(name, shape))
    return Parameters(tensors, cfg, INIT_SCHEME, cfg.seed)


# -- forward ----------------------------------------------------------------

class Backbone:
    """Shared trunk feeding a regression scalar and (optionally) C logits."""

    def __init__(self, cfg: BackboneConfig):
        if cfg.input_shape is None:
            raise ContractError("backbone input_shape is not set")
        self.cfg = cfg
        self.shapes = parameter_shapes(cfg)

    def trunk(self, weights: Mapping[str, Tensor], x: Tensor) -> Tensor:
        cfg = self.cfg
        h = x
        for i, with_se in enumerate(cfg.se_flags):
            prefix = "stage{0}".format(i)
            if cfg.is_image:
                h = relu(add_bias(conv2d(h, weights[prefix + ".weight"]), weights[prefix + ".bias"]))
                if with_se:
                    h = se_block(h, weights[prefix + ".se.w1"], weights[prefix + ".se.w2"])
            else:
                h = relu(add_bias(matmul(h, weights[prefix + ".weight"]), weights[prefix + ".bias"]))
                if with_se:
                    n, width = h.shape
                    gated = se_block(reshape(h, (n, width, 1, 1)), weights[prefix + ".se.w1"], weights[prefix + ".se.w2"])
                    h = reshape(gated, (n, width))
        if cfg.is_image:
            h = global_avg_pool(h)
        return h

    def heads(self, weights: Mapping[str, Tensor], features: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        n = features.shape[0]
        pred = reshape(add_bias(matmul(features, weights["head.reg.weight"]), weights["head.reg.bias"]), (n,))
        if not self.cfg.dual_head:
            return pred, None
        logits = add_bias(matmul(features, weights["head.cls.weight"]), weights["head.cls.bias"])
        return pred, logits

    def forward(self, weights: Mapping[str, Tensor], batch) -> Tuple[Tensor, Optional[Tensor]]:
        x = as_tensor(batch)
        if x.ndim != len(self.cfg.input_shape) + 1 or x.shape[1:] != tuple(self.cfg.input_shape):
            raise DimensionError("backbone forward", x.shape, (-1,) + tuple(self.cfg.input_shape))
        return self.heads(weights, self.trunk(weights, x))


def make_forward(params: Parameters) -> Forward:
    """Forward closure over ``params``; pass ``weights`` to run on tape-bound copies."""
    backbone = Backbone(params.config)

    def forward(batch, weights: Optional[Mapping[str, Tensor]] = None):
        return backbone.forward(weights if weights is not None else params.constants(), batch)

    return forward


def build_backbone(cfg: BackboneConfig) -> Tuple[Parameters, Forward]:
    params = init_parameters(cfg)
    logger.info("Built backbone with {0} parameters ({1} stages, dual_head={2})".format(
        params.count(), len(cfg.stage_widths), cfg.dual_head))
    return params, make_forward(params)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], params: Parameters) -> Path:
    """Header (format version, config echo, seed) then little-endian float64 tensors."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.model_dump(mode="json"),
        "seed": params.seed,
        "init_scheme": params.init_scheme,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in params.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    logger.info("Wrote checkpoint {0}".format(path))
    return path


def load_checkpoint(path: Union[str, Path]) -> Parameters:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a combolab checkpoint (bad magic {0!r})".format(raw[:4]), offset=0)
    if len(raw) < 16:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version {0}".format(version), offset=4)
    offset = 16
    if offset + header_len > len(raw):
        raise FormatError("truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
        config = BackboneConfig.model_validate(header["config"])
        entries = header["tensors"]
    except (ValueError, KeyError) as e:
        raise FormatError("unreadable checkpoint header: {0}".format(e), offset=offset)
    offset += header_len

    tensors: Dict[str, np.ndarray] = {}
    if not isinstance(entries, list):
        raise FormatError("checkpoint header lists no tensors", offset=offset)
    for entry in entries:
        try:
            name = str(entry["name"])
            shape = tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError("malformed tensor entry {0!r}: {1}".format(entry, e), offset=offset)
        if any(d < 0 for d in shape):
            raise FormatError("negative extent in tensor {0} shape {1}".format(name, shape), offset=offset)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise FormatError("truncated tensor {0}".format(name), offset=offset)
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError("{0} trailing bytes after tensors".format(len(raw) - offset), offset=offset)

    expected = parameter_shapes(config)
    actual = {name: arr.shape for name, arr in tensors.items()}
    if actual != expected:
        raise FormatError("checkpoint tensors do not match its config")
    return Parameters(tensors, config, header.get("init_scheme", INIT_SCHEME), int(header.get("seed", 0)))
