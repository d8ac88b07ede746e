"""U-shaped encoder/decoder shared by both masked branches.

Parameters live in a flat ``dict[str, Tensor]``; the forward functions are
pure and take the dict explicitly, so the two branches of a pair trivially
share weights.  All forward functions take ``N×C×S×S`` batches.

Encoder stage ``i`` (0-based) halves the resolution with a 2×2 stride-2
patch-merging convolution, then applies a residual block of two 3×3
convolutions; with ``attention_enabled`` a single-head spatial-reduction
attention block follows.  The decoder upsamples by nearest neighbour,
concatenates the encoder map of equal resolution when there is one, and
applies two 3×3 convolutions.  Every hidden convolution is followed by a
group normalization when ``norm_groups > 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, List

import numpy as np

from . import numcore as nc
from .errors import ShapeError
from .numcore import Tensor
from .rng import stream

Params = Dict[str, Tensor]


@dataclass
class ModelConfig:
    input_channels: int = 3
    input_size: int = 32
    num_stages: int = 3
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    decoder_channels: int = 16
    embed_dim: int = 128
    attention_enabled: bool = False
    norm_groups: int = 4

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.validate()

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if len(self.stage_channels) != self.num_stages:
            raise ValueError(
                f"stage_channels has {len(self.stage_channels)} entries, expected {self.num_stages}"
            )
        if self.input_size % (2 ** self.num_stages):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{self.num_stages}"
            )
        if min(self.stage_channels + [self.decoder_channels, self.embed_dim, self.input_channels]) < 1:
            raise ValueError("channel counts must be positive")
        if self.norm_groups < 0:
            raise ValueError("norm_groups must be >= 0 (0 disables normalization)")
        if self.norm_groups:
            bad = [c for c in self.stage_channels + [self.decoder_channels] if c % self.norm_groups]
            if bad:
                raise ValueError(f"channel counts {bad} not divisible by norm_groups={self.norm_groups}")

    def stage_sizes(self) -> list[int]:
        return [self.input_size >> (i + 1) for i in range(self.num_stages)]

    def decoder_plan(self) -> list[tuple[int, int, int]]:
        """``(in_channels, skip_channels, out_channels)`` per decoder stage, bottleneck first."""
        plan = []
        c_in = self.stage_channels[-1]
        for j in range(self.num_stages):
            skip_stage = self.num_stages - 2 - j
            skip = self.stage_channels[skip_stage] if skip_stage >= 0 else 0
            out = self.stage_channels[skip_stage] if skip_stage >= 0 else self.decoder_channels
            plan.append((c_in, skip, out))
            c_in = out
        return plan

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class ForwardOutputs:
    reconstruction: Tensor
    embedding: Tensor
    encoder_pyramid: list


def param_shapes(config: ModelConfig, tasks=("segmentation", "classification")) -> dict[str, tuple]:
    """Every parameter name and shape implied by ``config``."""
    shapes: dict[str, tuple] = {}
    c_prev = config.input_channels
    for i, c in enumerate(config.stage_channels):
        p = f"enc{i}"
        shapes[f"{p}.down.w"] = (c, c_prev, 2, 2)
        shapes[f"{p}.down.b"] = (c,)
        for k in (1, 2):
            shapes[f"{p}.res{k}.w"] = (c, c, 3, 3)
            shapes[f"{p}.res{k}.b"] = (c,)
        if config.attention_enabled:
            for proj in ("q", "k", "v", "o"):
                shapes[f"{p}.attn.{proj}"] = (c, c)
        c_prev = c
    for j, (c_in, skip, out) in enumerate(config.decoder_plan()):
        p = f"dec{j}"
        shapes[f"{p}.conv1.w"] = (out, c_in + skip, 3, 3)
        shapes[f"{p}.conv1.b"] = (out,)
        shapes[f"{p}.conv2.w"] = (out, out, 3, 3)
        shapes[f"{p}.conv2.b"] = (out,)
    if config.norm_groups:
        for name in [n[: -len(".w")] for n, shp in shapes.items() if n.endswith(".w") and len(shp) == 4]:
            shapes[f"{name}.gn.w"] = (shapes[f"{name}.w"][0],)
            shapes[f"{name}.gn.b"] = (shapes[f"{name}.w"][0],)
    shapes["recon.w"] = (config.input_channels, config.decoder_channels, 1, 1)
    shapes["recon.b"] = (config.input_channels,)
    shapes["proj.w"] = (config.stage_channels[-1], config.embed_dim)
    shapes["proj.b"] = (config.embed_dim,)
    if "segmentation" in tasks:
        shapes["seg.w"] = (1, config.decoder_channels, 1, 1)
        shapes["seg.b"] = (1,)
    if "classification" in tasks:
        shapes["cls.w"] = (config.stage_channels[-1], 1)
        shapes["cls.b"] = (1,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> Params:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases; normalization
    scales start at one.

    Each tensor draws from its own name-derived stream, so adding a head never
    perturbs the others.
    """
    config.validate()
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gn.w"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / _fan_in(name, shape))
            gen = stream(seed, "init", name).numpy()
            data = gen.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _conv(x: Tensor, params: Params, prefix: str, stride: int = 1, padding: int = 1) -> Tensor:
    return nc.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=stride, padding=padding)


def _conv_norm(x: Tensor, params: Params, config: ModelConfig, prefix: str, stride: int = 1,
               padding: int = 1) -> Tensor:
    y = _conv(x, params, prefix, stride, padding)
    if config.norm_groups:
        y = nc.group_norm(y, config.norm_groups, params[f"{prefix}.gn.w"], params[f"{prefix}.gn.b"])
    return y


def _attention(x: Tensor, params: Params, prefix: str) -> Tensor:
    # single head; keys/values come from a 2x average-pooled copy when the map allows it
    n, c, h, w = x.shape
    tokens = nc.transpose(nc.reshape(x, (n, c, h * w)), (0, 2, 1))
    reduced = nc.avg_pool(x, 2) if h % 2 == 0 and w % 2 == 0 and h > 1 else x
    m = reduced.shape[2] * reduced.shape[3]
    kv = nc.transpose(nc.reshape(reduced, (n, c, m)), (0, 2, 1))

    def proj(t: Tensor, name: str) -> Tensor:
        rows = t.shape[1]
        flat = nc.reshape(t, (n * rows, c))
        return nc.reshape(nc.matmul(flat, params[f"{prefix}.attn.{name}"]), (n, rows, c))

    q, k, v = proj(tokens, "q"), proj(kv, "k"), proj(kv, "v")
    attn = nc.softmax(nc.matmul(q, nc.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c)), axis=-1)
    out = proj(nc.matmul(attn, v), "o")
    out = nc.reshape(nc.transpose(out, (0, 2, 1)), (n, c, h, w))
    return x + out


def _check_input(x: Tensor, config: ModelConfig) -> None:
    expected = (config.input_channels, config.input_size, config.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected N×{expected}, got {x.shape}")


def encode(x: Tensor, params: Params, config: ModelConfig) -> list[Tensor]:
    """Feature pyramid, one map per stage, finest first."""
    _check_input(x, config)
    pyramid = []
    h = x
    for i in range(config.num_stages):
        p = f"enc{i}"
        h = nc.relu(_conv_norm(h, params, config, f"{p}.down", stride=2, padding=0))
        r = nc.relu(_conv_norm(h, params, config, f"{p}.res1"))
        r = _conv_norm(r, params, config, f"{p}.res2")
        h = nc.relu(h + r)
        if config.attention_enabled:
            h = _attention(h, params, p)
        pyramid.append(h)
    return pyramid


def decode(pyramid: list[Tensor], params: Params, config: ModelConfig) -> Tensor:
    """Full-resolution ``N×decoder_channels×S×S`` map from an encoder pyramid."""
    if len(pyramid) != config.num_stages:
        raise ShapeError(f"pyramid has {len(pyramid)} stages, config expects {config.num_stages}")
    for i, (fm, size) in enumerate(zip(pyramid, config.stage_sizes())):
        if fm.shape[1:] != (config.stage_channels[i], size, size):
            raise ShapeError(f"pyramid stage {i} has shape {fm.shape}")
    h = pyramid[-1]
    for j, (_, skip, _) in enumerate(config.decoder_plan()):
        h = nc.upsample_nearest(h, 2)
        if skip:
            h = nc.concat_channels(h, pyramid[config.num_stages - 2 - j])
        h = nc.relu(_conv_norm(h, params, config, f"dec{j}.conv1"))
        h = nc.relu(_conv_norm(h, params, config, f"dec{j}.conv2"))
    return h


def reconstruct_head(decoded: Tensor, params: Params) -> Tensor:
    return nc.sigmoid(_conv(decoded, params, "recon", padding=0))


def project_head(bottleneck: Tensor, params: Params) -> Tensor:
    """Global average pool, flatten, linear; no nonlinearity."""
    return nc.linear(nc.global_avg_pool(bottleneck), params["proj.w"], params["proj.b"])


def task_head(features: Tensor, params: Params, task: str) -> Tensor:
    """Segmentation: ``N×1×S×S`` logits from the decoded map.
    Classification: ``N`` logits from the bottleneck."""
    if task == "segmentation":
        return _conv(features, params, "seg", padding=0)
    if task == "classification":
        logits = nc.linear(nc.global_avg_pool(features), params["cls.w"], params["cls.b"])
        return nc.reshape(logits, (features.shape[0],))
    raise ValueError(f"unknown task {task!r}")


def forward(x: Tensor, params: Params, config: ModelConfig) -> ForwardOutputs:
    pyramid = encode(x, params, config)
    recon = reconstruct_head(decode(pyramid, params, config), params)
    return ForwardOutputs(recon, project_head(pyramid[-1], params), pyramid)


def task_forward(x: Tensor, params: Params, config: ModelConfig, task: str) -> Tensor:
    pyramid = encode(x, params, config)
    if task == "classification":
        return task_head(pyramid[-1], params, task)
    return task_head(decode(pyramid, params, config), params, task)


TASK_PARAM_PREFIXES = {
    "pretrain": ("enc", "dec", "recon", "proj"),
    "segmentation": ("enc", "dec", "seg"),
    "classification": ("enc", "cls"),
}


def trainable_names(params: Params, phase: str) -> list[str]:
    """Parameter names that receive gradients in a given phase."""
    prefixes = TASK_PARAM_PREFIXES[phase]
    return [n for n in params if n.split(".")[0].rstrip("0123456789") in prefixes]
