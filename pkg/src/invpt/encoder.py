"""Toy task-shared ViT-style encoder with three intermediate taps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .nn import LayerNorm, Linear, Module, ModuleDict, ModuleList, TransposedConv2d
from .tensor import DimensionError, Parameter, Rng, Tensor


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 6
    mlp_ratio: int = 2
    tap_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.tap_layers is None and self.depth >= 3:
            step = self.depth / 3
            self.tap_layers = tuple(int(round(step * i)) for i in (1, 2, 3))
        if self.tap_layers is not None:
            self.tap_layers = tuple(int(t) for t in self.tap_layers)

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1 to provide taps")
        taps = self.tap_layers
        if taps is None or len(taps) != 3:
            raise ConfigError(f"exactly 3 tap layers required, got {taps}")
        if not all(a < b for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > self.depth:
            raise ConfigError(f"tap layers {taps} must be strictly increasing within 1..{self.depth}")
        if self.patch_size < 1 or self.embed_dim < 1 or self.mlp_ratio < 1:
            raise ConfigError("patch_size, embed_dim and mlp_ratio must be positive")


@dataclass
class EncoderOutput:
    final: Tensor  # N x C_e x H0 x W0
    taps: list[Tensor] = field(default_factory=list)  # 3 x (N x H0*W0 x C_e), shallow first
    grid: tuple[int, int] = (0, 0)
    attention: list[np.ndarray] = field(default_factory=list)

    def tap_map(self, i: int) -> Tensor:
        return tokens_to_map(self.taps[i], *self.grid)


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    n, l, c = tokens.shape
    if l != h * w:
        raise DimensionError(f"{l} tokens cannot form a {h}x{w} map")
    return tn.permute(tn.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return tn.reshape(tn.permute(x, (0, 2, 3, 1)), (n, h * w, c))


class EncoderLayer(Module):
    """Pre-norm single-head attention + 2-layer MLP, both residual."""

    def __init__(self, dim: int, mlp_ratio: int, rng: Rng):
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def forward(self, x: Tensor, record: list | None = None) -> Tensor:
        c = x.shape[-1]
        q, k, v = tn.split(self.qkv(self.norm1(x)), -1, 3)
        attn = tn.softmax_rows(tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(c)))
        if record is not None:
            record.append(attn.data)
        x = tn.add(x, self.proj(tn.matmul(attn, v)))
        return tn.add(x, self.fc2(tn.relu(self.fc1(self.norm2(x)))))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, grid: tuple[int, int], rng: Rng):
        cfg.validate()
        self.cfg = cfg
        self.grid = grid
        p, c = cfg.patch_size, cfg.embed_dim
        self.patch_weight = Parameter(rng.normal((c, 3, p, p), math.sqrt(1.0 / (3 * p * p))))
        self.patch_bias = Parameter(np.zeros(c, dtype=tn.default_dtype()))
        self.pos_embed = Parameter(rng.normal((1, grid[0] * grid[1], c), 0.02))
        self.layers = ModuleList(EncoderLayer(c, cfg.mlp_ratio, rng) for _ in range(cfg.depth))
        self.norm = LayerNorm(c)

    def patch_embed(self, image: Tensor) -> Tensor:
        n, _, h, w = image.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
        if (h // p, w // p) != self.grid:
            raise DimensionError(f"image grid {(h // p, w // p)} differs from configured {self.grid}")
        x = tn.conv2d(image, self.patch_weight, self.patch_bias, stride=p, pad=0)
        return tn.add(map_to_tokens(x), self.pos_embed)

    def forward(self, image: Tensor, record_attention: bool = False) -> EncoderOutput:
        x = self.patch_embed(image)
        taps = []
        attn: list[np.ndarray] | None = [] if record_attention else None
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x, attn)
            if i in self.cfg.tap_layers:
                taps.append(x)
        final = tokens_to_map(self.norm(x), *self.grid)
        return EncoderOutput(final, taps, self.grid, attn or [])


# Tap -> decoder stage. Shallowest tap feeds the highest-resolution stage.
DEFAULT_TAP_FOR_STAGE = {0: 2, 1: 1, 2: 0}


class TapAligner(Module):
    """Upsamples encoder taps to each decoder stage's working resolution."""

    def __init__(self, dim: int, stages, rng: Rng, tap_for_stage: dict[int, int] | None = None):
        self.tap_for_stage = dict(tap_for_stage or DEFAULT_TAP_FOR_STAGE)
        ups = {}
        for s in stages:
            if s not in (0, 1, 2):
                raise ConfigError(f"unknown decoder stage {s}")
            if s > 0:
                ups[f"stage{s}"] = TransposedConv2d(dim, dim, 2**s, rng)
        self.up = ModuleDict(ups)

    def forward(self, enc: EncoderOutput, stage: int) -> Tensor:
        return align_tap(enc.tap_map(self.tap_for_stage[stage]), stage, self)


def align_tap(tap_map: Tensor, stage: int, aligner: TapAligner) -> Tensor:
    """Identity at stage 0, transposed conv k=stride=2 at stage 1, k=stride=4 at stage 2."""
    if stage == 0:
        return tap_map
    if stage not in (1, 2) or f"stage{stage}" not in aligner.up:
        raise ConfigError(f"no tap alignment for stage {stage}")
    return aligner.up[f"stage{stage}"](tap_map)
