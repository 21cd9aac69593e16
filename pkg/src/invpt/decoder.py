"""The inverted-pyramid multi-task decoder.

Feature sequences are ``N x (T*H*W) x C`` tensors laid out task-major: the
``T`` task blocks are contiguous and each block is a row-major flattening of an
``H x W`` map. Stage 0 attends at the encoder resolution; stages 1 and 2 first
double the resolution and halve the channels (UP-Transformer blocks). Key and
value tokens are pooled with kernel ``2**(s+1)`` so every stage attends over the
same ``T*H0*W0/4`` columns, which is what lets attention scores from stage
``s-1`` be upsampled and blended into stage ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .encoder import ConfigError, map_to_tokens
from .nn import Conv2d, ConvBNReLU, LayerNorm, Linear, Module, ModuleDict, ModuleList
from .tensor import DimensionError, Parameter, Rng, Tensor


@dataclass
class MultiTaskSeq:
    data: Tensor
    T: int
    H: int
    W: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] != self.T * self.H * self.W:
            raise DimensionError(
                f"sequence of shape {self.data.shape} does not hold {self.T} tasks of {self.H}x{self.W}"
            )

    @property
    def C(self) -> int:
        return self.data.shape[2]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    def maps(self) -> list[Tensor]:
        return seq_to_maps(self)


def seq_to_maps(seq: MultiTaskSeq) -> list[Tensor]:
    """Split into T task blocks and reshape each to ``N x C x H x W``."""
    n = seq.data.shape[0]
    x = tn.reshape(seq.data, (n, seq.T, seq.H, seq.W, seq.C))
    blocks = tn.split(x, 1, seq.T) if seq.T > 1 else [x]
    return [tn.permute(tn.reshape(b, (n, seq.H, seq.W, seq.C)), (0, 3, 1, 2)) for b in blocks]


def flac(maps: list[Tensor]) -> MultiTaskSeq:
    """Flatten each task map and concatenate along the token axis."""
    _, _, h, w = maps[0].shape
    tokens = [map_to_tokens(m) for m in maps]
    data = tokens[0] if len(tokens) == 1 else tn.concat(tokens, axis=1)
    return MultiTaskSeq(data, len(maps), h, w)


def seq_to_stack(seq: MultiTaskSeq) -> Tensor:
    """Task maps stacked on the batch axis: ``(N*T) x C x H x W``, n-major."""
    n = seq.data.shape[0]
    x = tn.reshape(seq.data, (n, seq.T, seq.H, seq.W, seq.C))
    return tn.reshape(tn.permute(x, (0, 1, 4, 2, 3)), (n * seq.T, seq.C, seq.H, seq.W))


def stack_to_seq(x: Tensor, T: int) -> MultiTaskSeq:
    nt, c, h, w = x.shape
    n = nt // T
    y = tn.permute(tn.reshape(x, (n, T, c, h, w)), (0, 1, 3, 4, 2))
    return MultiTaskSeq(tn.reshape(y, (n, T * h * w, c)), T, h, w)


@dataclass(frozen=True)
class StagePlan:
    """Per-stage geometry derived from (T, H0, W0, C0)."""

    s: int
    T: int
    H0: int
    W0: int
    C0: int
    k_c: int = 3

    @property
    def k_s(self) -> int:
        return 2 ** (self.s + 1)

    @property
    def in_hw(self) -> tuple[int, int]:
        f = 2 ** max(self.s - 1, 0)
        return self.H0 * f, self.W0 * f

    @property
    def in_channels(self) -> int:
        return self.C0 // 2 ** max(self.s - 1, 0)

    @property
    def work_hw(self) -> tuple[int, int]:
        return self.H0 * 2**self.s, self.W0 * 2**self.s

    @property
    def work_channels(self) -> int:
        """C'_s: channel width of attention and the stage output."""
        return self.C0 // 2**self.s

    @property
    def q_hw(self) -> tuple[int, int]:
        h, w = self.work_hw
        return h // 2, w // 2

    @property
    def kv_hw(self) -> tuple[int, int]:
        h, w = self.work_hw
        return h // self.k_s, w // self.k_s

    @property
    def q_rows(self) -> int:
        return self.T * self.q_hw[0] * self.q_hw[1]

    @property
    def kv_tokens(self) -> int:
        return self.T * self.kv_hw[0] * self.kv_hw[1]

    @property
    def work_rows(self) -> int:
        return self.T * self.work_hw[0] * self.work_hw[1]


def plan_stages(T: int, H0: int, W0: int, C0: int, num_stages: int = 3) -> list[StagePlan]:
    if not 1 <= num_stages <= 3:
        raise ConfigError(f"num_stages must be in 1..3, got {num_stages}")
    if T < 1:
        raise ConfigError("need at least one task")
    if H0 < 2 or W0 < 2 or H0 % 2 or W0 % 2:
        raise ConfigError(f"H0, W0 must be even and >= 2, got {H0}x{W0}")
    div = 2 ** (num_stages - 1)
    if C0 < div or C0 % div:
        raise ConfigError(f"C0={C0} must be divisible by {div} for {num_stages} stages")
    return [StagePlan(s, T, H0, W0, C0) for s in range(num_stages)]


def reshape_and_up(seq: MultiTaskSeq, blocks: ModuleList) -> MultiTaskSeq:
    """Per task: reshape to a map, bilinear 2x, Conv-BN-ReLU; then re-flatten."""
    maps = seq.maps()
    if len(blocks) != len(maps):
        raise DimensionError(f"{len(blocks)} blocks for {len(maps)} task maps")
    return flac([blk(tn.bilinear_upsample2x(m)) for m, blk in zip(maps, blocks)])


def compute_qkv(fp: MultiTaskSeq, plan: StagePlan, q_conv: Conv2d, wq: Linear, wk: Linear, wv: Linear):
    """Q from a stride-2 3x3 conv, K/V from k_s average pooling, each then projected."""
    if (fp.H, fp.W) != plan.work_hw:
        raise DimensionError(f"stage {plan.s} expects working extent {plan.work_hw}, got {(fp.H, fp.W)}")
    if fp.H % plan.k_s or fp.W % plan.k_s:
        raise DimensionError(f"working extent {fp.H}x{fp.W} not divisible by k_s={plan.k_s}")
    stack = seq_to_stack(fp)
    q_in = stack_to_seq(q_conv(stack), fp.T)
    kv_in = stack_to_seq(tn.avg_pool2d(stack, plan.k_s), fp.T)
    return wq(q_in.data), wk(kv_in.data), wv(kv_in.data), q_in, kv_in


def attention_scores(q: Tensor, k: Tensor, c_prime: int) -> Tensor:
    if q.shape[-1] != k.shape[-1] or q.shape[-1] != c_prime:
        raise DimensionError(f"Q/K channel mismatch: {q.shape[-1]}, {k.shape[-1]}, expected {c_prime}")
    return tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(c_prime))


def attention_message(a_prev: Tensor, T: int, hw_prev: tuple[int, int]) -> Tensor:
    """Upsample the previous scores task-wise in row space, columns as channels."""
    n, rows, cols = a_prev.shape
    hp, wp = hw_prev
    if rows != T * hp * wp:
        raise DimensionError(f"previous scores have {rows} rows, expected {T}x{hp}x{wp}")
    x = tn.permute(tn.reshape(a_prev, (n, T, hp, wp, cols)), (0, 1, 4, 2, 3))
    x = tn.bilinear_upsample2x(tn.reshape(x, (n * T, cols, hp, wp)))
    x = tn.permute(tn.reshape(x, (n, T, cols, 2 * hp, 2 * wp)), (0, 1, 3, 4, 2))
    return tn.reshape(x, (n, T * 4 * hp * wp, cols))


def amp(a: Tensor, a_prev: Tensor, alpha1: Tensor, alpha2: Tensor, plan: StagePlan):
    """Blend current scores with the upsampled previous ones; returns (A', M, softmax(A'))."""
    if plan.s < 1:
        raise ConfigError("attention message passing needs a previous stage")
    if a_prev.shape[-1] != a.shape[-1]:
        raise DimensionError(
            f"score column mismatch {a_prev.shape[-1]} vs {a.shape[-1]}: stage geometry is inconsistent"
        )
    qh, qw = plan.q_hw
    msg = attention_message(a_prev, plan.T, (qh // 2, qw // 2))
    a_blend = tn.add(tn.mul(alpha1, a), tn.mul(alpha2, msg))
    return a_blend, msg, tn.softmax_rows(a_blend)


def efa_term(tap: Tensor, conv: Conv2d, T: int) -> Tensor:
    """3x3 conv of the aligned tap, flattened and replicated once per task."""
    tokens = map_to_tokens(conv(tap))
    return tokens if T == 1 else tn.concat([tokens] * T, axis=1)


@dataclass
class StageTrace:
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def shape(self, key: str) -> tuple[int, int]:
        return tuple(self.tensors[key].shape[-2:])


class DecoderStage(Module):
    """Stage 0 transformer block (s=0) or UP-Transformer block (s>=1)."""

    def __init__(self, plan: StagePlan, c_enc: int, rng: Rng, efa: bool = True, use_amp: bool = True):
        self.plan = plan
        c = plan.work_channels
        if plan.s > 0:
            self.up = ModuleList(ConvBNReLU(plan.in_channels, c, rng) for _ in range(plan.T))
        self.efa = Conv2d(c_enc, c, 3, rng) if efa else None
        self.norm = LayerNorm(c)
        self.q_conv = Conv2d(c, c, plan.k_c, rng, stride=2, pad=1)
        self.wq = Linear(c, c, rng, bias=False)
        self.wk = Linear(c, c, rng, bias=False)
        self.wv = Linear(c, c, rng, bias=False)
        self.use_amp = use_amp and plan.s > 0
        if self.use_amp:
            self.alpha1 = Parameter(np.ones(1, dtype=tn.default_dtype()))
            self.alpha2 = Parameter(np.ones(1, dtype=tn.default_dtype()))
        self.out_up = ModuleList(ConvBNReLU(c, c, rng) for _ in range(plan.T))

    def zero_attention_output(self) -> None:
        for blk in self.out_up:
            blk.zero_()

    def forward(self, f: MultiTaskSeq, tap: Tensor | None = None, a_prev: Tensor | None = None):
        plan = self.plan
        tr: dict[str, Tensor] = {"F": f.data}
        if (f.H, f.W) != plan.in_hw or f.C != plan.in_channels or f.T != plan.T:
            raise DimensionError(
                f"stage {plan.s} expects T={plan.T} {plan.in_hw} x {plan.in_channels}, "
                f"got T={f.T} {(f.H, f.W)} x {f.C}"
            )
        f_up = reshape_and_up(f, self.up) if plan.s > 0 else f
        tr["F_up"] = f_up.data
        x = f_up.data
        if self.efa is not None:
            if tap is None:
                raise ConfigError(f"stage {plan.s} has EFA enabled but no encoder tap was given")
            if tuple(tap.shape[2:]) != plan.work_hw:
                raise DimensionError(f"tap extent {tap.shape[2:]} != working extent {plan.work_hw}")
            e = efa_term(tap, self.efa, plan.T)
            tr["E"] = e
            x = tn.add(x, e)
        fp = MultiTaskSeq(self.norm(x), plan.T, *plan.work_hw)
        tr["F_prime"] = fp.data
        q, k, v, _, _ = compute_qkv(fp, plan, self.q_conv, self.wq, self.wk, self.wv)
        tr.update(Q=q, K=k, V=v)
        a = attention_scores(q, k, plan.work_channels)
        tr["A"] = a
        if self.use_amp and a_prev is not None:
            a_blend, msg, a_m = amp(a, a_prev, self.alpha1, self.alpha2, plan)
            tr["M"] = msg
        else:
            a_blend, a_m = a, tn.softmax_rows(a)
        tr.update(A_blend=a_blend, A_m=a_m)
        ctx = MultiTaskSeq(tn.matmul(a_m, v), plan.T, *plan.q_hw)
        out = reshape_and_up(ctx, self.out_up)
        tr["R"] = out.data
        f_next = MultiTaskSeq(tn.add(out.data, fp.data), plan.T, *plan.work_hw)
        tr["F_next"] = f_next.data
        self.last_trace = StageTrace(tr)
        return f_next, a_blend


class StageFusion(Module):
    """Align every stage output to the last stage and refine with one Conv-BN-ReLU."""

    def __init__(self, plans: list[StagePlan], rng: Rng):
        c = plans[-1].work_channels
        self.proj = ModuleList(Conv2d(p.work_channels, c, 1, rng) for p in plans[:-1])
        self.block = ConvBNReLU(c, c, rng)

    def forward(self, outs: list[MultiTaskSeq]) -> list[Tensor]:
        if len(outs) != len(self.proj) + 1:
            raise DimensionError(f"expected {len(self.proj) + 1} stage outputs, got {len(outs)}")
        last = outs[-1]
        acc = seq_to_stack(last)
        for seq, proj in zip(outs[:-1], self.proj):
            acc = tn.add(acc, proj(tn.bilinear_upsample(seq_to_stack(seq), last.H // seq.H)))
        fused = self.block(acc)
        n = last.data.shape[0]
        nt, c, h, w = fused.shape
        x = tn.reshape(fused, (n, last.T, c, h, w))
        blocks = tn.split(x, 1, last.T) if last.T > 1 else [x]
        return [tn.reshape(b, (n, c, h, w)) for b in blocks]


class InvPTDecoder(Module):
    def __init__(self, T: int, H0: int, W0: int, C0: int, c_enc: int, rng: Rng,
                 num_stages: int = 3, use_amp: bool = True, efa=(True, True, True)):
        self.plans = plan_stages(T, H0, W0, C0, num_stages)
        efa = tuple(efa) + (True,) * (3 - len(efa))
        self.stages = ModuleList(DecoderStage(p, c_enc, rng, efa[p.s], use_amp) for p in self.plans)
        self.fusion = StageFusion(self.plans, rng)

    def run_stages(self, f0: MultiTaskSeq, taps: list[Tensor | None]) -> list[MultiTaskSeq]:
        outs = []
        f, a_prev = f0, None
        for stage, tap in zip(self.stages, taps):
            f, a_prev = stage(f, tap, a_prev)
            outs.append(f)
        return outs

    def forward(self, f0: MultiTaskSeq, taps: list[Tensor | None]) -> list[Tensor]:
        return self.fusion(self.run_stages(f0, taps))


class FinalHeads(Module):
    def __init__(self, tasks, c: int, rng: Rng):
        self.heads = ModuleDict({t.name: Conv2d(c, t.out_channels, 1, rng) for t in tasks})

    def forward(self, feats: list[Tensor], out_hw: tuple[int, int]) -> dict[str, Tensor]:
        preds = {}
        for name, feat in zip(self.heads.keys(), feats):
            factor = out_hw[0] // feat.shape[2]
            if factor * feat.shape[2] != out_hw[0] or factor * feat.shape[3] != out_hw[1]:
                raise DimensionError(f"cannot upsample {feat.shape[2:]} to {out_hw}")
            preds[name] = tn.bilinear_upsample(self.heads[name](feat), factor)
        return preds
