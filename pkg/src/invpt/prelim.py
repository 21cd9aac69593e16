"""Task-specific preliminary decoders and multi-task sequence assembly."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tn
from .decoder import MultiTaskSeq, flac
from .encoder import ConfigError
from .nn import Conv2d, ConvBNReLU, Module, ModuleDict
from .tensor import DimensionError, Rng, Tensor

METRIC_FOR_KIND = {"semseg": "miou", "depth": "rmse", "boundary": "odsf", "saliency": "maxf", "normals": "merr"}


@dataclass
class TaskSpec:
    name: str
    kind: str  # "discrete" | "continuous"
    channels: int  # classes for discrete tasks
    loss_weight: float = 1.0
    metric: str = ""
    lower_is_better: bool = False

    def __post_init__(self):
        if not self.metric:
            self.metric = METRIC_FOR_KIND.get(self.name, "miou" if self.kind == "discrete" else "rmse")
        if self.metric in ("rmse", "merr"):
            self.lower_is_better = True

    def validate(self) -> None:
        if self.kind == "discrete" and self.channels < 2:
            raise ConfigError(f"task {self.name}: discrete tasks need >= 2 classes")
        if self.kind == "continuous" and self.channels < 1:
            raise ConfigError(f"task {self.name}: continuous tasks need >= 1 channel")
        if self.kind not in ("discrete", "continuous"):
            raise ConfigError(f"task {self.name}: unknown kind {self.kind!r}")

    @property
    def out_channels(self) -> int:
        return self.channels


class PrelimHead(Module):
    def __init__(self, c_in: int, c_d: int, c0: int, out: int, rng: Rng):
        self.block1 = ConvBNReLU(c_in, c_d, rng)
        self.block2 = ConvBNReLU(c_d, c_d, rng)
        self.pred = Conv2d(c_d, out, 1, rng)
        self.fuse = Conv2d(c_d + out, c0, 1, rng)

    def forward(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        fd = self.block2(self.block1(feat))
        return fd, self.pred(fd)


class PrelimDecoders(Module):
    def __init__(self, tasks: list[TaskSpec], c_in: int, c_d: int, c0: int, rng: Rng):
        self.task_names = [t.name for t in tasks]
        self.heads = ModuleDict({t.name: PrelimHead(c_in, c_d, c0, t.out_channels, rng) for t in tasks})

    def decode_task(self, feat: Tensor, task: str) -> tuple[Tensor, Tensor]:
        if task not in self.heads:
            raise KeyError(f"unknown task {task!r}")
        return self.heads[task](feat)

    def assemble(self, outputs: dict[str, tuple[Tensor, Tensor]]) -> MultiTaskSeq:
        """Concat F^d_t and P_t on channels, project to C0, flatten, concat tasks in order."""
        missing = [t for t in self.task_names if t not in outputs]
        if missing:
            raise KeyError(f"missing preliminary outputs for {missing}")
        extents = {outputs[t][0].shape[2:] for t in self.task_names}
        if len(extents) != 1:
            raise DimensionError(f"inconsistent spatial extents across tasks: {extents}")
        maps = []
        for t in self.task_names:
            fd, p = outputs[t]
            maps.append(self.heads[t].fuse(tn.concat([fd, p], axis=1)))
        return flac(maps)

    def forward(self, feat: Tensor) -> tuple[dict[str, Tensor], MultiTaskSeq]:
        outs = {t: self.decode_task(feat, t) for t in self.task_names}
        return {t: outs[t][1] for t in self.task_names}, self.assemble(outs)
