"""End-to-end wiring, multi-task loss, optimisation and checkpoints."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .decoder import FinalHeads, InvPTDecoder
from .encoder import ConfigError, Encoder, EncoderConfig, TapAligner
from .nn import Module
from .prelim import PrelimDecoders, TaskSpec
from .synthdata import SyntheticDataset, collate
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)


def default_tasks() -> list[TaskSpec]:
    return [
        TaskSpec("semseg", "discrete", 5),
        TaskSpec("depth", "continuous", 1),
        TaskSpec("boundary", "discrete", 2),
    ]


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    poly_power: float = 0.9


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (128, 128)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tasks: list[TaskSpec] = field(default_factory=default_tasks)
    c0: int = 64
    cd: int = 64
    num_stages: int = 3
    amp: bool = True
    efa: tuple[bool, bool, bool] = (True, True, True)
    intermediate_weight: float = 1.0
    ignore_index: int = 255
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    @property
    def grid(self) -> tuple[int, int]:
        p = self.encoder.patch_size
        return self.image_size[0] // p, self.image_size[1] // p

    def validate(self) -> None:
        self.encoder.validate()
        p = self.encoder.patch_size
        if self.image_size[0] % p or self.image_size[1] % p:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {p}")
        if not self.tasks:
            raise ConfigError("at least one task required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names {names}")
        for t in self.tasks:
            t.validate()
        if len(self.efa) != 3:
            raise ConfigError("efa needs one switch per stage (3)")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")
        from .decoder import plan_stages

        plan_stages(len(self.tasks), *self.grid, self.c0, self.num_stages)
        out_h = self.grid[0] * 2 ** (self.num_stages - 1)
        if self.image_size[0] % out_h or self.image_size[1] % (self.grid[1] * 2 ** (self.num_stages - 1)):
            raise ConfigError("image size must be a multiple of the decoder output resolution")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "encoder" in d:
            d["encoder"] = _build(EncoderConfig, d["encoder"])
        if "optim" in d:
            o = _build(OptimConfig, d["optim"])
            o.betas = tuple(o.betas)
            d["optim"] = o
        if "tasks" in d:
            d["tasks"] = [_build(TaskSpec, t) for t in d["tasks"]]
        for key in ("image_size", "efa"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _build(klass, d):
    if isinstance(d, klass):
        return d
    known = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    return klass(**d)


class InvPTModel(Module):
    """Encoder -> preliminary decoders -> inverted-pyramid decoder -> task heads."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = Rng(cfg.seed)
        T = len(cfg.tasks)
        ce = cfg.encoder.embed_dim
        self.encoder = Encoder(cfg.encoder, cfg.grid, rng)
        stages = [s for s in range(cfg.num_stages) if cfg.efa[s]]
        self.aligner = TapAligner(ce, stages, rng)
        self.prelim = PrelimDecoders(cfg.tasks, ce, cfg.cd, cfg.c0, rng)
        self.decoder = InvPTDecoder(T, *cfg.grid, cfg.c0, ce, rng, cfg.num_stages, cfg.amp, cfg.efa)
        self.heads = FinalHeads(cfg.tasks, self.decoder.plans[-1].work_channels, rng)
        self.name_parameters()

    def forward(self, images) -> dict[str, dict[str, Tensor]]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        enc = self.encoder(x)
        prelim, fc = self.prelim(enc.final)
        taps = [
            self.aligner(enc, s) if self.cfg.efa[s] else None for s in range(self.cfg.num_stages)
        ]
        feats = self.decoder(fc, taps)
        final = self.heads(feats, tuple(x.shape[2:]))
        self.last_encoder_output = enc
        self.last_sequence = fc
        return {"prelim": prelim, "final": final}

    def predict(self, images) -> dict[str, np.ndarray]:
        """Eval-mode final predictions as arrays (class probabilities for discrete tasks)."""
        was = self.training
        self.eval()
        try:
            with tn.no_grad():
                out = self.forward(images)["final"]
        finally:
            self.train(was)
        res = {}
        for t in self.cfg.tasks:
            arr = out[t.name].data
            if t.kind == "discrete":
                z = arr - arr.max(axis=1, keepdims=True)
                e = np.exp(z)
                arr = e / e.sum(axis=1, keepdims=True)
            res[t.name] = arr
        return res


def task_loss(pred: Tensor, label: np.ndarray, spec: TaskSpec, ignore_index: int = 255) -> Tensor:
    h, w = label.shape[-2:]
    if pred.shape[2] != h:
        factor = h // pred.shape[2]
        if factor * pred.shape[2] != h or factor * pred.shape[3] != w:
            raise tn.DimensionError(f"cannot upsample {pred.shape[2:]} to label size {(h, w)}")
        pred = tn.bilinear_upsample(pred, factor)
    if spec.kind == "discrete":
        return tn.cross_entropy(pred, label, ignore_index)
    return tn.l1_loss(pred, label)


def multitask_loss(outputs, labels, tasks: list[TaskSpec], intermediate_weight: float = 1.0,
                   ignore_index: int = 255) -> tuple[Tensor, dict[str, float]]:
    """Sum over tasks of w_t * (intermediate_weight * loss(P_t up) + loss(final P_t))."""
    total = None
    parts = {}
    for t in tasks:
        lp = task_loss(outputs["prelim"][t.name], labels[t.name], t, ignore_index)
        lf = task_loss(outputs["final"][t.name], labels[t.name], t, ignore_index)
        lt = tn.add(tn.scale(lp, intermediate_weight), lf)
        parts[t.name] = lt.item()
        lt = tn.scale(lt, t.loss_weight)
        total = lt if total is None else tn.add(total, lt)
    return total, parts


def poly_lr(base: float, it: int, iters: int, power: float = 0.9) -> float:
    if iters <= 0:
        return base
    return base * max(0.0, 1.0 - it / iters) ** power


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        theta = p.data
        if weight_decay:
            theta = theta - lr * weight_decay * theta
        p.data = (theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class NonFiniteLoss(ArithmeticError):
    pass


class Trainer:
    def __init__(self, model: InvPTModel, iters: int, batch_size: int = 2, seed: int | None = None):
        self.model = model
        self.iters = iters
        self.batch_size = batch_size
        self.state = AdamState()
        self.iteration = 0
        self.seed = model.cfg.seed if seed is None else seed

    def lr(self, it: int | None = None) -> float:
        o = self.model.cfg.optim
        return poly_lr(o.lr, self.iteration if it is None else it, self.iters, o.poly_power)

    def train_step(self, images: np.ndarray, labels: dict[str, np.ndarray]) -> dict[str, float]:
        cfg = self.model.cfg
        self.model.train()
        tn.reset_tape()
        self.model.zero_grad()
        out = self.model(images)
        loss, parts = multitask_loss(out, labels, cfg.tasks, cfg.intermediate_weight, cfg.ignore_index)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLoss(f"non-finite loss {value} at iteration {self.iteration}")
        tn.backward(loss)
        tn.reset_tape()
        params = dict(self.model.named_parameters())
        lr = self.lr()
        o = cfg.optim
        adam_step(params, {n: p.grad for n, p in params.items()}, self.state, lr, o.betas, o.eps, o.weight_decay)
        row = {"iter": self.iteration, "lr": lr, "loss_total": value}
        row.update({f"loss_{k}": v for k, v in parts.items()})
        self.iteration += 1
        return row

    def fit(self, data, iters: int | None = None, log_path: str | None = None,
            ckpt_dir: str | None = None, ckpt_every: int = 0) -> list[dict[str, float]]:
        """Train on a dataset (or a fixed list of samples) until ``self.iters``."""
        samples = data.split("train") if isinstance(data, SyntheticDataset) else list(data)
        stop = self.iters if iters is None else min(self.iters, self.iteration + iters)
        rows = []
        writer = fh = None
        if log_path:
            fresh = not os.path.exists(log_path) or self.iteration == 0
            fh = open(log_path, "w" if fresh else "a", newline="")
            names = ["iter", "lr", "loss_total"] + [f"loss_{t.name}" for t in self.model.cfg.tasks]
            writer = csv.DictWriter(fh, fieldnames=names)
            if fresh:
                writer.writeheader()
        try:
            while self.iteration < stop:
                bs = min(self.batch_size, len(samples))
                # batch choice depends only on (seed, iteration), so a resumed run picks the same batches
                pick = np.random.default_rng([self.seed, 1, self.iteration])
                idx = pick.choice(len(samples), size=bs, replace=False) if bs < len(samples) else range(bs)
                images, labels = collate([samples[i] for i in idx], self.model.cfg.tasks)
                row = self.train_step(images, labels)
                rows.append(row)
                if writer:
                    writer.writerow(row)
                if ckpt_dir and ckpt_every and self.iteration % ckpt_every == 0:
                    save_checkpoint(self.model, ckpt_dir, self.iteration, self.state)
        finally:
            if fh:
                fh.close()
        return rows


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.json"
BLOB = "weights.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: InvPTModel, path: str, iteration: int = 0, state: AdamState | None = None) -> None:
    """Write ``manifest.json`` and a little-endian ``weights.bin`` in manifest order."""
    os.makedirs(path, exist_ok=True)
    records = [(n, "param", p.data) for n, p in model.named_parameters()]
    records += [(n, "buffer", b.data) for n, b in model.named_buffers()]
    if state is not None:
        records += [(n, "adam_m", a) for n, a in state.m.items()]
        records += [(n, "adam_v", a) for n, a in state.v.items()]
    entries, offset = [], 0
    with open(os.path.join(path, BLOB), "wb") as fh:
        for name, kind, arr in records:
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            fh.write(le.tobytes())
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "dtype": arr.dtype.name, "offset": offset, "nbytes": le.nbytes})
            offset += le.nbytes
    manifest = {
        "format": "invpt-checkpoint",
        "version": 1,
        "iteration": iteration,
        "adam_step": state.step if state is not None else 0,
        "total_bytes": offset,
        "config": model.cfg.to_dict(),
        "records": entries,
    }
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_manifest(path: str) -> dict:
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    with open(mpath) as fh:
        return json.load(fh)


def load_checkpoint(model: InvPTModel, path: str, state: AdamState | None = None) -> int:
    """Load weights into ``model``; returns the stored iteration counter."""
    manifest = read_manifest(path)
    blob = open(os.path.join(path, BLOB), "rb").read()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"weights.bin has {len(blob)} bytes, manifest expects {manifest['total_bytes']}")
    own = dict(model.named_parameters())
    own.update(model.named_buffers())
    loaded = {}
    for rec in manifest["records"]:
        start, stop = rec["offset"], rec["offset"] + rec["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"record {rec['name']} runs past the end of weights.bin")
        arr = np.frombuffer(blob[start:stop], dtype=np.dtype(rec["dtype"]).newbyteorder("<"))
        arr = arr.reshape(rec["shape"]).astype(rec["dtype"])
        name, kind = rec["name"], rec["kind"]
        if kind in ("param", "buffer"):
            if name not in own:
                raise CheckpointError(f"unknown parameter {name!r}")
            if own[name].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}: model {own[name].shape}, file {arr.shape}")
            loaded[name] = arr
        elif state is not None:
            getattr(state, kind[-1])[name] = arr.copy()
    missing = set(own) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
    for name, arr in loaded.items():
        own[name].data = arr.copy()
    if state is not None:
        state.step = manifest.get("adam_step", 0)
    return int(manifest["iteration"])


def model_from_checkpoint(path: str) -> tuple[InvPTModel, int]:
    cfg = ModelConfig.from_dict(read_manifest(path)["config"])
    model = InvPTModel(cfg)
    it = load_checkpoint(model, path)
    return model, it


def evaluate(model: InvPTModel, samples, batch_size: int = 4) -> dict[str, dict[str, np.ndarray]]:
    """Collect predictions and labels over ``samples``."""
    preds = {t.name: [] for t in model.cfg.tasks}
    labels = {t.name: [] for t in model.cfg.tasks}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        images, lab = collate(chunk, model.cfg.tasks)
        out = model.predict(images)
        for t in model.cfg.tasks:
            preds[t.name].append(out[t.name])
            labels[t.name].append(lab[t.name])
    return {
        "pred": {k: np.concatenate(v) for k, v in preds.items()},
        "label": {k: np.concatenate(v) for k, v in labels.items()},
    }


def timed_forward(model: InvPTModel, images: np.ndarray, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(images)
        best = min(best, time.perf_counter() - t0)
    return best
