"""Procedural multi-task scenes: image, semseg, depth, saliency and boundary labels."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

# Class-coded base colours; index 0 is the background tint.
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.85, 0.15],
        [0.80, 0.30, 0.85],
        [0.15, 0.85, 0.85],
        [0.95, 0.55, 0.10],
    ]
)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    semseg: np.ndarray  # H x W int64, 0 = background
    depth: np.ndarray  # H x W float32 in [0, 1]
    saliency: np.ndarray  # H x W uint8 in {0, 1}
    boundary: np.ndarray  # H x W uint8 in {0, 1}
    seed: int

    def label(self, task: str) -> np.ndarray:
        return getattr(self, task)


def label_boundaries(semseg: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour carrying a different label."""
    b = np.zeros(semseg.shape, bool)
    dv = semseg[1:, :] != semseg[:-1, :]
    dh = semseg[:, 1:] != semseg[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b.astype(np.uint8)


def generate_sample(seed: int, H: int = 128, W: int = 128, num_shapes: int = 4, K: int = 5,
                    noise: float = 0.03) -> Sample:
    """Draw rectangles and ellipses with class-coded colours over a gradient background.

    ``K`` counts semseg classes including background; shapes use classes 1..K-1.
    Saliency marks the pixels of class 1.
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if K > len(PALETTE):
        raise ValueError(f"K must be <= {len(PALETTE)}")
    if num_shapes < 0:
        raise ValueError("num_shapes must be non-negative")
    rng = Rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yn, xn = yy / max(H - 1, 1), xx / max(W - 1, 1)

    semseg = np.zeros((H, W), np.int64)
    angle = rng.uniform(low=0, high=2 * np.pi)
    ramp = np.cos(angle) * xn + np.sin(angle) * yn
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    depth = 0.6 + 0.35 * ramp
    image = PALETTE[0][:, None, None] * (0.7 + 0.3 * ramp)[None]

    for _ in range(num_shapes):
        cls = int(rng.integers(1, K))
        cy, cx = rng.uniform(low=0.15, high=0.85) * H, rng.uniform(low=0.15, high=0.85) * W
        ry = rng.uniform(low=0.1, high=0.25) * H
        rx = rng.uniform(low=0.1, high=0.25) * W
        dy, dx = (yy - cy) / ry, (xx - cx) / rx
        if rng.uniform() < 0.5:
            r2 = dy**2 + dx**2
            mask = r2 <= 1.0
        else:
            r2 = np.maximum(dy**2, dx**2)
            mask = r2 <= 1.0
        base = rng.uniform(low=0.1, high=0.5)
        semseg[mask] = cls
        depth[mask] = base + 0.1 * r2[mask]
        shade = 0.85 + 0.15 * (1.0 - r2[mask])
        image[:, mask] = PALETTE[cls][:, None] * shade[None]

    image = image + rng.normal((3, H, W), noise, np.float64)
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        semseg=semseg,
        depth=np.clip(depth, 0.0, 1.0).astype(np.float32),
        saliency=(semseg == 1).astype(np.uint8),
        boundary=label_boundaries(semseg),
        seed=int(seed),
    )


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint32)[0])


class SyntheticDataset:
    """``n`` deterministic samples; the first 80% of indices form the train split."""

    def __init__(self, seed: int, n: int, H: int = 128, W: int = 128, num_shapes: int = 4, K: int = 5):
        if n < 2:
            raise ValueError("dataset needs at least 2 samples")
        self.seed, self.n, self.H, self.W, self.num_shapes, self.K = seed, n, H, W, num_shapes, K
        n_train = int(n * 0.8)
        self.train_indices = list(range(n_train))
        self.val_indices = list(range(n_train, n))
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, index: int) -> Sample:
        if not 0 <= index < self.n:
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = generate_sample(
                sample_seed(self.seed, index), self.H, self.W, self.num_shapes, self.K
            )
        return self._cache[index]

    def split(self, name: str) -> list[Sample]:
        idx = {"train": self.train_indices, "val": self.val_indices}[name]
        return [self[i] for i in idx]


def dataset(seed: int, n: int, **kwargs) -> SyntheticDataset:
    return SyntheticDataset(seed, n, **kwargs)


def collate(samples: list[Sample], tasks) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    images = np.stack([s.image for s in samples])
    labels = {}
    for t in tasks:
        arr = np.stack([s.label(t.name) for s in samples])
        labels[t.name] = arr[:, None].astype(np.float32) if t.kind == "continuous" else arr.astype(np.int64)
    return images, labels


# ---------------------------------------------------------------- netpbm export


def write_pnm(path: str, arr: np.ndarray) -> None:
    """Binary PGM (H x W) or PPM (3 x H x W); uint16 data is written with maxval 65535."""
    arr = np.asarray(arr)
    maxval = 65535 if arr.dtype == np.uint16 else 255
    if arr.ndim == 3:
        magic, body = b"P6", np.moveaxis(arr, 0, -1)
    else:
        magic, body = b"P5", arr
    h, w = body.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        fh.write(np.ascontiguousarray(body, dtype=dtype).tobytes())


def read_pnm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    chans = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw[pos:], dtype=dtype, count=w * h * chans)
    if chans == 3:
        return np.moveaxis(data.reshape(h, w, 3), -1, 0).astype(np.uint16 if maxval > 255 else np.uint8)
    return data.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)


def export_sample(sample: Sample, out_dir: str, split: str, index: int) -> list[str]:
    """Write ``<split>_<index>_<task>.p?m`` files; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    items = {
        "image.ppm": np.round(sample.image * 255).astype(np.uint8),
        "semseg.pgm": sample.semseg.astype(np.uint8),
        "depth.pgm": np.round(sample.depth * 65535).astype(np.uint16),
        "saliency.pgm": sample.saliency * np.uint8(255),
        "boundary.pgm": sample.boundary * np.uint8(255),
    }
    paths = []
    for suffix, arr in items.items():
        path = os.path.join(out_dir, f"{split}_{index}_{suffix}")
        write_pnm(path, arr)
        paths.append(path)
    return paths
