"""Deterministic synthetic scenes for class-incremental segmentation.

Each class is a coloured parametric shape; scenes put 2-4 of them on a
noisy grey canvas. Objects of any class may appear at any step (the
overlapped setting), but a step's labels keep only that step's classes.

Dataset files are little-endian::

    magic   4 bytes  b"BGDS"
    version u32      1
    step    u32      0 for a validation split
    count   u32
    C, H, W u32 x 3
    count x (C*H*W float32 image, H*W uint8 label)
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar", "diamond", "lshape")
COLORS = np.array(
    [
        (0.90, 0.15, 0.15),
        (0.15, 0.80, 0.15),
        (0.15, 0.25, 0.90),
        (0.90, 0.85, 0.10),
        (0.85, 0.15, 0.85),
        (0.10, 0.85, 0.85),
        (0.95, 0.55, 0.10),
        (0.50, 0.20, 0.80),
    ],
    dtype=np.float32,
)
MIN_CANVAS = 16
MIN_VISIBLE = 0.25
NOISE_SIGMA = 0.1

_MAGIC = b"BGDS"
_VERSION = 1

# Named toy protocols and their step counts; other names derive T from the palette.
KNOWN_PROTOCOLS = {"4-1": 5, "2-2": 3, "6-1": 3}


class DatasetError(ValueError):
    """A dataset file is not in the expected format or is truncated."""


@dataclass(frozen=True)
class TaskProtocol:
    n_initial: int
    n_increment: int
    num_steps: int

    def __post_init__(self):
        if self.n_initial < 1 or self.n_increment < 1 or self.num_steps < 1:
            raise ValueError(f"invalid protocol {self.n_initial}-{self.n_increment} with {self.num_steps} steps")
        if self.total_classes > len(SHAPES):
            raise ValueError(f"protocol needs {self.total_classes} classes but the palette has {len(SHAPES)}")

    @classmethod
    def parse(cls, name: str, num_steps: int | None = None) -> "TaskProtocol":
        m = re.fullmatch(r"(\d+)-(\d+)", name.strip())
        if not m:
            raise ValueError(f"protocol must look like N_ini-N_inc, got {name!r}")
        n_ini, n_inc = int(m.group(1)), int(m.group(2))
        if n_ini < 1 or n_inc < 1:
            raise ValueError(f"protocol {name!r} needs at least one class per step")
        if num_steps is None:
            num_steps = KNOWN_PROTOCOLS.get(name.strip(), 1 + (len(SHAPES) - n_ini) // n_inc)
        return cls(n_ini, n_inc, num_steps)

    @property
    def name(self) -> str:
        return f"{self.n_initial}-{self.n_increment}"

    @property
    def total_classes(self) -> int:
        return self.n_initial + (self.num_steps - 1) * self.n_increment

    def classes_of_step(self, t: int) -> list[int]:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside 1..{self.num_steps}")
        if t == 1:
            return list(range(1, self.n_initial + 1))
        lo = self.n_initial + (t - 2) * self.n_increment + 1
        return list(range(lo, lo + self.n_increment))

    def classes_up_to(self, t: int) -> list[int]:
        return list(range(1, self.classes_of_step(t)[-1] + 1))

    def step_of_class(self, c: int) -> int:
        if not 1 <= c <= self.total_classes:
            raise ValueError(f"class {c} not in protocol {self.name}")
        return 1 if c <= self.n_initial else 2 + (c - self.n_initial - 1) // self.n_increment

    @property
    def class_to_step(self) -> dict[int, int]:
        return {c: self.step_of_class(c) for c in range(1, self.total_classes + 1)}


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    full_label: np.ndarray  # H x W uint8, 0 = background
    objects: list[int] = field(default_factory=list)

    def step_label(self, classes: Sequence[int]) -> np.ndarray:
        """Keep the given class ids; every other object reads as background."""
        return np.where(np.isin(self.full_label, list(classes)), self.full_label, 0).astype(np.uint8)


def _shape_mask(kind: str, size: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    r = size / 2
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (r * 0.55) ** 2)
    if kind == "cross":
        arm = max(r * 0.35, 1.0)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "bar":
        return (np.abs(dy) <= max(r * 0.35, 1.0)) & (np.abs(dx) <= r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "lshape":
        arm = max(r * 0.45, 1.0)
        vert = (np.abs(dx + r - arm) <= arm) & (np.abs(dy) <= r)
        foot = (np.abs(dy - r + arm) <= arm) & (np.abs(dx) <= r)
        return vert | foot
    raise ValueError(f"unknown shape {kind!r}")


def _texture(kind_index: int, yy, xx) -> np.ndarray:
    # odd classes get a stripe modulation so that texture also separates classes
    if kind_index % 2:
        return 0.85 + 0.15 * np.sign(np.sin((yy + xx) * 1.6))
    return np.ones_like(yy, dtype=np.float64)


def generate_scene(
    seed, classes: Sequence[int], canvas: tuple[int, int] = (32, 32), n_objects: tuple[int, int] = (2, 4)
) -> SyntheticScene:
    """Paint a random scene whose objects are drawn from ``classes``.

    ``seed`` is anything ``numpy.random.default_rng`` accepts; the result is
    a pure function of it. Every painted object keeps at least a quarter of
    its pixels visible.
    """
    h, w = canvas
    if h < MIN_CANVAS or w < MIN_CANVAS:
        raise ValueError(f"canvas {h}x{w} is smaller than the minimum {MIN_CANVAS}x{MIN_CANVAS}")
    rng = np.random.default_rng(seed)
    classes = list(classes)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lo_size, hi_size = max(5, min(h, w) // 4), max(7, min(h, w) // 2)

    grey = rng.uniform(0.35, 0.65)
    image = grey + rng.uniform(-0.05, 0.05, size=(3, 1, 1)) + rng.normal(0, NOISE_SIGMA, size=(3, h, w))
    while True:
        count = int(rng.integers(n_objects[0], n_objects[1] + 1))
        picks = [int(c) for c in rng.choice(classes, size=count)]
        owner = np.full((h, w), -1, np.int64)
        masks = []
        for k, c in enumerate(picks):
            size = int(rng.integers(lo_size, hi_size + 1))
            cy = rng.uniform(size / 2, h - size / 2)
            cx = rng.uniform(size / 2, w - size / 2)
            m = _shape_mask(SHAPES[c - 1], size, yy, xx, cy, cx)
            owner[m] = k
            masks.append(m)
        if all(m.sum() and (owner == k).sum() >= MIN_VISIBLE * m.sum() for k, m in enumerate(masks)):
            break

    label = np.zeros((h, w), np.uint8)
    for k, c in enumerate(picks):
        region = owner == k
        label[region] = c
        tex = _texture(c - 1, yy, xx)
        shade = rng.uniform(0.85, 1.0)
        for ch in range(3):
            image[ch][region] = (COLORS[c - 1, ch] * shade * tex + rng.normal(0, NOISE_SIGMA, size=(h, w)))[region]
    image = np.clip(image, 0, 1).astype(np.float32)
    return SyntheticScene(image, label, picks)


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W float32
    labels: np.ndarray  # N x H x W uint8
    step: int = 0

    def __len__(self) -> int:
        return len(self.images)


def _scene_seed(seed: int, step: int, index: int, attempt: int) -> list[int]:
    return [seed, step, index, attempt]


def build_split(
    protocol: TaskProtocol, step: int, count: int, seed: int, canvas: tuple[int, int] = (32, 32), validation: bool = False
) -> Dataset:
    """Training split of step ``step`` (labels hidden to that step's classes).

    With ``validation=True`` scenes are drawn without the step constraint and
    labels keep every class of steps ``1..step``.
    """
    palette = list(range(1, protocol.total_classes + 1))
    own = protocol.classes_of_step(step)
    if not validation and not set(own) <= set(palette):
        raise ValueError(f"palette lacks classes {own} of step {step}")
    keep = protocol.classes_up_to(step) if validation else own
    stream = 10_000 + step if validation else step
    images, labels = [], []
    for i in range(count):
        attempt = 0
        while True:
            scene = generate_scene(_scene_seed(seed, stream, i, attempt), palette, canvas)
            if validation or any(c in own for c in scene.objects):
                break
            attempt += 1
        images.append(scene.image)
        labels.append(scene.step_label(keep))
    h, w = canvas
    return Dataset(
        np.stack(images) if images else np.zeros((0, 3, h, w), np.float32),
        np.stack(labels) if labels else np.zeros((0, h, w), np.uint8),
        0 if validation else step,
    )


def build_validation(protocol: TaskProtocol, count: int, seed: int, canvas=(32, 32)) -> Dataset:
    """Validation scenes carrying every class of the protocol; mask with :func:`restrict_labels`."""
    return build_split(protocol, protocol.num_steps, count, seed, canvas, validation=True)


def restrict_labels(labels: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    return np.where(np.isin(labels, list(keep)), labels, 0).astype(np.uint8)


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<6I", _VERSION, ds.step, n, c, h, w))
        for img, lab in zip(ds.images, ds.labels):
            fh.write(img.astype("<f4").tobytes())
            fh.write(lab.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 28:
        raise DatasetError(f"{path}: not a dataset file")
    version, step, n, c, h, w = struct.unpack_from("<6I", raw, 4)
    if version != _VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    rec = c * h * w * 4 + h * w
    if len(raw) != 28 + n * rec:
        raise DatasetError(f"{path}: truncated or corrupt ({len(raw)} bytes, expected {28 + n * rec})")
    buf = np.frombuffer(raw, dtype=np.uint8, offset=28).reshape(n, rec)
    split = c * h * w * 4
    images = buf[:, :split].copy().view("<f4").reshape(n, c, h, w).astype(np.float32)
    labels = buf[:, split:].reshape(n, h, w).copy()
    return Dataset(images, labels, step)


def write_pgm(path, grid: np.ndarray, lo: float | None = None, hi: float | None = None) -> tuple[float, float]:
    """Binary 8-bit graymap, linearly scaled from [lo, hi]; returns the scale used."""
    grid = np.asarray(grid, dtype=np.float64)
    lo = float(grid.min()) if lo is None else lo
    hi = float(grid.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    pix = np.clip(np.round((grid - lo) / span * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return lo, hi
