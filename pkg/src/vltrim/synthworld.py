"""Deterministic synthetic scenes and a toy classification task.

Scenes are small RGB canvases holding up to eight coloured shapes laid out on
a 4×4 cell grid, each described by a four-token caption such as
``"red square upper left"``. The vocabulary is fixed (see ``VOCAB``) so
retrieval numbers stay comparable across runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

VOCAB_VERSION = 1

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
SHAPES = ("square", "disc", "bar")
POSITION_WORDS = ("upper", "lower", "left", "right", "center")
VOCAB: tuple[str, ...] = tuple(COLORS) + SHAPES + POSITION_WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
CAPTION_LEN = 4
N_REGION_CLASSES = len(COLORS) * len(SHAPES)
MAX_REGIONS = 8
GRID_CELLS = 4


def encode(caption: str) -> np.ndarray:
    return np.array([TOKEN_ID[w] for w in caption.split()], dtype=np.int64)


def decode(ids) -> str:
    return " ".join(VOCAB[int(i)] for i in ids)


def region_class(shape: str, color: str) -> int:
    return list(COLORS).index(color) * len(SHAPES) + SHAPES.index(shape)


@dataclass
class SceneSpec:
    seed: int
    n_regions: int
    size: int = 32
    channels: int = 3
    noise: float = 0.02
    shapes: list[str] = field(default_factory=list)
    colors: list[str] = field(default_factory=list)
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    boxes: np.ndarray  # n x 4, (x0, y0, x1, y1), half-open pixel units
    captions: np.ndarray  # n x CAPTION_LEN token ids
    proposals: np.ndarray  # n x 4 jittered boxes
    classes: np.ndarray  # n region class ids (colour x shape)
    spec: SceneSpec

    @property
    def caption_text(self) -> list[str]:
        return [decode(c) for c in self.captions]


def shape_mask(shape: str, box, size: int) -> np.ndarray:
    """Boolean ``size×size`` mask of the pixels a shape covers."""
    x0, y0, x1, y1 = box
    mask = np.zeros((size, size), dtype=bool)
    if shape in ("square", "bar"):
        mask[y0:y1, x0:x1] = True
    else:
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        r = (x1 - x0) / 2.0
        ys, xs = np.mgrid[0:size, 0:size]
        mask = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    return mask


def _place(rng: np.random.Generator, shape: str, cell_x: int, cell_y: int, cell: int) -> tuple[int, int, int, int]:
    if shape == "square":
        w = h = int(rng.integers(4, 7))
    elif shape == "disc":
        w = h = int(rng.integers(5, 7))
    elif rng.random() < 0.5:
        w, h = 7, int(rng.integers(2, 4))
    else:
        w, h = int(rng.integers(2, 4)), 7
    x0 = cell_x * cell + int(rng.integers(0, cell - w + 1))
    y0 = cell_y * cell + int(rng.integers(0, cell - h + 1))
    return (x0, y0, x0 + w, y0 + h)


def position_words(box, size: int) -> tuple[str, str]:
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    third = size / 3.0
    v = "upper" if cy < third else ("lower" if cy > 2 * third else "center")
    h = "left" if cx < third else ("right" if cx > 2 * third else "center")
    return v, h


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def jitter_box(rng: np.random.Generator, box, size: int, frac: float = 0.1) -> np.ndarray:
    """Move each edge by up to ``frac`` of the box extent, clamped in-image."""
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    while True:
        d = rng.uniform(-frac, frac, size=4) * np.array([w, h, w, h])
        p = np.array([x0, y0, x1, y1]) + d
        p = np.clip(p, 0.0, float(size))
        if p[2] - p[0] > 0.5 and p[3] - p[1] > 0.5 and box_iou(p, box) >= 0.3:
            return p


def gen_scene(seed: int, n_regions: int, size: int = 32, noise: float = 0.02) -> Sample:
    """Render one scene; a pure function of its arguments."""
    if not 1 <= n_regions <= MAX_REGIONS:
        raise ParameterError(f"n_regions must be in [1, {MAX_REGIONS}], got {n_regions}")
    if size % GRID_CELLS or size // GRID_CELLS < 8:
        raise ParameterError(f"scene size must be a multiple of {GRID_CELLS} and at least {8 * GRID_CELLS}")
    rng = np.random.default_rng([seed, 0x5CE7E])
    cell = size // GRID_CELLS
    cells = rng.choice(GRID_CELLS * GRID_CELLS, size=n_regions, replace=False)
    combos = rng.choice(N_REGION_CLASSES, size=n_regions, replace=False)
    color_names = list(COLORS)
    spec = SceneSpec(seed, n_regions, size, 3, noise)
    image = np.zeros((3, size, size))
    captions, classes = [], []
    for cidx, combo in zip(cells, combos):
        color = color_names[combo // len(SHAPES)]
        shape = SHAPES[combo % len(SHAPES)]
        box = _place(rng, shape, int(cidx % GRID_CELLS), int(cidx // GRID_CELLS), cell)
        mask = shape_mask(shape, box, size)
        image[:, mask] = np.array(COLORS[color])[:, None]
        v, h = position_words(box, size)
        captions.append(encode(f"{color} {shape} {v} {h}"))
        classes.append(region_class(shape, color))
        spec.shapes.append(shape)
        spec.colors.append(color)
        spec.boxes.append(box)
    if noise > 0:
        image = np.clip(image + rng.normal(0.0, noise, size=image.shape), 0.0, 1.0)
    boxes = np.array(spec.boxes, dtype=float)
    proposals = np.stack([jitter_box(rng, b, size) for b in boxes])
    return Sample(image, boxes, np.stack(captions), proposals, np.array(classes), spec)


def gen_scenes(seed: int, count: int, n_regions: int = MAX_REGIONS, size: int = 32, noise: float = 0.02) -> list[Sample]:
    return [gen_scene(seed * 1_000_003 + i, n_regions, size, noise) for i in range(count)]


@dataclass
class ClassificationSet:
    images: np.ndarray  # N x 3 x H x W
    labels: np.ndarray  # N
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClassificationSet":
        return ClassificationSet(self.images[idx], self.labels[idx], self.n_classes)


def gen_classification_set(
    seed: int, n_classes: int, n_samples: int, size: int = 16, noise: float = 0.02
) -> ClassificationSet:
    """Images whose class encodes shape colour and shape-count parity.

    Class ``c`` shows ``1 + c % 2`` shapes of colour ``c // 2``; shape types
    and positions are random.
    """
    if not 1 <= n_classes <= 2 * len(COLORS):
        raise ParameterError(f"n_classes must be in [1, {2 * len(COLORS)}]")
    if size < 16 or size % 2:
        raise ParameterError("classification images must be even-sized and at least 16 pixels")
    rng = np.random.default_rng([seed, 0xC1A55])
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    images = np.zeros((n_samples, 3, size, size))
    color_names = list(COLORS)
    cell = size // 2
    for i, c in enumerate(labels):
        color = np.array(COLORS[color_names[c // 2]])
        count = 1 + c % 2
        for cidx in rng.choice(4, size=count, replace=False):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            box = _place(rng, shape, int(cidx % 2), int(cidx // 2), cell)
            images[i][:, shape_mask(shape, box, size)] = color[:, None]
    if noise > 0:
        images = np.clip(images + rng.normal(0.0, noise, size=images.shape), 0.0, 1.0)
    return ClassificationSet(images, labels.astype(np.int64), n_classes)
