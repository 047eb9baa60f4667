"""Datasets, auxiliary-image transforms and PPM rendering.

Images are uint8 arrays laid out as (count, channels, height, width).
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .distributions import QuantizationSpec
from .errors import IndivisibleExtents, LabelOutOfRange, ShapeMismatch, TruncatedFile

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SPRITE_CLASSES = ("square", "disk", "triangle", "cross")


@dataclass
class ImageBatch:
    images: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 4:
            raise ShapeMismatch(f"expected (n, c, h, w) images, got shape {images.shape}")
        if images.shape[0] < 1:
            raise ValueError("an image batch holds at least one image")
        if images.min() < 0 or images.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        self.images = images.astype(np.uint8)

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def __len__(self):
        return self.count


def load_cifar10(data: bytes) -> ImageBatch:
    """Parse the CIFAR-10 binary format: per record one label byte then R, G, B planes."""
    if len(data) == 0 or len(data) % CIFAR_RECORD_BYTES:
        raise TruncatedFile(f"{len(data)} bytes is not a positive multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise LabelOutOfRange(f"label {labels.max()} outside 0..9")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return ImageBatch(images.copy(), labels)


def load_cifar10_file(path: Union[str, Path]) -> ImageBatch:
    return load_cifar10(Path(path).read_bytes())


@dataclass(frozen=True)
class AuxiliarySpec:
    """How the auxiliary target is derived from an image.

    ``extents`` of None keeps the input resolution.
    """

    quantization: QuantizationSpec = field(default_factory=QuantizationSpec)
    extents: Optional[Tuple[int, int]] = None
    grayscale: bool = False

    @property
    def channels(self) -> int:
        return 1 if self.grayscale else 3

    def target_extents(self, height: int, width: int) -> Tuple[int, int]:
        th, tw = self.extents or (height, width)
        if th < 1 or tw < 1 or height % th or width % tw:
            raise IndivisibleExtents(f"auxiliary extents {th}x{tw} do not divide {height}x{width}")
        return th, tw


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def make_aux(x: np.ndarray, spec: AuxiliarySpec) -> np.ndarray:
    """Grayscale, then average-pool, then quantize. Returns uint8 level representatives."""
    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, _, h, w = x.shape
    th, tw = spec.target_extents(h, w)
    y = x.astype(np.float64)
    if spec.grayscale:
        luma = sum(weight * y[:, i] for i, weight in enumerate(LUMA_WEIGHTS))
        y = _round_half_up(luma)[:, None]
    if (th, tw) != (h, w):
        fh, fw = h // th, w // tw
        y = y.reshape(n, y.shape[1], th, fh, tw, fw).mean(axis=(3, 5))
        y = _round_half_up(y)
    y = spec.quantization.quantize(y).astype(np.uint8)
    return y[0] if squeeze else y


def write_ppm(image: np.ndarray) -> bytes:
    """Binary P6 encoding of a (3, H, W) or (1, H, W) image."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    if image.shape[0] != 3:
        raise ShapeMismatch(f"expected 1 or 3 channels, got {image.shape[0]}")
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + np.clip(image, 0, 255).astype(np.uint8).transpose(1, 2, 0).tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    """Parse a binary P6 file written with a maxval of 255."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError("only binary P6 files with maxval 255 are supported")
    w, h = int(tokens[1]), int(tokens[2])
    payload = data[pos + 1:pos + 1 + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise TruncatedFile("PPM payload shorter than header promises")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def tile(images: np.ndarray, rows: int, cols: int, border: int = 1, fill: int = 255) -> np.ndarray:
    """Arrange (n, c, h, w) images row-major on a grid; grayscale tiles become RGB."""
    images = np.asarray(images)
    if images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)
    n, c, h, w = images.shape
    if n > rows * cols:
        raise ValueError(f"{n} tiles do not fit a {rows}x{cols} grid")
    canvas = np.full((c, rows * (h + border) + border, cols * (w + border) + border), fill, dtype=np.uint8)
    for k in range(n):
        r, q = divmod(k, cols)
        top = border + r * (h + border)
        left = border + q * (w + border)
        canvas[:, top:top + h, left:left + w] = images[k]
    return canvas


def upscale(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour enlargement of (n, c, h, w) images to a target size."""
    fh = height // images.shape[2]
    fw = width // images.shape[3]
    return images.repeat(fh, axis=2).repeat(fw, axis=3)


def _sprite_mask(kind: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2
    if kind == 0:
        return np.ones((size, size), bool)
    if kind == 1:
        return (yy - centre) ** 2 + (xx - centre) ** 2 <= (size / 2) ** 2 - 0.25 * (size > 3)
    if kind == 2:
        return np.abs(xx - centre) <= (yy + 1) / 2
    half = max(size // 6, 0)
    mid = size // 2
    return (np.abs(yy - mid) <= half) | (np.abs(xx - mid) <= half)


def toy_sprites(seed: int, n: int, extents: Union[int, Tuple[int, int]] = (8, 8)) -> ImageBatch:
    """Procedural images: a solid background and one coloured shape.

    Shape class (square, disk, triangle, cross), size, position and both
    colours are drawn uniformly; the class is returned as the label.
    """
    if n < 1:
        raise ValueError("toy_sprites needs n >= 1")
    if isinstance(extents, int):
        extents = (extents, extents)
    extents = tuple(extents)
    if extents not in ((8, 8), (16, 16)):
        raise ValueError(f"sprite extents must be 8x8 or 16x16, got {extents}")
    side = extents[0]
    low, high = (3, 5) if side == 8 else (5, 9)
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, side, side), dtype=np.uint8)
    labels = rng.integers(0, len(SPRITE_CLASSES), size=n)
    for k in range(n):
        background = rng.integers(0, 256, size=3)
        colour = rng.integers(0, 256, size=3)
        while np.abs(colour - background).sum() < 96:
            colour = rng.integers(0, 256, size=3)
        size = int(rng.integers(low, high + 1))
        top, left = rng.integers(0, side - size + 1, size=2)
        image = np.broadcast_to(background[:, None, None], (3, side, side)).copy()
        mask = _sprite_mask(int(labels[k]), size)
        window = image[:, top:top + size, left:left + size]
        window[:, mask] = colour[:, None]
        images[k] = image
    return ImageBatch(images, labels)
