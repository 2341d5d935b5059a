"""Datasets and the stochastic view-augmentation pipeline.

Images are stored as uint8 ``[N, H, W, C]`` arrays. Augmented views are
float32 ``(C, S, S)`` tensors with values in ``[0, 1]``; channel
standardization with dataset statistics is a separate, explicit step so
that probes can reuse identical statistics.

All augmentation randomness comes from caller-supplied
``numpy.random.Generator`` streams, which makes every view bit-reproducible
given (record, policy, stream seed).
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .errors import InvalidArgumentError
from .kvformat import read_kv, write_kv
from .seeding import numpy_rng

DATASET_FORMAT_VERSION = 1


@dataclass
class ImageRecord:
    """One anchor image: raw pixels, optional class id, stable index."""

    pixels: np.ndarray  # [H, W, C] uint8
    label: int | None
    index: int


@dataclass
class Dataset:
    """In-memory image dataset with content digest and channel statistics."""

    name: str
    pixels: np.ndarray  # [N, H, W, C] uint8
    labels: np.ndarray  # [N] int64
    seed: int | None = None

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.dtype != np.uint8:
            raise InvalidArgumentError("pixels must be uint8 [N, H, W, C]")
        if len(self.labels) != len(self.pixels):
            raise InvalidArgumentError("labels length must match image count")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    @cached_property
    def channel_stats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """Per-channel (mean, std) of the unit-scaled pixels."""
        scaled = self.pixels.astype(np.float64) / 255.0
        mean = scaled.mean(axis=(0, 1, 2))
        std = scaled.std(axis=(0, 1, 2))
        std = np.maximum(std, 1e-6)
        return tuple(float(m) for m in mean), tuple(float(s) for s in std)

    def record(self, index: int) -> ImageRecord:
        label = int(self.labels[index])
        return ImageRecord(pixels=self.pixels[index], label=label, index=index)

    def records(self) -> Iterator[ImageRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


# ---------------------------------------------------------------------------
# Toy dataset: two procedural classes (disk on smooth gradients vs. square on
# fine stripes). Deterministic given the seed; a desk-scale CIFAR stand-in.
# ---------------------------------------------------------------------------


def _textured_background(size: int, rng: np.random.Generator, cycles: float) -> np.ndarray:
    base = rng.uniform(30, 225, size=3)
    # resample until the two stripe colors are far apart, otherwise the
    # texture washes out and the image loses its frequency signature
    while True:
        second = rng.uniform(30, 225, size=3)
        if np.abs(second - base).sum() >= 150:
            break
    theta = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    axis = (xx * math.cos(theta) + yy * math.sin(theta)) / size
    stripes = 0.5 * (1.0 + np.sin(2.0 * math.pi * cycles * axis + phase))
    img = base[None, None, :] * (1.0 - stripes[..., None]) + second[None, None, :] * stripes[..., None]
    img = img + rng.normal(0.0, 4.0, size=img.shape)
    return img


def _draw_toy_image(size: int, class_id: int, rng: np.random.Generator) -> np.ndarray:
    # class 0 pairs broad color gradients with a disk, class 1 fine stripes
    # with a square; the texture frequency survives crops, flips, color
    # jitter, grayscale, and solarization, so every view of an image keeps
    # its class cue while colors, phase, and shape placement vary freely
    cycles = rng.uniform(0.3, 0.9) if class_id == 0 else rng.uniform(6.0, 10.0)
    img = _textured_background(size, rng, cycles)
    bg_center = img[size // 2 - 2 : size // 2 + 2, size // 2 - 2 : size // 2 + 2].mean(axis=(0, 1))
    # resample until the shape stands out from the local background
    while True:
        color = rng.uniform(0, 255, size=3)
        if np.abs(color - bg_center).sum() >= 240:
            break
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if class_id == 0:  # filled disk
        r = rng.uniform(0.15 * size, 0.30 * size)
        cy = rng.uniform(r + 1, size - r - 1)
        cx = rng.uniform(r + 1, size - r - 1)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    else:  # filled axis-aligned square
        h = rng.uniform(0.14 * size, 0.27 * size)
        cy = rng.uniform(h + 1, size - h - 1)
        cx = rng.uniform(h + 1, size - h - 1)
        mask = (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    img[mask] = color
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_toy_dataset(n_per_class: int, image_size: int, seed: int, name: str = "toy") -> Dataset:
    """Two balanced procedural classes, class-interleaved, seed-deterministic."""
    if n_per_class < 1:
        raise InvalidArgumentError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < 16:
        raise InvalidArgumentError(f"image_size must be >= 16 to fit the shapes, got {image_size}")
    n = 2 * n_per_class
    pixels = np.empty((n, image_size, image_size, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        class_id, within = i % 2, i // 2
        rng = numpy_rng(seed, "toy-image", class_id, within)
        pixels[i] = _draw_toy_image(image_size, class_id, rng)
        labels[i] = class_id
    return Dataset(name=name, pixels=pixels, labels=labels, seed=seed)


# ---------------------------------------------------------------------------
# Dataset directory persistence: raw uint8 blob + raw labels + text manifest.
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> None:
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "images.blob"), "wb") as fh:
        fh.write(np.ascontiguousarray(dataset.pixels).tobytes())
    with open(os.path.join(directory, "labels.blob"), "wb") as fh:
        fh.write(np.ascontiguousarray(dataset.labels).tobytes())
    mean, std = dataset.channel_stats
    h, w, c = dataset.image_shape
    write_kv(
        os.path.join(directory, "manifest.txt"),
        {
            "format_version": DATASET_FORMAT_VERSION,
            "name": dataset.name,
            "n": len(dataset),
            "height": h,
            "width": w,
            "channels": c,
            "seed": dataset.seed if dataset.seed is not None else "none",
            "mean": mean,
            "std": std,
            "digest": dataset.digest,
        },
    )


def load_dataset(directory: str | os.PathLike) -> Dataset:
    directory = os.fspath(directory)
    manifest = read_kv(os.path.join(directory, "manifest.txt"))
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported dataset format version: {manifest.get('format_version')}")
    n, h, w, c = (manifest[k] for k in ("n", "height", "width", "channels"))
    pixels = np.fromfile(os.path.join(directory, "images.blob"), dtype=np.uint8)
    if pixels.size != n * h * w * c:
        raise InvalidArgumentError(
            f"images blob holds {pixels.size} bytes, expected {n * h * w * c}"
        )
    labels = np.fromfile(os.path.join(directory, "labels.blob"), dtype=np.int64)
    if labels.size != n:
        raise InvalidArgumentError(f"labels blob holds {labels.size} entries, expected {n}")
    seed = manifest.get("seed")
    dataset = Dataset(
        name=str(manifest.get("name", "dataset")),
        pixels=pixels.reshape(n, h, w, c),
        labels=labels,
        seed=None if seed == "none" else int(seed),
    )
    if dataset.digest != manifest["digest"]:
        raise InvalidArgumentError("dataset digest mismatch; blob or labels corrupted")
    return dataset


def load_cifar10_binary(paths: Sequence[str | os.PathLike], name: str = "cifar10") -> Dataset:
    """Ingest CIFAR-style binary batches (1 label byte + 3072 planar RGB bytes)."""
    record_bytes = 1 + 3 * 32 * 32
    chunks, labels = [], []
    for path in paths:
        raw = np.fromfile(os.fspath(path), dtype=np.uint8)
        if raw.size == 0 or raw.size % record_bytes != 0:
            raise InvalidArgumentError(f"{path}: size {raw.size} is not a multiple of {record_bytes}")
        raw = raw.reshape(-1, record_bytes)
        labels.append(raw[:, 0].astype(np.int64))
        chunks.append(raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return Dataset(name=name, pixels=np.concatenate(chunks), labels=np.concatenate(labels))


# ---------------------------------------------------------------------------
# Augmentation policy and the view pipeline.
# ---------------------------------------------------------------------------


@dataclass
class AugmentationPolicy:
    """Parameters of the stochastic view transform.

    The same policy is used for anchor views and for synthetic positives.
    ``identity()`` disables every stochastic component, which makes the
    pipeline a plain resize.
    """

    output_size: int = 32
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_probability: float = 0.5
    color_jitter_probability: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_probability: float = 0.2
    solarize_probability: float = 0.2
    solarize_threshold: int = 128  # uint8 intensity scale

    def __post_init__(self):
        for name in ("flip_probability", "color_jitter_probability", "grayscale_probability", "solarize_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise InvalidArgumentError(f"crop_scale_range must be ordered within (0, 1], got {self.crop_scale_range}")
        rlo, rhi = self.crop_ratio_range
        if not (0.0 < rlo <= rhi):
            raise InvalidArgumentError(f"crop_ratio_range must be ordered and positive, got {self.crop_ratio_range}")
        if self.output_size < 1:
            raise InvalidArgumentError("output_size must be positive")
        if not 0 <= self.solarize_threshold <= 255:
            raise InvalidArgumentError("solarize_threshold must be a uint8 intensity")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} strength must be >= 0")
        if not 0.0 <= self.hue <= 0.5:
            raise InvalidArgumentError("hue strength must be in [0, 0.5]")

    @classmethod
    def identity(cls, output_size: int = 32) -> "AugmentationPolicy":
        return cls(
            output_size=output_size,
            crop_scale_range=(1.0, 1.0),
            crop_ratio_range=(1.0, 1.0),
            flip_probability=0.0,
            color_jitter_probability=0.0,
            grayscale_probability=0.0,
            solarize_probability=0.0,
        )


def sample_crop(
    rng: np.random.Generator,
    height: int,
    width: int,
    scale_range: tuple[float, float],
    ratio_range: tuple[float, float],
    attempts: int = 10,
) -> tuple[int, int, int, int]:
    """Sample a crop rectangle ``(top, left, h, w)`` with 0 <= top < top+h <= H.

    Rejection-samples (area, aspect) pairs; falls back to the largest
    centered crop with clamped aspect when no sample fits.
    """
    area = float(height * width)
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(attempts):
        target_area = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: clamp aspect, center crop
    in_ratio = width / height
    if in_ratio < ratio_range[0]:
        w = width
        h = min(height, int(round(w / ratio_range[0])))
    elif in_ratio > ratio_range[1]:
        h = height
        w = min(width, int(round(h * ratio_range[1])))
    else:
        w, h = width, height
    top = (height - h) // 2
    left = (width - w) // 2
    return top, left, h, w


def _to_chw_float(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float() / 255.0


def _augment_tensor(img: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """One stochastic view of a ``(C, H, W)`` float image in [0, 1]."""
    _, height, width = img.shape
    top, left, h, w = sample_crop(rng, height, width, policy.crop_scale_range, policy.crop_ratio_range)
    img = TF.resized_crop(
        img, top, left, h, w,
        [policy.output_size, policy.output_size],
        interpolation=TF.InterpolationMode.BILINEAR,
        antialias=False,
    )
    if rng.random() < policy.flip_probability:
        img = torch.flip(img, dims=[2])
    if rng.random() < policy.color_jitter_probability:
        order = rng.permutation(4)
        b = rng.uniform(max(0.0, 1.0 - policy.brightness), 1.0 + policy.brightness)
        c = rng.uniform(max(0.0, 1.0 - policy.contrast), 1.0 + policy.contrast)
        s = rng.uniform(max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation)
        hshift = rng.uniform(-policy.hue, policy.hue)
        for op in order:
            if op == 0:
                img = TF.adjust_brightness(img, b)
            elif op == 1:
                img = TF.adjust_contrast(img, c)
            elif op == 2:
                img = TF.adjust_saturation(img, s)
            else:
                img = TF.adjust_hue(img, hshift)
    if rng.random() < policy.grayscale_probability:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if rng.random() < policy.solarize_probability:
        img = TF.solarize(img, policy.solarize_threshold / 255.0)
    return img.clamp(0.0, 1.0)


def augment_views(
    record: ImageRecord, policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independent stochastic views of the same image, drawn from one stream."""
    img = _to_chw_float(record.pixels)
    return _augment_tensor(img, policy, rng), _augment_tensor(img, policy, rng)


def augment_synthetic(
    synthetic_pixels: np.ndarray,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    expected_shape: tuple[int, int, int] | None = None,
) -> torch.Tensor:
    """One stochastic view of a synthetic positive, same policy as the anchors."""
    if expected_shape is not None and tuple(synthetic_pixels.shape) != tuple(expected_shape):
        raise InvalidArgumentError(
            f"synthetic image shape {tuple(synthetic_pixels.shape)} does not match dataset shape {tuple(expected_shape)}"
        )
    return _augment_tensor(_to_chw_float(synthetic_pixels), policy, rng)


def resize_plain(pixels: np.ndarray, output_size: int) -> torch.Tensor:
    """Deterministic resize used by probes and feature extraction (no augmentation)."""
    img = _to_chw_float(pixels)
    if img.shape[1] == output_size and img.shape[2] == output_size:
        return img
    return TF.resize(img, [output_size, output_size], interpolation=TF.InterpolationMode.BILINEAR, antialias=False)


def standardize(views: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """Channel standardization with dataset statistics; views are (..., C, H, W)."""
    m = torch.tensor(mean, dtype=views.dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=views.dtype).view(-1, 1, 1)
    return (views - m) / s


@dataclass
class ViewBundle:
    """Anchor id plus its augmented views; view3 present only for 3-view methods."""

    anchor_index: int
    view1: torch.Tensor
    view2: torch.Tensor
    view3: torch.Tensor | None = None
