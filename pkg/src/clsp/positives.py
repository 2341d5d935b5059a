"""Pre-generated synthetic-positive candidate stores.

For every dataset image (the anchor) a fixed number of candidates is
sampled from the diffusion model with interpolation hooks blending the
anchor's encoder features into the trajectory. Candidates live in a flat
uint8 blob next to a ``key = value`` manifest; the manifest is written
last, atomically, so its presence marks a complete store. During SSL
training one candidate per anchor is drawn each epoch from a named
stream, so runs are reproducible and draws are uniform over the set.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import kvformat
from .checkpoint import load_checkpoint
from .diffusion import (
    AnchorFeatureProvider,
    NoiseSchedule,
    UNet,
    ddim_sample,
    to_model_range,
    to_uint8,
    unet_from_checkpoint,
)
from .errors import CorruptStoreError, InvalidArgumentError, InvalidStateError, UnsupportedFormatError
from .seeding import torch_generator

STORE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "candidates.blob"
PROGRESS_NAME = "progress.txt"

# anchors per network batch; boundaries are absolute (group g covers
# [16g, 16(g+1))) so batch composition never depends on chunk_size or on
# where a resumed run left off
_BATCH_GROUP = 16


@dataclass
class CandidateStore:
    root: Path
    n_anchors: int
    k: int
    image_size: int
    channels: int
    dataset_digest: str
    meta: dict
    blob: np.memmap

    def candidate(self, anchor_index: int, slot: int) -> np.ndarray:
        """One candidate image as uint8 (H, W, C)."""
        if not 0 <= anchor_index < self.n_anchors:
            raise InvalidArgumentError(f"anchor index {anchor_index} out of range [0, {self.n_anchors})")
        if not 0 <= slot < self.k:
            raise InvalidArgumentError(f"candidate slot {slot} out of range [0, {self.k})")
        return np.array(self.blob[anchor_index, slot])

    def candidates(self, anchor_index: int) -> np.ndarray:
        """All candidates for one anchor as uint8 (k, H, W, C)."""
        if not 0 <= anchor_index < self.n_anchors:
            raise InvalidArgumentError(f"anchor index {anchor_index} out of range [0, {self.n_anchors})")
        return np.array(self.blob[anchor_index])


@dataclass
class PositiveDraw:
    """One per-epoch candidate pick; pixels equal the stored blob entry."""

    anchor_index: int
    candidate_index: int
    pixels: np.ndarray


def _blob_shape(n: int, k: int, size: int, channels: int) -> tuple[int, int, int, int, int]:
    return (n, k, size, size, channels)


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def generate_candidates(
    checkpoint: str | os.PathLike | dict,
    dataset,
    out_dir: str | os.PathLike,
    *,
    k: int,
    w: float = 0.1,
    ddim_steps: int = 50,
    seed: int = 0,
    layer_ids: Sequence[str] | None = None,
    chunk_size: int = 16,
    resume: bool = False,
    redraw_per_step: bool = True,
    progress_fn=None,
) -> CandidateStore:
    """Build a store from a diffusion checkpoint (path or loaded payload).

    A checkpoint trained on a different dataset digest is allowed but
    warned about: the anchors still come from ``dataset``.
    """
    payload = load_checkpoint(checkpoint, expected_kind="diffusion") if not isinstance(checkpoint, dict) else checkpoint
    model, schedule = unet_from_checkpoint(payload)
    trained_on = payload["meta"].get("dataset_digest")
    if trained_on and trained_on != dataset.digest:
        warnings.warn(
            f"diffusion checkpoint was trained on dataset digest {str(trained_on)[:12]}, "
            f"anchors come from {dataset.digest[:12]}",
            stacklevel=2,
        )
    if layer_ids is None:
        layer_ids = (model.spec.encoder_layer_ids[-1],)
    return generate_candidates_from_model(
        model,
        schedule,
        dataset,
        out_dir,
        k=k,
        w=w,
        layer_ids=layer_ids,
        ddim_steps=ddim_steps,
        seed=seed,
        chunk_size=chunk_size,
        resume=resume,
        redraw_per_step=redraw_per_step,
        model_digest=payload.get("digest", ""),
        progress_fn=progress_fn,
    )


def generate_candidates_from_model(
    model: UNet,
    schedule: NoiseSchedule,
    dataset,
    out_dir: str | os.PathLike,
    *,
    k: int,
    w: float,
    layer_ids: Sequence[str],
    ddim_steps: int,
    seed: int,
    chunk_size: int = 16,
    resume: bool = False,
    redraw_per_step: bool = True,
    model_digest: str = "",
    progress_fn=None,
) -> CandidateStore:
    """Sample ``k`` hooked DDIM candidates per anchor into a store directory.

    Anchors are batched in fixed groups with absolute boundaries and all
    noise comes from streams keyed by (anchor index, candidate slot) or
    (anchor index, timestep). Blob bytes therefore do not depend on
    ``chunk_size``, which only sets how often progress is flushed to disk,
    and an interrupted run resumes without drift.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if not 0.0 <= w <= 1.0:
        raise InvalidArgumentError(f"w must be in [0, 1], got {w}")
    if chunk_size < 1:
        raise InvalidArgumentError("chunk_size must be >= 1")
    layer_ids = tuple(layer_ids)
    for lid in layer_ids:
        if lid not in model.spec.hook_ids:
            raise InvalidArgumentError(f"unknown interpolation layer {lid!r}; known: {model.spec.hook_ids}")
    n, height, width, channels = dataset.pixels.shape
    if height != model.spec.image_size or width != model.spec.image_size:
        raise InvalidArgumentError(
            f"dataset images are {height}x{width} but the model expects {model.spec.image_size}"
        )

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / MANIFEST_NAME
    blob_path = root / BLOB_NAME
    progress_path = root / PROGRESS_NAME
    if manifest_path.exists():
        return load_store(root)

    params = {
        "k": k,
        "w": w,
        "layer_ids": layer_ids,
        "ddim_steps": ddim_steps,
        "timesteps": schedule.T,
        "seed": seed,
        "redraw_per_step": redraw_per_step,
        "dataset_digest": dataset.digest,
    }
    shape = _blob_shape(n, k, height, channels)
    start = 0
    if progress_path.exists():
        if not resume:
            raise InvalidStateError(f"incomplete store at {root}; pass resume to continue")
        progress = kvformat.read_kv(progress_path)
        for key, value in params.items():
            if progress.get(key) != value:
                raise InvalidStateError(f"resume parameter mismatch for {key!r}: {progress.get(key)!r} != {value!r}")
        start = int(progress["completed"])
        blob = np.memmap(blob_path, dtype=np.uint8, mode="r+", shape=shape)
    else:
        blob = np.memmap(blob_path, dtype=np.uint8, mode="w+", shape=shape)
        kvformat.write_kv(progress_path, {**params, "completed": 0})

    anchors_x = to_model_range(dataset.pixels)
    image_shape = (channels, height, width)
    while start < n:
        stop = min(start + chunk_size, n)
        # a flush boundary inside a group recomputes that group from its
        # absolute start, keeping its batch composition fixed
        for group_start in range((start // _BATCH_GROUP) * _BATCH_GROUP, stop, _BATCH_GROUP):
            group_stop = min(group_start + _BATCH_GROUP, n)
            indices = list(range(group_start, group_stop))
            provider = AnchorFeatureProvider(
                model, anchors_x[group_start:group_stop], layer_ids, schedule, seed,
                redraw_per_step=redraw_per_step, per_sample_labels=indices,
            )
            x_init = torch.stack([
                torch.randn(image_shape, generator=torch_generator(seed, "candidate-init", a, slot))
                for a in indices
                for slot in range(k)
            ])
            samples = ddim_sample(
                model, schedule, ddim_steps, provider.hooks(w),
                rng=None, count=len(indices) * k, x_init=x_init,
            )
            pixels = to_uint8(samples).reshape(len(indices), k, height, width, channels)
            lo, hi = max(group_start, start), min(group_stop, stop)
            blob[lo:hi] = pixels[lo - group_start : hi - group_start]
        blob.flush()
        kvformat.write_kv(progress_path, {**params, "completed": stop})
        if progress_fn is not None:
            progress_fn(stop, n)
        start = stop

    del blob
    manifest = {
        "format_version": STORE_FORMAT_VERSION,
        "n_anchors": n,
        "image_size": height,
        "channels": channels,
        "dtype": "uint8",
        "dataset_name": dataset.name,
        "model_digest": model_digest,
        "blob_sha256": _file_sha256(blob_path),
        **params,
    }
    kvformat.write_kv(manifest_path, manifest)
    os.remove(progress_path)
    return load_store(root)


def load_store(path: str | os.PathLike, verify: bool = True) -> CandidateStore:
    """Open a complete store, validating layout, size, and blob digest."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    blob_path = root / BLOB_NAME
    if not manifest_path.exists():
        if (root / PROGRESS_NAME).exists():
            raise InvalidStateError(f"store at {root} is incomplete (generation did not finish)")
        raise CorruptStoreError(f"no store manifest at {manifest_path}")
    meta = kvformat.read_kv(manifest_path)
    version = meta.get("format_version")
    if version != STORE_FORMAT_VERSION:
        raise UnsupportedFormatError(f"store format version {version!r}; this build reads {STORE_FORMAT_VERSION}")
    for key in ("n_anchors", "k", "image_size", "channels", "dataset_digest", "blob_sha256"):
        if key not in meta:
            raise CorruptStoreError(f"store manifest missing {key!r}")
    n, k, size, channels = meta["n_anchors"], meta["k"], meta["image_size"], meta["channels"]
    if not blob_path.exists():
        raise CorruptStoreError(f"missing candidate blob at {blob_path}")
    expected_bytes = n * k * size * size * channels
    actual = blob_path.stat().st_size
    if actual != expected_bytes:
        raise CorruptStoreError(f"candidate blob is {actual} bytes, manifest implies {expected_bytes}")
    if verify:
        got = _file_sha256(blob_path)
        if got != meta["blob_sha256"]:
            raise CorruptStoreError(f"candidate blob digest mismatch: {got} != {meta['blob_sha256']}")
    blob = np.memmap(blob_path, dtype=np.uint8, mode="r", shape=_blob_shape(n, k, size, channels))
    layer_ids = meta.get("layer_ids", ())
    if isinstance(layer_ids, str):
        layer_ids = (layer_ids,)
    meta["layer_ids"] = tuple(layer_ids)
    return CandidateStore(
        root=root, n_anchors=n, k=k, image_size=size, channels=channels,
        dataset_digest=str(meta["dataset_digest"]), meta=meta, blob=blob,
    )


def validate_compatibility(store: CandidateStore, config, dataset) -> list[str]:
    """Pure report of every store/run mismatch; empty means compatible.

    ``config`` may be None when only store-vs-dataset agreement matters.
    """
    report: list[str] = []
    if store.dataset_digest != dataset.digest:
        report.append(
            f"store was generated from dataset digest {store.dataset_digest[:12]}, "
            f"training dataset has {dataset.digest[:12]}"
        )
    n, height, width, _ = dataset.pixels.shape
    if store.n_anchors != n:
        report.append(f"store holds {store.n_anchors} anchors, dataset has {n}")
    if store.image_size != height or store.image_size != width:
        report.append(f"store images are {store.image_size}x{store.image_size}, dataset images are {height}x{width}")
    if config is not None:
        wanted = getattr(config, "n_additional_positives", 1)
        if wanted > store.k:
            report.append(f"run draws {wanted} positives per anchor but the store only holds k={store.k}")
    return report


def sample_positive(store: CandidateStore, anchor_index: int, rng: np.random.Generator) -> PositiveDraw:
    """Uniform draw over an anchor's candidate slots from the given stream."""
    slot = int(rng.integers(store.k))
    return PositiveDraw(
        anchor_index=anchor_index, candidate_index=slot, pixels=store.candidate(anchor_index, slot)
    )
