"""Versioned checkpoint container shared by the diffusion and SSL trainers.

A checkpoint is a single torch-serialized dict carrying model parameters,
the specs needed to rebuild the module, optimizer state, epoch counter, rng
states, and a content digest over the parameter tensors. The digest is
recomputed on load so silent corruption is caught early.
"""

from __future__ import annotations

import hashlib
import os
from typing import Any, Mapping

import torch

from .errors import CorruptStoreError, UnsupportedFormatError

CHECKPOINT_FORMAT_VERSION = 1


def state_digest(model_state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes) of every tensor, name-sorted."""
    h = hashlib.sha256()
    for name in sorted(model_state):
        tensor = model_state[name]
        h.update(name.encode())
        h.update(str(tensor.dtype).encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | os.PathLike,
    kind: str,
    model_state: Mapping[str, torch.Tensor],
    meta: Mapping[str, Any],
    optimizer_state: Any = None,
    epoch: int = 0,
    rng_states: Mapping[str, Any] | None = None,
    extra: Mapping[str, Any] | None = None,
) -> str:
    """Write atomically and return the parameter digest."""
    digest = state_digest(model_state)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "model_state": dict(model_state),
        "meta": dict(meta),
        "optimizer_state": optimizer_state,
        "epoch": epoch,
        "rng_states": dict(rng_states or {}),
        "extra": dict(extra or {}),
        "digest": digest,
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path: str | os.PathLike, expected_kind: str | None = None, verify: bool = True) -> dict:
    payload = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise UnsupportedFormatError(f"checkpoint format version {version!r} not supported")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise UnsupportedFormatError(
            f"checkpoint kind {payload.get('kind')!r} does not match expected {expected_kind!r}"
        )
    if verify and state_digest(payload["model_state"]) != payload["digest"]:
        raise CorruptStoreError(f"checkpoint digest mismatch: {path}")
    return payload
