"""Contrastive pretraining with optional synthetic positives.

Methods:

* ``simclr``           in-batch InfoNCE over two augmented views
* ``clsp-simclr``      + weighted squared distance to an augmented synthetic
                         positive drawn from a candidate store
* ``simclr-aug``       + the same extra term, but the third view is a naive
                         third augmentation of the real image
* ``clsp-noaug``       InfoNCE where the second view IS the augmented
                         synthetic positive
* ``moco``             momentum encoder + key queue InfoNCE
* ``clsp-moco``        moco + the synthetic-positive distance term
                         (computed with the online encoder)
* ``moco-aug``         moco + the distance term on a third augmentation

The extra-positive weight ``lam`` gates the whole third-view branch: with
``lam = 0`` no synthetic views are built and no extra forward pass runs,
so a ``clsp-simclr`` run is bit-identical to ``simclr`` with the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    AugmentationPolicy,
    Dataset,
    augment_synthetic,
    augment_views,
    standardize,
)
from .encoder import ContrastiveEncoder, EncoderSpec, ProjectorSpec, momentum_update, project_normalize
from .errors import InvalidArgumentError, InvalidStateError, NumericError
from .positives import CandidateStore, sample_positive, validate_compatibility
from .seeding import derive_seed, numpy_rng

METHODS = ("simclr", "clsp-simclr", "simclr-aug", "clsp-noaug", "moco", "clsp-moco", "moco-aug")
_MOCO_FAMILY = ("moco", "clsp-moco", "moco-aug")
_STORE_METHODS = ("clsp-simclr", "clsp-moco", "clsp-noaug")


# ---------------------------------------------------------------------------
# Losses.
# ---------------------------------------------------------------------------


def _unit(z: torch.Tensor) -> torch.Tensor:
    return F.normalize(z, dim=-1, eps=1e-12)


def info_nce_loss(
    z1: torch.Tensor, z2: torch.Tensor, temperature: float, reduction: str = "mean"
) -> torch.Tensor:
    """Symmetric in-batch InfoNCE (NT-Xent) over all 2N views.

    Inputs are L2-normalized internally. Each view's positive is its
    counterpart from the other branch; its per-view term is the cross
    entropy of a (2N - 1)-way softmax over every other view, so the
    positive also appears in the denominator. ``reduction`` picks the
    symmetric sum or the mean over the 2N terms (training uses the mean so
    the loss weight transfers across batch sizes).
    """
    if z1.shape != z2.shape or z1.ndim != 2:
        raise InvalidArgumentError(f"expected matching (N, D) batches, got {tuple(z1.shape)} and {tuple(z2.shape)}")
    if reduction not in ("mean", "sum"):
        raise InvalidArgumentError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    n = z1.shape[0]
    if n < 2:
        raise InvalidArgumentError("InfoNCE needs at least 2 anchors for in-batch negatives")
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = _unit(torch.cat([z1, z2], dim=0))
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets, reduction=reduction)


def moco_contrastive_loss(
    q: torch.Tensor, k: torch.Tensor, queue: torch.Tensor, temperature: float
) -> torch.Tensor:
    """InfoNCE with one positive key per query and queued negatives."""
    if q.shape != k.shape or q.ndim != 2:
        raise InvalidArgumentError(f"queries and keys must both be (N, D), got {tuple(q.shape)} / {tuple(k.shape)}")
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    if queue.numel() == 0:
        raise InvalidStateError("queue is empty; there are no negatives to contrast against")
    if queue.shape[1] != q.shape[1]:
        raise InvalidArgumentError(f"queue dim {queue.shape[1]} != embedding dim {q.shape[1]}")
    q, k = _unit(q), _unit(k)
    positive = (q * k).sum(dim=1, keepdim=True)
    logits = torch.cat([positive, q @ queue.T], dim=1) / temperature
    return F.cross_entropy(logits, torch.zeros(q.shape[0], dtype=torch.long))


def additional_positive_loss(z2: torch.Tensor, z3: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between normalized projections of the paired views."""
    if z2.shape != z3.shape or z2.ndim != 2:
        raise InvalidArgumentError(f"expected matching (N, D) batches, got {tuple(z2.shape)} and {tuple(z3.shape)}")
    return ((_unit(z2) - _unit(z3)) ** 2).sum(dim=1).mean()


def total_loss(contrastive: torch.Tensor, additional: torch.Tensor, lambda_: float) -> torch.Tensor:
    """Composite objective: contrastive + lambda * additional."""
    return contrastive + lambda_ * additional


class MomentumQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings.

    ``tensor()`` returns the live contents oldest-first; until the queue
    has seen ``capacity`` keys it returns only what was pushed.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise InvalidArgumentError(f"capacity and dim must be >= 1, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self._buffer = torch.zeros(capacity, dim)
        self._next = 0
        self._filled = 0

    def __len__(self) -> int:
        return self._filled

    @property
    def filled(self) -> bool:
        return self._filled == self.capacity

    @property
    def write_cursor(self) -> int:
        return self._next

    def push(self, keys: torch.Tensor) -> None:
        keys = keys.detach()
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise InvalidArgumentError(f"keys must be (M, {self.dim}), got {tuple(keys.shape)}")
        norms = keys.norm(dim=1)
        if bool(((norms - 1.0).abs() > 1e-4).any()):
            raise InvalidArgumentError("queue keys must be unit-norm")
        if keys.shape[0] > self.capacity:
            keys = keys[-self.capacity :]
        m = keys.shape[0]
        first = min(m, self.capacity - self._next)
        self._buffer[self._next : self._next + first] = keys[:first]
        if m > first:
            self._buffer[: m - first] = keys[first:]
        self._next = (self._next + m) % self.capacity
        self._filled = min(self._filled + m, self.capacity)

    def tensor(self) -> torch.Tensor:
        if self._filled < self.capacity:
            return self._buffer[: self._filled].clone()
        return torch.cat([self._buffer[self._next :], self._buffer[: self._next]]).clone()


def queue_push(queue: MomentumQueue, keys: torch.Tensor) -> MomentumQueue:
    """FIFO insertion at the write cursor; returns the (mutated) queue."""
    queue.push(keys)
    return queue


# ---------------------------------------------------------------------------
# Configuration.
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    method: str = "simclr"
    epochs: int = 100
    batch_size: int = 256
    temperature: float = 0.2
    lam: float = 1.0
    n_additional_positives: int = 1
    stop_gradient: bool = False
    symmetric_additional: bool = False
    extra_via_momentum: bool = False
    lr: float = 0.3
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    queue_size: int = 4096
    encoder_momentum: float = 0.99
    seed: int = 0
    drop_last: bool = True
    checkpoint_every: int = 0  # 0 means final checkpoint only
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    projector: ProjectorSpec = field(default_factory=ProjectorSpec)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}; known: {METHODS}")
        if self.epochs < 1 or self.batch_size < 2:
            raise InvalidArgumentError("epochs must be >= 1 and batch_size >= 2")
        if self.temperature <= 0:
            raise InvalidArgumentError("temperature must be positive")
        if self.lam < 0:
            raise InvalidArgumentError("lam must be >= 0")
        if self.n_additional_positives < 1:
            raise InvalidArgumentError("n_additional_positives must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidArgumentError("warmup_epochs must be in [0, epochs)")
        if not 0.0 <= self.encoder_momentum <= 1.0:
            raise InvalidArgumentError("encoder_momentum must be in [0, 1]")
        if self.method in _MOCO_FAMILY and self.queue_size % self.batch_size != 0:
            raise InvalidArgumentError(
                f"queue_size ({self.queue_size}) must be a multiple of batch_size ({self.batch_size})"
            )
        if self.extra_via_momentum and self.method not in _MOCO_FAMILY:
            raise InvalidArgumentError("extra_via_momentum needs a momentum encoder (moco-family method)")

    @classmethod
    def desk(cls, method: str = "simclr", seed: int = 0) -> "TrainConfig":
        return cls(
            method=method,
            epochs=50,
            batch_size=128,
            lr=0.1,
            warmup_epochs=2,
            queue_size=1024,
            encoder_momentum=0.99,
            seed=seed,
            encoder=EncoderSpec.tiny(),
            projector=ProjectorSpec(hidden_dim=256, output_dim=64),
        )

    @classmethod
    def paper(cls, method: str = "simclr", seed: int = 0) -> "TrainConfig":
        lam = 0.5 if method in _MOCO_FAMILY else 1.0
        batch = 512 if method in _MOCO_FAMILY else 1024
        return cls(
            method=method,
            epochs=1000,
            batch_size=batch,
            lam=lam,
            queue_size=32768,
            encoder_momentum=0.999,
            seed=seed,
            encoder=EncoderSpec(backbone="resnet18", base_width=64),
            projector=ProjectorSpec(hidden_dim=4096, output_dim=256),
        )


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` then cosine decay to zero."""
    if epoch < 0 or epoch >= config.epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.lr * (epoch + 1) / config.warmup_epochs
    span = config.epochs - config.warmup_epochs
    progress = (epoch - config.warmup_epochs) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------


def _build_batch(
    dataset: Dataset,
    indices: np.ndarray,
    config: TrainConfig,
    store: CandidateStore | None,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Views for one batch. Returns (view1, view2, view3) stacks; view3 is a
    (n_extra * N, C, H, W) stack or None when the method runs two views."""
    policy = config.augmentation
    needs_extra = config.method in ("clsp-simclr", "clsp-moco") and config.lam != 0.0
    needs_aug_extra = config.method in ("simclr-aug", "moco-aug") and config.lam != 0.0
    v1, v2, extras = [], [], []
    image_shape = dataset.image_shape

    def synthetic_pixels(idx: int, j: int) -> np.ndarray:
        labels = (epoch, idx) if j == 0 else (epoch, idx, j)
        return sample_positive(store, idx, numpy_rng(config.seed, "positive-choice", *labels)).pixels

    for idx in indices:
        idx = int(idx)
        record = dataset.record(idx)
        rng = numpy_rng(config.seed, "aug", epoch, idx)
        a, b = augment_views(record, policy, rng)
        if config.method == "clsp-noaug":
            a = augment_synthetic(
                synthetic_pixels(idx, 0), policy, numpy_rng(config.seed, "aug-synth", epoch, idx, 0), image_shape
            )
        v1.append(a)
        v2.append(b)
        if needs_extra:
            for j in range(config.n_additional_positives):
                extras.append(
                    augment_synthetic(
                        synthetic_pixels(idx, j),
                        policy,
                        numpy_rng(config.seed, "aug-synth", epoch, idx, j),
                        image_shape,
                    )
                )
        elif needs_aug_extra:
            for j in range(config.n_additional_positives):
                extras.append(
                    augment_synthetic(
                        record.pixels, policy, numpy_rng(config.seed, "aug-extra", epoch, idx, j), image_shape
                    )
                )
    mean, std = dataset.channel_stats
    view1 = standardize(torch.stack(v1), mean, std)
    view2 = standardize(torch.stack(v2), mean, std)
    view3 = standardize(torch.stack(extras), mean, std) if extras else None
    return view1, view2, view3


def _extra_term(config: TrainConfig, anchors: tuple[torch.Tensor, ...], z3: torch.Tensor) -> torch.Tensor:
    """Distance term between each anchor view and each extra view, averaged
    over draws and over the anchor views supplied."""
    n = anchors[0].shape[0]
    # extras were stacked anchor-major: (anchor 0 draws, anchor 1 draws, ...)
    draws = z3.reshape(n, config.n_additional_positives, -1)
    terms = []
    for z in anchors:
        side = z.detach() if config.stop_gradient else z
        terms.extend(additional_positive_loss(side, draws[:, j]) for j in range(config.n_additional_positives))
    return torch.stack(terms).mean()


def train_ssl(
    config: TrainConfig,
    dataset: Dataset,
    store: CandidateStore | None = None,
    log_fn: Callable[[dict], None] | None = None,
    checkpoint_fn: Callable[[int, ContrastiveEncoder], None] | None = None,
) -> tuple[ContrastiveEncoder, list[dict]]:
    """Pretrain one encoder; returns (model, per-epoch history).

    Deterministic given ``config.seed``: init, shuffles, augmentations and
    candidate draws all come from named streams keyed by epoch and anchor
    index, so results do not depend on batching internals. Methods that
    never touch the store run with no diffusion artifacts present.
    """
    if config.method in _STORE_METHODS and (config.lam != 0.0 or config.method == "clsp-noaug"):
        if store is None:
            raise InvalidStateError(f"method {config.method!r} needs a candidate store")
        mismatches = validate_compatibility(store, config, dataset)
        if mismatches:
            raise InvalidStateError("store incompatible with this run: " + "; ".join(mismatches))

    torch.manual_seed(derive_seed(config.seed, "ssl-init"))
    model = ContrastiveEncoder(config.encoder, config.projector)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.sgd_momentum, weight_decay=config.weight_decay
    )

    momentum_model = None
    queue = None
    if config.method in _MOCO_FAMILY:
        momentum_model = ContrastiveEncoder(config.encoder, config.projector)
        momentum_model.load_state_dict(model.state_dict())
        for p in momentum_model.parameters():
            p.requires_grad_(False)
        queue = MomentumQueue(config.queue_size, config.projector.output_dim)

    n = len(dataset)
    if n < config.batch_size and config.drop_last:
        raise InvalidArgumentError(f"dataset of {n} images cannot fill a batch of {config.batch_size}")
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        torch.manual_seed(derive_seed(config.seed, "ssl-epoch", epoch))
        lr = lr_at(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = numpy_rng(config.seed, "ssl-order", epoch).permutation(n)
        limit = n - config.batch_size + 1 if config.drop_last else n
        nce_sum, extra_sum, cos_sum, batches = 0.0, 0.0, 0.0, 0
        model.train()
        if momentum_model is not None:
            momentum_model.train()
        for start in range(0, max(limit, 1), config.batch_size):
            indices = order[start : start + config.batch_size]
            if len(indices) < 2:
                continue
            view1, view2, view3 = _build_batch(dataset, indices, config, store, epoch)
            extra = torch.zeros(())
            if config.method in _MOCO_FAMILY:
                with torch.no_grad():
                    _, zk = momentum_model(view2)
                if len(queue) == 0:
                    # nothing to contrast against yet: seed the queue with
                    # this batch's keys and move on without a step
                    queue.push(zk)
                    continue
                _, zq = model(view1)
                nce = moco_contrastive_loss(zq, zk, queue.tensor(), config.temperature)
                pair_cos = float((_unit(zq.detach()) * zk).sum(dim=1).mean())
                if view3 is not None:
                    _, z2_online = model(view2)
                    if config.extra_via_momentum:
                        with torch.no_grad():
                            _, z3 = momentum_model(view3)
                    else:
                        _, z3 = model(view3)
                    anchors = (zq, z2_online) if config.symmetric_additional else (z2_online,)
                    extra = _extra_term(config, anchors, z3)
                loss = total_loss(nce, extra, config.lam) if view3 is not None else nce
            else:
                both = torch.cat([view1, view2])
                _, z_both = model(both)
                z1, z2 = z_both[: len(indices)], z_both[len(indices) :]
                nce = info_nce_loss(z1, z2, config.temperature)
                pair_cos = float((z1.detach() * z2.detach()).sum(dim=1).mean())
                if view3 is not None:
                    _, z3 = model(view3)
                    anchors = (z1, z2) if config.symmetric_additional else (z2,)
                    extra = _extra_term(config, anchors, z3)
                    loss = total_loss(nce, extra, config.lam)
                else:
                    loss = nce
            if not torch.isfinite(loss):
                raise NumericError("pretraining loss is not finite", epoch=epoch, batch_start=start)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            if config.method in _MOCO_FAMILY:
                momentum_update(model, momentum_model, config.encoder_momentum)
                queue.push(zk)
            nce_sum += float(nce.detach())
            extra_sum += float(extra.detach())
            cos_sum += pair_cos
            batches += 1
        record = {
            "epoch": epoch,
            "step": step,
            "loss_contrastive": nce_sum / max(batches, 1),
            "loss_additional": extra_sum / max(batches, 1),
            "lr": lr,
            "positive_cosine": cos_sum / max(batches, 1),
        }
        record["loss_total"] = record["loss_contrastive"] + config.lam * record["loss_additional"]
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if checkpoint_fn is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint_fn(epoch, model)
    model.eval()
    return model, history


def config_summary(config: TrainConfig) -> dict:
    """Flat mapping of the knobs that define a run (for resolved-config files)."""
    flat = {
        "method": config.method,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "temperature": config.temperature,
        "lam": config.lam,
        "n_additional_positives": config.n_additional_positives,
        "stop_gradient": config.stop_gradient,
        "symmetric_additional": config.symmetric_additional,
        "extra_via_momentum": config.extra_via_momentum,
        "lr": config.lr,
        "sgd_momentum": config.sgd_momentum,
        "weight_decay": config.weight_decay,
        "warmup_epochs": config.warmup_epochs,
        "queue_size": config.queue_size,
        "encoder_momentum": config.encoder_momentum,
        "seed": config.seed,
        "checkpoint_every": config.checkpoint_every,
        "backbone": config.encoder.backbone,
        "encoder_width": config.encoder.base_width,
        "projector_hidden": config.projector.hidden_dim,
        "projector_out": config.projector.output_dim,
    }
    return flat


def with_method(config: TrainConfig, method: str, seed: int | None = None) -> TrainConfig:
    """Same run shape, different method (and optionally seed)."""
    kwargs = {"method": method}
    if seed is not None:
        kwargs["seed"] = seed
    return replace(config, **kwargs)
