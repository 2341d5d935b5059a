"""Frozen-encoder evaluation: weighted kNN, linear and semi-supervised
probes, similarity-distribution analysis, and embedding export.

The probes consume pre-projection representations (the backbone output
``h``); only the similarity analysis looks at projected embeddings,
matching how the pretraining losses see the data.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint
from .data import AugmentationPolicy, Dataset, augment_synthetic, augment_views, resize_plain, standardize
from .encoder import ContrastiveEncoder, encoder_from_checkpoint
from .errors import InvalidArgumentError, StratificationError
from .positives import CandidateStore, sample_positive
from .seeding import derive_seed, numpy_rng

DEFAULT_KNN_GRID = (10, 20, 50, 100, 200)


def _resolve_encoder(model_or_checkpoint) -> tuple[ContrastiveEncoder, str]:
    """Accept a live model or a checkpoint path; returns (model, digest)."""
    if isinstance(model_or_checkpoint, (str, os.PathLike)):
        payload = load_checkpoint(model_or_checkpoint, expected_kind="encoder")
        return encoder_from_checkpoint(payload), payload.get("digest", "")
    return model_or_checkpoint, ""


# ---------------------------------------------------------------------------
# Feature banks.
# ---------------------------------------------------------------------------


@dataclass
class FeatureBank:
    """Representations plus labels for one dataset split."""

    features: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int64
    split: str = ""
    checkpoint_digest: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1 or len(self.features) != len(self.labels):
            raise InvalidArgumentError(
                f"bank needs (N, D) features with N labels, got {self.features.shape} / {self.labels.shape}"
            )
        if not np.isfinite(self.features).all():
            raise InvalidArgumentError("bank features contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@torch.no_grad()
def extract_features(
    model_or_checkpoint,
    dataset: Dataset,
    batch_size: int = 256,
    split: str = "",
) -> FeatureBank:
    """Backbone representations of plain (resize-only, standardized) images."""
    model, digest = _resolve_encoder(model_or_checkpoint)
    output_size = dataset.image_shape[0]
    mean, std = dataset.channel_stats
    was_training = model.training
    model.eval()
    chunks = []
    try:
        for start in range(0, len(dataset), batch_size):
            stop = min(start + batch_size, len(dataset))
            imgs = torch.stack([resize_plain(dataset.pixels[i], output_size) for i in range(start, stop)])
            chunks.append(model.backbone(standardize(imgs, mean, std)).numpy())
    finally:
        model.train(was_training)
    return FeatureBank(
        features=np.concatenate(chunks).astype(np.float32),
        labels=dataset.labels.astype(np.int64).copy(),
        split=split or dataset.name,
        checkpoint_digest=digest,
    )


# ---------------------------------------------------------------------------
# Weighted kNN.
# ---------------------------------------------------------------------------


def knn_predict(
    train_bank: FeatureBank,
    queries: np.ndarray,
    k: int,
    temperature: float = 0.07,
) -> np.ndarray:
    """Cosine-weighted kNN votes; ties break toward the earlier training row
    (neighbor selection) and the smaller class id (vote argmax)."""
    if not 1 <= k < len(train_bank):
        raise InvalidArgumentError(f"k must be in [1, {len(train_bank)}), got {k}")
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    train = train_bank.features / np.maximum(np.linalg.norm(train_bank.features, axis=1, keepdims=True), 1e-12)
    q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    n_classes = int(train_bank.labels.max()) + 1
    predictions = np.empty(len(q), dtype=np.int64)
    rows = np.arange(len(train))
    for start in range(0, len(q), 512):
        sims = q[start : start + 512] @ train.T  # (B, N)
        for i, sim_row in enumerate(sims):
            order = np.lexsort((rows, -sim_row))[:k]
            weights = np.exp(sim_row[order] / temperature)
            scores = np.zeros(n_classes)
            np.add.at(scores, train_bank.labels[order], weights)
            predictions[start + i] = int(np.argmax(scores))
    return predictions


@dataclass
class KnnResult:
    """Best accuracy over the searched k grid plus the full breakdown."""

    best_k: int
    best_accuracy: float
    per_k: dict[int, float] = field(default_factory=dict)


def knn_eval(
    train_bank: FeatureBank,
    test_bank: FeatureBank,
    ks: int | Sequence[int] = DEFAULT_KNN_GRID,
    temperature: float = 0.07,
) -> KnnResult:
    """Weighted-kNN accuracy searched over ``ks``; a k that is not smaller
    than the bank is skipped with a warning."""
    if train_bank.dim != test_bank.dim:
        raise InvalidArgumentError(f"bank dims differ: {train_bank.dim} != {test_bank.dim}")
    if len(train_bank) == 0 or len(test_bank) == 0:
        raise InvalidArgumentError("banks must be nonempty")
    grid = [ks] if isinstance(ks, int) else list(ks)
    per_k: dict[int, float] = {}
    for k in grid:
        if k >= len(train_bank):
            warnings.warn(f"skipping k={k}: bank only holds {len(train_bank)} points", stacklevel=2)
            continue
        preds = knn_predict(train_bank, test_bank.features, k, temperature)
        per_k[k] = float(np.mean(preds == test_bank.labels))
    if not per_k:
        raise InvalidArgumentError(f"no usable k in {grid} for a bank of {len(train_bank)} points")
    best_k = max(per_k, key=lambda k: (per_k[k], -k))
    return KnnResult(best_k=best_k, best_accuracy=per_k[best_k], per_k=per_k)


# ---------------------------------------------------------------------------
# Linear / semi-supervised probes.
# ---------------------------------------------------------------------------


@dataclass
class ProbeSchedule:
    """Linear-probe optimization recipe (SGD, step decay, no weight decay).

    ``milestones`` default to the 60% and 80% marks of the epoch budget,
    which is the standard (60, 80) for the default 100 epochs.
    """

    epochs: int = 100
    batch_size: int = 256
    lr: float = 10.0
    milestones: tuple[int, ...] | None = None
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if self.milestones is None:
            marks: list[int] = []
            for fraction in (0.6, 0.8):
                m = round(self.epochs * fraction)
                if 1 <= m < self.epochs and m not in marks:
                    marks.append(m)
            self.milestones = tuple(marks)
        if list(self.milestones) != sorted(self.milestones):
            raise InvalidArgumentError("milestones must be ordered")
        if any(m >= self.epochs or m < 1 for m in self.milestones):
            raise InvalidArgumentError("milestones must fall inside (0, epochs)")


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    history: list = field(default_factory=list)


def probe_lr_at(epoch: int, schedule: ProbeSchedule) -> float:
    """Step schedule: lr multiplied by gamma at each milestone."""
    lr = schedule.lr
    for m in schedule.milestones:
        if epoch >= m:
            lr *= schedule.gamma
    return lr


def stratified_label_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Indices of a label-balanced subset with round(fraction * count) per class.

    Every class must contribute at least one example, otherwise the split
    is rejected.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgumentError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    picked = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        take = int(round(fraction * len(members)))
        if take < 1:
            raise StratificationError(
                f"fraction {fraction} yields no samples for class {int(cls)} ({len(members)} available)"
            )
        rng = numpy_rng(seed, "stratified", str(fraction), int(cls))
        picked.append(rng.permutation(members)[:take])
    return np.sort(np.concatenate(picked))


def _train_head(
    feature_fn,
    labels: torch.Tensor,
    feature_dim: int,
    n_classes: int,
    schedule: ProbeSchedule,
    seed: int,
) -> tuple[torch.nn.Linear, list[dict]]:
    """SGD over a linear head; ``feature_fn(epoch, order_slice)`` yields the
    (possibly re-augmented) features for those training rows."""
    torch.manual_seed(derive_seed(seed, "probe-init"))
    head = torch.nn.Linear(feature_dim, n_classes)
    optimizer = torch.optim.SGD(
        head.parameters(), lr=schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )
    n = len(labels)
    history = []
    for epoch in range(schedule.epochs):
        lr = probe_lr_at(epoch, schedule)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = numpy_rng(seed, "probe-order", epoch).permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            sel = order[start : start + schedule.batch_size]
            feats = feature_fn(epoch, sel)
            loss = F.cross_entropy(head(feats), labels[torch.from_numpy(sel.copy())])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr})
    return head, history


def probe_augmentation(output_size: int = 32) -> AugmentationPolicy:
    """Crop + flip only; the color machinery stays off for probe training."""
    return AugmentationPolicy(
        output_size=output_size,
        crop_scale_range=(0.2, 1.0),
        flip_probability=0.5,
        color_jitter_probability=0.0,
        grayscale_probability=0.0,
        solarize_probability=0.0,
    )


def linear_probe(
    train_split,
    test_split,
    schedule: ProbeSchedule | None = None,
    label_fraction: float = 1.0,
    seed: int = 0,
    model=None,
    batch_size_extract: int = 256,
) -> ProbeResult:
    """Linear classifier on a frozen encoder; returns test top-1.

    Two input forms:

    * ``(Dataset, Dataset)`` with ``model`` (or a checkpoint path): the
      protocol form, where training rows are re-augmented (crop + flip)
      every epoch and re-encoded through the frozen backbone.
    * ``(FeatureBank, FeatureBank)``: probes cached features directly
      with no augmentation.

    ``label_fraction < 1`` trains on a stratified subset (the
    semi-supervised protocol).
    """
    schedule = schedule or ProbeSchedule()
    if not 0.0 < label_fraction <= 1.0:
        raise InvalidArgumentError(f"label_fraction must be in (0, 1], got {label_fraction}")

    if isinstance(train_split, FeatureBank):
        if not isinstance(test_split, FeatureBank):
            raise InvalidArgumentError("feature-bank probe needs banks for both splits")
        if train_split.dim != test_split.dim:
            raise InvalidArgumentError(f"bank dims differ: {train_split.dim} != {test_split.dim}")
        indices = np.arange(len(train_split))
        if label_fraction < 1.0:
            indices = stratified_label_subset(train_split.labels, label_fraction, seed)
        feats = torch.from_numpy(train_split.features[indices]).float()
        labels = torch.from_numpy(train_split.labels[indices]).long()
        n_classes = int(max(train_split.labels.max(), test_split.labels.max())) + 1
        head, history = _train_head(
            lambda epoch, sel: feats[torch.from_numpy(sel.copy())],
            labels, train_split.dim, n_classes, schedule, seed,
        )
        test_feats = torch.from_numpy(test_split.features).float()
        test_labels = torch.from_numpy(test_split.labels).long()
        with torch.no_grad():
            train_acc = float((head(feats).argmax(dim=1) == labels).float().mean())
            test_acc = float((head(test_feats).argmax(dim=1) == test_labels).float().mean())
        return ProbeResult(accuracy=test_acc, train_accuracy=train_acc, n_train=len(indices), history=history)

    if model is None:
        raise InvalidArgumentError("image-split probe needs the frozen encoder (model or checkpoint path)")
    model, _ = _resolve_encoder(model)
    train_dataset: Dataset = train_split
    test_dataset: Dataset = test_split
    was_training = model.training
    model.eval()
    try:
        indices = np.arange(len(train_dataset))
        if label_fraction < 1.0:
            indices = stratified_label_subset(train_dataset.labels, label_fraction, seed)
        labels = torch.from_numpy(train_dataset.labels[indices]).long()
        n_classes = max(train_dataset.num_classes, test_dataset.num_classes)
        policy = probe_augmentation(train_dataset.image_shape[0])
        mean, std = train_dataset.channel_stats

        @torch.no_grad()
        def feature_fn(epoch: int, sel: np.ndarray) -> torch.Tensor:
            views = [
                augment_views(
                    train_dataset.record(int(i)), policy, numpy_rng(seed, "probe-aug", epoch, int(i))
                )[0]
                for i in indices[sel]
            ]
            return model.backbone(standardize(torch.stack(views), mean, std))

        head, history = _train_head(
            feature_fn, labels, model.encoder_spec.representation_dim, n_classes, schedule, seed
        )
        train_bank = extract_features(model, train_dataset, batch_size_extract)
        test_bank = extract_features(model, test_dataset, batch_size_extract)
        with torch.no_grad():
            train_sub = torch.from_numpy(train_bank.features[indices]).float()
            train_acc = float((head(train_sub).argmax(dim=1) == labels).float().mean())
            test_feats = torch.from_numpy(test_bank.features).float()
            test_labels = torch.from_numpy(test_bank.labels).long()
            test_acc = float((head(test_feats).argmax(dim=1) == test_labels).float().mean())
    finally:
        model.train(was_training)
    return ProbeResult(accuracy=test_acc, train_accuracy=train_acc, n_train=len(indices), history=history)


# ---------------------------------------------------------------------------
# Similarity-distribution analysis.
# ---------------------------------------------------------------------------


@dataclass
class SimilarityHistogram:
    """Binned cosine similarities of one pair kind over [-1, 1]."""

    kind: str  # "original" | "additional"
    counts: tuple[int, ...]
    mean: float
    n_pairs: int

    def __post_init__(self):
        if sum(self.counts) != self.n_pairs:
            raise InvalidArgumentError("histogram mass must equal the number of pairs")

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.bins + 1)

    def as_kv(self, prefix: str = "") -> dict:
        p = prefix or self.kind
        return {f"{p}_mean": self.mean, f"{p}_pairs": self.n_pairs, f"{p}_hist": self.counts}


def _cosine(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    return (F.normalize(a, dim=1) * F.normalize(b, dim=1)).sum(dim=1).numpy()


def _histogram(values: np.ndarray, bins: int, kind: str) -> SimilarityHistogram:
    values = np.clip(values, -1.0, 1.0)
    counts, _ = np.histogram(values, bins=bins, range=(-1.0, 1.0))
    return SimilarityHistogram(
        kind=kind, counts=tuple(int(c) for c in counts), mean=float(values.mean()), n_pairs=len(values)
    )


@torch.no_grad()
def similarity_analysis(
    model_or_checkpoint,
    dataset: Dataset,
    seed: int = 0,
    store: CandidateStore | None = None,
    n_samples: int | None = None,
    bins: int = 40,
    policy: AugmentationPolicy | None = None,
    batch_size: int = 256,
) -> tuple[SimilarityHistogram, SimilarityHistogram | None]:
    """Cosine similarity of positive pairs under the trained projector.

    Returns (original-pair histogram, additional-pair histogram). The
    additional histogram compares the second augmented view against an
    augmented synthetic positive and requires a store.
    """
    if bins < 1:
        raise InvalidArgumentError("bins must be >= 1")
    model, _ = _resolve_encoder(model_or_checkpoint)
    policy = policy or AugmentationPolicy(output_size=dataset.image_shape[0])
    n = len(dataset)
    if n_samples is None or n_samples >= n:
        indices = np.arange(n)
    else:
        if n_samples < 1:
            raise InvalidArgumentError("n_samples must be >= 1")
        indices = np.sort(numpy_rng(seed, "sim-subset").choice(n, size=n_samples, replace=False))
    mean, std = dataset.channel_stats
    was_training = model.training
    model.eval()
    orig_vals, add_vals = [], []
    try:
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            v1, v2, v3 = [], [], []
            for idx in chunk:
                idx = int(idx)
                a, b = augment_views(dataset.record(idx), policy, numpy_rng(seed, "sim-aug", idx))
                v1.append(a)
                v2.append(b)
                if store is not None:
                    draw = sample_positive(store, idx, numpy_rng(seed, "sim-choice", idx))
                    v3.append(augment_synthetic(draw.pixels, policy, numpy_rng(seed, "sim-aug-synth", idx)))
            _, z1 = model(standardize(torch.stack(v1), mean, std))
            _, z2 = model(standardize(torch.stack(v2), mean, std))
            orig_vals.append(_cosine(z1, z2))
            if v3:
                _, z3 = model(standardize(torch.stack(v3), mean, std))
                add_vals.append(_cosine(z2, z3))
    finally:
        model.train(was_training)
    original = _histogram(np.concatenate(orig_vals), bins, "original")
    additional = _histogram(np.concatenate(add_vals), bins, "additional") if add_vals else None
    return original, additional


# ---------------------------------------------------------------------------
# Embedding export.
# ---------------------------------------------------------------------------


def export_embeddings(bank: FeatureBank, path) -> None:
    """Write ``index label f_1 ... f_D`` rows under one metadata header line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# count={len(bank)} dim={bank.dim} checkpoint={bank.checkpoint_digest or 'unknown'}\n")
        for i, (label, row) in enumerate(zip(bank.labels, bank.features)):
            fh.write(f"{i} {int(label)} " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path) -> tuple[FeatureBank, dict]:
    """Inverse of :func:`export_embeddings`; returns (bank, header fields)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise InvalidArgumentError(f"{path} does not look like an embedding export (missing header)")
        meta = {}
        for token in header[1:].split():
            key, _, value = token.partition("=")
            meta[key] = value
        labels, rows = [], []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
    bank = FeatureBank(
        features=np.array(rows, dtype=np.float32),
        labels=np.array(labels, dtype=np.int64),
        checkpoint_digest=str(meta.get("checkpoint", "")),
    )
    if "count" in meta and int(meta["count"]) != len(bank):
        raise InvalidArgumentError(f"embedding export declares {meta['count']} rows, found {len(bank)}")
    if "dim" in meta and int(meta["dim"]) != bank.dim:
        raise InvalidArgumentError(f"embedding export declares dim {meta['dim']}, found {bank.dim}")
    return bank, meta
