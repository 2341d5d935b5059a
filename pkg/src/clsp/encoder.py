"""Contrastive backbone f(.), projector g(.), and momentum bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateEmbeddingError, InvalidArgumentError


class Embedding(NamedTuple):
    """Representation h (pre-projection) and its unit-norm projection z."""

    h: torch.Tensor
    z: torch.Tensor


@dataclass
class EncoderSpec:
    """Backbone descriptor.

    ``small_image_stem`` swaps the stride-2 7x7 stem for a stride-1 3x3
    convolution and drops the initial max-pool, which keeps 32x32 inputs at
    full resolution through the first stage.
    """

    backbone: str = "resnet18"  # "resnet18" | "tiny"
    base_width: int = 64
    small_image_stem: bool = True
    representation_dim: int = 0  # derived when 0

    def __post_init__(self):
        if self.backbone not in ("resnet18", "tiny"):
            raise InvalidArgumentError(f"unknown backbone preset: {self.backbone!r}")
        if self.base_width < 1:
            raise InvalidArgumentError("base_width must be positive")
        if self.representation_dim == 0:
            self.representation_dim = self.base_width * (8 if self.backbone == "resnet18" else 4)

    @classmethod
    def tiny(cls, base_width: int = 32) -> "EncoderSpec":
        return cls(backbone="tiny", base_width=base_width)


@dataclass
class ProjectorSpec:
    """Two-layer MLP head; hidden nonlinearity, no output nonlinearity."""

    hidden_dim: int = 4096
    output_dim: int = 256
    hidden_norm: str = "none"  # "none" | "layer" (batch-independent only)

    def __post_init__(self):
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise InvalidArgumentError("projector dims must be positive")
        if self.hidden_norm not in ("none", "layer"):
            raise InvalidArgumentError(f"unknown hidden_norm: {self.hidden_norm!r}")


class _BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _ResNet18(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        w = spec.base_width
        if spec.small_image_stem:
            self.stem = nn.Sequential(
                nn.Conv2d(3, w, 3, stride=1, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, w, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        self.layer1 = self._stage(w, w, stride=1)
        self.layer2 = self._stage(w, 2 * w, stride=2)
        self.layer3 = self._stage(2 * w, 4 * w, stride=2)
        self.layer4 = self._stage(4 * w, 8 * w, stride=2)

    @staticmethod
    def _stage(in_ch, out_ch, stride):
        return nn.Sequential(_BasicBlock(in_ch, out_ch, stride), _BasicBlock(out_ch, out_ch))

    def forward(self, x):
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class _TinyCNN(nn.Module):
    """Three-stage convnet for CPU-scale runs; representation = GAP features."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        w = spec.base_width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1, bias=False), nn.BatchNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(4 * w), nn.ReLU(inplace=True),
            nn.Conv2d(4 * w, 4 * w, 3, padding=1, bias=False), nn.BatchNorm2d(4 * w), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.net(x), 1), 1)


def build_backbone(spec: EncoderSpec) -> nn.Module:
    return _ResNet18(spec) if spec.backbone == "resnet18" else _TinyCNN(spec)


class ContrastiveEncoder(nn.Module):
    """Backbone + projector pair used by every SSL method."""

    def __init__(self, encoder_spec: EncoderSpec, projector_spec: ProjectorSpec):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.projector_spec = projector_spec
        self.backbone = build_backbone(encoder_spec)
        layers: list[nn.Module] = [nn.Linear(encoder_spec.representation_dim, projector_spec.hidden_dim)]
        if projector_spec.hidden_norm == "layer":
            layers.append(nn.LayerNorm(projector_spec.hidden_dim))
        layers.append(nn.ReLU(inplace=True))
        layers.append(nn.Linear(projector_spec.hidden_dim, projector_spec.output_dim))
        self.projector = nn.Sequential(*layers)

    def forward(self, x):
        h = self.backbone(x)
        return Embedding(h, project_normalize(self, h))


def embed(model: ContrastiveEncoder, views: torch.Tensor) -> torch.Tensor:
    """Representation vectors h = f(views)."""
    if views.ndim != 4 or views.shape[1] != 3:
        raise InvalidArgumentError(f"expected a (B, 3, H, W) batch, got {tuple(views.shape)}")
    return model.backbone(views)


def project_normalize(model: ContrastiveEncoder, h: torch.Tensor) -> torch.Tensor:
    """z = g(h) / ||g(h)||; refuses to divide by (near-)zero norms."""
    g = model.projector(h)
    norms = g.norm(dim=-1, keepdim=True)
    if bool((norms <= 1e-12).any()):
        raise DegenerateEmbeddingError("projector output has zero norm; cannot normalize")
    return g / norms


def _param_list(obj) -> list[torch.Tensor]:
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    return list(obj)


@torch.no_grad()
def momentum_update(online, target, m: float) -> None:
    """target <- m * target + (1 - m) * online, elementwise over parameter pairs."""
    if not 0.0 <= m <= 1.0:
        raise InvalidArgumentError(f"momentum must be in [0, 1], got {m}")
    online_params, target_params = _param_list(online), _param_list(target)
    if len(online_params) != len(target_params):
        raise InvalidArgumentError("parameter lists have different lengths")
    for p_online, p_target in zip(online_params, target_params):
        if p_online.shape != p_target.shape:
            raise InvalidArgumentError(
                f"parameter shape mismatch: {tuple(p_online.shape)} vs {tuple(p_target.shape)}"
            )
        p_target.mul_(m).add_(p_online, alpha=1.0 - m)


def specs_to_meta(encoder_spec: EncoderSpec, projector_spec: ProjectorSpec) -> dict:
    """Flat key/value form of the architecture, embedded in checkpoints."""
    return {
        "backbone": encoder_spec.backbone,
        "base_width": encoder_spec.base_width,
        "small_image_stem": encoder_spec.small_image_stem,
        "representation_dim": encoder_spec.representation_dim,
        "projector_hidden": projector_spec.hidden_dim,
        "projector_out": projector_spec.output_dim,
        "projector_norm": projector_spec.hidden_norm,
    }


def specs_from_meta(meta: dict) -> tuple[EncoderSpec, ProjectorSpec]:
    encoder_spec = EncoderSpec(
        backbone=str(meta["backbone"]),
        base_width=int(meta["base_width"]),
        small_image_stem=bool(meta["small_image_stem"]),
        representation_dim=int(meta.get("representation_dim", 0)),
    )
    projector_spec = ProjectorSpec(
        hidden_dim=int(meta["projector_hidden"]),
        output_dim=int(meta["projector_out"]),
        hidden_norm=str(meta.get("projector_norm", "none")),
    )
    return encoder_spec, projector_spec


def encoder_from_checkpoint(payload: dict) -> ContrastiveEncoder:
    """Rebuild a ContrastiveEncoder from a loaded checkpoint payload."""
    encoder_spec, projector_spec = specs_from_meta(payload["meta"])
    model = ContrastiveEncoder(encoder_spec, projector_spec)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model
