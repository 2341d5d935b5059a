"""Unconditional denoising diffusion: training, DDIM sampling, feature hooks.

The U-Net exposes its down-path stage outputs as named hook points
(``down0``, ``down1``, ..., plus the bottleneck ``mid``). A
:class:`FeatureHook` attached to a stage can capture the features, zero
them out, or blend them with features extracted from an anchor image:

    h <- w * h + (1 - w) * h_anchor

With ``w = 1`` the hook is the identity (pure random sampling); with
``w = 0`` the anchor features replace the stage output entirely, while the
remaining layers keep their randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, InvalidStateError, NumericError
from .seeding import derive_seed, torch_generator

# ---------------------------------------------------------------------------
# Noise schedule and forward process.
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Linear variance schedule with cached cumulative products."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise InvalidArgumentError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidArgumentError(
            f"beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _gather_ab(schedule: NoiseSchedule, t: torch.Tensor) -> torch.Tensor:
    if bool((t < 0).any()) or bool((t >= schedule.T).any()):
        raise InvalidArgumentError(f"timestep out of range [0, {schedule.T})")
    ab = torch.from_numpy(schedule.alpha_bar)
    return ab[t]


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if eps.shape != x0.shape:
        raise InvalidArgumentError(f"eps shape {tuple(eps.shape)} must match x0 {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    ab = _gather_ab(schedule, t)
    while ab.ndim < x0.ndim:
        ab = ab.unsqueeze(-1)
    ab = ab.to(torch.float64)
    return (ab.sqrt() * x0.double() + (1.0 - ab).sqrt() * eps.double()).to(x0.dtype)


# ---------------------------------------------------------------------------
# Feature hooks.
# ---------------------------------------------------------------------------

AnchorFeatures = Mapping[int, torch.Tensor] | Callable[[int], torch.Tensor] | torch.Tensor | None


@dataclass
class FeatureHook:
    """Directive attached to one hookable layer of the diffusion network.

    ``anchor_features`` (interpolate mode only) may be a single tensor, a
    mapping from timestep to tensor, or a callable producing the tensor for
    the timestep of the current network invocation.
    """

    layer_id: str
    mode: str  # "capture" | "mask" | "interpolate"
    w: float = 1.0
    anchor_features: AnchorFeatures = None
    captured: dict[int, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("capture", "mask", "interpolate"):
            raise InvalidArgumentError(f"unknown hook mode: {self.mode!r}")
        if self.mode == "interpolate" and not 0.0 <= self.w <= 1.0:
            raise InvalidArgumentError(f"interpolation weight must be in [0, 1], got {self.w}")

    def anchor_at(self, t: int) -> torch.Tensor:
        src = self.anchor_features
        if src is None:
            raise InvalidStateError(f"hook on {self.layer_id!r} interpolates but has no anchor features")
        if callable(src):
            return src(t)
        if isinstance(src, torch.Tensor):
            return src
        try:
            return src[t]
        except KeyError:
            raise InvalidStateError(f"hook on {self.layer_id!r} has no anchor features for t={t}") from None


def apply_hooks(features: torch.Tensor, hook: FeatureHook, t: int) -> torch.Tensor:
    """Apply one hook to a stage output for the invocation at timestep ``t``."""
    if hook.mode == "capture":
        hook.captured[t] = features.detach().clone()
        return features
    if hook.mode == "mask":
        return torch.zeros_like(features)
    anchor = hook.anchor_at(t)
    if anchor.shape[1:] != features.shape[1:] or features.shape[0] % anchor.shape[0] != 0:
        raise InvalidArgumentError(
            f"anchor features {tuple(anchor.shape)} not congruent with stage output {tuple(features.shape)}"
        )
    if anchor.shape[0] != features.shape[0]:
        anchor = anchor.repeat_interleave(features.shape[0] // anchor.shape[0], dim=0)
    if hook.w == 1.0:
        return features
    if hook.w == 0.0:
        return anchor.to(features.dtype)
    return hook.w * features + (1.0 - hook.w) * anchor.to(features.dtype)


# ---------------------------------------------------------------------------
# U-Net.
# ---------------------------------------------------------------------------


@dataclass
class UNetSpec:
    """Denoiser architecture. ``channel_mults`` set the down-path stages; the
    hookable ids are ``down0..down{L-1}`` and ``mid``."""

    image_size: int = 32
    in_channels: int = 3
    base_width: int = 128
    channel_mults: tuple[int, ...] = (1, 2, 2, 2)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (16,)
    dropout: float = 0.1

    def __post_init__(self):
        if self.base_width < 4:
            raise InvalidArgumentError("base_width too small")
        depth = len(self.channel_mults)
        if self.image_size % (2 ** (depth - 1)) != 0:
            raise InvalidArgumentError("image_size must be divisible by 2^(stages - 1)")
        for res in self.attention_resolutions:
            if self.image_size % res != 0:
                raise InvalidArgumentError(f"attention resolution {res} does not divide image size")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must be in [0, 1)")

    @property
    def encoder_layer_ids(self) -> tuple[str, ...]:
        return tuple(f"down{i}" for i in range(len(self.channel_mults)))

    @property
    def hook_ids(self) -> tuple[str, ...]:
        return self.encoder_layer_ids + ("mid",)

    @classmethod
    def desk(cls) -> "UNetSpec":
        return cls(image_size=32, base_width=32, channel_mults=(1, 2, 2), num_res_blocks=1)

    @classmethod
    def paper(cls) -> "UNetSpec":
        return cls(image_size=32, base_width=128, channel_mults=(1, 2, 2, 2), num_res_blocks=2)

    def to_meta(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "channel_mults": self.channel_mults,
            "num_res_blocks": self.num_res_blocks,
            "attention_resolutions": self.attention_resolutions,
            "dropout": self.dropout,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "UNetSpec":
        mults = meta["channel_mults"]
        attn = meta["attention_resolutions"]
        return cls(
            image_size=int(meta["image_size"]),
            in_channels=int(meta.get("in_channels", 3)),
            base_width=int(meta["base_width"]),
            channel_mults=tuple(int(m) for m in (mults if isinstance(mults, (tuple, list)) else (mults,))),
            num_res_blocks=int(meta["num_res_blocks"]),
            attention_resolutions=tuple(int(r) for r in (attn if isinstance(attn, (tuple, list)) else (attn,))),
            dropout=float(meta["dropout"]),
        )


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class _ChannelMix(nn.Module):
    """1x1 convolution computed as a per-pixel matmul.

    The CPU gemm behind Conv2d with kernel size 1 accumulates in a
    batch-size-dependent order, so sampled bytes would depend on how
    anchors are chunked during candidate generation. The matmul here is
    row-independent, keeping every forward pass invariant to batch
    composition. Parameter names and shapes match Conv2d, so checkpoints
    are interchangeable.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        seed_conv = nn.Conv2d(in_ch, out_ch, 1)
        self.weight = seed_conv.weight
        self.bias = seed_conv.bias

    def forward(self, x):
        out = x.permute(0, 2, 3, 1) @ self.weight[:, :, 0, 0].t() + self.bias
        return out.permute(0, 3, 1, 2)


def _time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = _ChannelMix(in_ch, out_ch) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return h + self.skip(x)


class _SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = _ChannelMix(channels, channels * 3)
        self.proj = _ChannelMix(channels, channels)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class _Stage(nn.Module):
    """A run of res blocks (with optional attention) at one resolution."""

    def __init__(self, in_ch, out_ch, time_dim, num_blocks, dropout, use_attention):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        for i in range(num_blocks):
            self.blocks.append(_ResBlock(in_ch if i == 0 else out_ch, out_ch, time_dim, dropout))
            self.attns.append(_SelfAttention(out_ch) if use_attention else nn.Identity())

    def forward(self, x, temb):
        for block, attn in zip(self.blocks, self.attns):
            x = attn(block(x, temb))
        return x


class UNet(nn.Module):
    """Epsilon-prediction U-Net with hookable down-path stage outputs."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        self.invocations = 0  # instrumentation only; not persisted
        w = spec.base_width
        time_dim = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(w, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        channels = [w * m for m in spec.channel_mults]
        self.stem = nn.Conv2d(spec.in_channels, channels[0], 3, padding=1)

        res = spec.image_size
        self.down_stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        in_ch = channels[0]
        self._stage_resolutions = []
        for i, ch in enumerate(channels):
            self.down_stages.append(
                _Stage(in_ch, ch, time_dim, spec.num_res_blocks, spec.dropout, res in spec.attention_resolutions)
            )
            self._stage_resolutions.append(res)
            in_ch = ch
            if i < len(channels) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                res //= 2

        self.mid_block1 = _ResBlock(channels[-1], channels[-1], time_dim, spec.dropout)
        self.mid_attn = _SelfAttention(channels[-1])
        self.mid_block2 = _ResBlock(channels[-1], channels[-1], time_dim, spec.dropout)

        self.up_stages = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        up_in = channels[-1]
        for i in reversed(range(len(channels))):
            ch = channels[i]
            stage_res = self._stage_resolutions[i]
            self.up_stages.append(
                _Stage(up_in + ch, ch, time_dim, spec.num_res_blocks, spec.dropout,
                       stage_res in spec.attention_resolutions)
            )
            if i > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))
            up_in = ch
        self.head_norm = _norm(channels[0])
        self.head = nn.Conv2d(channels[0], spec.in_channels, 3, padding=1)

    def _hook_plan(self, hooks: Sequence[FeatureHook] | None) -> dict[str, list[FeatureHook]]:
        plan: dict[str, list[FeatureHook]] = {}
        for hook in hooks or ():
            if hook.layer_id not in self.spec.hook_ids:
                raise InvalidArgumentError(
                    f"unknown hook layer {hook.layer_id!r}; known: {self.spec.hook_ids}"
                )
            plan.setdefault(hook.layer_id, []).append(hook)
        return plan

    def forward(self, x, t, hooks: Sequence[FeatureHook] | None = None):
        self.invocations += 1
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        plan = self._hook_plan(hooks)
        t_hook = -1
        if plan:
            unique = torch.unique(t)
            if len(unique) != 1:
                raise InvalidArgumentError("hooked invocations require a single shared timestep")
            t_hook = int(unique[0])

        def run_hooks(h, layer_id):
            for hook in plan.get(layer_id, ()):
                h = apply_hooks(h, hook, t_hook)
            return h

        temb = self.time_mlp(_time_embedding(t, self.spec.base_width))
        h = self.stem(x)
        skips = []
        for i, stage in enumerate(self.down_stages):
            h = stage(h, temb)
            h = run_hooks(h, f"down{i}")
            skips.append(h)
            if i < len(self.down_stages) - 1:
                h = self.downsamples[i](h)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)
        h = run_hooks(h, "mid")
        for j, stage in enumerate(self.up_stages):
            i = len(self.down_stages) - 1 - j
            h = stage(torch.cat([h, skips[i]], dim=1), temb)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[j](h)
        return self.head(F.silu(self.head_norm(h)))


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------


def diffusion_train_step(
    model: UNet,
    batch_x0: torch.Tensor,
    rng: torch.Generator,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One epsilon-MSE step at uniformly sampled timesteps. Returns the loss."""
    model.train()
    b = batch_x0.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=rng)
    eps = torch.randn(batch_x0.shape, generator=rng, dtype=batch_x0.dtype)
    x_t = q_sample(batch_x0, t, eps, schedule)
    pred = model(x_t, t)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise NumericError("diffusion loss is not finite", t_min=int(t.min()), t_max=int(t.max()))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def to_model_range(pixels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """uint8 [..., H, W, C] or [..., C, H, W] float in [0,1] -> float32 in [-1, 1]."""
    if isinstance(pixels, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(pixels))
        if tensor.dtype == torch.uint8:
            tensor = tensor.float() / 255.0
        if tensor.ndim == 4 and tensor.shape[-1] in (1, 3):
            tensor = tensor.permute(0, 3, 1, 2)
        elif tensor.ndim == 3 and tensor.shape[-1] in (1, 3):
            tensor = tensor.permute(2, 0, 1)
    else:
        tensor = pixels.float()
    return tensor * 2.0 - 1.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """[-1, 1] float (B, C, H, W) -> uint8 [B, H, W, C]."""
    x = ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


# ---------------------------------------------------------------------------
# DDIM sampling.
# ---------------------------------------------------------------------------


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided increasing subsequence of [0, T) that includes t = 0."""
    if steps < 1 or steps > T:
        raise InvalidArgumentError(f"steps must be in [1, T={T}], got {steps}")
    return (np.arange(steps, dtype=np.int64) * (T / steps)).astype(np.int64)


@torch.no_grad()
def ddim_sample(
    model: UNet,
    schedule: NoiseSchedule,
    steps: int,
    hooks: Sequence[FeatureHook] | None,
    rng: torch.Generator | None,
    count: int = 1,
    x_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic DDIM trajectory; returns float images in [-1, 1].

    One network invocation per subsequence timestep, highest first. Hooks
    are applied inside every invocation. ``x_init`` overrides the initial
    gaussian draw (shape ``(count, C, S, S)``).
    """
    taus = ddim_timesteps(schedule.T, steps)
    spec = model.spec
    shape = (count, spec.in_channels, spec.image_size, spec.image_size)
    if x_init is None:
        if rng is None:
            raise InvalidArgumentError("ddim_sample needs rng when x_init is not given")
        x = torch.randn(shape, generator=rng)
    else:
        if tuple(x_init.shape) != shape:
            raise InvalidArgumentError(f"x_init shape {tuple(x_init.shape)} != {shape}")
        x = x_init.clone()
    was_training = model.training
    model.eval()
    try:
        ab = schedule.alpha_bar
        for i in range(len(taus) - 1, -1, -1):
            t = int(taus[i])
            eps = model(x, torch.full((count,), t, dtype=torch.long), hooks)
            if not torch.isfinite(eps).all():
                raise NumericError("non-finite activations during sampling", t=t)
            sqrt_ab = math.sqrt(ab[t])
            sqrt_one_minus = math.sqrt(1.0 - ab[t])
            x0_hat = ((x - sqrt_one_minus * eps) / sqrt_ab).clamp(-1.0, 1.0)
            if i == 0:
                x = x0_hat
            else:
                t_prev = int(taus[i - 1])
                x = math.sqrt(ab[t_prev]) * x0_hat + math.sqrt(1.0 - ab[t_prev]) * eps
    finally:
        model.train(was_training)
    return x


# ---------------------------------------------------------------------------
# Anchor feature extraction and interpolation hooks.
# ---------------------------------------------------------------------------


@torch.no_grad()
def capture_features(
    model: UNet, x_t: torch.Tensor, t: int, layer_ids: Sequence[str]
) -> dict[str, torch.Tensor]:
    """Run one pass on an already-noised batch and capture stage outputs."""
    if not layer_ids:
        raise InvalidArgumentError("layer_ids must be non-empty")
    was_training = model.training
    model.eval()
    try:
        hooks = [FeatureHook(layer_id=lid, mode="capture") for lid in layer_ids]
        model(x_t, torch.full((x_t.shape[0],), t, dtype=torch.long), hooks)
    finally:
        model.train(was_training)
    return {hook.layer_id: hook.captured[t] for hook in hooks}


def extract_anchor_features(
    model: UNet,
    x_anchor: torch.Tensor,
    t: int,
    rng: torch.Generator,
    schedule: NoiseSchedule,
    layer_ids: Sequence[str],
) -> dict[str, torch.Tensor]:
    """Noise the clean anchor to level ``t`` and capture encoder features there."""
    eps = torch.randn(x_anchor.shape, generator=rng, dtype=x_anchor.dtype)
    return capture_features(model, q_sample(x_anchor, t, eps, schedule), t, layer_ids)


class AnchorFeatureProvider:
    """Per-timestep anchor features for interpolation hooks.

    At every requested timestep the clean anchor batch is re-noised (with
    a single fixed draw instead when ``redraw_per_step`` is off) and the
    configured encoder features are captured. Results are cached so several
    hooks share one network pass. When ``per_sample_labels`` is given, each
    anchor gets its own noise stream derived from its label, which makes
    the result independent of how anchors are batched together.
    """

    def __init__(
        self,
        model: UNet,
        anchor_x: torch.Tensor,
        layer_ids: Sequence[str],
        schedule: NoiseSchedule,
        seed: int,
        redraw_per_step: bool = True,
        per_sample_labels: Sequence[object] | None = None,
    ):
        self.model = model
        self.anchor_x = anchor_x
        self.layer_ids = tuple(layer_ids)
        self.schedule = schedule
        self.seed = seed
        self.redraw_per_step = redraw_per_step
        if per_sample_labels is not None and len(per_sample_labels) != anchor_x.shape[0]:
            raise InvalidArgumentError("per_sample_labels length must match anchor batch")
        self.per_sample_labels = per_sample_labels
        self._cache: dict[int, dict[str, torch.Tensor]] = {}

    def _noise_at(self, t: int) -> torch.Tensor:
        step_label: object = t if self.redraw_per_step else "fixed"
        if self.per_sample_labels is None:
            rng = torch_generator(self.seed, "anchor-noise", step_label)
            return torch.randn(self.anchor_x.shape, generator=rng, dtype=self.anchor_x.dtype)
        draws = [
            torch.randn(
                self.anchor_x.shape[1:],
                generator=torch_generator(self.seed, "anchor-noise", label, step_label),
                dtype=self.anchor_x.dtype,
            )
            for label in self.per_sample_labels
        ]
        return torch.stack(draws)

    def features_at(self, t: int) -> dict[str, torch.Tensor]:
        if t not in self._cache:
            x_t = q_sample(self.anchor_x, t, self._noise_at(t), self.schedule)
            self._cache[t] = capture_features(self.model, x_t, t, self.layer_ids)
        return self._cache[t]

    def hooks(self, w: float) -> list[FeatureHook]:
        return [
            FeatureHook(
                layer_id=lid,
                mode="interpolate",
                w=w,
                anchor_features=(lambda t, lid=lid: self.features_at(t)[lid]),
            )
            for lid in self.layer_ids
        ]


# ---------------------------------------------------------------------------
# Full training loop (used by the CLI).
# ---------------------------------------------------------------------------


@dataclass
class DiffusionTrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr: float = 2e-4  # Adam, fixed
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    flip_probability: float = 0.5
    seed: int = 0
    checkpoint_every: int = 50

    @classmethod
    def desk(cls) -> "DiffusionTrainConfig":
        return cls()

    @classmethod
    def paper(cls) -> "DiffusionTrainConfig":
        return cls(epochs=2000, batch_size=128, timesteps=1000, checkpoint_every=100)


def train_diffusion(
    dataset,
    unet_spec: UNetSpec,
    config: DiffusionTrainConfig,
    log_fn: Callable[[dict], None] | None = None,
    checkpoint_fn: Callable[[int, "UNet", torch.optim.Optimizer], None] | None = None,
    start_state: dict | None = None,
):
    """Train the epsilon-prediction model; returns (model, schedule, history).

    Deterministic given ``config.seed``: model init, per-epoch
    permutations, timestep/noise draws, flips and dropout all come from
    named streams. ``start_state`` resumes from an epoch-boundary
    checkpoint payload.
    """
    schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    torch.manual_seed(derive_seed(config.seed, "diffusion-init"))
    model = UNet(unet_spec)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    first_epoch = 0
    if start_state is not None:
        model.load_state_dict(start_state["model_state"])
        if start_state.get("optimizer_state") is not None:
            optimizer.load_state_dict(start_state["optimizer_state"])
        first_epoch = int(start_state.get("epoch", 0))

    x_all = to_model_range(dataset.pixels)
    n = x_all.shape[0]
    history: list[dict] = []
    for epoch in range(first_epoch, config.epochs):
        # dropout is the only consumer of the global torch stream
        torch.manual_seed(derive_seed(config.seed, "diffusion-epoch", epoch))
        step_rng = torch_generator(config.seed, "diffusion-steps", epoch)
        order_rng = np.random.default_rng(derive_seed(config.seed, "diffusion-order", epoch))
        order = order_rng.permutation(n)
        flips = order_rng.random(n) < config.flip_probability
        losses = []
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            batch = x_all[idx].clone()
            flip_mask = torch.from_numpy(flips[start : start + config.batch_size].copy())
            batch[flip_mask] = torch.flip(batch[flip_mask], dims=[3])
            losses.append(diffusion_train_step(model, batch, step_rng, schedule, optimizer))
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "lr": config.lr,
            "step_losses": tuple(round(v, 6) for v in losses),
        }
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if checkpoint_fn is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint_fn(epoch, model, optimizer)
    return model, schedule, history


def diffusion_checkpoint_meta(spec: UNetSpec, config: DiffusionTrainConfig, dataset) -> dict:
    """Everything needed to rebuild the model and schedule from a checkpoint."""
    return {
        **spec.to_meta(),
        "timesteps": config.timesteps,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
        "seed": config.seed,
        "dataset_digest": dataset.digest,
        "dataset_name": dataset.name,
    }


def unet_from_checkpoint(payload: dict) -> tuple[UNet, NoiseSchedule]:
    """Rebuild (model, schedule) from a loaded diffusion checkpoint payload."""
    meta = payload["meta"]
    model = UNet(UNetSpec.from_meta(meta))
    model.load_state_dict(payload["model_state"])
    model.eval()
    schedule = make_schedule(int(meta["timesteps"]), float(meta["beta_start"]), float(meta["beta_end"]))
    return model, schedule
