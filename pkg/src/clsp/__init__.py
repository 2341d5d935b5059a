"""Contrastive pretraining with diffusion-synthesized hard positives.

The pipeline has four stages, each usable on its own:

1. :mod:`clsp.diffusion` trains an unconditional denoiser and runs the
   deterministic sampler with feature hooks.
2. :mod:`clsp.positives` pre-generates per-anchor candidate sets by
   interpolating denoiser features toward each anchor during sampling.
3. :mod:`clsp.train` pretrains contrastive encoders, optionally pulling
   a stored synthetic positive per anchor each epoch.
4. :mod:`clsp.evaluate` probes frozen encoders (linear, kNN,
   semi-supervised) and measures positive-pair similarity shifts.

``clsp.cli`` wires the stages into reproducible run directories.
"""

from .checkpoint import load_checkpoint, save_checkpoint, state_digest
from .data import (
    AugmentationPolicy,
    Dataset,
    augment_synthetic,
    augment_views,
    generate_toy_dataset,
    load_cifar10_binary,
    load_dataset,
    save_dataset,
    standardize,
)
from .diffusion import (
    AnchorFeatureProvider,
    DiffusionTrainConfig,
    FeatureHook,
    NoiseSchedule,
    UNet,
    UNetSpec,
    apply_hooks,
    capture_features,
    ddim_sample,
    ddim_timesteps,
    extract_anchor_features,
    make_schedule,
    q_sample,
    train_diffusion,
    unet_from_checkpoint,
)
from .encoder import (
    ContrastiveEncoder,
    Embedding,
    EncoderSpec,
    ProjectorSpec,
    embed,
    encoder_from_checkpoint,
    momentum_update,
    project_normalize,
)
from .errors import (
    ClspError,
    CorruptStoreError,
    DegenerateEmbeddingError,
    InvalidArgumentError,
    InvalidStateError,
    NumericError,
    StratificationError,
    UnsupportedFormatError,
)
from .evaluate import (
    FeatureBank,
    KnnResult,
    ProbeResult,
    ProbeSchedule,
    SimilarityHistogram,
    export_embeddings,
    extract_features,
    knn_eval,
    knn_predict,
    linear_probe,
    load_embeddings,
    similarity_analysis,
    stratified_label_subset,
)
from .positives import (
    CandidateStore,
    PositiveDraw,
    generate_candidates,
    load_store,
    sample_positive,
    validate_compatibility,
)
from .seeding import derive_seed, numpy_rng, torch_generator
from .train import (
    METHODS,
    MomentumQueue,
    TrainConfig,
    additional_positive_loss,
    info_nce_loss,
    lr_at,
    moco_contrastive_loss,
    queue_push,
    total_loss,
    train_ssl,
)

__version__ = "0.1.0"
