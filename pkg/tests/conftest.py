import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from clsp.data import AugmentationPolicy, generate_toy_dataset
from clsp.diffusion import DiffusionTrainConfig, UNet, UNetSpec, make_schedule
from clsp.encoder import EncoderSpec, ProjectorSpec
from clsp.train import TrainConfig

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """16 images, 2 classes, 32px."""
    return generate_toy_dataset(8, 32, seed=11, name="tiny")


@pytest.fixture(scope="session")
def tiny_unet_spec():
    return UNetSpec(image_size=32, base_width=8, channel_mults=(1, 2), num_res_blocks=1, attention_resolutions=())


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_schedule(32, 1e-4, 0.02)


@pytest.fixture()
def tiny_unet(tiny_unet_spec):
    torch.manual_seed(0)
    return UNet(tiny_unet_spec)


@pytest.fixture(scope="session")
def tiny_diffusion_config():
    return DiffusionTrainConfig(epochs=2, batch_size=8, timesteps=32, checkpoint_every=0)


def tiny_train_config(method="simclr", **overrides) -> TrainConfig:
    base = dict(
        method=method,
        epochs=2,
        batch_size=8,
        warmup_epochs=1,
        queue_size=16,
        seed=5,
        encoder=EncoderSpec.tiny(8),
        projector=ProjectorSpec(hidden_dim=32, output_dim=16),
        augmentation=AugmentationPolicy(output_size=32),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture()
def make_train_config():
    return tiny_train_config


@pytest.fixture()
def make_store(tmp_path):
    """Builds a synthetic candidate store with random pixels for a dataset."""
    import hashlib
    import itertools

    from clsp import kvformat
    from clsp.positives import BLOB_NAME, MANIFEST_NAME, STORE_FORMAT_VERSION, load_store

    counter = itertools.count()

    def build(dataset, k=2, digest=None, seed=0):
        root = tmp_path / f"store{next(counter)}"
        root.mkdir()
        n, size = dataset.pixels.shape[0], dataset.pixels.shape[1]
        pixels = np.random.default_rng(seed).integers(0, 256, size=(n, k, size, size, 3), dtype=np.uint8)
        blob_path = root / BLOB_NAME
        pixels.tofile(blob_path)
        kvformat.write_kv(
            root / MANIFEST_NAME,
            {
                "format_version": STORE_FORMAT_VERSION,
                "n_anchors": n,
                "k": k,
                "image_size": size,
                "channels": 3,
                "dtype": "uint8",
                "dataset_name": dataset.name,
                "model_digest": "",
                "blob_sha256": hashlib.sha256(blob_path.read_bytes()).hexdigest(),
                "w": 0.1,
                "layer_ids": ("down1",),
                "ddim_steps": 2,
                "timesteps": 32,
                "seed": seed,
                "redraw_per_step": True,
                "dataset_digest": digest if digest is not None else dataset.digest,
            },
        )
        return load_store(root)

    return build


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo acceptance verdict lines after the run, whatever the capture mode."""
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
