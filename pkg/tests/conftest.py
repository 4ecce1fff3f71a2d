import os
from pathlib import Path

import pytest
import torch

from skipforge.checkpoint import load_bundle
from skipforge.synthdata import TrainConfig, train
from skipforge.unet import UNetConfig, build_unet

# keep unit-test numerics reproducible and leave cores for training jobs
torch.set_num_threads(min(2, torch.get_num_threads()))

TINY_CONFIG = UNetConfig(
    image_size=32,
    block_channels=(8, 12, 16, 20),
    subblocks_per_block=2,
    time_embed_dim=32,
    num_conditions=64,
    cond_embed_dim=16,
)

DESK_CHECKPOINT = Path(os.environ.get("SKIPFORGE_CHECKPOINT", "checkpoints/desk32.ckpt"))


@pytest.fixture(scope="session")
def tiny_config():
    return TINY_CONFIG


@pytest.fixture(scope="session")
def tiny_model():
    return build_unet(TINY_CONFIG, seed=0)


@pytest.fixture(scope="session")
def smoke_bundle(tmp_path_factory):
    """Small trained-for-a-moment bundle; cached across the session."""
    path = tmp_path_factory.mktemp("ckpt") / "smoke.ckpt"
    cfg = TrainConfig(
        epochs=2, batch_size=32, dataset_size=96, seed=0, deterministic=True, classifier_epochs=2
    )
    train(TINY_CONFIG, cfg, path)
    return load_bundle(path)


@pytest.fixture(scope="session")
def desk_bundle():
    """The trained desk checkpoint; trains one if missing (slow)."""
    if not DESK_CHECKPOINT.exists():
        from skipforge.cli import cli
        from click.testing import CliRunner

        DESK_CHECKPOINT.parent.mkdir(parents=True, exist_ok=True)
        result = CliRunner().invoke(
            cli, ["train", "--preset", "desk", "--parallel", "--out", str(DESK_CHECKPOINT)]
        )
        assert result.exit_code == 0, result.output
    return load_bundle(DESK_CHECKPOINT)
