import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tinygiant.config import RunConfig, TrainConfig
from tinygiant.data import DataConfig, generate_dataset
from tinygiant.features import ModalityEncoderConfig
from tinygiant.train import build_encoders, build_vocab, examples_from_samples

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def small_run_config(seed: int = 0, **train) -> RunConfig:
    """Desk-scale images with the standard 16x16 and 24x24 patch grids."""
    return RunConfig(
        seed=seed,
        data=DataConfig(rgb_size=64, depth_size=72),
        rgb=ModalityEncoderConfig("rgb", 64, 4, 32, 1.0 / 255.0),
        depth=ModalityEncoderConfig("depth", 72, 3, 32, 0.1),
        train=TrainConfig(**train),
    )


@pytest.fixture(scope="session")
def small_cfg() -> RunConfig:
    return small_run_config()


@pytest.fixture(scope="session")
def small_samples(small_cfg):
    return generate_dataset(small_cfg.seed, 32, small_cfg.data, "train")


@pytest.fixture(scope="session")
def small_examples(small_cfg, small_samples):
    return examples_from_samples(small_samples, build_encoders(small_cfg))


@pytest.fixture(scope="session")
def small_vocab(small_examples):
    return build_vocab(small_examples)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
