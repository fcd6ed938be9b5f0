import numpy as np
import pytest

from ternarycl import kg_data
from ternarycl.config import ModelConfig

FIXTURE_DIR = "tests/fixtures/tinykg"


def fixture_paths(base=FIXTURE_DIR):
    return (f"{base}/train.tsv", f"{base}/valid.tsv",
            f"{base}/test.tsv", f"{base}/clusters.tsv")


@pytest.fixture(scope="session")
def tiny_bundle():
    return kg_data.load_dataset(*fixture_paths())


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(dim=24, reshape_rows=4, reshape_cols=6, word_dim=24,
                       conv_filters=4)


@pytest.fixture(scope="session")
def oracle_cfg():
    return ModelConfig(dim=12, reshape_rows=3, reshape_cols=4, word_dim=12,
                       conv_filters=4)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def random_phi_store(cfg: ModelConfig, rng, scale=0.5):
    """Conv/linear parameters only, float64, for vector-level phi tests."""
    return {
        "conv_w": rng.normal(size=(cfg.conv_filters, cfg.conv_kernel, cfg.conv_kernel)) * scale,
        "conv_b": rng.normal(size=cfg.conv_filters) * 0.1,
        "lin_w": rng.normal(size=(cfg.dim, cfg.flat_conv)) / np.sqrt(cfg.flat_conv),
        "lin_b": rng.normal(size=cfg.dim) * 0.1,
    }
