import os
from pathlib import Path

import numpy as np
import pytest

from jpmap.cli import main as cli_main
from jpmap.mnist import load_split
from jpmap.nn import IDENTITY, Layer, MlpParams, init_mlp
from jpmap.vae import VaeModel, load_model

REPO = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.environ.get("JPMAP_DATA_DIR", REPO / "data" / "mnist"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_vae(rng, x_dim=6, z_dim=2, hidden=(5, 4), log_gamma=0.0, scale=1.0):
    """Small ELU VAE with non-zero biases, for gradient checks."""
    enc = init_mlp([x_dim, *hidden, 2 * z_dim], rng)
    dec = init_mlp([z_dim, *hidden, x_dim], rng)

    def jitter(p):
        return MlpParams(tuple(
            Layer(l.weight * scale, rng.normal(0, 0.3, l.bias.shape), l.activation)
            for l in p.layers))

    return VaeModel(jitter(enc), jitter(dec), log_gamma)


def zero_vae(x_dim=784, z_dim=12, dec_bias=None):
    enc = MlpParams((Layer(np.zeros((2 * z_dim, x_dim)), np.zeros(2 * z_dim), IDENTITY),))
    bias = np.zeros(x_dim) if dec_bias is None else np.asarray(dec_bias, dtype=np.float64)
    dec = MlpParams((Layer(np.zeros((x_dim, z_dim)), bias, IDENTITY),))
    return VaeModel(enc, dec, 0.0)


@pytest.fixture(scope="session")
def data_dir():
    if not (DATA_DIR / "t10k-images-idx3-ubyte.gz").exists() and \
            not (DATA_DIR / "t10k-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST IDX files not found in {DATA_DIR}")
    return DATA_DIR


@pytest.fixture(scope="session")
def test_set(data_dir):
    return load_split("test", data_dir)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, data_dir):
    """Desk-profile model trained once per session through the CLI."""
    out = tmp_path_factory.mktemp("desk")
    code = cli_main(["train", "--profile", "desk", "--seed", "1", "--data-dir", str(data_dir),
                     "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def desk_model(desk_run):
    return load_model(desk_run / "model.txt")
