import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from jpmap.errors import FormatError, ParameterError, ShapeError
from jpmap.nn import IDENTITY, Layer, MlpParams
from jpmap.vae import (DESK_PROFILE, LOG_2PI, FULL_PROFILE, TrainConfig, VaeModel, decode,
                       elbo_loss, encode, init_vae, kl_gaussian, load_model, round_to_f32,
                       save_model, smoothed, train)
from conftest import tiny_vae, zero_vae
from oracles import central_diff, gaussian_nll, grad_mismatch, spectral_norm_bound


def test_zero_encoder_gives_standard_normal():
    mu, logvar = encode(zero_vae(), np.random.default_rng(0).random(784))
    assert not np.any(mu)
    assert not np.any(logvar)


def test_encoder_variance_positive(rng):
    model = tiny_vae(rng, x_dim=8, z_dim=3, scale=5.0)
    _, logvar = encode(model, rng.standard_normal((10, 8)) * 10)
    assert np.all(np.exp(logvar) > 0)


def test_zero_decoder_returns_last_bias(rng):
    bias = rng.random(784)
    model = zero_vae(dec_bias=bias)
    for _ in range(3):
        np.testing.assert_array_equal(decode(model, rng.standard_normal(12)), bias)


def test_decoder_linear_growth_bound(rng):
    model = init_vae(rng)
    layers = model.decoder.layers
    lip = 1.0
    for l in layers:
        lip *= spectral_norm_bound(l.weight)
    # |mu(z)| <= |mu(0)| + Lip |z| since ELU is 1-Lipschitz
    c = max(float(np.linalg.norm(decode(model, np.zeros(12)))), lip)
    for scale in (0.1, 1, 10, 100):
        z = rng.standard_normal(12) * scale
        assert np.linalg.norm(decode(model, z)) <= c * (1 + np.linalg.norm(z))


def test_dimension_checks(rng):
    model = init_vae(rng, x_dim=10, z_dim=3, hidden=(4,))
    assert model.x_dim == 10 and model.z_dim == 3
    with pytest.raises(ShapeError):
        VaeModel(model.encoder, MlpParams((Layer(np.zeros((9, 3)), np.zeros(9), IDENTITY),)))


@pytest.mark.parametrize("mu,logvar,expected", [
    ([0.0], [0.0], 0.0),
    ([1.0], [0.0], 0.5),
    ([0.0], [math.log(4)], 0.5 * (4 - math.log(4) - 1)),
])
def test_kl_values(mu, logvar, expected):
    assert kl_gaussian(mu, logvar) == pytest.approx(expected, abs=1e-15)
    assert kl_gaussian([0.0], [math.log(4)]) == pytest.approx(0.806852, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(mu=arrays(np.float64, 5, elements=st.floats(-10, 10)),
       logvar=arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_kl_non_negative(mu, logvar):
    kl = kl_gaussian(mu, logvar)
    assert kl >= 0
    # below ~1e-4 the quadratic KL underflows double precision
    if np.any(np.abs(mu) > 1e-4) or np.any(np.abs(logvar) > 1e-4):
        assert kl > 0


def test_elbo_zero_residual_zero_kl():
    n = 784
    # decoder output equals x through its bias; encoder is zero
    x = np.linspace(0, 1, n)
    model = zero_vae(dec_bias=x)
    loss, grad = elbo_loss(model, x, np.zeros(12))
    assert loss == pytest.approx(0.5 * n * LOG_2PI, rel=1e-14)
    assert grad.log_gamma == pytest.approx(n / 2, rel=1e-14)


def test_elbo_matches_direct_likelihood(rng):
    model = tiny_vae(rng, log_gamma=-0.7)
    x = rng.random(6)
    eps = rng.standard_normal(2)
    loss, _ = elbo_loss(model, x, eps)
    mu, logvar = encode(model, x)
    z = mu + np.exp(logvar / 2) * eps
    mean = decode(model, z)
    expected = gaussian_nll(x, mean, np.full(6, math.exp(-0.7))) + kl_gaussian(mu, logvar)
    assert loss == pytest.approx(expected, rel=1e-12)


def elbo_fd_error(model, x, eps):
    _, grad = elbo_loss(model, x, eps)
    theta = model.to_vector()
    numeric = central_diff(lambda t: elbo_loss(model.from_vector(t), x, eps)[0], theta)
    return grad_mismatch(grad.to_vector(), numeric)


def test_elbo_gradient_finite_differences(rng):
    for _ in range(5):
        model = tiny_vae(rng, log_gamma=float(rng.normal(0, 0.5)))
        assert elbo_fd_error(model, rng.random(6), rng.standard_normal(2)) < 1e-4


def test_elbo_batch_gradient_finite_differences(rng):
    model = tiny_vae(rng, x_dim=5, z_dim=2, hidden=(3,))
    xs = rng.random((3, 5))
    eps = rng.standard_normal((3, 2))
    assert elbo_fd_error(model, xs, eps) < 1e-4


def test_zero_noise_is_deterministic(rng):
    model = tiny_vae(rng)
    x = rng.random(6)
    a = elbo_loss(model, x, np.zeros(2))
    b = elbo_loss(model, x, np.zeros(2))
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1].to_vector(), b[1].to_vector())


def test_train_zero_epochs_is_noop(rng):
    model = tiny_vae(rng)
    out, curve = train(model, rng.random((10, 6)), TrainConfig(epochs=0))
    assert out is model
    assert curve == []


def test_train_reduces_loss_and_is_deterministic(rng):
    model = tiny_vae(rng, x_dim=6, z_dim=2)
    images = rng.random((64, 6))
    cfg = TrainConfig(batch_size=8, epochs=30, lr=1e-2, lr_halving_period=10, seed=3)
    a, curve_a = train(model, images, cfg)
    b, curve_b = train(model, images, cfg)
    assert curve_a == curve_b
    assert a.equals(b)
    assert curve_a[-1] < curve_a[0]
    assert smoothed(curve_a)[-1] < curve_a[0]
    assert a.gamma > 0


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(lr=0)


def test_profiles():
    assert (FULL_PROFILE.batch_size, FULL_PROFILE.epochs, FULL_PROFILE.lr,
            FULL_PROFILE.lr_halving_period) == (64, 400, 1e-4, 150)
    assert DESK_PROFILE.batch_size == 64


def test_smoothing():
    assert smoothed([10.0, 0.0]) == [10.0, 9.0]


# ---------------------------------------------------------------- serialization

def test_save_load_round_trip(tmp_path, rng):
    model = init_vae(rng)
    model = replace(model, log_gamma=-1.234567)
    save_model(model, tmp_path / "m.txt")
    loaded = load_model(tmp_path / "m.txt")
    assert loaded.equals(round_to_f32(model))
    save_model(loaded, tmp_path / "again.txt")
    assert load_model(tmp_path / "again.txt").equals(loaded)
    assert (tmp_path / "m.txt").read_text().startswith("JPMAPVAE1\n")
    assert (tmp_path / "m.bin").stat().st_size == 4 * (model.to_vector().size - 1)


def test_truncated_blob(tmp_path, rng):
    path = save_model(init_vae(rng, x_dim=20, z_dim=3, hidden=(7,)), tmp_path / "m.txt")
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:-6])
    with pytest.raises(FormatError):
        load_model(path)


def test_blob_for_other_latent_size(tmp_path, rng):
    save_model(init_vae(rng, x_dim=20, z_dim=8, hidden=(7,)), tmp_path / "small.txt")
    path = save_model(init_vae(rng, x_dim=20, z_dim=12, hidden=(7,)), tmp_path / "m.txt")
    (tmp_path / "m.bin").write_bytes((tmp_path / "small.bin").read_bytes())
    with pytest.raises(ShapeError):
        load_model(path)


def test_bad_magic(tmp_path, rng):
    path = save_model(init_vae(rng, x_dim=20, z_dim=3, hidden=(7,)), tmp_path / "m.txt")
    path.write_text(path.read_text().replace("JPMAPVAE1", "JPMAPVAE2"))
    with pytest.raises(FormatError):
        load_model(path)


def test_manifest_sizes_disagree_with_dims(tmp_path, rng):
    path = save_model(init_vae(rng, x_dim=20, z_dim=3, hidden=(7,)), tmp_path / "m.txt")
    path.write_text(path.read_text().replace("z_dim = 3", "z_dim = 4"))
    with pytest.raises(ShapeError):
        load_model(path)


def test_malformed_manifest_line(tmp_path, rng):
    path = save_model(init_vae(rng, x_dim=20, z_dim=3, hidden=(7,)), tmp_path / "m.txt")
    path.write_text(path.read_text() + "garbage line\n")
    with pytest.raises(FormatError):
        load_model(path)
