"""Gaussian-encoder / Gaussian-decoder VAE with a learned isotropic decoder variance.

The encoder maps an image to ``[mu | logvar]`` of ``q(z|x)``; the decoder maps a
latent code to the mean of ``p(x|z) = N(mu(z), gamma I)`` with a single learned
``log_gamma``.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ParameterError, ShapeError
from .nn import (ACTIVATIONS, AdamState, Layer, MlpParams, adam_step, init_mlp,
                 mlp_backward, mlp_forward)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAGIC = "JPMAPVAE1"
FORMAT_VERSION = 1


class BlobSizeError(FormatError, ShapeError):
    """The weight blob length disagrees with the manifest (truncated or wrong shapes)."""


@dataclass(frozen=True)
class VaeModel:
    encoder: MlpParams
    decoder: MlpParams
    log_gamma: float = 0.0

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.z_dim:
            raise ShapeError(
                f"encoder emits {self.encoder.out_dim} values, expected 2 * z_dim = {2 * self.z_dim}"
            )
        if self.decoder.out_dim != self.x_dim:
            raise ShapeError(
                f"decoder emits {self.decoder.out_dim} values, encoder reads {self.x_dim}"
            )
        if not math.isfinite(self.log_gamma):
            raise NumericError("log_gamma is not finite")

    @property
    def x_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def z_dim(self) -> int:
        return self.decoder.in_dim

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.encoder.to_vector(), self.decoder.to_vector(),
                               [self.log_gamma]])

    def from_vector(self, vec: np.ndarray) -> "VaeModel":
        n_enc = self.encoder.n_params
        n_dec = self.decoder.n_params
        if vec.shape != (n_enc + n_dec + 1,):
            raise ShapeError(f"expected {n_enc + n_dec + 1} parameters, got {vec.shape}")
        return VaeModel(self.encoder.from_vector(vec[:n_enc]),
                        self.decoder.from_vector(vec[n_enc:n_enc + n_dec]),
                        float(vec[-1]))

    def equals(self, other: "VaeModel") -> bool:
        return (self.encoder.equals(other.encoder) and self.decoder.equals(other.decoder)
                and self.log_gamma == other.log_gamma)


def init_vae(rng: np.random.Generator, x_dim: int = 784, z_dim: int = 12,
             hidden: tuple[int, ...] = (500, 500)) -> VaeModel:
    encoder = init_mlp([x_dim, *hidden, 2 * z_dim], rng)
    decoder = init_mlp([z_dim, *hidden, x_dim], rng)
    return VaeModel(encoder, decoder, 0.0)


def encode(model: VaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Mean and log-variance of ``q(z|x)``."""
    out, _ = mlp_forward(model.encoder, x)
    k = model.z_dim
    return out[..., :k], out[..., k:]


def decode(model: VaeModel, z) -> np.ndarray:
    """Decoder mean ``mu_theta(z)``."""
    out, _ = mlp_forward(model.decoder, z)
    return out


def kl_gaussian(mu, logvar) -> float:
    """KL divergence from ``N(mu, diag(exp(logvar)))`` to ``N(0, I)``."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    # expm1(l) - l is exp(l) - 1 - l without cancellation near 0
    return float(0.5 * np.sum(mu * mu + np.expm1(logvar) - logvar))


def elbo_loss(model: VaeModel, x, noise) -> tuple[float, VaeModel]:
    """Negative ELBO and its gradient, using ``z = mu + exp(logvar / 2) * noise``.

    ``x`` may be one image or a batch; for a batch the loss and gradients are
    batch means. The gradient is returned as a ``VaeModel`` whose fields hold
    the partial derivatives (``log_gamma`` included).
    """
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x, noise = x[None, :], noise[None, :]
    if noise.shape != (x.shape[0], model.z_dim):
        raise ShapeError(f"noise shape {noise.shape} != ({x.shape[0]}, {model.z_dim})")
    batch = x.shape[0]
    n, k = model.x_dim, model.z_dim
    gamma = model.gamma

    enc_out, enc_tape = mlp_forward(model.encoder, x)
    mu, logvar = enc_out[:, :k], enc_out[:, k:]
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    mean, dec_tape = mlp_forward(model.decoder, z)
    resid = x - mean
    sq = np.sum(resid * resid, axis=1)

    rec = 0.5 * (n * LOG_2PI + n * model.log_gamma + sq / gamma)
    kl = 0.5 * np.sum(mu * mu + np.expm1(logvar) - logvar, axis=1)
    loss = float(np.mean(rec + kl))
    if not math.isfinite(loss):
        raise NumericError("ELBO loss is not finite")

    g_mean = -resid / (gamma * batch)
    g_dec, g_z = mlp_backward(model.decoder, dec_tape, g_mean)
    g_mu = g_z + mu / batch
    g_logvar = 0.5 * g_z * noise * std + 0.5 * np.expm1(logvar) / batch
    g_enc, _ = mlp_backward(model.encoder, enc_tape, np.concatenate([g_mu, g_logvar], axis=1))
    g_log_gamma = float(np.mean(0.5 * (n - sq / gamma)))
    return loss, VaeModel(g_enc, g_dec, g_log_gamma)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 400
    lr: float = 1e-4
    lr_halving_period: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if self.lr_halving_period < 1:
            raise ParameterError("lr_halving_period must be >= 1")


FULL_PROFILE = TrainConfig(batch_size=64, epochs=400, lr=1e-4, lr_halving_period=150)
# Short runs need a larger step than the long recipe: log_gamma moves at most ~lr per Adam step.
DESK_PROFILE = TrainConfig(batch_size=64, epochs=50, lr=1e-3, lr_halving_period=150)
DESK_SUBSET = 10_000


def train(model: VaeModel, images: np.ndarray, cfg: TrainConfig,
          progress=None) -> tuple[VaeModel, list[float]]:
    """Adam on the mean batch loss. Returns the trained model and per-epoch mean losses.

    Shuffling and reparameterization draws come from ``default_rng(cfg.seed)``,
    so a run is fully determined by its inputs.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != model.x_dim:
        raise ShapeError(f"images must be (count, {model.x_dim}), got {images.shape}")
    if cfg.epochs == 0:
        return model, []
    rng = np.random.default_rng(cfg.seed)
    theta = model.to_vector()
    state = AdamState(lr=cfg.lr)
    curve = []
    count = images.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)
        state = replace(state, lr=lr)
        order = rng.permutation(count)
        total = 0.0
        for b, start in enumerate(range(0, count, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            noise = rng.standard_normal((idx.size, model.z_dim))
            current = model.from_vector(theta)
            try:
                # adam_step rejects non-finite gradients, so overflow surfaces as NumericError
                with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                    loss, grad = elbo_loss(current, images[idx], noise)
                if not np.isfinite(loss):
                    raise NumericError(f"loss is {loss}")
                state, theta = adam_step(state, theta, grad.to_vector())
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch + 1}, batch {b}: {exc}") from exc
            total += loss * idx.size
        curve.append(total / count)
        log.info("epoch %d/%d loss %.4f log_gamma %.4f", epoch + 1, cfg.epochs, curve[-1], theta[-1])
        if progress is not None:
            progress(epoch + 1, curve[-1])
    return model.from_vector(theta.copy()), curve


def smoothed(values, alpha: float = 0.1) -> list[float]:
    """Exponential smoothing, ``s_0 = v_0``, ``s_t = alpha v_t + (1 - alpha) s_{t-1}``."""
    out = []
    for v in values:
        out.append(v if not out else alpha * v + (1 - alpha) * out[-1])
    return out


# ---------------------------------------------------------------- serialization

def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _net_to_f32_bytes(p: MlpParams) -> bytes:
    return b"".join(a.astype("<f4").tobytes() for a in p.arrays())


def save_model(model: VaeModel, path) -> Path:
    """Write ``path`` (text manifest) and its ``.bin`` weight blob."""
    path = Path(path)
    enc = _net_to_f32_bytes(model.encoder)
    dec = _net_to_f32_bytes(model.decoder)
    blob = blob_path(path)
    log_gamma = float(np.float32(model.log_gamma))
    lines = [
        MAGIC,
        f"format_version = {FORMAT_VERSION}",
        f"x_dim = {model.x_dim}",
        f"z_dim = {model.z_dim}",
        f"encoder_sizes = {','.join(map(str, model.encoder.sizes))}",
        f"encoder_activations = {','.join(model.encoder.activations)}",
        f"decoder_sizes = {','.join(map(str, model.decoder.sizes))}",
        f"decoder_activations = {','.join(model.decoder.activations)}",
        f"log_gamma = {log_gamma!r}",
        f"blob = {blob.name}",
        f"encoder_offset = 0",
        f"decoder_offset = {len(enc)}",
        f"blob_bytes = {len(enc) + len(dec)}",
    ]
    blob.write_bytes(enc + dec)
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_manifest(text: str) -> dict[str, str]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError(f"manifest does not start with {MAGIC!r}")
    fields = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"manifest line {no}: expected 'key = value'")
        fields[key.strip()] = value.strip()
    return fields


def _ints(fields, key) -> list[int]:
    try:
        return [int(v) for v in fields[key].split(",")]
    except KeyError:
        raise FormatError(f"manifest is missing {key!r}") from None
    except ValueError:
        raise FormatError(f"manifest field {key!r} is not a list of integers") from None


def _net_from_blob(sizes, activations, data: np.ndarray, name: str) -> MlpParams:
    if len(activations) != len(sizes) - 1 or any(a not in ACTIVATIONS for a in activations):
        raise FormatError(f"{name}: activations {activations} do not fit sizes {sizes}")
    layers, offset = [], 0
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        w = data[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = data[offset:offset + fan_out]
        offset += fan_out
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), act))
    return MlpParams(tuple(layers))


def _net_floats(sizes) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def load_model(path) -> VaeModel:
    """Read a model written by :func:`save_model`; weights are promoted to float64."""
    path = Path(path)
    fields = _parse_manifest(path.read_text())
    try:
        version = int(fields["format_version"])
        x_dim = int(fields["x_dim"])
        z_dim = int(fields["z_dim"])
        log_gamma = float(fields["log_gamma"])
        blob_name = fields["blob"]
        enc_off = int(fields["encoder_offset"])
        dec_off = int(fields["decoder_offset"])
        blob_bytes = int(fields["blob_bytes"])
    except KeyError as exc:
        raise FormatError(f"manifest is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise FormatError(f"manifest has a malformed value: {exc}") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version}")
    enc_sizes = _ints(fields, "encoder_sizes")
    dec_sizes = _ints(fields, "decoder_sizes")
    enc_acts = fields.get("encoder_activations", "").split(",")
    dec_acts = fields.get("decoder_activations", "").split(",")
    if enc_sizes[0] != x_dim or enc_sizes[-1] != 2 * z_dim:
        raise ShapeError(f"encoder sizes {enc_sizes} do not match x_dim={x_dim}, z_dim={z_dim}")
    if dec_sizes[0] != z_dim or dec_sizes[-1] != x_dim:
        raise ShapeError(f"decoder sizes {dec_sizes} do not match x_dim={x_dim}, z_dim={z_dim}")
    n_enc, n_dec = _net_floats(enc_sizes), _net_floats(dec_sizes)
    if enc_off != 0 or dec_off != 4 * n_enc or blob_bytes != 4 * (n_enc + n_dec):
        raise ShapeError("manifest offsets disagree with the declared layer sizes")

    raw = (path.parent / blob_name).read_bytes()
    if len(raw) != blob_bytes:
        raise BlobSizeError(f"weight blob has {len(raw)} bytes, manifest declares {blob_bytes}")
    data = np.frombuffer(raw, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise FormatError("weight blob contains non-finite values")
    encoder = _net_from_blob(enc_sizes, enc_acts, data[:n_enc], "encoder")
    decoder = _net_from_blob(dec_sizes, dec_acts, data[n_enc:], "decoder")
    return VaeModel(encoder, decoder, log_gamma)


def round_to_f32(model: VaeModel) -> VaeModel:
    """The model as it reads back after a save/load round trip."""
    return VaeModel(model.encoder.astype(np.float32).astype(np.float64),
                    model.decoder.astype(np.float32).astype(np.float64),
                    float(np.float32(model.log_gamma)))


def model_hash(path) -> str:
    """SHA-256 over manifest and blob bytes."""
    path = Path(path)
    h = hashlib.sha256(path.read_bytes())
    h.update(blob_path(path).read_bytes())
    return h.hexdigest()
