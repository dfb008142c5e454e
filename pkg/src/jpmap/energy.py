"""Joint energies over (image, latent) and their block minimizers.

``J1(x, z) = F(x, y) + H(x, z) + |z|^2 / 2`` is the exact negative joint
log-posterior, with ``H = -log p(x|z)`` from the Gaussian decoder. ``J2``
replaces ``H + |z|^2 / 2`` by ``K = -log q(z|x)`` from the encoder and is only
known up to an ``x``-dependent constant, so :func:`j2_z_part` is meaningful only
for comparisons at fixed ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .degradation import DegradationModel, data_term, data_term_grad
from .errors import ParameterError, ShapeError
from .nn import mlp_backward, mlp_forward
from .vae import LOG_2PI, VaeModel, decode, encode


@dataclass(frozen=True, eq=False)
class EnergyContext:
    vae: VaeModel
    deg: DegradationModel
    y: np.ndarray
    # only the isotropic decoder covariance gamma * I is supported
    decoder_covariance: str = "isotropic"

    def __post_init__(self):
        if self.decoder_covariance != "isotropic":
            raise NotImplementedError(
                f"decoder covariance {self.decoder_covariance!r} is not supported; use 'isotropic'"
            )
        if self.vae.x_dim != self.deg.n:
            raise ShapeError(f"VAE x_dim {self.vae.x_dim} != operator width {self.deg.n}")
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (self.deg.m,):
            raise ShapeError(f"y has shape {y.shape}, operator produces ({self.deg.m},)")
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.vae.x_dim

    @property
    def k(self) -> int:
        return self.vae.z_dim


def coupling_H(ctx: EnergyContext, x, z) -> float:
    """``-log p(x|z)`` for the decoder ``N(mu(z), gamma I)``, log-det term included."""
    r = np.asarray(x, dtype=np.float64) - decode(ctx.vae, z)
    n = ctx.n
    return 0.5 * (n * LOG_2PI + n * ctx.vae.log_gamma + float(r @ r) / ctx.vae.gamma)


def coupling_K(ctx: EnergyContext, x, z) -> float:
    """``-log q(z|x)`` for the encoder ``N(mu(x), diag(exp(logvar(x))))``."""
    mu, logvar = encode(ctx.vae, x)
    d = np.asarray(z, dtype=np.float64) - mu
    return 0.5 * (ctx.k * LOG_2PI + float(np.sum(logvar)) + float(np.sum(d * d * np.exp(-logvar))))


def j1(ctx: EnergyContext, x, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return data_term(ctx.deg, x, ctx.y) + coupling_H(ctx, x, z) + 0.5 * float(z @ z)


def j2_z_part(ctx: EnergyContext, x, z) -> float:
    """``F(x, y) + K(x, z)``: ``J2`` without its unknown, ``z``-independent ``-log p_X(x)``."""
    return data_term(ctx.deg, x, ctx.y) + coupling_K(ctx, x, z)


def grad_z_j2(ctx: EnergyContext, x, z) -> np.ndarray:
    mu, logvar = encode(ctx.vae, x)
    return (np.asarray(z, dtype=np.float64) - mu) * np.exp(-logvar)


def z_update(ctx: EnergyContext, x) -> np.ndarray:
    """Exact minimizer of ``J2(x, .)``: the encoder mean."""
    return encode(ctx.vae, x)[0]


def j1_z_value_and_grad(ctx: EnergyContext, x, z, data: float | None = None
                        ) -> tuple[float, np.ndarray]:
    """``J1(x, z)`` and its ``z``-gradient from a single decoder pass.

    ``data`` may carry a precomputed ``F(x, y)``; it does not depend on ``z``.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    mean, tape = mlp_forward(ctx.vae.decoder, z)
    r = mean - x
    gamma = ctx.vae.gamma
    n = ctx.n
    if data is None:
        data = data_term(ctx.deg, x, ctx.y)
    value = data + 0.5 * (n * LOG_2PI + n * ctx.vae.log_gamma + float(r @ r) / gamma) \
        + 0.5 * float(z @ z)
    _, g = mlp_backward(ctx.vae.decoder, tape, r / gamma, need_params=False)
    return value, g + z


def grad_z_j1(ctx: EnergyContext, x, z) -> np.ndarray:
    """``Jac(mu)(z)^T (mu(z) - x) / gamma + z``."""
    return j1_z_value_and_grad(ctx, x, z, data=0.0)[1]


def grad_x_j1(ctx: EnergyContext, x, z) -> np.ndarray:
    """``A^T (A x - y) / sigma^2 + (x - mu(z)) / gamma``."""
    x = np.asarray(x, dtype=np.float64)
    return data_term_grad(ctx.deg, x, ctx.y) + (x - decode(ctx.vae, z)) / ctx.vae.gamma


def x_update(ctx: EnergyContext, z, x0=None) -> np.ndarray:
    """Exact minimizer of ``J1(., z)``.

    Solves ``(A^T A + (sigma^2 / gamma) I) x = A^T y + (sigma^2 / gamma) mu(z)``;
    per pixel for identity and mask operators, by CG (warm-started at ``x0``)
    for dense ones.
    """
    mu = decode(ctx.vae, z)
    c = ctx.deg.sigma ** 2 / ctx.vae.gamma
    op = ctx.deg.operator
    if op.kind == "identity":
        return (ctx.y + c * mu) / (1.0 + c)
    if op.kind == "mask":
        x = mu.copy()
        x[op.indices] = (ctx.y + c * mu[op.indices]) / (1.0 + c)
        return x
    rhs = ctx.deg.apply_At(ctx.y) + c * mu
    return op.solve_shifted(rhs, c, x0=x0, rtol=1e-10)


@dataclass(frozen=True)
class SliceGrid:
    a: np.ndarray
    b: np.ndarray
    j1_coupling: np.ndarray  # [len(a) x len(b)]
    j2_coupling: np.ndarray

    def rows(self):
        for i, av in enumerate(self.a):
            for j, bv in enumerate(self.b):
                yield av, bv, self.j1_coupling[i, j], self.j2_coupling[i, j]


def default_slice_ranges(ctx: EnergyContext, x, basis, points: int = 41
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Grids spanning two encoder standard deviations along each basis direction."""
    _, logvar = encode(ctx.vae, x)
    var = np.exp(logvar)
    basis = np.asarray(basis, dtype=np.float64)
    half = [2.0 * math.sqrt(float(np.sum(var * v * v))) for v in basis]
    return np.linspace(-half[0], half[0], points), np.linspace(-half[1], half[1], points)


def coupling_slice(ctx: EnergyContext, x, center, basis, a_values, b_values) -> SliceGrid:
    """Evaluate ``H + |z|^2 / 2`` and ``K`` on ``z = center + a b1 + b b2``."""
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape != (2, ctx.k):
        raise ShapeError(f"basis must be (2, {ctx.k}), got {basis.shape}")
    if not np.allclose(basis @ basis.T, np.eye(2), rtol=0.0, atol=1e-10):
        raise ParameterError("slice basis is not orthonormal to 1e-10")
    center = np.asarray(center, dtype=np.float64)
    a_values = np.asarray(a_values, dtype=np.float64)
    b_values = np.asarray(b_values, dtype=np.float64)
    aa, bb = np.meshgrid(a_values, b_values, indexing="ij")
    zs = center + aa[..., None] * basis[0] + bb[..., None] * basis[1]
    zs = zs.reshape(-1, ctx.k)

    x = np.asarray(x, dtype=np.float64)
    n, k = ctx.n, ctx.k
    r = decode(ctx.vae, zs) - x
    h = 0.5 * (n * LOG_2PI + n * ctx.vae.log_gamma + np.sum(r * r, axis=1) / ctx.vae.gamma) \
        + 0.5 * np.sum(zs * zs, axis=1)
    mu, logvar = encode(ctx.vae, x)
    d = zs - mu
    kk = 0.5 * (k * LOG_2PI + np.sum(logvar) + np.sum(d * d * np.exp(-logvar), axis=1))
    shape = aa.shape
    return SliceGrid(a_values, b_values, h.reshape(shape), kk.reshape(shape))
