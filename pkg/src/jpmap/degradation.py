"""Linear degradation operators, Gaussian measurement noise and the quadratic data term.

Identity and mask operators have diagonal normal matrices and are solved in
closed form; dense operators go through conjugate gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .linalg import conjugate_gradient

DEFAULT_SIGMA = 2.0 / 255.0
DEFAULT_PINV_EPS = 1e-3


def _check_len(v: np.ndarray, n: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ShapeError(f"{what} has shape {v.shape}, expected ({n},)")
    return v


@dataclass(frozen=True, eq=False)
class Identity:
    n: int = 784
    kind: ClassVar[str] = "identity"

    @property
    def m(self) -> int:
        return self.n

    def apply(self, x):
        return _check_len(x, self.n, "x").copy()

    def adjoint(self, v):
        return _check_len(v, self.n, "v").copy()

    def solve_shifted(self, rhs, shift, x0=None, rtol=1e-10):
        """Solve ``(A^T A + shift I) x = rhs``."""
        return _check_len(rhs, self.n, "rhs") / (1.0 + shift)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n}


@dataclass(frozen=True, eq=False)
class Mask:
    """Keeps the pixels listed in ``indices`` (sorted, unique)."""

    indices: np.ndarray
    n: int = 784
    kind: ClassVar[str] = "mask"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ParameterError("mask index set must be a non-empty 1-d list")
        if np.any(np.diff(idx) <= 0):
            raise ParameterError("mask indices must be sorted and unique")
        if idx[0] < 0 or idx[-1] >= self.n:
            raise ParameterError(f"mask indices must lie in [0, {self.n})")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        known = np.zeros(self.n, dtype=bool)
        known[idx] = True
        known.setflags(write=False)
        object.__setattr__(self, "known", known)

    @property
    def m(self) -> int:
        return self.indices.size

    def apply(self, x):
        return _check_len(x, self.n, "x")[self.indices]

    def adjoint(self, v):
        out = np.zeros(self.n)
        out[self.indices] = _check_len(v, self.m, "v")
        return out

    def solve_shifted(self, rhs, shift, x0=None, rtol=1e-10):
        rhs = _check_len(rhs, self.n, "rhs")
        return rhs / np.where(self.known, 1.0 + shift, shift)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "indices": self.indices.tolist()}


@dataclass(frozen=True, eq=False)
class Dense:
    matrix: np.ndarray
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ParameterError("dense operator needs a non-empty 2-d matrix")
        if not np.all(np.isfinite(a)):
            raise ParameterError("dense operator has non-finite entries")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        object.__setattr__(self, "matrix", a)

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x):
        return self.matrix @ _check_len(x, self.n, "x")

    def adjoint(self, v):
        return _check_len(v, self.m, "v") @ self.matrix

    def solve_shifted(self, rhs, shift, x0=None, rtol=1e-10):
        rhs = _check_len(rhs, self.n, "rhs")
        a = self.matrix
        x, _ = conjugate_gradient(lambda p: (a @ p) @ a + shift * p, rhs, x0=x0, rtol=rtol)
        return x

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": list(self.matrix.shape),
                "matrix": self.matrix.ravel().tolist()}


Operator = Identity | Mask | Dense


@dataclass(frozen=True, eq=False)
class DegradationModel:
    operator: Operator
    sigma: float = DEFAULT_SIGMA
    seed: int | None = None
    # how the operator was generated, so configs can be replayed without the full matrix
    recipe: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError("sigma must be > 0")

    @property
    def n(self) -> int:
        return self.operator.n

    @property
    def m(self) -> int:
        return self.operator.m

    @property
    def kind(self) -> str:
        return self.operator.kind

    def apply_A(self, x):
        return self.operator.apply(x)

    def apply_At(self, v):
        return self.operator.adjoint(v)

    def with_sigma(self, sigma: float) -> "DegradationModel":
        return DegradationModel(self.operator, sigma, self.seed, dict(self.recipe))

    def to_dict(self) -> dict:
        d = {"sigma": self.sigma, "seed": self.seed, "recipe": self.recipe}
        op = self.operator.to_dict()
        if self.kind == "dense" and self.recipe.get("kind") == "cs":
            op = {"kind": "dense", "shape": list(self.operator.matrix.shape)}
        d["operator"] = op
        return d


def apply_A(model: DegradationModel, x):
    return model.apply_A(x)


def apply_At(model: DegradationModel, v):
    return model.apply_At(v)


def make_identity(sigma: float = DEFAULT_SIGMA, n: int = 784) -> DegradationModel:
    return DegradationModel(Identity(n), sigma, None, {"kind": "denoise", "n": n})


def make_cs_operator(m: int, seed: int, sigma: float = DEFAULT_SIGMA,
                     n: int = 784) -> DegradationModel:
    """Dense ``m x n`` operator with i.i.d. ``N(0, 1/m)`` entries."""
    if not 1 <= m <= n:
        raise ParameterError(f"m must lie in [1, {n}], got {m}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, n)) / np.sqrt(m)
    return DegradationModel(Dense(a), sigma, seed, {"kind": "cs", "m": m, "n": n})


def make_inpainting_operator(known_count: int | None = None, seed: int = 0,
                             known_fraction: float | None = None,
                             sigma: float = DEFAULT_SIGMA, n: int = 784) -> DegradationModel:
    """Uniformly random known-pixel subset of size ``known_count`` or ``round(fraction * n)``."""
    if (known_count is None) == (known_fraction is None):
        raise ParameterError("give exactly one of known_count and known_fraction")
    if known_count is None:
        if not 0 <= known_fraction <= 1:
            raise ParameterError("known_fraction must lie in [0, 1]")
        known_count = int(round(known_fraction * n))
    if not 1 <= known_count <= n:
        raise ParameterError(f"known pixel count must lie in [1, {n}], got {known_count}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=known_count, replace=False))
    return DegradationModel(Mask(idx, n), sigma, seed,
                            {"kind": "inpainting", "known": known_count, "n": n})


@dataclass(frozen=True, eq=False)
class Observation:
    y: np.ndarray
    model: DegradationModel
    ground_truth: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (self.model.m,):
            raise ShapeError(f"y has shape {y.shape}, operator produces ({self.model.m},)")
        if not np.all(np.isfinite(y)):
            raise ParameterError("y has non-finite entries")
        object.__setattr__(self, "y", y)


def degrade(model: DegradationModel, x_true, seed: int) -> Observation:
    """``y = A x_true + sigma * eps`` with ``eps ~ N(0, I_m)`` drawn from ``seed``."""
    x_true = _check_len(x_true, model.n, "x_true")
    rng = np.random.default_rng(seed)
    y = model.apply_A(x_true) + model.sigma * rng.standard_normal(model.m)
    return Observation(y, model, x_true.copy(), seed)


def data_term(model: DegradationModel, x, y) -> float:
    """``||A x - y||^2 / (2 sigma^2)``."""
    r = model.apply_A(x) - _check_len(y, model.m, "y")
    return float(r @ r) / (2.0 * model.sigma ** 2)


def data_term_grad(model: DegradationModel, x, y) -> np.ndarray:
    r = model.apply_A(x) - _check_len(y, model.m, "y")
    return model.apply_At(r) / model.sigma ** 2


def pseudo_inverse_init(model: DegradationModel, y, epsilon: float = DEFAULT_PINV_EPS) -> np.ndarray:
    """Regularized pseudo-inverse ``(A^T A + eps I)^{-1} A^T y``."""
    if not epsilon > 0:
        raise ParameterError("epsilon must be > 0")
    aty = model.apply_At(_check_len(y, model.m, "y"))
    return model.operator.solve_shifted(aty, epsilon, rtol=1e-10)


# ---------------------------------------------------------------- config files

def degradation_to_json(model: DegradationModel) -> str:
    return json.dumps(model.to_dict(), indent=1, sort_keys=True)


def degradation_from_json(text: str) -> DegradationModel:
    try:
        d = json.loads(text)
        sigma = float(d["sigma"])
        seed = d.get("seed")
        recipe = d.get("recipe", {})
        op = d["operator"]
        kind = op["kind"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed degradation config: {exc}") from None
    if kind == "identity":
        return DegradationModel(Identity(int(op.get("n", 784))), sigma, seed, recipe)
    if kind == "mask":
        return DegradationModel(Mask(np.array(op["indices"]), int(op.get("n", 784))),
                                sigma, seed, recipe)
    if kind == "dense":
        if "matrix" in op:
            a = np.array(op["matrix"], dtype=np.float64).reshape(op["shape"])
            return DegradationModel(Dense(a), sigma, seed, recipe)
        if recipe.get("kind") == "cs" and seed is not None:
            return make_cs_operator(int(recipe["m"]), int(seed), sigma, int(recipe.get("n", 784)))
        raise FormatError("dense operator config needs either a matrix or a cs recipe with a seed")
    raise FormatError(f"unknown operator kind {kind!r}")
