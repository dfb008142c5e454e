"""Fixed-topology MLPs with ELU activations, hand-derived backprop, and Adam.

Networks act on a single vector ``(in,)`` or on a batch ``(batch, in)``.
Weights are stored ``[out x in]`` and everything is computed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

ELU = "elu"
IDENTITY = "identity"
ACTIVATIONS = (ELU, IDENTITY)


def elu(v):
    """ELU with alpha = 1: ``v`` for positive entries, ``exp(v) - 1`` otherwise."""
    v = np.asarray(v, dtype=np.float64)
    # expm1 keeps precision near zero; clamp avoids overflow warnings on the unused branch
    return np.where(v > 0, v, np.expm1(np.minimum(v, 0.0)))


def elu_grad(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0, 1.0, np.exp(np.minimum(v, 0.0)))


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # [out x in]
    bias: np.ndarray  # [out]
    activation: str = ELU

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class MlpParams:
    """An ordered chain of affine layers, each followed by its activation."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ParameterError("an MLP needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ParameterError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(
                    f"layer {i}: weight {layer.weight.shape} and bias {layer.bias.shape} disagree"
                )
            if i > 0 and layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {i}: in_dim {layer.in_dim} != previous out_dim {layers[i - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def arrays(self) -> list[np.ndarray]:
        """Weight, bias, weight, bias, ... in declaration order."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "MlpParams":
        """A network with this topology whose parameters are views into ``vec``."""
        vec = np.asarray(vec)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {vec.shape}")
        layers, offset = [], 0
        for layer in self.layers:
            w_size = layer.weight.size
            w = vec[offset:offset + w_size].reshape(layer.weight.shape)
            offset += w_size
            b = vec[offset:offset + layer.out_dim]
            offset += layer.out_dim
            layers.append(Layer(w, b, layer.activation))
        return MlpParams(tuple(layers))

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(tuple(
            Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers
        ))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "MlpParams") -> bool:
        if self.sizes != other.sizes or self.activations != other.activations:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             activation: str = ELU) -> MlpParams:
    """Glorot-uniform weights, zero biases; the last layer is linear."""
    layers = []
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), IDENTITY if i == n - 1 else activation))
    return MlpParams(tuple(layers))


def zeros_like_mlp(p: MlpParams) -> MlpParams:
    return MlpParams(tuple(
        Layer(np.zeros_like(l.weight, dtype=np.float64), np.zeros_like(l.bias, dtype=np.float64),
              l.activation)
        for l in p.layers
    ))


@dataclass(frozen=True)
class Tape:
    """Per-layer inputs and pre-activations recorded by :func:`mlp_forward`."""

    inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]


def mlp_forward(p: MlpParams, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim or x.ndim > 2:
        raise ShapeError(f"input has shape {x.shape}, network expects last dim {p.in_dim}")
    inputs, pres = [], []
    h = x
    for layer in p.layers:
        inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        pres.append(pre)
        h = elu(pre) if layer.activation == ELU else pre
    return h, Tape(tuple(inputs), tuple(pres))


def mlp_backward(p: MlpParams, tape: Tape, grad_output,
                 need_params: bool = True) -> tuple[MlpParams | None, np.ndarray]:
    """Reverse-mode gradients of ``<grad_output, mlp_forward(p, x)>``.

    For batched input the parameter gradients are summed over the batch.
    With ``need_params=False`` only the input gradient is computed.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if len(tape.inputs) != len(p.layers):
        raise ShapeError("tape was recorded on a network with a different depth")
    if g.shape != tape.pre_activations[-1].shape:
        raise ShapeError(
            f"grad_output shape {g.shape} != output shape {tape.pre_activations[-1].shape}"
        )
    grads = []
    for layer, inp, pre in zip(reversed(p.layers), reversed(tape.inputs),
                               reversed(tape.pre_activations)):
        if layer.activation == ELU:
            g = g * elu_grad(pre)
        if need_params:
            if g.ndim == 1:
                gw = np.outer(g, inp)
                gb = g.copy()
            else:
                gw = g.T @ inp
                gb = g.sum(axis=0)
            grads.append(Layer(gw, gb, layer.activation))
        g = g @ layer.weight
    grad_params = MlpParams(tuple(reversed(grads))) if need_params else None
    return grad_params, g


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: AdamState, params: np.ndarray,
              grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update on a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} and grads {grads.shape} differ")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to Adam")
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    if m.shape != params.shape:
        raise ShapeError(f"Adam state shape {m.shape} != params {params.shape}")
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new_params
