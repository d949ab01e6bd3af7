"""Minimal dense feed-forward network with manual forward/backward passes.

The model is a bias-free multi-layer perceptron: each layer multiplies by a
weight matrix, hidden layers apply a pointwise nonlinearity, and the final
affine output is projected onto the unit sphere. The backward pass applies
the exact normalization Jacobian (I - y y^T)/||z|| rather than treating the
projection as a constant, and reports the exact full-parameter gradient
norm of every sample in the batch alongside the batch-summed gradient.

A central finite-difference oracle is included for verification.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateOutputError, FormatError, NumericError

PARAMS_MAGIC = b"ADNW"
PARAMS_VERSION = 1


class Activation(enum.Enum):
    TANH = "tanh"
    RELU = "relu"

    @classmethod
    def parse(cls, name: str) -> "Activation":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}; expected one of "
                             f"{[a.value for a in cls]}") from None


@dataclass
class ModelParams:
    """Ordered weight matrices; layers[l] has shape (M_{l+1}, M_l)."""

    layers: list[np.ndarray]
    activation: Activation = Activation.TANH

    def layer_dims(self) -> list[int]:
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers]

    def num_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.layers], self.activation)

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("model must have at least one layer")
        for l, w in enumerate(self.layers):
            if w.ndim != 2:
                raise ValueError(f"layer {l} is not a matrix: shape {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {l} contains non-finite entries")
            if l > 0 and w.shape[1] != self.layers[l - 1].shape[0]:
                raise ValueError(
                    f"layer shapes do not chain: layer {l} expects input "
                    f"dim {w.shape[1]} but layer {l - 1} outputs "
                    f"{self.layers[l - 1].shape[0]}")


@dataclass
class ForwardCache:
    """Per-layer intermediates recorded by :func:`forward` for one batch."""

    inputs: np.ndarray                      # (B, M_0)
    pre: list[np.ndarray]                   # pre-activations of layers 1..L-1
    hidden: list[np.ndarray]                # activated outputs of layers 1..L-1
    raw_output: np.ndarray                  # (B, M_L), before normalization
    output_norms: np.ndarray                # (B,)
    descriptors: np.ndarray                 # (B, M_L), unit rows

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class GradEstimate:
    """Per-layer gradient matrices, shape-matched to :class:`ModelParams`."""

    layers: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradEstimate":
        return cls([np.zeros_like(w) for w in params.layers])

    def flatten(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.layers])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.layers)))

    def scaled(self, c: float) -> "GradEstimate":
        return GradEstimate([c * g for g in self.layers])


def init_params(layer_dims: Sequence[int], seed: int,
                activation: Activation = Activation.TANH) -> ModelParams:
    """Fan-in-scaled zero-mean normal initialization, deterministic per seed.

    Entries of layer l are drawn N(0, 2 / M_{l-1}).
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ValueError(f"need at least 2 layer dims, got {dims}")
    if any(int(d) <= 0 or int(d) != d for d in dims):
        raise ValueError(f"layer dims must be positive integers, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        layers.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
    params = ModelParams(layers, activation)
    params.validate()
    return params


def _activate(h: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(h)
    return np.maximum(h, 0.0)


def _activate_deriv_from_output(x: np.ndarray, h: np.ndarray,
                                activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return 1.0 - x * x
    return (h > 0.0).astype(np.float64)


def forward(params: ModelParams,
            inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch of flattened patches.

    Returns unit-norm descriptors (one row per input row) and the cache
    needed by :func:`backward`.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    first = params.layers[0]
    if X.shape[1] != first.shape[1]:
        raise ValueError(f"input dimension {X.shape[1]} does not match first "
                         f"layer fan-in {first.shape[1]}")
    hidden: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    x = X
    for w in params.layers[:-1]:
        h = x @ w.T
        x = _activate(h, params.activation)
        pre.append(h)
        hidden.append(x)
    z = x @ params.layers[-1].T
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < 1e-300):
        bad = int(np.argmin(norms))
        raise DegenerateOutputError(
            f"pre-normalization output of sample {bad} is zero")
    descriptors = z / norms[:, None]
    cache = ForwardCache(inputs=X, pre=pre, hidden=hidden, raw_output=z,
                         output_norms=norms, descriptors=descriptors)
    return descriptors, cache


def backward(params: ModelParams, cache: ForwardCache,
             output_grads: np.ndarray) -> tuple[GradEstimate, np.ndarray]:
    """Reverse-mode pass from descriptor-space gradients to weight gradients.

    ``output_grads`` holds dLoss/dDescriptor per sample. Returns the
    gradient summed over the batch and, per sample, the exact L2 norm of
    that sample's full-parameter gradient. The latter is the per-sample
    informativeness used by the adaptive sampler oracles.
    """
    G = np.atleast_2d(np.asarray(output_grads, dtype=np.float64))
    if G.shape != cache.descriptors.shape:
        raise ValueError(f"output_grads shape {G.shape} does not match "
                         f"cached batch shape {cache.descriptors.shape}")
    y = cache.descriptors
    # Jacobian of z -> z/||z||:  (I - y y^T) / ||z||, applied row-wise.
    delta = (G - np.sum(G * y, axis=1, keepdims=True) * y)
    delta = delta / cache.output_norms[:, None]

    grads: list[np.ndarray] = [None] * len(params.layers)  # type: ignore
    sq_norms = np.zeros(cache.batch_size)
    for l in range(len(params.layers) - 1, -1, -1):
        x_prev = cache.inputs if l == 0 else cache.hidden[l - 1]
        grads[l] = delta.T @ x_prev
        sq_norms += np.sum(delta * delta, axis=1) * np.sum(x_prev * x_prev, axis=1)
        if l > 0:
            dx = delta @ params.layers[l]
            deriv = _activate_deriv_from_output(cache.hidden[l - 1],
                                                cache.pre[l - 1],
                                                params.activation)
            delta = dx * deriv
    return GradEstimate(grads), np.sqrt(sq_norms)


def finite_diff_grad(params: ModelParams,
                     loss_closure: Callable[[ModelParams], float],
                     eps: float = 1e-6) -> GradEstimate:
    """Central finite differences of a scalar loss over every weight entry."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grads = GradEstimate.zeros_like(params)
    work = params.copy()
    for l, w in enumerate(work.layers):
        flat = w.ravel()
        gflat = grads.layers[l].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_closure(work)
            flat[idx] = orig - eps
            down = loss_closure(work)
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(
                    f"loss closure returned non-finite value near layer {l}, "
                    f"entry {idx}")
            gflat[idx] = (up - down) / (2.0 * eps)
    return grads


def write_params(params: ModelParams, path) -> None:
    """Serialize weights: magic, version, layer count, dims, activation, then
    row-major float64 little-endian matrices."""
    params.validate()
    dims = params.layer_dims()
    act_code = 0 if params.activation is Activation.TANH else 1
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<II", PARAMS_VERSION, len(params.layers)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<I", act_code))
        for w in params.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def read_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"truncated file while reading {what}", offset)
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != PARAMS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PARAMS_MAGIC!r}", 0)
    version, layer_count = struct.unpack("<II", take(8, "header"))
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if layer_count == 0:
        raise FormatError("layer count is zero", 8)
    dims = struct.unpack(f"<{layer_count + 1}I",
                         take(4 * (layer_count + 1), "dims"))
    (act_code,) = struct.unpack("<I", take(4, "activation"))
    if act_code not in (0, 1):
        raise FormatError(f"unknown activation code {act_code}", offset - 4)
    activation = Activation.TANH if act_code == 0 else Activation.RELU
    layers = []
    for l in range(layer_count):
        rows, cols = dims[l + 1], dims[l]
        raw = take(8 * rows * cols, f"layer {l} weights")
        layers.append(np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy())
    if offset != len(blob):
        raise FormatError("trailing bytes after weights", offset)
    params = ModelParams(layers, activation)
    params.validate()
    return params
