"""Minimal feed-forward network substrate with exact manual backpropagation.

Supported layers: dense, 1-D convolution (no padding), batch normalization,
elementwise activations (relu, tanh) and flatten. Batches are laid out as
``(N, features)`` for dense inputs and ``(N, channels, length)`` for conv1d.

Parameters live in :class:`NetworkParameters`, a list of per-layer dicts of
float64 arrays. Every instance carries a unique version stamp; a
:class:`ForwardTape` remembers the stamp it was produced under and
:func:`backward` refuses tapes whose parameters have since been replaced.
"""

from __future__ import annotations

import itertools
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .errors import (
    ChecksumError,
    DimensionMismatchError,
    InvalidDimensionError,
    SerializationError,
    StaleTapeError,
    VersionError,
)
from .numerics import RngStream


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class Conv1d:
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class BatchNorm:
    width: int
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass(frozen=True)
class Activation:
    kind: str  # "relu" | "tanh"

    def __post_init__(self):
        if self.kind not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv1d, BatchNorm, Activation, Flatten]
_LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv1d, BatchNorm, Activation, Flatten)}


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack plus the input shape it consumes (excluding the batch axis).

    ``final_scale`` multiplies the initial weights of the last parametrized
    layer; small values make a freshly initialized actor emit near-zero output.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    seed: int = 0
    final_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Shape after each layer, starting with the input; validates composition."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _output_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "final_scale": self.final_scale,
            "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = _LAYER_TYPES[entry.pop("type")]
            layers.append(kind(**entry))
        return cls(tuple(d["input_shape"]), tuple(layers), d["seed"], d["final_scale"])


def _output_shape(layer: Layer, shape: tuple[int, ...], i: int) -> tuple[int, ...]:
    def bad(msg):
        return DimensionMismatchError(f"layer {i} ({type(layer).__name__}): {msg}")

    if isinstance(layer, Dense):
        if shape != (layer.n_in,):
            raise bad(f"expects ({layer.n_in},), got {shape}")
        return (layer.n_out,)
    if isinstance(layer, Conv1d):
        if len(shape) != 2 or shape[0] != layer.c_in:
            raise bad(f"expects ({layer.c_in}, L), got {shape}")
        length = (shape[1] - layer.kernel) // layer.stride + 1
        if length < 1:
            raise bad(f"input length {shape[1]} shorter than kernel {layer.kernel}")
        return (layer.c_out, length)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.width:
            raise bad(f"width {layer.width} does not match {shape}")
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    return shape


_ids = itertools.count(1)

_TRAINABLE = {"Dense": ("W", "b"), "Conv1d": ("W", "b"), "BatchNorm": ("gamma", "beta")}
_BUFFERS = {"BatchNorm": ("running_mean", "running_var")}


class NetworkParameters:
    """Per-layer parameter dicts. Layers without parameters hold ``{}``."""

    def __init__(self, layers: list[dict[str, np.ndarray]]):
        self.layers = layers
        self.version = next(_ids)

    def copy(self) -> "NetworkParameters":
        return NetworkParameters([{k: v.copy() for k, v in d.items()} for d in self.layers])

    def arrays(self):
        """Yield ``(layer_index, name, array)`` in canonical order, buffers included."""
        for i, d in enumerate(self.layers):
            for name in sorted(d):
                yield i, name, d[name]

    def flat_trainable(self, spec: NetworkSpec) -> np.ndarray:
        parts = [
            self.layers[i][name].ravel()
            for i, layer in enumerate(spec.layers)
            for name in _TRAINABLE.get(type(layer).__name__, ())
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def equal(self, other: "NetworkParameters") -> bool:
        a = list(self.arrays())
        b = list(other.arrays())
        return len(a) == len(b) and all(
            i == j and n == m and x.shape == y.shape and np.array_equal(x, y)
            for (i, n, x), (j, m, y) in zip(a, b)
        )


def trainable_names(layer: Layer) -> tuple[str, ...]:
    return _TRAINABLE.get(type(layer).__name__, ())


def init_params(spec: NetworkSpec) -> NetworkParameters:
    """Uniform fan-in initialization seeded by ``NetworkSpec.seed``."""
    rng = RngStream(spec.seed, ("nn-init",))
    param_layers = [i for i, l in enumerate(spec.layers) if isinstance(l, (Dense, Conv1d))]
    last = param_layers[-1] if param_layers else -1
    layers: list[dict[str, np.ndarray]] = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            bound = 1.0 / np.sqrt(layer.n_in)
            W = rng.uniform(-bound, bound, (layer.n_out, layer.n_in))
            b = rng.uniform(-bound, bound, layer.n_out)
        elif isinstance(layer, Conv1d):
            bound = 1.0 / np.sqrt(layer.c_in * layer.kernel)
            W = rng.uniform(-bound, bound, (layer.c_out, layer.c_in, layer.kernel))
            b = rng.uniform(-bound, bound, layer.c_out)
        elif isinstance(layer, BatchNorm):
            w = layer.width
            layers.append(
                {
                    "gamma": np.ones(w),
                    "beta": np.zeros(w),
                    "running_mean": np.zeros(w),
                    "running_var": np.ones(w),
                }
            )
            continue
        else:
            layers.append({})
            continue
        if i == last:
            W *= spec.final_scale
            b *= spec.final_scale
        layers.append({"W": W, "b": b})
    return NetworkParameters(layers)


@dataclass
class ForwardTape:
    spec: NetworkSpec
    params: NetworkParameters
    version: int
    mode: str
    caches: list = field(default_factory=list)
    output_shape: tuple = ()


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) if x.ndim == 2 else (0, 2)


def _bn_shape(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v if x.ndim == 2 else v[None, :, None]


def _conv_index(length: int, kernel: int, stride: int) -> np.ndarray:
    l_out = (length - kernel) // stride + 1
    return np.arange(l_out)[:, None] * stride + np.arange(kernel)[None, :]


def forward(
    params: NetworkParameters, spec: NetworkSpec, batch: np.ndarray, mode: str = "eval"
) -> tuple[np.ndarray, ForwardTape]:
    """Run a batch through the network.

    In ``"train"`` mode batch-norm layers normalize with batch statistics and
    update their running averages in place; ``"eval"`` mode reads the running
    statistics and mutates nothing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise InvalidDimensionError("batch must be nonempty")
    if x.shape[1:] != spec.input_shape:
        raise DimensionMismatchError(
            f"input shape {x.shape[1:]} does not match spec {spec.input_shape}"
        )
    tape = ForwardTape(spec, params, params.version, mode)
    for layer, p in zip(spec.layers, params.layers):
        if isinstance(layer, Dense):
            tape.caches.append(x)
            x = x @ p["W"].T + p["b"]
        elif isinstance(layer, Conv1d):
            idx = _conv_index(x.shape[2], layer.kernel, layer.stride)
            patches = x[:, :, idx]  # (N, C_in, L_out, k)
            tape.caches.append((x.shape, idx, patches))
            x = np.einsum("nclk,ock->nol", patches, p["W"]) + p["b"][None, :, None]
        elif isinstance(layer, BatchNorm):
            axes = _bn_axes(x)
            if mode == "train":
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                m = layer.momentum
                p["running_mean"] *= 1.0 - m
                p["running_mean"] += m * mean
                p["running_var"] *= 1.0 - m
                p["running_var"] += m * var
            else:
                mean, var = p["running_mean"], p["running_var"]
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - _bn_shape(x, mean)) * _bn_shape(x, inv_std)
            tape.caches.append((xhat, inv_std))
            x = xhat * _bn_shape(x, p["gamma"]) + _bn_shape(x, p["beta"])
        elif isinstance(layer, Activation):
            x = np.maximum(x, 0.0) if layer.kind == "relu" else np.tanh(x)
            tape.caches.append(x)
        elif isinstance(layer, Flatten):
            tape.caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    tape.output_shape = x.shape
    return x, tape


def backward(tape: ForwardTape, upstream: np.ndarray):
    """Exact gradients of ``sum(upstream * outputs)``.

    Returns ``(param_grads, input_grads)`` where ``param_grads`` mirrors the
    layout of the trainable entries of :class:`NetworkParameters`.
    """
    if tape.params.version != tape.version:
        raise StaleTapeError("tape was produced from parameters that have since changed")
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != tape.output_shape:
        raise DimensionMismatchError(
            f"upstream shape {delta.shape} does not match output {tape.output_shape}"
        )
    spec, params = tape.spec, tape.params
    grads: list[dict[str, np.ndarray]] = [{} for _ in spec.layers]
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p, cache = spec.layers[i], params.layers[i], tape.caches[i]
        if isinstance(layer, Dense):
            grads[i] = {"W": delta.T @ cache, "b": delta.sum(axis=0)}
            delta = delta @ p["W"]
        elif isinstance(layer, Conv1d):
            in_shape, idx, patches = cache
            grads[i] = {
                "W": np.einsum("nol,nclk->ock", delta, patches),
                "b": delta.sum(axis=(0, 2)),
            }
            dpatches = np.einsum("nol,ock->nclk", delta, p["W"])
            dx = np.zeros(in_shape)
            # positions within one kernel tap never collide, so += is safe
            for j in range(layer.kernel):
                dx[:, :, idx[:, j]] += dpatches[..., j]
            delta = dx
        elif isinstance(layer, BatchNorm):
            xhat, inv_std = cache
            axes = _bn_axes(delta)
            grads[i] = {
                "gamma": (delta * xhat).sum(axis=axes),
                "beta": delta.sum(axis=axes),
            }
            dxhat = delta * _bn_shape(delta, p["gamma"])
            if tape.mode == "train":
                n = delta.size // delta.shape[1]
                s1 = _bn_shape(delta, dxhat.sum(axis=axes))
                s2 = _bn_shape(delta, (dxhat * xhat).sum(axis=axes))
                delta = _bn_shape(delta, inv_std) * (dxhat - s1 / n - xhat * s2 / n)
            else:
                delta = dxhat * _bn_shape(delta, inv_std)
        elif isinstance(layer, Activation):
            y = cache
            delta = delta * (y > 0.0) if layer.kind == "relu" else delta * (1.0 - y * y)
        elif isinstance(layer, Flatten):
            delta = delta.reshape(cache)
    return grads, delta


def predict(params: NetworkParameters, spec: NetworkSpec, batch: np.ndarray) -> np.ndarray:
    return forward(params, spec, batch, "eval")[0]


@dataclass
class AdamState:
    m: list[dict[str, np.ndarray]]
    v: list[dict[str, np.ndarray]]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParameters, spec: NetworkSpec) -> "AdamState":
        m, v = [], []
        for layer, p in zip(spec.layers, params.layers):
            names = trainable_names(layer)
            m.append({n: np.zeros_like(p[n]) for n in names})
            v.append({n: np.zeros_like(p[n]) for n in names})
        return cls(m, v, 0)


def adam_update_net(
    params: NetworkParameters,
    grads: list[dict[str, np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetworkParameters, AdamState]:
    """One bias-corrected Adam step; returns new parameter and state objects."""
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_layers, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.layers, grads, state.m, state.v):
        layer = {k: a.copy() for k, a in p.items()}
        lm, lv = {}, {}
        for name in m:
            if g[name].shape != p[name].shape:
                raise DimensionMismatchError(f"gradient shape mismatch for {name}")
            lm[name] = beta1 * m[name] + (1.0 - beta1) * g[name]
            lv[name] = beta2 * v[name] + (1.0 - beta2) * g[name] ** 2
            layer[name] -= lr * (lm[name] / c1) / (np.sqrt(lv[name] / c2) + eps)
        new_layers.append(layer)
        new_m.append(lm)
        new_v.append(lv)
    return NetworkParameters(new_layers), AdamState(new_m, new_v, t)


MAGIC = b"ZORLNN1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<7sHI")


def serialize(params: NetworkParameters, spec: NetworkSpec) -> bytes:
    """Binary layout (little-endian)::

        magic "ZORLNN1" | u16 version | u32 spec_len | spec JSON
        | u64 block_len | float64 parameter block | u32 CRC32(spec JSON + block)
    """
    spec_bytes = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    block = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, _, a in params.arrays())
    crc = zlib.crc32(spec_bytes + block)
    return b"".join(
        [
            _HEADER.pack(MAGIC, FORMAT_VERSION, len(spec_bytes)),
            spec_bytes,
            struct.pack("<Q", len(block)),
            block,
            struct.pack("<I", crc),
        ]
    )


def deserialize(payload: bytes) -> tuple[NetworkParameters, NetworkSpec]:
    if len(payload) < _HEADER.size:
        raise ChecksumError("payload truncated before header end")
    magic, version, spec_len = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise SerializationError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    pos = _HEADER.size
    spec_bytes = payload[pos : pos + spec_len]
    pos += spec_len
    if len(spec_bytes) != spec_len or len(payload) < pos + 8:
        raise ChecksumError("payload truncated inside spec block")
    (block_len,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    block = payload[pos : pos + block_len]
    pos += block_len
    if len(block) != block_len or len(payload) != pos + 4:
        raise ChecksumError("payload length does not match declared block sizes")
    (crc,) = struct.unpack_from("<I", payload, pos)
    if zlib.crc32(spec_bytes + block) != crc:
        raise ChecksumError("checksum mismatch")
    spec = NetworkSpec.from_dict(json.loads(spec_bytes.decode("utf-8")))
    template = init_params(spec)
    flat = np.frombuffer(block, dtype="<f8")
    offset = 0
    layers = [dict(d) for d in template.layers]
    for i, name, arr in template.arrays():
        n = arr.size
        if offset + n > flat.size:
            raise SerializationError("parameter block shorter than spec requires")
        layers[i][name] = flat[offset : offset + n].reshape(arr.shape).astype(np.float64)
        offset += n
    if offset != flat.size:
        raise SerializationError("parameter block longer than spec requires")
    return NetworkParameters(layers), spec
