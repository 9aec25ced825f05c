"""Embedding network: configurable layer stack with explicit reverse-mode gradients.

The network maps an input sample (flat vector or CHW image) to an M-dimensional
embedding. Parameters live in one flat float array with per-layer offsets so the
optimizer and the gradient checks can treat the model as a single vector.
Forward runs in the parameter dtype; training uses float32, while a float64 copy
(`EmbeddingNetwork.astype`) exists for gradient verification.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import CheckpointError, ConfigurationError, InputError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSDCKPT1"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FullyConnected:
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool:
    window: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[FullyConnected, Conv2d, Relu, AvgPool, Flatten]

_SPEC_NAMES = {
    FullyConnected: "fc",
    Conv2d: "conv",
    Relu: "relu",
    AvgPool: "avgpool",
    Flatten: "flatten",
}


def layer_to_dict(spec: LayerSpec) -> dict:
    d = {"type": _SPEC_NAMES[type(spec)]}
    if isinstance(spec, FullyConnected):
        d["out_dim"] = spec.out_dim
    elif isinstance(spec, Conv2d):
        d.update(out_channels=spec.out_channels, kernel=spec.kernel, stride=spec.stride)
    elif isinstance(spec, AvgPool):
        d["window"] = spec.window
    return d


def layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("type")
    try:
        if kind == "fc":
            return FullyConnected(out_dim=int(d["out_dim"]))
        if kind == "conv":
            return Conv2d(out_channels=int(d["out_channels"]), kernel=int(d["kernel"]),
                          stride=int(d.get("stride", 1)))
        if kind == "relu":
            return Relu()
        if kind == "avgpool":
            return AvgPool(window=int(d["window"]))
        if kind == "flatten":
            return Flatten()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad layer descriptor {d!r}: {exc}") from exc
    raise ConfigurationError(f"unknown layer type {kind!r}")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture + init seed. `input_shape` is (D,) for vectors or (C, H, W) for images."""

    input_shape: tuple
    layer_specs: tuple
    embedding_dim: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layer_specs", tuple(self.layer_specs))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(s) for s in self.layer_specs],
            "embedding_dim": self.embedding_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            return cls(
                input_shape=tuple(d["input_shape"]),
                layer_specs=tuple(layer_from_dict(x) for x in d["layers"]),
                embedding_dim=int(d["embedding_dim"]),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad network config: {exc}") from exc


def vector_network_config(input_dim: int, embedding_dim: int = 64,
                          hidden: Sequence[int] = (64, 64), seed: int = 0) -> NetworkConfig:
    """Default MLP for flat vector data: fc/relu pairs followed by a linear head."""
    layers = []
    for h in hidden:
        layers += [FullyConnected(h), Relu()]
    layers.append(FullyConnected(embedding_dim))
    return NetworkConfig((input_dim,), tuple(layers), embedding_dim, seed)


def image_network_config(input_shape=(3, 32, 32), embedding_dim: int = 64,
                         seed: int = 0) -> NetworkConfig:
    """Default small conv net for CHW images (sized for 32x32 desk-scale crops)."""
    layers = (
        Conv2d(8, 3, 1), Relu(),
        Conv2d(16, 3, 2), Relu(),
        Conv2d(16, 3, 2), Relu(),
        Conv2d(32, 3, 1), Relu(),
        AvgPool(2),
        Flatten(),
        FullyConnected(embedding_dim),
    )
    return NetworkConfig(tuple(input_shape), layers, embedding_dim, seed)


# ---------------------------------------------------------------------------
# compiled layers
# ---------------------------------------------------------------------------

class _FcLayer:
    def __init__(self, in_dim, out_dim, offset):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w_slice = slice(offset, offset + in_dim * out_dim)
        self.b_slice = slice(offset + in_dim * out_dim, offset + in_dim * out_dim + out_dim)
        self.param_count = in_dim * out_dim + out_dim
        self.fan_in = in_dim

    def init_params(self, rng, out):
        limit = 1.0 / np.sqrt(self.fan_in)
        out[self.w_slice] = rng.uniform(-limit, limit, self.out_dim * self.in_dim)
        out[self.b_slice] = 0.0

    def forward(self, x, params, keep):
        w = params[self.w_slice].reshape(self.out_dim, self.in_dim)
        b = params[self.b_slice]
        return x @ w.T + b, (x if keep else None)

    def backward(self, g, cache, params, grad_out):
        w = params[self.w_slice].reshape(self.out_dim, self.in_dim)
        grad_out[self.w_slice] += (g.T @ cache).ravel()
        grad_out[self.b_slice] += g.sum(axis=0)
        return g @ w


class _ConvLayer:
    """Valid 2D convolution (no padding) via patch extraction + matmul."""

    def __init__(self, in_shape, out_channels, kernel, stride, offset):
        c, h, w = in_shape
        self.in_shape = in_shape
        self.kernel = kernel
        self.stride = stride
        self.out_channels = out_channels
        self.h_out = (h - kernel) // stride + 1
        self.w_out = (w - kernel) // stride + 1
        self.out_shape = (out_channels, self.h_out, self.w_out)
        n_w = out_channels * c * kernel * kernel
        self.w_slice = slice(offset, offset + n_w)
        self.b_slice = slice(offset + n_w, offset + n_w + out_channels)
        self.param_count = n_w + out_channels
        self.fan_in = c * kernel * kernel

    def init_params(self, rng, out):
        limit = 1.0 / np.sqrt(self.fan_in)
        out[self.w_slice] = rng.uniform(-limit, limit, self.w_slice.stop - self.w_slice.start)
        out[self.b_slice] = 0.0

    def _patches(self, x):
        # (B, C*k*k, Ho*Wo) patch matrix; strided views copied into a dense block
        b = x.shape[0]
        c, _, _ = self.in_shape
        k, s, ho, wo = self.kernel, self.stride, self.h_out, self.w_out
        cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = x[:, :, i:i + s * ho:s, j:j + s * wo:s]
        return cols.reshape(b, c * k * k, ho * wo)

    def forward(self, x, params, keep):
        wm = params[self.w_slice].reshape(self.out_channels, self.fan_in)
        b = params[self.b_slice]
        cols = self._patches(x)
        out = np.einsum("of,bfp->bop", wm, cols, optimize=True)
        out += b[None, :, None]
        out = out.reshape(x.shape[0], *self.out_shape)
        return out, (cols if keep else None)

    def backward(self, g, cache, params, grad_out):
        cols = cache
        batch = g.shape[0]
        gflat = g.reshape(batch, self.out_channels, self.h_out * self.w_out)
        grad_out[self.w_slice] += np.einsum("bop,bfp->of", gflat, cols, optimize=True).ravel()
        grad_out[self.b_slice] += gflat.sum(axis=(0, 2))
        wm = params[self.w_slice].reshape(self.out_channels, self.fan_in)
        dcols = np.einsum("of,bop->bfp", wm, gflat, optimize=True)
        c, h, w = self.in_shape
        k, s, ho, wo = self.kernel, self.stride, self.h_out, self.w_out
        dcols = dcols.reshape(batch, c, k, k, ho, wo)
        dx = np.zeros((batch, c, h, w), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        return dx


class _ReluLayer:
    param_count = 0

    def init_params(self, rng, out):
        pass

    def forward(self, x, params, keep):
        return np.maximum(x, 0), (x if keep else None)

    def backward(self, g, cache, params, grad_out):
        return g * (cache > 0)


class _AvgPoolLayer:
    param_count = 0

    def __init__(self, in_shape, window):
        c, h, w = in_shape
        self.window = window
        self.in_shape = in_shape
        self.out_shape = (c, h // window, w // window)

    def init_params(self, rng, out):
        pass

    def forward(self, x, params, keep):
        b = x.shape[0]
        c, h, w = self.in_shape
        k = self.window
        y = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return y, None

    def backward(self, g, cache, params, grad_out):
        b = g.shape[0]
        c, h, w = self.in_shape
        k = self.window
        gy = g[:, :, :, None, :, None] / (k * k)
        dx = np.broadcast_to(gy, (b, c, h // k, k, w // k, k))
        return dx.reshape(b, c, h, w).copy()


class _FlattenLayer:
    param_count = 0

    def __init__(self, in_shape):
        self.in_shape = in_shape

    def init_params(self, rng, out):
        pass

    def forward(self, x, params, keep):
        return x.reshape(x.shape[0], -1), None

    def backward(self, g, cache, params, grad_out):
        return g.reshape(g.shape[0], *self.in_shape)


def _build_plan(config: NetworkConfig):
    """Shape-check the layer chain and return (compiled layers, parameter count)."""
    shape = config.input_shape
    if len(shape) not in (1, 3) or any(s <= 0 for s in shape):
        raise ConfigurationError(f"input shape must be (D,) or (C, H, W), got {shape}")
    if config.embedding_dim < 2:
        raise ConfigurationError("embedding_dim must be >= 2")
    layers = []
    offset = 0
    n_nonlinear = 0
    for pos, spec in enumerate(config.layer_specs):
        where = f"layer {pos} ({type(spec).__name__})"
        if isinstance(spec, FullyConnected):
            if len(shape) != 1:
                raise ConfigurationError(f"{where}: needs flat input, got {shape}; add flatten")
            if spec.out_dim < 1:
                raise ConfigurationError(f"{where}: out_dim must be positive")
            layer = _FcLayer(shape[0], spec.out_dim, offset)
            shape = (spec.out_dim,)
        elif isinstance(spec, Conv2d):
            if len(shape) != 3:
                raise ConfigurationError(f"{where}: needs CHW input, got {shape}")
            if spec.kernel < 1 or spec.stride < 1 or spec.out_channels < 1:
                raise ConfigurationError(f"{where}: kernel/stride/out_channels must be positive")
            if shape[1] < spec.kernel or shape[2] < spec.kernel:
                raise ConfigurationError(f"{where}: kernel {spec.kernel} larger than input {shape}")
            layer = _ConvLayer(shape, spec.out_channels, spec.kernel, spec.stride, offset)
            shape = layer.out_shape
        elif isinstance(spec, Relu):
            layer = _ReluLayer()
            n_nonlinear += 1
        elif isinstance(spec, AvgPool):
            if len(shape) != 3:
                raise ConfigurationError(f"{where}: needs CHW input, got {shape}")
            if spec.window < 1 or shape[1] % spec.window or shape[2] % spec.window:
                raise ConfigurationError(
                    f"{where}: window {spec.window} must divide spatial dims {shape[1:]}")
            layer = _AvgPoolLayer(shape, spec.window)
            shape = layer.out_shape
        elif isinstance(spec, Flatten):
            layer = _FlattenLayer(shape)
            shape = (int(np.prod(shape)),)
        else:
            raise ConfigurationError(f"{where}: unknown layer spec")
        offset += layer.param_count
        layers.append(layer)
    if shape != (config.embedding_dim,):
        raise ConfigurationError(
            f"layer chain produces shape {shape}, expected ({config.embedding_dim},)")
    if n_nonlinear == 0:
        log.warning("network config has no nonlinearity; fine for testing, weak for training")
    return layers, offset


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Per-layer activations cached by one forward pass, consumed by backward."""

    caches: list
    batch_size: int
    dtype: np.dtype


class EmbeddingNetwork:
    """Flat parameter vector plus the compiled layer plan for its config."""

    def __init__(self, config: NetworkConfig, params: np.ndarray):
        self.config = config
        self.layers, self._param_count = _build_plan(config)
        params = np.asarray(params)
        if params.shape != (self._param_count,):
            raise ConfigurationError(
                f"parameter vector has {params.size} entries, config implies {self._param_count}")
        if not np.isfinite(params).all():
            raise InputError("parameters contain non-finite values")
        self.params = params

    @property
    def parameter_count(self) -> int:
        return self._param_count

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def astype(self, dtype) -> "EmbeddingNetwork":
        return EmbeddingNetwork(self.config, self.params.astype(dtype))

    def copy(self) -> "EmbeddingNetwork":
        return EmbeddingNetwork(self.config, self.params.copy())

    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.params).tobytes())
        return h.hexdigest()[:12]


def init_network(config: NetworkConfig) -> EmbeddingNetwork:
    """Fresh float32 network: fan-in-scaled uniform weights, zero biases, seeded by config."""
    layers, count = _build_plan(config)
    params = np.zeros(count, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    for layer in layers:
        layer.init_params(rng, params)
    return EmbeddingNetwork(config, params.astype(np.float32))


def _as_batch(net: EmbeddingNetwork, batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.shape[1:] == net.config.input_shape:
        x = batch
    else:
        samples = list(batch)
        if not samples:
            raise InputError("empty batch")
        for i, s in enumerate(samples):
            if np.shape(s) != net.config.input_shape:
                raise InputError(
                    f"sample {i} has shape {np.shape(s)}, expected {net.config.input_shape}")
        x = np.stack([np.asarray(s) for s in samples])
    x = x.astype(net.dtype, copy=False)
    if not np.isfinite(x).all():
        raise InputError("batch contains non-finite values")
    return x


def forward(net: EmbeddingNetwork, batch, keep_trace: bool = False):
    """Embed a batch. Returns (embeddings (B, M), ForwardTrace or None).

    Pure in (parameters, batch); rows come back in input order.
    """
    x = _as_batch(net, batch)
    caches = [] if keep_trace else None
    for layer in net.layers:
        x, cache = layer.forward(x, net.params, keep_trace)
        if keep_trace:
            caches.append(cache)
    trace = ForwardTrace(caches, x.shape[0], net.dtype) if keep_trace else None
    return x, trace


def backward(net: EmbeddingNetwork, trace: ForwardTrace, embedding_grads) -> np.ndarray:
    """Accumulate dL/dparams for a scalar L whose embedding gradient is `embedding_grads`.

    The trace must come from `forward(net, ..., keep_trace=True)` on the same
    parameters; contributions sum over the batch.
    """
    if trace is None or not isinstance(trace, ForwardTrace):
        raise InputError("backward needs a trace from forward(..., keep_trace=True)")
    if len(trace.caches) != len(net.layers):
        raise InputError(
            f"trace has {len(trace.caches)} layers, network has {len(net.layers)}")
    g = np.asarray(embedding_grads, dtype=net.dtype)
    if g.shape != (trace.batch_size, net.embedding_dim):
        raise InputError(
            f"embedding_grads shape {g.shape} does not match "
            f"({trace.batch_size}, {net.embedding_dim})")
    grad = np.zeros(net.parameter_count, dtype=net.dtype)
    for layer, cache in zip(reversed(net.layers), reversed(trace.caches)):
        g = layer.backward(g, cache, net.params, grad)
    return grad


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: EmbeddingNetwork, path) -> None:
    """Binary layout: magic, u32-LE manifest length, JSON manifest, float32-LE params."""
    if net.dtype != np.float32:
        raise InputError("only float32 networks are checkpointed; cast check-mode copies back")
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "parameter_count": net.parameter_count,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(net.params.astype("<f4").tobytes())


def load_checkpoint(path, expect_config: Optional[NetworkConfig] = None) -> EmbeddingNetwork:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    body = raw[12:]
    if len(body) < mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(body[:mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')!r}")
    try:
        config = NetworkConfig.from_dict(manifest["config"])
        count = int(manifest["parameter_count"])
    except (KeyError, ConfigurationError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    payload = body[mlen:]
    if len(payload) != 4 * count:
        raise CheckpointError(
            f"{path}: expected {4 * count} parameter bytes, found {len(payload)} (truncated?)")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if expect_config is not None and config != expect_config:
        raise CheckpointError(f"{path}: checkpoint config does not match the expected config")
    try:
        return EmbeddingNetwork(config, params)
    except (ConfigurationError, InputError) as exc:
        raise CheckpointError(f"{path}: shape mismatch: {exc}") from exc
