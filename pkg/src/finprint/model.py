"""A small convolutional encoder with hand-written forward/backward passes.

Layout is NHWC throughout.  Each conv block is a 'same'-padded stride-1
convolution, ReLU and an optional 2x2 max pool; the flattened features go
through one dense layer and are L2-normalised, so every embedding lies on
the unit sphere.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .core import (
    ContractError,
    FileIOError,
    FormatError,
    NumericError,
    RngState,
    as_rng,
    decode_tensor,
)

WEIGHTS_VERSION = "finprint-encoder/1"
CHECKPOINT_MAGIC = b"FNCK1\n"


class CheckpointError(FormatError):
    pass


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple = (64, 64, 1)
    conv_blocks: tuple = (ConvBlock(8), ConvBlock(16), ConvBlock(32))
    embed_dim: int = 128
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ContractError(f"input_shape must be (H, W, C) with positive sizes, got {self.input_shape}")
        if self.embed_dim < 2:
            raise ContractError("embed_dim must be >= 2")
        if self.activation != "relu":
            raise ContractError("only relu activation is supported")
        for b in blocks:
            if b.filters < 1 or b.kernel < 1 or b.kernel % 2 == 0:
                raise ContractError(f"conv block {b}: filters >= 1 and an odd kernel are required")
            if b.stride != 1:
                raise ContractError("only stride 1 convolutions are supported")
            if b.pool not in (1, 2):
                raise ContractError("pool must be 1 (none) or 2")
        self.feature_shape()

    def feature_shape(self) -> tuple:
        h, w, c = self.input_shape
        for i, b in enumerate(self.conv_blocks):
            if b.pool == 2:
                h, w = h // 2, w // 2
            c = b.filters
            if h < 1 or w < 1:
                raise ContractError(f"spatial size collapses to zero after conv block {i}")
        return h, w, c

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_blocks": [asdict(b) for b in self.conv_blocks],
            "embed_dim": self.embed_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv_blocks=tuple(ConvBlock(**b) for b in d["conv_blocks"]),
            embed_dim=int(d["embed_dim"]),
            activation=d.get("activation", "relu"),
        )


@dataclass(frozen=True, eq=False)
class Weights:
    config: EncoderConfig
    tensors: dict
    seed: Optional[int] = None
    version: str = WEIGHTS_VERSION

    def names(self) -> list:
        return list(self.tensors)

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "Weights":
        return Weights(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed, self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def equals(self, other: "Weights") -> bool:
        return (self.config == other.config and self.names() == other.names()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def param_shapes(config: EncoderConfig) -> dict:
    shapes = {}
    c = config.input_shape[2]
    for i, b in enumerate(config.conv_blocks):
        shapes[f"conv{i}.w"] = (b.kernel * b.kernel * c, b.filters)
        shapes[f"conv{i}.b"] = (b.filters,)
        c = b.filters
    fh, fw, fc = config.feature_shape()
    shapes["dense.w"] = (fh * fw * fc, config.embed_dim)
    shapes["dense.b"] = (config.embed_dim,)
    return shapes


def init(config: EncoderConfig, rng) -> Weights:
    """He-normal weights (variance 2/fan_in), zero biases."""
    seed = rng.seed if isinstance(rng, RngState) else None
    gen = as_rng(rng.child("init") if isinstance(rng, RngState) else rng)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = gen.standard_normal(shape) * np.sqrt(2.0 / shape[0])
    return Weights(config, tensors, seed)


# -- forward / backward ----------------------------------------------------

@dataclass
class ForwardCache:
    config: EncoderConfig
    batch: int
    blocks: list = field(default_factory=list)
    flat: Optional[np.ndarray] = None
    pre_norm: Optional[np.ndarray] = None
    norms: Optional[np.ndarray] = None
    out: Optional[np.ndarray] = None


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite activation in layer {layer}")


def as_batch(batch, config: EncoderConfig) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = batch
    else:
        x = np.stack([s.pixels if hasattr(s, "pixels") else s for s in batch])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != config.input_shape:
        raise ContractError(f"batch shape {x.shape[1:]} does not match encoder input {config.input_shape}")
    return np.ascontiguousarray(x)


def l2_normalize(v: np.ndarray):
    norms = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / norms, norms


def l2_normalize_backward(u: np.ndarray, norms: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Pull a gradient back through ``u = v / |v|``: ``(I - u u^T) g / |v|``."""
    return (grad_u - u * np.sum(u * grad_u, axis=-1, keepdims=True)) / norms


def forward(w: Weights, batch, keep_cache: bool = True):
    """Embed a batch.  Returns ``(embeddings, cache)``; embeddings are (N, embed_dim)."""
    cfg = w.config
    x = as_batch(batch, cfg)
    n = x.shape[0]
    cache = ForwardCache(cfg, n)
    for i, b in enumerate(cfg.conv_blocks):
        _, h, wd, c = x.shape
        p = b.kernel // 2
        x_pad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = kernels.im2col(np.ascontiguousarray(x_pad), b.kernel)
        z = cols @ w.tensors[f"conv{i}.w"] + w.tensors[f"conv{i}.b"]
        _check_finite(z, f"conv{i}")
        a = np.maximum(z, 0.0).reshape(n, h, wd, b.filters)
        arg = None
        if b.pool == 2:
            a, arg = kernels.maxpool2_forward(a)
        cache.blocks.append((cols if keep_cache else None, z > 0 if keep_cache else None, arg, (h, wd, c)))
        x = a
    flat = x.reshape(n, -1)
    v = flat @ w.tensors["dense.w"] + w.tensors["dense.b"]
    _check_finite(v, "dense")
    u, norms = l2_normalize(v)
    if not np.all(norms > 0):
        raise NumericError("zero-length pre-normalisation vector in layer normalize")
    _check_finite(u, "normalize")
    if keep_cache:
        cache.flat, cache.pre_norm, cache.norms, cache.out = flat, v, norms, u
    return u, cache


def backward(w: Weights, cache: ForwardCache, grad_embeddings: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every weight tensor, given dL/d(embedding)."""
    cfg = w.config
    if cache.config != cfg or cache.out is None:
        raise ContractError("forward cache does not belong to these weights")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != cache.out.shape:
        raise ContractError(f"gradient shape {g.shape} != embedding shape {cache.out.shape}")
    n = cache.batch
    grads = {}
    dv = l2_normalize_backward(cache.out, cache.norms, g)
    grads["dense.w"] = cache.flat.T @ dv
    grads["dense.b"] = dv.sum(axis=0)
    dx = (dv @ w.tensors["dense.w"].T).reshape((n,) + cfg.feature_shape())
    for i in range(len(cfg.conv_blocks) - 1, -1, -1):
        b = cfg.conv_blocks[i]
        cols, mask, arg, (h, wd, c) = cache.blocks[i]
        if b.pool == 2:
            da = kernels.maxpool2_backward(np.ascontiguousarray(dx), arg, h, wd)
        else:
            da = dx
        dz = (da.reshape(-1, b.filters)) * mask
        grads[f"conv{i}.w"] = cols.T @ dz
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 0:
            dcols = dz @ w.tensors[f"conv{i}.w"].T
            dpad = kernels.col2im(np.ascontiguousarray(dcols), n, h, wd, c, b.kernel)
            p = b.kernel // 2
            dx = dpad[:, p:p + h, p:p + wd, :] if p else dpad
    return {k: grads[k] for k in w.tensors}


def embed(w: Weights, samples, batch_size: int = 256) -> np.ndarray:
    """Embeddings for any number of samples, in input order."""
    x = as_batch(samples, w.config)
    out = [forward(w, x[i:i + batch_size], keep_cache=False)[0] for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, w.config.embed_dim))
    return np.concatenate(out)


# -- optimisers ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")

    def params(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "learning_rate", "momentum", "beta1", "beta2", "epsilon", "t")}


def sgd(learning_rate=0.01, momentum=0.0) -> OptimizerState:
    return OptimizerState("sgd", learning_rate, momentum)


def adam(learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> OptimizerState:
    return OptimizerState("adam", learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)


def apply_update(w: Weights, grads: dict, opt: OptimizerState):
    """One optimiser step.  Inputs are left untouched; returns (weights, state)."""
    if set(grads) != set(w.tensors):
        raise ContractError("gradient names do not match weight tensors")
    for k, g in grads.items():
        if g.shape != w.tensors[k].shape:
            raise ContractError(f"gradient {k} has shape {g.shape}, expected {w.tensors[k].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k}")
    t = opt.t + 1
    new_w, new_m, new_v = {}, {}, {}
    lr = opt.learning_rate
    if opt.kind == "sgd":
        for k, p in w.tensors.items():
            g = grads[k]
            if opt.momentum:
                vel = opt.momentum * opt.m.get(k, 0.0) + g
                new_m[k] = vel
                new_w[k] = p - lr * vel
            else:
                new_w[k] = p - lr * g
    else:
        b1, b2 = opt.beta1, opt.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for k, p in w.tensors.items():
            g = grads[k]
            m = b1 * opt.m[k] + (1.0 - b1) * g if k in opt.m else (1.0 - b1) * g
            v = b2 * opt.v[k] + (1.0 - b2) * (g * g) if k in opt.v else (1.0 - b2) * (g * g)
            new_m[k], new_v[k] = m, v
            new_w[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + opt.epsilon)
    for k, p in new_w.items():
        if not np.isfinite(p).all():
            raise NumericError(f"update produced non-finite weights in {k}")
    state = OptimizerState(opt.kind, opt.learning_rate, opt.momentum, opt.beta1, opt.beta2,
                           opt.epsilon, t, new_m, new_v)
    return Weights(w.config, new_w, w.seed, w.version), state


# -- checkpoints -----------------------------------------------------------

def _tensor_blob(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return (b"FNT1" + struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes())


def checkpoint_bytes(w: Weights, opt: Optional[OptimizerState] = None, extra: Optional[dict] = None) -> bytes:
    blobs, index = [], []
    for group, tensors in (("weights", w.tensors),
                           ("moment1", opt.m if opt else {}),
                           ("moment2", opt.v if opt else {})):
        for name, arr in tensors.items():
            blob = _tensor_blob(arr)
            index.append({"group": group, "name": name, "nbytes": len(blob)})
            blobs.append(blob)
    header = {
        "version": w.version,
        "seed": w.seed,
        "config": w.config.to_dict(),
        "optimizer": opt.params() if opt else None,
        "tensors": index,
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(w: Weights, opt: Optional[OptimizerState], path, extra: Optional[dict] = None) -> None:
    data = checkpoint_bytes(w, opt, extra)
    tmp = Path(str(path) + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``: ``(weights, optimizer_state)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc
    return parse_checkpoint(data, path)


def parse_checkpoint(data: bytes, path="<bytes>"):
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a finprint checkpoint (bad magic)", path)
    buf = io.BytesIO(data)
    buf.seek(len(CHECKPOINT_MAGIC))
    raw_len = buf.read(8)
    if len(raw_len) != 8:
        raise CheckpointError("corrupt checkpoint: truncated header", path)
    (hlen,) = struct.unpack("<Q", raw_len)
    head = buf.read(hlen)
    if len(head) != hlen:
        raise CheckpointError("corrupt checkpoint: truncated header", path)
    try:
        header = json.loads(head)
    except ValueError:
        raise CheckpointError("corrupt checkpoint: unreadable header", path) from None
    if header.get("version") != WEIGHTS_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')!r} is not supported (expected {WEIGHTS_VERSION!r})", path
        )
    groups = {"weights": {}, "moment1": {}, "moment2": {}}
    for item in header["tensors"]:
        blob = buf.read(item["nbytes"])
        if len(blob) != item["nbytes"]:
            raise CheckpointError(f"corrupt checkpoint: tensor {item['name']} is truncated", path)
        try:
            groups[item["group"]][item["name"]] = decode_tensor(blob, path)
        except FormatError as exc:
            raise CheckpointError(f"corrupt checkpoint: tensor {item['name']}: {exc}", path) from None
    if buf.read(1):
        raise CheckpointError("corrupt checkpoint: trailing bytes", path)
    config = EncoderConfig.from_dict(header["config"])
    expected = param_shapes(config)
    got = {k: v.shape for k, v in groups["weights"].items()}
    if got != expected:
        raise CheckpointError("checkpoint tensors do not match its encoder config", path)
    w = Weights(config, {k: groups["weights"][k] for k in expected}, header.get("seed"), header["version"])
    opt = None
    if header.get("optimizer"):
        opt = OptimizerState(**header["optimizer"], m=groups["moment1"], v=groups["moment2"])
    return w, opt


def read_checkpoint_extra(path) -> dict:
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", data, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    return json.loads(data[start:start + hlen]).get("extra", {})

