"""Neural building blocks: convolution, pooling, softmax, parameters, SGD.

Convolution is implemented once for batched rank-4 inputs as one GEMM per
kernel offset (kh*kw small contractions over strided slices), and the
rank-3 entry point wraps it.  The input gradient folds back through the
same offset loop, so nothing window-shaped is ever materialized.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import fileio
from .autodiff import ShapeError, Tensor, emit, reshape

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1
ALIAS_MAGIC = b"ALIAS"


class Conv2d:
    """A 2-d convolution layer: weight (out, in, kh, kw), bias (out,)."""

    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        if len(weight.shape) != 4:
            raise ShapeError(f"conv weight must be rank-4, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv bias {bias.shape} incompatible with weight {weight.shape}")
        if stride < 1:
            raise ValueError(f"conv stride must be >= 1, got {stride}")
        if padding < 0:
            raise ValueError(f"conv padding must be >= 0, got {padding}")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d_batch(x: Tensor, weight: Tensor, bias: Optional[Tensor],
                 stride: int, padding: int) -> Tensor:
    """Cross-correlate a batch (B, C, H, W) with kernels (O, C, kh, kw)."""
    b, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {in_ch}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: degenerate output {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    wd = weight.data
    # One GEMM per kernel offset keeps the working set at one (B,C,OH,OW)
    # slice instead of materializing the full window tensor.
    out = np.zeros((b, out_ch, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xv = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out += np.einsum("oc,bcyx->boyx", wd[:, :, i, j], xv, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g):
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xv = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                dw[:, :, i, j] = np.einsum("boyx,bcyx->oc", g, xv, optimize=True)
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    np.einsum("boyx,oc->bcyx", g, wd[:, :, i, j], optimize=True)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit(out, inputs, bwd)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    """Apply a Conv2d layer to one (C, H, W) image."""
    if len(x.shape) != 3:
        raise ShapeError(f"conv2d_forward: expected rank-3 input, got {x.shape}")
    batched = reshape(x, (1,) + x.shape)
    out = conv2d_batch(batched, layer.weight, layer.bias, layer.stride, layer.padding)
    return reshape(out, out.shape[1:])


def global_avg_pool(x: Tensor) -> Tensor:
    """Average a (C, H, W) map over its spatial extent."""
    if len(x.shape) != 3:
        raise ShapeError(f"global_avg_pool: expected rank-3 input, got {x.shape}")
    c, h, w = x.shape
    inv = 1.0 / (h * w)
    out = x.data.mean(axis=(1, 2))

    def bwd(g):
        return (np.broadcast_to(g[:, None, None] * inv, (c, h, w)),)

    return emit(out, (x,), bwd)


def global_avg_pool_batch(x: Tensor) -> Tensor:
    """Average (B, C, H, W) maps over their spatial extents -> (B, C)."""
    if len(x.shape) != 4:
        raise ShapeError(f"global_avg_pool_batch: expected rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    inv = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (b, c, h, w)),)

    return emit(out, (x,), bwd)


def softmax(logits: Tensor) -> Tensor:
    """Probability vector over a rank-1 logit tensor (max-subtracted)."""
    if len(logits.shape) != 1:
        raise ShapeError(f"softmax: expected rank-1 logits, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("softmax: non-finite logits")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    p = e / e.sum()

    def bwd(g):
        return ((g - np.dot(g, p)) * p,)

    return emit(p, (logits,), bwd)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors with explicit aliasing for shared stages.

    Canonical entries hold the storage; aliases map alternative names to
    a canonical entry, so both paths of a shared stage read and update
    one tensor.
    """

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.sharing: dict[str, str] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.entries or name in self.sharing:
            raise ValueError(f"parameter '{name}' already registered")
        t.requires_grad = True
        self.entries[name] = t
        return t

    def alias(self, alias: str, canonical: str) -> None:
        if alias in self.entries or alias in self.sharing:
            raise ValueError(f"parameter '{alias}' already registered")
        if canonical not in self.entries:
            raise KeyError(f"alias target '{canonical}' is not a canonical parameter")
        self.sharing[alias] = canonical

    def resolve(self, name: str) -> str:
        return self.sharing.get(name, name)

    def get(self, name: str) -> Tensor:
        canonical = self.resolve(name)
        if canonical not in self.entries:
            raise KeyError(f"unknown parameter '{name}'")
        return self.entries[canonical]

    def __contains__(self, name: str) -> bool:
        return name in self.entries or name in self.sharing

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.entries.items())

    def names(self) -> list[str]:
        return list(self.entries)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.entries.values())

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.grad = None


class Sgd:
    """Stochastic gradient descent with classical momentum.

    step: v <- momentum * v + grad; p <- p - lr * v.  Aliased parameters
    are canonical entries, so each shared tensor is updated exactly once
    with its accumulated gradient.
    """

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        for name, p in store.items():
            if p.grad is None:
                raise ValueError(f"sgd step: parameter '{name}' has no gradient")
        for name, p in store.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + p.grad
            self.velocity[name] = v
            p.data = p.data - self.learning_rate * v


def init_params(store: ParamStore, seed: int) -> None:
    """Xavier-uniform weights, zero biases, deterministic in the seed.

    Rank >= 2 entries are treated as weights with
    b = sqrt(6 / (fan_in + fan_out)); rank-0/1 entries are zeroed.
    """
    rng = np.random.default_rng(seed)
    for name, p in store.items():
        if len(p.shape) >= 2:
            fan_in, fan_out = _fans(p.shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, size=p.shape)
            p.data = values.astype(p.data.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=p.data.dtype)
        p.grad = None


def _fans(shape: tuple) -> tuple[int, int]:
    receptive = 1
    for dim in shape[2:]:
        receptive *= dim
    return shape[1] * receptive, shape[0] * receptive


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, store: ParamStore, optimizer: Optional[Sgd] = None) -> None:
    """Write parameters, the sharing map, and optimizer state.

    Momentum velocities are stored as extra entries under
    ``optim.velocity.<name>``; the learning rate and momentum as rank-0
    entries ``optim.lr`` and ``optim.momentum``.
    """
    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in store.items()]
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            entries.append((f"optim.velocity.{name}", v))
        entries.append(("optim.lr", np.asarray(optimizer.learning_rate, dtype=np.float32)))
        entries.append(("optim.momentum", np.asarray(optimizer.momentum, dtype=np.float32)))
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fileio.write_u8(fp, CHECKPOINT_VERSION)
        fileio.write_u32(fp, len(entries))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fileio.write_u16(fp, len(raw))
            fp.write(raw)
            fileio.write_tensor_block(fp, arr)
        fp.write(ALIAS_MAGIC)
        fileio.write_u32(fp, len(store.sharing))
        for alias, canonical in store.sharing.items():
            for text in (alias, canonical):
                raw = text.encode("utf-8")
                fileio.write_u16(fp, len(raw))
                fp.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read back raw entries and the alias map."""
    with open(path, "rb") as fp:
        fileio.expect_magic(fp, CHECKPOINT_MAGIC, "checkpoint")
        version = fileio.read_u8(fp, "checkpoint version")
        if version != CHECKPOINT_VERSION:
            raise fileio.BadVersionError(f"unknown checkpoint version {version}")
        count = fileio.read_u32(fp, "entry count")
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = fileio.read_u16(fp, "entry name length")
            name = fileio.read_exact(fp, name_len, "entry name").decode("utf-8")
            entries[name] = fileio.read_tensor_block(fp)
        fileio.expect_magic(fp, ALIAS_MAGIC, "alias section")
        pair_count = fileio.read_u32(fp, "alias count")
        sharing: dict[str, str] = {}
        for _ in range(pair_count):
            alias_len = fileio.read_u16(fp, "alias name length")
            alias = fileio.read_exact(fp, alias_len, "alias name").decode("utf-8")
            canon_len = fileio.read_u16(fp, "canonical name length")
            canonical = fileio.read_exact(fp, canon_len, "canonical name").decode("utf-8")
            sharing[alias] = canonical
    return entries, sharing


def restore_params(store: ParamStore, entries: dict[str, np.ndarray],
                   sharing: dict[str, str],
                   optimizer: Optional[Sgd] = None) -> None:
    """Load checkpoint entries into an already-built store.

    Every parameter the store declares must be present; the alias map
    must match the built sharing scheme.
    """
    for name, p in store.items():
        if name not in entries:
            raise fileio.MissingTensorError(f"checkpoint is missing tensor '{name}'")
        arr = entries[name]
        if arr.shape != p.shape:
            raise fileio.FileFormatError(
                f"checkpoint tensor '{name}' has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(p.data.dtype)
        p.grad = None
    if sharing != store.sharing:
        raise fileio.FileFormatError("checkpoint alias map does not match the built model")
    if optimizer is not None:
        for name, p in store.items():
            key = f"optim.velocity.{name}"
            if key in entries:
                optimizer.velocity[name] = entries[key].astype(p.data.dtype)
