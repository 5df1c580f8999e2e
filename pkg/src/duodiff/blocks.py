"""Minimal neural building blocks on float64 torch tensors.

Linear maps, layer normalization, a gated feed-forward unit, masked
scaled-dot-product attention with a multi-head wrapper, windowed locality
masks, and deterministic parameter initialization. Gradients come from
autograd; correctness of every block is pinned by finite-difference checks in
the test suite.

Parameters live in a ParamSet: an insertion-ordered mapping of unique names to
float64 tensors. Forward passes are pure functions of (inputs, ParamSet);
only the optimizer mutates parameters, under a single-writer contract.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64


class BlockError(ValueError):
    """Shape mismatch or invalid block construction."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    arr = np.asarray(x)
    if isinstance(arr, np.ndarray) and not arr.flags.writeable:
        arr = arr.copy()  # torch cannot wrap read-only buffers
    return torch.as_tensor(arr, dtype=DTYPE)


@dataclass
class ParamSet:
    """Named float64 tensors with deterministic iteration order."""

    tensors: dict[str, torch.Tensor]

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise BlockError(f"parameter '{name}' contains non-finite values")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def size(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self, requires_grad: bool | None = None) -> "ParamSet":
        out = {}
        for name, t in self.tensors.items():
            c = t.detach().clone()
            c.requires_grad_(t.requires_grad if requires_grad is None else requires_grad)
            out[name] = c
        return ParamSet(out)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.detach().numpy().copy() for name, t in self.tensors.items()}

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ParamSet":
        tensors = {}
        for name, a in arrays.items():
            t = torch.as_tensor(np.asarray(a, dtype=np.float64)).clone()
            t.requires_grad_(requires_grad)
            tensors[name] = t
        return ParamSet(tensors)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


# spec entry: (name, shape, kind); kind is "weight" | "bias" | "gain"
# or ("normal", std) for embeddings.
ParamSpec = list[tuple[str, tuple[int, ...], object]]


def init_params(spec: ParamSpec, seed: int) -> ParamSet:
    """Deterministically initialize parameters from a shape spec.

    Weights are normal with std 1/sqrt(fan_in) (fan_in = first axis), biases
    zero, layer-norm gains one. All draws come from one numpy generator so
    the result is bit-identical for a given seed.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape, kind in spec:
        if name in tensors:
            raise BlockError(f"duplicate parameter name '{name}'")
        if kind == "weight":
            fan_in = shape[0]
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        elif kind == "bias":
            arr = np.zeros(shape)
        elif kind == "gain":
            arr = np.ones(shape)
        elif isinstance(kind, tuple) and kind[0] == "normal":
            arr = rng.standard_normal(shape) * float(kind[1])
        else:
            raise BlockError(f"unknown init kind {kind!r} for '{name}'")
        t = torch.as_tensor(arr, dtype=DTYPE).clone()
        t.requires_grad_(True)
        tensors[name] = t
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# elementary layers

def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != w.shape[0]:
        raise BlockError(f"linear: input width {x.shape[-1]} != weight fan-in {w.shape[0]}")
    return x @ w + b


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize the last axis to mean 0, variance 1, then scale and shift."""
    if x.shape[-1] != gain.shape[-1]:
        raise BlockError("layer_norm: gain width mismatch")
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def ffn(x: torch.Tensor, params: ParamSet, prefix: str) -> torch.Tensor:
    """Gated feed-forward: silu(x Wg) * (x Wu) projected back down."""
    gate = torch.nn.functional.silu(linear(x, params[f"{prefix}.wg"], params[f"{prefix}.bg"]))
    up = linear(x, params[f"{prefix}.wu"], params[f"{prefix}.bu"])
    return linear(gate * up, params[f"{prefix}.wd"], params[f"{prefix}.bd"])


def ffn_param_spec(prefix: str, width: int, hidden: int) -> ParamSpec:
    return [
        (f"{prefix}.wg", (width, hidden), "weight"),
        (f"{prefix}.bg", (hidden,), "bias"),
        (f"{prefix}.wu", (width, hidden), "weight"),
        (f"{prefix}.bu", (hidden,), "bias"),
        (f"{prefix}.wd", (hidden, width), "weight"),
        (f"{prefix}.bd", (width,), "bias"),
    ]


# ---------------------------------------------------------------------------
# attention

@dataclass(frozen=True)
class AttentionMask:
    """Boolean (query_len, key_len) matrix; True marks an attendable key.
    Every query row must keep at least one key."""

    values: torch.Tensor

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.dtype != torch.bool:
            raise BlockError("mask must be a 2-D bool tensor")
        if not v.any(dim=1).all():
            raise BlockError("mask has a fully-masked query row")
        object.__setattr__(self, "_all_true", bool(v.all()))

    @property
    def shape(self):
        return tuple(self.values.shape)

    @property
    def is_full(self) -> bool:
        return self._all_true


@functools.lru_cache(maxsize=64)
def full_mask(query_len: int, key_len: int) -> AttentionMask:
    return AttentionMask(torch.ones(query_len, key_len, dtype=torch.bool))


@functools.lru_cache(maxsize=64)
def local_mask(seq_len: int, window: int) -> AttentionMask:
    """Band mask: query i sees keys j with |i - j| <= window."""
    if window < 1:
        raise BlockError(f"window must be >= 1, got {window}")
    idx = torch.arange(seq_len)
    return AttentionMask((idx[:, None] - idx[None, :]).abs() <= window)


def block_diagonal_mask(lengths) -> AttentionMask:
    """Each contiguous segment attends only within itself."""
    return _block_diagonal_mask(tuple(lengths))


@functools.lru_cache(maxsize=64)
def _block_diagonal_mask(lengths: tuple[int, ...]) -> AttentionMask:
    total = sum(lengths)
    m = torch.zeros(total, total, dtype=torch.bool)
    start = 0
    for n in lengths:
        m[start : start + n, start : start + n] = True
        start += n
    return AttentionMask(m)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: AttentionMask) -> torch.Tensor:
    """Masked scaled-dot-product attention over the last two axes.

    q: (..., Tq, dh), k: (..., Tk, dh), v: (..., Tk, dv). Logits are scaled
    by 1/sqrt(dh); masked keys get -inf before the softmax.
    """
    if q.shape[-1] != k.shape[-1]:
        raise BlockError("attention: query/key head dims differ")
    if k.shape[-2] != v.shape[-2]:
        raise BlockError("attention: key/value lengths differ")
    if mask.shape != (q.shape[-2], k.shape[-2]):
        raise BlockError(f"attention: mask {mask.shape} does not match (Tq, Tk)")
    d = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if not mask.is_full:
        logits = logits.masked_fill(~mask.values, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


def mha(
    x_q: torch.Tensor,
    x_kv: torch.Tensor,
    params: ParamSet,
    prefix: str,
    heads: int,
    mask: AttentionMask,
) -> torch.Tensor:
    """Multi-head attention with learned q/k/v/output projections.

    x_q, x_kv: (..., T, width); width must divide evenly into heads.
    """
    width = x_q.shape[-1]
    if width % heads != 0:
        raise BlockError(f"width {width} not divisible by {heads} heads")
    dh = width // heads

    def split_heads(x):
        x = x.reshape(*x.shape[:-1], heads, dh)
        return x.movedim(-2, -3)  # (..., heads, T, dh)

    q = split_heads(linear(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = split_heads(linear(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    v = split_heads(linear(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    out = attention(q, k, v, mask)
    out = out.movedim(-3, -2).reshape(*x_q.shape[:-1], width)
    return linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def mha_param_spec(prefix: str, width: int) -> ParamSpec:
    spec: ParamSpec = []
    for part in ("wq", "wk", "wv", "wo"):
        spec.append((f"{prefix}.{part}", (width, width), "weight"))
    for part in ("bq", "bk", "bv", "bo"):
        spec.append((f"{prefix}.{part}", (width,), "bias"))
    return spec


# ---------------------------------------------------------------------------
# transformer encoder block (pre-norm residual)

def encoder_block_param_spec(prefix: str, width: int, ffn_hidden: int) -> ParamSpec:
    spec: ParamSpec = [
        (f"{prefix}.ln1.g", (width,), "gain"),
        (f"{prefix}.ln1.b", (width,), "bias"),
    ]
    spec += mha_param_spec(f"{prefix}.attn", width)
    spec += [
        (f"{prefix}.ln2.g", (width,), "gain"),
        (f"{prefix}.ln2.b", (width,), "bias"),
    ]
    spec += ffn_param_spec(f"{prefix}.ffn", width, ffn_hidden)
    return spec


def encoder_block(
    h: torch.Tensor, params: ParamSet, prefix: str, heads: int, mask: AttentionMask
) -> torch.Tensor:
    a = layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = h + mha(a, a, params, f"{prefix}.attn", heads, mask)
    f = layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return h + ffn(f, params, f"{prefix}.ffn")


@functools.lru_cache(maxsize=64)
def sinusoidal_time_encoding(frames: int, width: int) -> torch.Tensor:
    """Classic sin/cos positional table over the time axis, shape (frames, width)."""
    pos = torch.arange(frames, dtype=DTYPE)[:, None]
    i = torch.arange(0, width, 2, dtype=DTYPE)[None, :]
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), i / width)
    enc = torch.zeros(frames, width, dtype=DTYPE)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles[:, : width // 2])
    return enc
