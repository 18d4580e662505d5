"""Shared transformer building blocks on top of the tensor kernel.

Both the policy backbone and the vision expert are built from the same
pre-norm block: masked multi-head attention followed by a GELU MLP, each
with a residual connection. Parameters live in a named store; a view
object wraps them as tape leaves once per forward pass.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named parameter arrays in creation order (the checkpoint order)."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.arrays: dict[str, np.ndarray] = {}

    def create(self, rng: np.random.Generator, name: str, shape, init: str) -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        if init == "lecun":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        elif init == "embed":
            # Large enough that layer norm of an embedding-only token is
            # well-conditioned (zero-initialized action slots see only these).
            arr = rng.normal(0.0, 0.1, size=shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.arrays[name] = np.ascontiguousarray(arr, dtype=self.dtype)

    def view(self, tape: T.Tape | None) -> "ParamView":
        return ParamView(self, tape)

    def names(self) -> list[str]:
        return list(self.arrays)


class ParamView:
    """Per-forward cache wrapping parameters as (registered) tape leaves."""

    def __init__(self, store: ParamStore, tape: T.Tape | None):
        self._store = store
        self._tape = tape
        self._cache: dict[str, Tensor] = {}

    def __call__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            arr = self._store.arrays[name]
            t = self._tape.parameter(name, arr) if self._tape else Tensor(arr)
            self._cache[name] = t
        return t


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = T.matmul(x, w)
    return out if b is None else T.add(out, b)


def mlp(x: Tensor, pv: ParamView, prefix: str) -> Tensor:
    h = T.gelu(linear(x, pv(prefix + ".w1"), pv(prefix + ".b1")))
    return linear(h, pv(prefix + ".w2"), pv(prefix + ".b2"))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    x = T.reshape(x, (b, t, heads, d // heads))
    return T.transpose(x, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, h * hd))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray,
    heads: int,
    record: bool = False,
):
    """Masked scaled dot-product attention over (B, T, d) tensors.

    Returns the merged context (B, Tq, d) and, when recording, the
    attention weights as a detached (B, heads, Tq, Tk) array.
    """
    head_dim = q.shape[-1] // heads
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    attn = T.masked_softmax(scores, mask)
    ctx = merge_heads(T.matmul(attn, vh))
    return ctx, (attn.data if record else None)


def attention_block(
    pv: ParamView,
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    heads: int,
    record: bool = False,
):
    """One pre-norm transformer block; returns (new state, attention or None)."""
    h = T.layer_norm(x, pv(prefix + ".ln1.g"))
    q = T.matmul(h, pv(prefix + ".attn.wq"))
    k = T.matmul(h, pv(prefix + ".attn.wk"))
    v = T.matmul(h, pv(prefix + ".attn.wv"))
    ctx, attn = multi_head_attention(q, k, v, mask, heads, record)
    x = T.add(x, T.matmul(ctx, pv(prefix + ".attn.wo")))
    h2 = T.layer_norm(x, pv(prefix + ".ln2.g"))
    x = T.add(x, mlp(h2, pv, prefix + ".mlp"))
    return x, attn


def create_block_params(
    store: ParamStore, rng: np.random.Generator, prefix: str, dim: int, mlp_ratio: int
) -> None:
    hidden = dim * mlp_ratio
    store.create(rng, prefix + ".ln1.g", (dim,), "ones")
    for w in ("wq", "wk", "wv", "wo"):
        store.create(rng, f"{prefix}.attn.{w}", (dim, dim), "lecun")
    store.create(rng, prefix + ".ln2.g", (dim,), "ones")
    store.create(rng, prefix + ".mlp.w1", (dim, hidden), "lecun")
    store.create(rng, prefix + ".mlp.b1", (hidden,), "zeros")
    store.create(rng, prefix + ".mlp.w2", (hidden, dim), "lecun")
    store.create(rng, prefix + ".mlp.b2", (dim,), "zeros")


def sincos_grid(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos position table, (rows*cols, dim), row-major."""
    if dim % 4 != 0:
        raise ValueError("sincos_grid needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    r = np.arange(rows)[:, None] * omega[None, :]
    c = np.arange(cols)[:, None] * omega[None, :]
    row_emb = np.concatenate([np.sin(r), np.cos(r)], axis=1)
    col_emb = np.concatenate([np.sin(c), np.cos(c)], axis=1)
    grid = np.concatenate(
        [
            np.repeat(row_emb, cols, axis=0),
            np.tile(col_emb, (rows, 1)),
        ],
        axis=1,
    )
    return grid


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) float images -> (B, grid*grid, patch*patch*3) rows."""
    b, h, w, ch = images.shape
    if h % patch or w % patch:
        raise T.ContractViolation(f"resolution {h}x{w} not divisible by patch {patch}")
    gr, gc = h // patch, w // patch
    x = images.reshape(b, gr, patch, gc, patch, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, gr * gc, patch * patch * ch))
