"""Transformer building blocks over the autograd tensors.

Parameters live in a flat ``dict[str, Tensor]``; each block function takes
the dict plus a name prefix, so sharing a sub-block between two call sites is
just passing the same prefix twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class BlockConfig:
    d: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    dropout_rate: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d <= 0 or self.num_heads <= 0 or self.ffn_dim <= 0:
            raise ValueError("BlockConfig: d, num_heads and ffn_dim must be positive")
        if self.d % self.num_heads:
            raise ValueError(f"BlockConfig: d={self.d} not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("BlockConfig: dropout_rate must lie in [0, 1)")


# ------------------------------------------------------------------ init helpers


def _param(params: Params, name: str, value: np.ndarray) -> None:
    if name in params:
        raise KeyError(f"duplicate parameter name {name!r}")
    params[name] = Tensor(value, requires_grad=True)


def init_linear(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.02):
    _param(params, f"{name}.w", rng.normal(0.0, std, size=(n_in, n_out)))
    _param(params, f"{name}.b", np.zeros(n_out))


def init_layer_norm(params: Params, name: str, d: int) -> None:
    _param(params, f"{name}.g", np.ones(d))
    _param(params, f"{name}.b", np.zeros(d))


def init_attention(params: Params, name: str, d: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", d, d, rng)


def init_ffn(params: Params, name: str, d: int, ffn_dim: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", d, ffn_dim, rng)
    init_linear(params, f"{name}.fc2", ffn_dim, d, rng)


def init_encoder_layer(params: Params, name: str, cfg: BlockConfig, rng: np.random.Generator, cross: bool = False):
    init_layer_norm(params, f"{name}.ln_self", cfg.d)
    init_attention(params, f"{name}.self", cfg.d, rng)
    if cross:
        init_layer_norm(params, f"{name}.ln_cross", cfg.d)
        init_attention(params, f"{name}.cross", cfg.d, rng)
    init_layer_norm(params, f"{name}.ln_ffn", cfg.d)
    init_ffn(params, f"{name}.ffn", cfg.d, cfg.ffn_dim, rng)


# ------------------------------------------------------------------ layers


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    """x (..., n_in) -> (..., n_out)."""
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    lead = x.shape[:-1]
    flat = ag.reshape(x, (-1, x.shape[-1]))
    y = ag.matmul(flat, w)
    y = ag.add(y, ag.expand(ag.reshape(b, (1, -1)), y.shape))
    return ag.reshape(y, lead + (w.shape[1],))


def layer_norm(x: Tensor, params: Params, name: str, eps: float = 1e-5) -> Tensor:
    y = ag.layer_norm(x, axis=-1, eps=eps)
    shape = (1,) * (x.ndim - 1) + (x.shape[-1],)
    g = ag.expand(ag.reshape(params[f"{name}.g"], shape), x.shape)
    b = ag.expand(ag.reshape(params[f"{name}.b"], shape), x.shape)
    return ag.add(ag.mul(y, g), b)


def _split_heads(x: Tensor, h: int) -> Tensor:
    bsz, n, d = x.shape
    return ag.transpose(ag.reshape(x, (bsz, n, h, d // h)), (0, 2, 1, 3))


def attention_weights(q: Tensor, k: Tensor, key_mask: np.ndarray | None) -> Tensor:
    """Softmax(q kᵀ / sqrt(dh)) with masked keys at -inf; q (B,H,Lq,dh), k (B,H,Lk,dh)."""
    dh = q.shape[-1]
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        blocked = np.broadcast_to(~key_mask[:, None, None, :], scores.shape)
        scores = ag.masked_fill(scores, blocked, -np.inf)
    return ag.softmax(scores, axis=-1)


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    key_mask: np.ndarray | None,
    params: Params,
    name: str,
    num_heads: int,
) -> Tensor:
    """Scaled dot-product attention over heads.

    queries (B, Lq, d), keys_values (B, Lk, d). ``key_mask`` is a boolean
    (B, Lk) array, true where a key may be attended to.
    """
    if queries.ndim != 3 or keys_values.ndim != 3:
        raise ag.ShapeError(f"attention: expected rank-3 inputs, got {queries.shape} and {keys_values.shape}")
    if queries.shape[-1] != keys_values.shape[-1] or queries.shape[0] != keys_values.shape[0]:
        raise ag.ShapeError(f"attention: dim mismatch queries {queries.shape} vs keys_values {keys_values.shape}")
    if key_mask is not None and key_mask.shape != keys_values.shape[:2]:
        raise ag.ShapeError(f"attention: key mask {key_mask.shape} does not match keys {keys_values.shape[:2]}")
    bsz, lq, d = queries.shape
    q = _split_heads(linear(queries, params, f"{name}.q"), num_heads)
    k = _split_heads(linear(keys_values, params, f"{name}.k"), num_heads)
    v = _split_heads(linear(keys_values, params, f"{name}.v"), num_heads)
    att = attention_weights(q, k, key_mask)
    ctx = ag.matmul(att, v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (bsz, lq, d))
    return linear(ctx, params, f"{name}.o")


def ffn(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(ag.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ag.mul(x, Tensor(keep))


def encoder_layer(
    x: Tensor,
    self_mask: np.ndarray | None,
    params: Params,
    name: str,
    cfg: BlockConfig,
    cross_input: Tensor | None = None,
    cross_mask: np.ndarray | None = None,
    cross_name: str | None = None,
    ffn_name: str | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm layer: self-attn, optional cross-attn, FFN, each with a residual.

    ``cross_name``/``ffn_name`` override where the cross-attention and FFN
    weights are looked up, which is how per-view duplicates are selected.
    """
    h = layer_norm(x, params, f"{name}.ln_self", cfg.ln_eps)
    x = ag.add(x, dropout(multi_head_attention(h, h, self_mask, params, f"{name}.self", cfg.num_heads), cfg.dropout_rate, rng))
    if cross_input is not None:
        cross_name = cross_name or f"{name}.cross"
        if f"{cross_name}.q.w" not in params:
            raise KeyError(f"encoder_layer: layer {name!r} has no cross-attention weights ({cross_name})")
        h = layer_norm(x, params, f"{name}.ln_cross", cfg.ln_eps)
        att = multi_head_attention(h, cross_input, cross_mask, params, cross_name, cfg.num_heads)
        x = ag.add(x, dropout(att, cfg.dropout_rate, rng))
    h = layer_norm(x, params, f"{name}.ln_ffn", cfg.ln_eps)
    return ag.add(x, dropout(ffn(h, params, ffn_name or f"{name}.ffn"), cfg.dropout_rate, rng))


# ------------------------------------------------------------------ embeddings


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C) in row-major patch order."""
    if images.ndim == 3:
        images = images[None]
    bsz, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"patch_embed: image {h}x{w} not divisible by patch size {p} (H={h}, W={w}, P={p})")
    x = images.reshape(bsz, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(bsz, (h // p) * (w // p), p * p * c)


def patch_embed(images: np.ndarray, patch_size: int, params: Params, name: str) -> Tensor:
    """Linear patch projection, learned positions, prepended [CLS]: (B, N+1, d)."""
    patches = patchify(np.asarray(images), patch_size)
    bsz, n, _ = patches.shape
    emb = linear(Tensor(patches), params, f"{name}.proj")
    d = emb.shape[-1]
    pos = params[f"{name}.pos"]
    if pos.shape[0] != n + 1:
        raise ag.ShapeError(f"patch_embed: {n} patches but position table holds {pos.shape[0] - 1}")
    cls = ag.expand(ag.reshape(params[f"{name}.cls"], (1, 1, d)), (bsz, 1, d))
    seq = ag.concat([cls, emb], axis=1)
    return ag.add(seq, ag.expand(ag.reshape(pos, (1, n + 1, d)), (bsz, n + 1, d)))


def text_embed(token_ids: np.ndarray, params: Params, name: str) -> Tensor:
    """Token embedding plus learned absolute position embedding: (B, L, d)."""
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None]
    table = params[f"{name}.tok"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"text_embed: token id out of range [0, {table.shape[0]})")
    pos = params[f"{name}.pos"]
    bsz, n = ids.shape
    if n > pos.shape[0]:
        raise ValueError(f"text_embed: length {n} exceeds maximum {pos.shape[0]}")
    d = table.shape[1]
    tok = ag.embedding_gather(table, ids)
    p = ag.slice_axis(pos, 0, n, axis=0)
    return ag.add(tok, ag.expand(ag.reshape(p, (1, n, d)), (bsz, n, d)))


def interpolate_pos_embed(grid: np.ndarray, new_g: int) -> np.ndarray:
    """Bilinear resize of a (g*g, d) or (g, g, d) patch-position table to new_g x new_g.

    Corner-aligned sampling, so the four corner cells are kept exactly and
    g == new_g returns the input unchanged.
    """
    grid = np.asarray(grid)
    if grid.ndim == 2:
        g = int(round(np.sqrt(grid.shape[0])))
        if g * g != grid.shape[0]:
            raise ValueError(f"interpolate_pos_embed: {grid.shape[0]} positions is not a square grid")
        grid = grid.reshape(g, g, -1)
        flat = True
    else:
        if grid.shape[0] != grid.shape[1]:
            raise ValueError(f"interpolate_pos_embed: grid {grid.shape[:2]} is not square")
        g = grid.shape[0]
        flat = False
    if new_g == g:
        out = grid.copy()
    else:
        coords = np.linspace(0.0, g - 1, new_g) if new_g > 1 else np.zeros(1)
        lo = np.clip(np.floor(coords).astype(int), 0, g - 1)
        hi = np.minimum(lo + 1, g - 1)
        frac = (coords - lo).astype(np.float64)
        rows = grid[lo] * (1 - frac)[:, None, None] + grid[hi] * frac[:, None, None]
        out = rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
        out = out.astype(grid.dtype)
    return out.reshape(new_g * new_g, -1) if flat else out
