"""The cross-view model: image encoder, text encoder, shared fusion stack and heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autograd as ag
from . import blocks
from .autograd import Tensor

VIEW_KINDS = ("cross_modal", "cross_lingual")

# Full-scale reference presets; desk runs use CclmConfig() defaults.
FULL_SCALE_PRESETS = {
    "base": dict(img_layers=12, txt_layers=12, fusion_layers=6, d=768, num_heads=12, ffn_dim=3072,
                 image_size=224, patch_size=32, reported_params="~420M"),
    "large": dict(img_layers=24, txt_layers=24, fusion_layers=6, d=1024, num_heads=16, ffn_dim=4096,
                  image_size=224, patch_size=32, reported_params="~970M"),
}


@dataclass(frozen=True)
class CclmConfig:
    img_layers: int = 3
    txt_layers: int = 3
    fusion_layers: int = 2
    d: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    proj_dim: int = 32
    vocab_size: int = 89
    patch_size: int = 8
    image_size: int = 32
    channels: int = 3
    max_text_len: int = 32
    pool_mode: str = "cls"
    share_cross_attn: bool = True
    share_ffn: bool = True
    temperature_init: float = 0.07
    min_temperature: float = 0.001
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("img_layers", "txt_layers", "d", "num_heads", "ffn_dim", "proj_dim", "vocab_size",
                     "patch_size", "image_size", "channels", "max_text_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CclmConfig.{name} must be positive")
        if self.fusion_layers < 1:
            raise ValueError("CclmConfig.fusion_layers must be >= 1")
        if self.proj_dim > self.d:
            raise ValueError(f"CclmConfig.proj_dim={self.proj_dim} exceeds d={self.d}")
        if self.image_size % self.patch_size:
            raise ValueError(f"CclmConfig.image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.pool_mode not in ("cls", "mean"):
            raise ValueError(f"CclmConfig.pool_mode must be 'cls' or 'mean', got {self.pool_mode!r}")
        if self.temperature_init <= 0:
            raise ValueError("CclmConfig.temperature_init must be positive")
        blocks.BlockConfig(self.d, self.num_heads, self.ffn_dim, self.dropout_rate)

    @property
    def block(self) -> blocks.BlockConfig:
        return blocks.BlockConfig(self.d, self.num_heads, self.ffn_dim, self.dropout_rate)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CclmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ViewFeatures:
    """Encoder output for one view.

    ``states`` is the full output sequence including the [CLS] slot at index
    0; ``pad_mask`` is true at real (non-padding) positions.
    """

    pooled: Tensor
    states: Tensor
    pad_mask: np.ndarray

    @property
    def tokens(self) -> Tensor:
        """Outputs after the [CLS] slot (v_1..v_N or w_1..w_N)."""
        return ag.slice_axis(self.states, 1, self.states.shape[1], axis=1)

    def take(self, rows: np.ndarray) -> "ViewFeatures":
        """Select batch rows (differentiably)."""
        rows = np.asarray(rows)
        return ViewFeatures(
            ag.embedding_gather(self.pooled, rows),
            ag.embedding_gather(self.states, rows),
            self.pad_mask[rows],
        )


def fusion_cross_name(layer: int, view_kind: str, shared: bool) -> str:
    base = f"fusion.layer{layer}.cross"
    return base if shared else f"{base}.{view_kind}"


def fusion_ffn_name(layer: int, view_kind: str, shared: bool) -> str:
    base = f"fusion.layer{layer}.ffn"
    return base if shared else f"{base}.{view_kind}"


class CclmModel:
    """All parameters plus the forward functions that use them.

    ``params`` maps stable string names to leaf tensors; the text token
    table ``txt.embed.tok`` doubles as the MLM output table.
    """

    def __init__(self, config: CclmConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    # -------------------------------------------------------------- construction

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        bc = c.block
        p: dict[str, Tensor] = {}
        std = 0.02
        blocks.init_linear(p, "img.embed.proj", c.patch_size**2 * c.channels, c.d, rng)
        blocks._param(p, "img.embed.cls", rng.normal(0, std, size=c.d))
        blocks._param(p, "img.embed.pos", rng.normal(0, std, size=(c.num_patches + 1, c.d)))
        for i in range(c.img_layers):
            blocks.init_encoder_layer(p, f"img.layer{i}", bc, rng)
        blocks.init_layer_norm(p, "img.ln_f", c.d)

        blocks._param(p, "txt.embed.tok", rng.normal(0, std, size=(c.vocab_size, c.d)))
        blocks._param(p, "txt.embed.pos", rng.normal(0, std, size=(c.max_text_len, c.d)))
        for i in range(c.txt_layers):
            blocks.init_encoder_layer(p, f"txt.layer{i}", bc, rng)
        blocks.init_layer_norm(p, "txt.ln_f", c.d)

        for i in range(c.fusion_layers):
            name = f"fusion.layer{i}"
            blocks.init_layer_norm(p, f"{name}.ln_self", c.d)
            blocks.init_attention(p, f"{name}.self", c.d, rng)
            blocks.init_layer_norm(p, f"{name}.ln_cross", c.d)
            for kind in (VIEW_KINDS[:1] if c.share_cross_attn else VIEW_KINDS):
                blocks.init_attention(p, fusion_cross_name(i, kind, c.share_cross_attn), c.d, rng)
            blocks.init_layer_norm(p, f"{name}.ln_ffn", c.d)
            for kind in (VIEW_KINDS[:1] if c.share_ffn else VIEW_KINDS):
                blocks.init_ffn(p, fusion_ffn_name(i, kind, c.share_ffn), c.d, c.ffn_dim, rng)
        blocks.init_layer_norm(p, "fusion.ln_f", c.d)

        blocks.init_linear(p, "head.g_v", c.d, c.proj_dim, rng)
        blocks.init_linear(p, "head.g_w", c.d, c.proj_dim, rng)
        blocks._param(p, "head.v_true", rng.normal(0, std, size=c.d))
        blocks._param(p, "head.log_tau", np.full(1, math.log(c.temperature_init)))
        return p

    @property
    def psi(self) -> Tensor:
        return self.params["txt.embed.tok"]

    # -------------------------------------------------------------- encoders

    def encode_image(self, images: np.ndarray, rng: np.random.Generator | None = None) -> ViewFeatures:
        c = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ValueError(
                f"encode_image: expected images of shape (B, {c.image_size}, {c.image_size}, {c.channels}), "
                f"got {images.shape}"
            )
        x = blocks.patch_embed(images, c.patch_size, self.params, "img.embed")
        for i in range(c.img_layers):
            x = blocks.encoder_layer(x, None, self.params, f"img.layer{i}", c.block, rng=rng)
        x = blocks.layer_norm(x, self.params, "img.ln_f", c.block.ln_eps)
        mask = np.ones(x.shape[:2], dtype=bool)
        if c.pool_mode == "mean":
            pooled = ag.mean(ag.slice_axis(x, 1, x.shape[1], axis=1), axis=1)
        else:
            pooled = ag.reshape(ag.slice_axis(x, 0, 1, axis=1), (x.shape[0], c.d))
        return ViewFeatures(pooled, x, mask)

    def encode_text(self, token_ids: np.ndarray, pad_mask: np.ndarray | None = None,
                    rng: np.random.Generator | None = None) -> ViewFeatures:
        c = self.config
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] > c.max_text_len:
            raise ValueError(f"encode_text: length {ids.shape[1]} exceeds max_text_len {c.max_text_len}")
        if pad_mask is None:
            pad_mask = ids != 0
        pad_mask = np.asarray(pad_mask, dtype=bool).reshape(ids.shape)
        x = blocks.text_embed(ids, self.params, "txt.embed")
        for i in range(c.txt_layers):
            x = blocks.encoder_layer(x, pad_mask, self.params, f"txt.layer{i}", c.block, rng=rng)
        x = blocks.layer_norm(x, self.params, "txt.ln_f", c.block.ln_eps)
        pooled = ag.reshape(ag.slice_axis(x, 0, 1, axis=1), (x.shape[0], c.d))
        return ViewFeatures(pooled, x, pad_mask)

    # -------------------------------------------------------------- fusion and heads

    def fuse(self, text: ViewFeatures, other: ViewFeatures, view_kind: str,
             rng: np.random.Generator | None = None) -> Tensor:
        """Text states attend to the other view; returns (B, L_text, d) = {x_cls, x_1..x_N}."""
        if view_kind not in VIEW_KINDS:
            raise ValueError(f"fuse: unknown view_kind {view_kind!r}")
        c = self.config
        x = text.states
        for i in range(c.fusion_layers):
            x = blocks.encoder_layer(
                x, text.pad_mask, self.params, f"fusion.layer{i}", c.block,
                cross_input=other.states, cross_mask=other.pad_mask,
                cross_name=fusion_cross_name(i, view_kind, c.share_cross_attn),
                ffn_name=fusion_ffn_name(i, view_kind, c.share_ffn),
                rng=rng,
            )
        return blocks.layer_norm(x, self.params, "fusion.ln_f", c.block.ln_eps)

    def project_v(self, pooled: Tensor) -> Tensor:
        return ag.l2_normalize(blocks.linear(pooled, self.params, "head.g_v"), axis=-1)

    def project_w(self, pooled: Tensor) -> Tensor:
        return ag.l2_normalize(blocks.linear(pooled, self.params, "head.g_w"), axis=-1)

    def match_score(self, x_cls: Tensor) -> Tensor:
        """v_trueᵀ x_cls for a (B, d) batch -> (B,)."""
        v = ag.reshape(self.params["head.v_true"], (-1, 1))
        return ag.reshape(ag.matmul(x_cls, v), (x_cls.shape[0],))

    def mlm_logits(self, x: Tensor) -> Tensor:
        """ψ(w)ᵀ x for every vocabulary entry: (n, d) -> (n, V)."""
        return ag.matmul(x, ag.transpose(self.psi))

    def inverse_temperature(self) -> Tensor:
        """1/τ as a (1,) tensor, τ = exp(log_tau)."""
        return ag.exp(ag.scale(self.params["head.log_tau"], -1.0))

    def temperature(self) -> float:
        return float(np.exp(self.params["head.log_tau"].data[0]))

    def clamp_temperature(self) -> None:
        lt = self.params["head.log_tau"]
        floor = math.log(self.config.min_temperature)
        if lt.data[0] < floor:
            lt.data[0] = floor

    # -------------------------------------------------------------- bookkeeping

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for k, t in self.params.items():
            v = np.asarray(state[k])
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for parameter {k!r}: checkpoint {v.shape} vs model {t.shape}")
            t.data = v.astype(t.data.dtype, copy=True)

    def astype(self, dtype) -> "CclmModel":
        """A copy whose parameters are stored in ``dtype``."""
        with ag.precision(dtype):
            params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return CclmModel(self.config, params=params)

    def resize_image(self, image_size: int) -> "CclmModel":
        """Copy of the model accepting ``image_size`` inputs via position interpolation."""
        config = replace(self.config, image_size=image_size)
        pos = self.params["img.embed.pos"].data
        grid = blocks.interpolate_pos_embed(pos[1:], config.grid)
        params = dict(self.params)
        params["img.embed.pos"] = Tensor(np.concatenate([pos[:1], grid], axis=0), requires_grad=True)
        return CclmModel(config, params=params)


def count_parameters(params: dict[str, Tensor] | CclmModel) -> dict[str, int]:
    """Scalar parameter count per top-level group (img/txt/fusion/head) plus 'total'."""
    if isinstance(params, CclmModel):
        params = params.params
    counts: dict[str, int] = {}
    for name, t in params.items():
        group = name.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + int(np.prod(t.shape))
    counts["total"] = sum(counts.values())
    return counts
