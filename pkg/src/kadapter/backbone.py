"""Small post-norm transformer encoder used as the frozen backbone."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import ndgrad as nd
from .errors import ConfigurationError, DimensionError, LengthError, VocabularyError
from .ndgrad import Tensor

Params = dict[str, Tensor]

MASK_NEG = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 4
    hidden: int = 64
    n_heads: int = 4
    ffn_inner: int = 256
    vocab_size: int = 2048
    max_len: int = 64
    pad_id: int = 0
    bos_id: int = 2
    sep_id: int = 3
    mask_id: int = 4

    def __post_init__(self):
        if min(self.n_layers, self.hidden, self.n_heads, self.ffn_inner, self.vocab_size) < 1:
            raise ConfigurationError(f"non-positive dimension in {self}")
        if self.hidden % self.n_heads:
            raise ConfigurationError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ConfigurationError("max_len must be at least 2")
        specials = (self.pad_id, self.bos_id, self.sep_id, self.mask_id)
        if len(set(specials)) != len(specials):
            raise ConfigurationError(f"special ids must be distinct: {specials}")
        if any(s < 0 or s >= self.vocab_size for s in specials):
            raise ConfigurationError(f"special ids must lie in [0, {self.vocab_size})")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EncodedBatch:
    """Padded token ids plus whatever task annotations the encoder recorded."""

    token_ids: np.ndarray
    pad_mask: np.ndarray
    annotations: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


@dataclass
class HiddenStack:
    """``states[0]`` is the embedding output, ``states[i]`` the output of layer i-1."""

    states: list[Tensor]
    mask: np.ndarray

    @property
    def last(self) -> Tensor:
        return self.states[-1]

    def layer_output(self, layer: int) -> Tensor:
        """Output of transformer layer ``layer`` (0-based)."""
        return self.states[layer + 1]


def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape)


def init_block(prefix: str, width: int, ffn_inner: int, rng: np.random.Generator | None) -> Params:
    """Parameters of one encoder block; ``rng=None`` gives zero weights (shape-only)."""
    def w(shape):
        return Tensor(np.zeros(shape) if rng is None else _normal(rng, shape))

    p: Params = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}attn.{name}.weight"] = w((width, width))
        p[f"{prefix}attn.{name}.bias"] = Tensor(np.zeros(width))
    p[f"{prefix}ln1.gain"] = Tensor(np.ones(width))
    p[f"{prefix}ln1.bias"] = Tensor(np.zeros(width))
    p[f"{prefix}ffn.in.weight"] = w((width, ffn_inner))
    p[f"{prefix}ffn.in.bias"] = Tensor(np.zeros(ffn_inner))
    p[f"{prefix}ffn.out.weight"] = w((ffn_inner, width))
    p[f"{prefix}ffn.out.bias"] = Tensor(np.zeros(width))
    p[f"{prefix}ln2.gain"] = Tensor(np.ones(width))
    p[f"{prefix}ln2.bias"] = Tensor(np.zeros(width))
    return p


def init_backbone(cfg: BackboneConfig, seed: int = 42) -> Params:
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    p: Params = {
        "backbone.tok_emb": Tensor(_normal(rng, (cfg.vocab_size, H))),
        "backbone.pos_emb": Tensor(_normal(rng, (cfg.max_len, H))),
        "backbone.emb_ln.gain": Tensor(np.ones(H)),
        "backbone.emb_ln.bias": Tensor(np.zeros(H)),
    }
    for i in range(cfg.n_layers):
        p.update(init_block(f"backbone.layers.{i}.", H, cfg.ffn_inner, rng))
    return p


def embed(batch: EncodedBatch, cfg: BackboneConfig, params: Params) -> Tensor:
    ids = np.asarray(batch.token_ids)
    if ids.ndim != 2:
        raise DimensionError(f"token_ids must be [batch, len], got {ids.shape}")
    if ids.shape[1] > cfg.max_len:
        raise LengthError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id outside [0, {cfg.vocab_size})")
    tok = nd.take_rows(params["backbone.tok_emb"], ids)
    pos = nd.take_rows(params["backbone.pos_emb"], np.arange(ids.shape[1]))
    return nd.layer_norm(tok + pos, params["backbone.emb_ln.gain"], params["backbone.emb_ln.bias"])


def attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """Additive key mask shaped [b, 1, 1, l]: 0 for real tokens, -1e9 for padding."""
    m = np.asarray(pad_mask, dtype=np.float64)
    return ((1.0 - m) * MASK_NEG)[:, None, None, :]


def self_attention(x: Tensor, pad_mask: np.ndarray, params: Params, prefix: str, n_heads: int) -> Tensor:
    b, l, h = x.shape
    dh = h // n_heads

    def heads(name):
        y = nd.linear(x, params[f"{prefix}attn.{name}.weight"], params[f"{prefix}attn.{name}.bias"])
        return nd.transpose(nd.reshape(y, (b, l, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = nd.scale(nd.matmul(q, nd.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = nd.softmax_lastdim(nd.add_constant(scores, attention_mask(pad_mask)))
    ctx = nd.transpose(nd.matmul(weights, v), (0, 2, 1, 3))
    ctx = nd.reshape(ctx, (b, l, h))
    return nd.linear(ctx, params[f"{prefix}attn.o.weight"], params[f"{prefix}attn.o.bias"])


def encoder_layer_forward(x: Tensor, pad_mask: np.ndarray, params: Params, prefix: str,
                          n_heads: int) -> Tensor:
    """Post-norm block: LN(x + MHA(x)), then LN(h + FFN(h)) with a GELU FFN."""
    pad_mask = np.asarray(pad_mask)
    if x.ndim != 3 or pad_mask.shape != x.shape[:2]:
        raise DimensionError(f"mask {pad_mask.shape} does not match hidden {x.shape}")
    if x.shape[-1] % n_heads:
        raise DimensionError(f"width {x.shape[-1]} not divisible by {n_heads} heads")
    h = x + self_attention(x, pad_mask, params, prefix, n_heads)
    h = nd.layer_norm(h, params[f"{prefix}ln1.gain"], params[f"{prefix}ln1.bias"])
    f = nd.gelu(nd.linear(h, params[f"{prefix}ffn.in.weight"], params[f"{prefix}ffn.in.bias"]))
    f = nd.linear(f, params[f"{prefix}ffn.out.weight"], params[f"{prefix}ffn.out.bias"])
    return nd.layer_norm(h + f, params[f"{prefix}ln2.gain"], params[f"{prefix}ln2.bias"])


def encode(batch: EncodedBatch, cfg: BackboneConfig, params: Params) -> HiddenStack:
    x = embed(batch, cfg, params)
    states = [x]
    for i in range(cfg.n_layers):
        x = encoder_layer_forward(x, batch.pad_mask, params, f"backbone.layers.{i}.", cfg.n_heads)
        states.append(x)
    return HiddenStack(states=states, mask=np.asarray(batch.pad_mask))
