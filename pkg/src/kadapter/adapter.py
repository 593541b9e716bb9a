"""Knowledge-specific adapters plugged outside the backbone, plus fusion."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from . import ndgrad as nd
from .backbone import BackboneConfig, HiddenStack, Params, encoder_layer_forward, init_block
from .errors import ArgumentError, ConfigurationError, DimensionError
from .ndgrad import Tensor


@dataclass(frozen=True)
class AdapterConfig:
    injection_layers: tuple[int, ...] = (0, 1, 3)
    n_inner: int = 1
    hidden: int = 32
    n_heads: int = 4
    down_dim: int = 32
    up_dim: int = 64
    ffn_inner: int = 128

    def __post_init__(self):
        layers = tuple(int(i) for i in self.injection_layers)
        object.__setattr__(self, "injection_layers", layers)
        if not layers:
            raise ConfigurationError("an adapter needs at least one injection layer")
        if any(b <= a for a, b in zip(layers, layers[1:])) or layers[0] < 0:
            raise ConfigurationError(f"injection layers must be strictly increasing: {layers}")
        if self.n_inner < 0 or min(self.hidden, self.n_heads, self.up_dim, self.ffn_inner) < 1:
            raise ConfigurationError(f"invalid adapter dimensions in {self}")
        if self.hidden % self.n_heads:
            raise ConfigurationError(f"adapter hidden {self.hidden} not divisible by {self.n_heads} heads")
        if self.down_dim != self.hidden:
            raise ConfigurationError(
                f"down_dim ({self.down_dim}) must equal adapter hidden ({self.hidden})")

    @property
    def k(self) -> int:
        return len(self.injection_layers)

    def validate_against(self, backbone: BackboneConfig) -> None:
        if self.up_dim != backbone.hidden:
            raise ConfigurationError(
                f"up_dim {self.up_dim} != backbone hidden {backbone.hidden}; skip connection ill-typed")
        if self.injection_layers[-1] >= backbone.n_layers:
            raise ConfigurationError(
                f"injection layer {self.injection_layers[-1]} out of range for "
                f"{backbone.n_layers} backbone layers")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["injection_layers"] = list(self.injection_layers)
        return d


FULL_BACKBONE = BackboneConfig(n_layers=24, hidden=1024, n_heads=16, ffn_inner=4096,
                                vocab_size=50265, max_len=512, pad_id=1, bos_id=0, sep_id=2,
                                mask_id=50264)
FULL_ADAPTER = AdapterConfig(injection_layers=(0, 11, 23), n_inner=2, hidden=768, n_heads=12,
                              down_dim=768, up_dim=1024, ffn_inner=3072)


@dataclass
class AdapterOutput:
    final: Tensor
    per_layer: list[Tensor]


def init_adapter(name: str, cfg: AdapterConfig, backbone: BackboneConfig,
                 seed: int | None = 42) -> Params:
    """Adapter parameters under ``adapter.<name>.``.

    Up-projections start at zero so a fresh adapter is an identity on the
    backbone channel. ``seed=None`` allocates zeros only, which is enough for
    counting parameters at full scale without touching memory pages.
    """
    cfg.validate_against(backbone)
    rng = None if seed is None else np.random.default_rng(seed)
    H, Hu, Hd = backbone.hidden, cfg.up_dim, cfg.down_dim
    p: Params = {}
    for k in range(cfg.k):
        pre = f"adapter.{name}.layers.{k}."
        down = np.zeros((H + Hu, Hd)) if rng is None else rng.normal(0.0, 0.02, (H + Hu, Hd))
        p[pre + "down.weight"] = Tensor(down)
        p[pre + "down.bias"] = Tensor(np.zeros(Hd))
        for n in range(cfg.n_inner):
            p.update(init_block(f"{pre}blocks.{n}.", cfg.hidden, cfg.ffn_inner, rng))
        p[pre + "up.weight"] = Tensor(np.zeros((cfg.hidden, Hu)))
        p[pre + "up.bias"] = Tensor(np.zeros(Hu))
    return p


def adapter_layer_forward(h_i: Tensor, prev: Tensor, params: Params, prefix: str,
                          cfg: AdapterConfig, pad_mask: np.ndarray) -> Tensor:
    """One adapter layer: concat -> down -> N blocks -> up, plus skip of ``h_i``."""
    if h_i.shape[-1] != cfg.up_dim:
        raise ConfigurationError(
            f"backbone width {h_i.shape[-1]} != up_dim {cfg.up_dim}; skip connection ill-typed")
    if prev.shape != h_i.shape:
        raise DimensionError(f"prev {prev.shape} does not match backbone hidden {h_i.shape}")
    x = nd.concat_lastdim([h_i, prev])
    d = nd.gelu(nd.linear(x, params[prefix + "down.weight"], params[prefix + "down.bias"]))
    for n in range(cfg.n_inner):
        d = encoder_layer_forward(d, pad_mask, params, f"{prefix}blocks.{n}.", cfg.n_heads)
    u = nd.linear(d, params[prefix + "up.weight"], params[prefix + "up.bias"])
    return u + h_i


def adapter_forward(stack: HiddenStack, cfg: AdapterConfig, params: Params, name: str) -> AdapterOutput:
    n_layers = len(stack.states) - 1
    for i in cfg.injection_layers:
        if not 0 <= i < n_layers:
            raise ConfigurationError(f"injection layer {i} out of range for {n_layers} layers")
    prev = Tensor(np.zeros(stack.last.shape[:-1] + (cfg.up_dim,)))
    outs: list[Tensor] = []
    for k, layer in enumerate(cfg.injection_layers):
        prev = adapter_layer_forward(stack.layer_output(layer), prev, params,
                                     f"adapter.{name}.layers.{k}.", cfg, stack.mask)
        outs.append(prev)
    return AdapterOutput(final=nd.concat_lastdim([stack.last, outs[-1]]), per_layer=outs)


def fuse(outputs: Sequence[AdapterOutput]) -> Tensor:
    """Concatenate each adapter's final feature in order (backbone block repeated per adapter)."""
    if not outputs:
        raise ArgumentError("fuse() needs at least one adapter output; use backbone features instead")
    if len(outputs) == 1:
        return outputs[0].final
    lead = outputs[0].final.shape[:-1]
    for o in outputs[1:]:
        if o.final.shape[:-1] != lead:
            raise DimensionError(f"cannot fuse outputs shaped {outputs[0].final.shape} and {o.final.shape}")
    return nd.concat_lastdim([o.final for o in outputs])


def block_param_count(width: int, ffn_inner: int) -> int:
    attn = 4 * (width * width + width)
    norms = 2 * 2 * width
    ffn = (width * ffn_inner + ffn_inner) + (ffn_inner * width + width)
    return attn + norms + ffn


def param_count(cfg: AdapterConfig, backbone: BackboneConfig) -> int:
    """Closed-form count of trainable scalars in one adapter model."""
    H, Hu, Hd = backbone.hidden, cfg.up_dim, cfg.down_dim
    per_layer = ((H + Hu) * Hd + Hd
                 + cfg.n_inner * block_param_count(cfg.hidden, cfg.ffn_inner)
                 + cfg.hidden * Hu + Hu)
    return cfg.k * per_layer


def enumerate_param_count(cfg: AdapterConfig, backbone: BackboneConfig) -> int:
    """Count by instantiating the adapter and summing every tensor's size."""
    params = init_adapter("count", cfg, backbone, seed=None)
    return sum(t.size for t in params.values())
