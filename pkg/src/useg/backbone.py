"""Mamba-style U-shaped segmentation backbone.

Encoder: strided-conv stem, then four stages of (strided-conv downsample,
visual state-space blocks). Decoder: five stages of transposed-conv upsample,
skip concatenation and two conv/norm/SiLU blocks, with a text fusion hook at
the end of each stage, then a 1x1 head with two output channels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np

from useg.autograd import ParameterStore, Tensor, fan_in_uniform, ops, scan
from useg.errors import InvalidConfig, MissingText, ShapeMismatch
from useg.fusion import N_STAGES, check_mode, fuse_stage, fused_stages

_SCAN_DIRECTIONS = (1, 2, 4)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    widths: Sequence[int] = (16, 32, 64, 128, 256)
    blocks: Sequence[int] = (2, 2, 2, 2)
    state_dim: int = 8
    directions: int = 4
    mlp_ratio: int = 2
    text_dim: int = 64
    text_len: int = 32
    text_blocks: int = 2
    vocab_size: int = 0
    fusion: str = "stage_add"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        self.validate()

    def validate(self) -> None:
        h = self.image_size
        if h < 32 or h % 32 or h & (h - 1):
            raise InvalidConfig(f"image_size must be a power of two divisible by 32, got {h}")
        if len(self.widths) != 5 or any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise InvalidConfig(f"widths must be 5 strictly increasing ints, got {self.widths}")
        if len(self.blocks) != 4 or min(self.blocks) < 0:
            raise InvalidConfig(f"blocks must be 4 non-negative ints, got {self.blocks}")
        if self.directions not in _SCAN_DIRECTIONS:
            raise InvalidConfig(f"directions must be one of {_SCAN_DIRECTIONS}")
        if self.state_dim < 1 or self.text_dim < 1 or self.mlp_ratio < 1:
            raise InvalidConfig("state_dim, text_dim and mlp_ratio must be positive")
        check_mode(self.fusion)
        if self.fusion != "none" and self.vocab_size < 3:
            raise InvalidConfig("a text-fused model needs vocab_size >= 3")

    @property
    def decoder_widths(self) -> List[int]:
        w = self.widths
        return [w[3], w[2], w[1], w[0], w[0]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["blocks"] = list(self.widths), list(self.blocks)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# parameter initialisation


def _conv(store, name, rng, cout, cin, k):
    store.add(f"{name}.w", fan_in_uniform(rng, (cout, cin, k, k), cin * k * k))
    store.add(f"{name}.b", np.zeros(cout))


def _upconv(store, name, rng, cin, cout):
    store.add(f"{name}.w", fan_in_uniform(rng, (cin, cout, 2, 2), cin))
    store.add(f"{name}.b", np.zeros(cout))


def _norm(store, name, c):
    store.add(f"{name}.g", np.ones(c))
    store.add(f"{name}.b", np.zeros(c))


def _dense(store, name, rng, cin, cout, bias=True):
    store.add(f"{name}.w", fan_in_uniform(rng, (cin, cout), cin))
    if bias:
        store.add(f"{name}.b", np.zeros(cout))


def init_ssm_params(store: ParameterStore, prefix: str, rng, channels: int, state_dim: int) -> None:
    c, n = channels, state_dim
    store.add(f"{prefix}.A_log", np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (c, 1))))
    store.add(f"{prefix}.D", np.ones(c))
    store.add(f"{prefix}.w_delta", fan_in_uniform(rng, (c, c), c) * 0.1)
    # step sizes spread geometrically over [1e-3, 1e-1]; bias is softplus^-1 of that
    dt = np.geomspace(1e-3, 1e-1, c)
    store.add(f"{prefix}.b_delta", dt + np.log(-np.expm1(-dt)))
    store.add(f"{prefix}.w_B", fan_in_uniform(rng, (c, n), c))
    store.add(f"{prefix}.w_C", fan_in_uniform(rng, (c, n), c))


def init_vss_params(store: ParameterStore, prefix: str, rng, c: int, cfg: ModelConfig) -> None:
    _norm(store, f"{prefix}.ln1", c)
    _dense(store, f"{prefix}.in_proj", rng, c, c)
    for d in range(cfg.directions):
        init_ssm_params(store, f"{prefix}.ssm{d}", rng, c, cfg.state_dim)
    _dense(store, f"{prefix}.out_proj", rng, c, c)
    _norm(store, f"{prefix}.ln2", c)
    _dense(store, f"{prefix}.mlp1", rng, c, cfg.mlp_ratio * c)
    _dense(store, f"{prefix}.mlp2", rng, cfg.mlp_ratio * c, c)


def init_backbone_params(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    w = cfg.widths
    _conv(store, "enc.stem", rng, w[0], 1, 3)
    _norm(store, "enc.stem.norm", w[0])
    for s in range(1, 5):
        _conv(store, f"enc.stage{s}.down", rng, w[s], w[s - 1], 3)
        for i in range(cfg.blocks[s - 1]):
            init_vss_params(store, f"enc.stage{s}.block{i}", rng, w[s], cfg)
    dec = cfg.decoder_widths
    skips = [w[3], w[2], w[1], w[0], 1]
    prev = w[4]
    for s in range(1, N_STAGES + 1):
        c = dec[s - 1]
        _upconv(store, f"dec.stage{s}.up", rng, prev, c)
        _conv(store, f"dec.stage{s}.conv1", rng, c, c + skips[s - 1], 3)
        _norm(store, f"dec.stage{s}.norm1", c)
        _conv(store, f"dec.stage{s}.conv2", rng, c, c, 3)
        _norm(store, f"dec.stage{s}.norm2", c)
        prev = c
    _conv(store, "head", rng, 2, prev, 1)


# --------------------------------------------------------------------------
# building blocks


def channel_affine(x: Tensor, params, name: str) -> Tensor:
    c = x.shape[1]
    g = ops.reshape(params[f"{name}.g"], (1, c, 1, 1))
    b = ops.reshape(params[f"{name}.b"], (1, c, 1, 1))
    return x * g + b


def map_norm(x: Tensor, params, name: str) -> Tensor:
    """Per-sample normalisation over (C, h, w) with a per-channel affine."""
    return channel_affine(ops.layer_norm(x, axis=(1, 2, 3)), params, name)


def token_norm(x: Tensor, params, name: str) -> Tensor:
    return ops.layer_norm(x, axis=-1) * params[f"{name}.g"] + params[f"{name}.b"]


def patch_embed(images: Tensor, params) -> Tensor:
    """Stride-2 3x3 conv stem followed by normalisation: (B,1,H,W) -> (B,C0,H/2,W/2)."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise ShapeMismatch(f"images must be (B, 1, H, W), got {images.shape}")
    x = ops.conv2d(images, params["stem.w"], params["stem.b"], stride=2, padding=1)
    return map_norm(x, params, "stem.norm")


def selective_scan(x: Tensor, params) -> Tensor:
    """Input-dependent diagonal state-space recurrence over (B, L, C) sequences."""
    delta = ops.softplus(ops.linear(x, params["w_delta"], params["b_delta"]))
    bm = ops.matmul(x, params["w_B"])
    cm = ops.matmul(x, params["w_C"])
    a = -ops.exp(params["A_log"])
    return scan(x, delta, a, bm, cm, params["D"])


def ss2d_tokens(z: Tensor, params: Sequence[Mapping], directions: int = 4) -> Tensor:
    """Channel-last (B,h,w,C) map scanned in up to four spatial orders and summed."""
    b, h, w, c = z.shape
    rows = ops.reshape(z, (b, h * w, c))
    cols = ops.reshape(ops.transpose(z, (0, 2, 1, 3)), (b, h * w, c))
    out = None
    for d in range(directions):
        seq = rows if d < 2 else cols
        if d % 2:
            seq = ops.flip(seq, 1)
        y = selective_scan(seq, params[d])
        if d % 2:
            y = ops.flip(y, 1)
        if d < 2:
            y = ops.reshape(y, (b, h, w, c))
        else:
            y = ops.transpose(ops.reshape(y, (b, w, h, c)), (0, 2, 1, 3))
        out = y if out is None else out + y
    return out


def ss2d(fmap: Tensor, params: Sequence[Mapping], directions: int = 4) -> Tensor:
    """(B,C,h,w) feature map through the multi-directional selective scan."""
    z = ops.transpose(fmap, (0, 2, 3, 1))
    return ops.transpose(ss2d_tokens(z, params, directions), (0, 3, 1, 2))


def vss_block(fmap: Tensor, params, directions: int = 4) -> Tensor:
    x = ops.transpose(fmap, (0, 2, 3, 1))
    h = ops.silu(ops.linear(token_norm(x, params, "ln1"), params["in_proj.w"], params["in_proj.b"]))
    ssm = [params.scope(f"ssm{d}") for d in range(directions)]
    h = ss2d_tokens(h, ssm, directions)
    x = x + ops.linear(h, params["out_proj.w"], params["out_proj.b"])
    h = ops.silu(ops.linear(token_norm(x, params, "ln2"), params["mlp1.w"], params["mlp1.b"]))
    x = x + ops.linear(h, params["mlp2.w"], params["mlp2.b"])
    return ops.transpose(x, (0, 3, 1, 2))


def _check_images(images: Tensor, cfg: ModelConfig) -> None:
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ShapeMismatch(f"expected (B, 1, {cfg.image_size}, {cfg.image_size}) images, got {images.shape}")


def encode(images: Tensor, params, cfg: ModelConfig) -> List[Tensor]:
    """Images -> [E0..E4] at H/2 .. H/32."""
    _check_images(images, cfg)
    enc = params.scope("enc")
    x = patch_embed(images, enc)
    pyramid = [x]
    for s in range(1, 5):
        st = enc.scope(f"stage{s}")
        x = ops.conv2d(x, st["down.w"], st["down.b"], stride=2, padding=1)
        for i in range(cfg.blocks[s - 1]):
            x = vss_block(x, st.scope(f"block{i}"), cfg.directions)
        pyramid.append(x)
    return pyramid


def _conv_block(x, params, conv, norm):
    x = ops.conv2d(x, params[f"{conv}.w"], params[f"{conv}.b"], stride=1, padding=1)
    return ops.silu(map_norm(x, params, norm))


def decode(pyramid: Sequence[Tensor], images: Tensor, text: Optional[Tensor], params, cfg: ModelConfig,
           fusion: Optional[str] = None) -> Tensor:
    """Pyramid (+ text embedding) -> (B, 2, H, W) logits.

    Stage s upsamples, concatenates skip E_{4-s} (the input image for the last
    stage), runs two conv blocks and then fuses the text vector if enabled.
    """
    fusion = cfg.fusion if fusion is None else check_mode(fusion)
    if len(pyramid) != 5:
        raise ShapeMismatch(f"pyramid must have 5 levels, got {len(pyramid)}")
    active = fused_stages(fusion)
    if active and text is None:
        raise MissingText(f"fusion mode {fusion!r} needs a text embedding")
    skips = [pyramid[3], pyramid[2], pyramid[1], pyramid[0], images]
    dec = params.scope("dec")
    x = pyramid[4]
    for s in range(1, N_STAGES + 1):
        st = dec.scope(f"stage{s}")
        x = ops.conv_transpose2d(x, st["up.w"], st["up.b"], stride=2)
        skip = skips[s - 1]
        if skip.shape[2:] != x.shape[2:]:
            raise ShapeMismatch(f"decoder stage {s}: skip {skip.shape} vs upsampled {x.shape}")
        x = ops.concat([x, skip], axis=1)
        x = _conv_block(x, st, "conv1", "norm1")
        x = _conv_block(x, st, "conv2", "norm2")
        if s in active:
            x = fuse_stage(x, text, params.scope(f"fusion.stage{s}"), fusion)
    return ops.conv2d(x, params["head.w"], params["head.b"])
