"""Hierarchical windowed-attention encoder/decoder.

Token grids are ``[B, Hs, Ws, C]`` tensors. Level ``i`` of an ``H x W`` input
sits at ``H / 2**(i+2)`` with ``2**i * C`` channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, linear_params, mlp_params
from .tensor import Tensor

PATCH = 4
MASK_VALUE = -1e9


@dataclass
class BackboneConfig:
    base_channels: int = 96
    encoder_depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    decoder_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    window: int = 4
    ffn_ratio: int = 4
    in_channels: int = 2

    def __post_init__(self):
        for name in ("encoder_depths", "decoder_depths", "heads"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs one entry per pyramid level")
        for i, h in enumerate(self.heads):
            if self.channels(i) % h:
                raise ValueError(f"{h} heads do not divide {self.channels(i)} channels at level {i}")
        if self.window < 1:
            raise ValueError("window size must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def check_input_size(height: int, width: int) -> None:
    if height % 32 or width % 32 or height <= 0 or width <= 0:
        raise ValueError(f"input size {height}x{width} is not divisible by 32")


def grid_shape(height: int, width: int, level: int) -> tuple[int, int]:
    s = 2 ** (level + 2)
    return height // s, width // s


def effective_window(side_h: int, side_w: int, window: int) -> tuple[int, int]:
    """(window, shift) actually used on an ``side_h x side_w`` grid.

    Grids no larger than the window collapse to one unshifted window.
    """
    if min(side_h, side_w) <= window:
        w = min(side_h, side_w)
        if side_h % w or side_w % w:
            raise ValueError(f"window {w} does not tile a {side_h}x{side_w} grid")
        return w, 0
    if side_h % window or side_w % window:
        raise ValueError(f"window {window} does not divide grid {side_h}x{side_w}")
    return window, window // 2


# ----------------------------------------------------------------------
# windows

def window_partition(x: Tensor, w: int) -> Tensor:
    """``[B, H, W, C]`` -> ``[B * nW, w*w, C]`` with windows in row-major order."""
    b, h, wd, c = x.shape
    if h % w or wd % w:
        raise ValueError(f"window {w} does not divide grid {h}x{wd}")
    x = T.reshape(x, (b, h // w, w, wd // w, w, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // w) * (wd // w), w * w, c))


def window_merge(x: Tensor, w: int, h: int, wd: int) -> Tensor:
    nb = x.shape[0] // ((h // w) * (wd // w))
    c = x.shape[-1]
    x = T.reshape(x, (nb, h // w, wd // w, w, w, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (nb, h, wd, c))


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    return T.roll(x, (-shift, -shift), (1, 2))


def cyclic_unshift(x: Tensor, shift: int) -> Tensor:
    return T.roll(x, (shift, shift), (1, 2))


@lru_cache(maxsize=None)
def region_labels(h: int, wd: int, w: int, shift: int) -> np.ndarray:
    """Label each cell of the shifted grid by the pre-shift region it came from."""
    img = np.zeros((h, wd), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
        for ws in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    return img


@lru_cache(maxsize=None)
def shift_mask(h: int, wd: int, w: int, shift: int) -> np.ndarray:
    """Additive ``[nW, w*w, w*w]`` mask: 0 within a region, MASK_VALUE across regions."""
    lab = region_labels(h, wd, w, shift)
    lab = lab.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    same = lab[:, :, None] == lab[:, None, :]
    return np.where(same, 0.0, MASK_VALUE)


@lru_cache(maxsize=None)
def relative_position_index(w: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


# ----------------------------------------------------------------------
# attention

class WindowAttention(Module):
    """Multi-head attention inside windows with a learned relative position bias.

    With ``cross=True`` queries come from the first operand and keys/values from
    the second. The key projection has no bias: softmax is invariant to a
    per-row constant, so such a bias would never affect the output.
    """

    def __init__(self, store, name, dim: int, heads: int, window: int, cross: bool = False):
        super().__init__(store, name)
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide {dim} channels")
        self.dim, self.heads, self.window, self.cross = dim, heads, window, cross
        self.head_dim = dim // heads
        self.q = Linear(store, f"{name}.q", dim, dim)
        self.k = Linear(store, f"{name}.k", dim, dim, bias=False)
        self.v = Linear(store, f"{name}.v", dim, dim)
        self.proj = Linear(store, f"{name}.proj", dim, dim)
        self.bias_table = self.param("rel_bias", ((2 * window - 1) ** 2, heads))
        self.rel_index = relative_position_index(window)

    def __call__(self, x: Tensor, y: Tensor | None = None, mask: np.ndarray | None = None,
                 return_attn: bool = False):
        bn, n, c = x.shape
        hd, nh = self.head_dim, self.heads
        src = y if self.cross else x

        def heads_first(t):
            return T.transpose(T.reshape(t, (bn, n, nh, hd)), (0, 2, 1, 3))

        q, k, v = heads_first(self.q(x)), heads_first(self.k(src)), heads_first(self.v(src))
        logits = T.matmul(T.scale(q, 1.0 / math.sqrt(hd)), T.transpose(k, (0, 1, 3, 2)))
        bias = T.take(self.bias_table, self.rel_index.reshape(-1), axis=0)
        bias = T.transpose(T.reshape(bias, (n, n, nh)), (2, 0, 1))
        logits = logits + bias
        if mask is not None:
            nw = mask.shape[0]
            logits = T.reshape(logits, (bn // nw, nw, nh, n, n))
            attn = T.softmax(logits, mask[None, :, None])
            attn = T.reshape(attn, (bn, nh, n, n))
        else:
            attn = T.softmax(logits)
        out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (bn, n, c))
        out = self.proj(out)
        return (out, attn) if return_attn else out


def windowed_attention(attn: WindowAttention, x: Tensor, y: Tensor | None, shift: int,
                       return_attn: bool = False):
    """Run ``attn`` over (optionally shifted) windows of grid(s) ``[B, H, W, C]``."""
    b, h, wd, c = x.shape
    w = attn.window
    mask = None
    if shift:
        x = cyclic_shift(x, shift)
        y = None if y is None else cyclic_shift(y, shift)
        mask = shift_mask(h, wd, w, shift)
    xw = window_partition(x, w)
    yw = None if y is None else window_partition(y, w)
    res = attn(xw, yw, mask, return_attn=return_attn)
    out, a = res if return_attn else (res, None)
    out = window_merge(out, w, h, wd)
    if shift:
        out = cyclic_unshift(out, shift)
    return (out, a) if return_attn else out


class SwinBlock(Module):
    """Pre-norm windowed self-attention + residual, pre-norm FFN + residual."""

    def __init__(self, store, name, dim, heads, grid_hw, window, shifted: bool, ffn_ratio=4):
        super().__init__(store, name)
        w, shift = effective_window(*grid_hw, window)
        self.window, self.shift = w, (shift if shifted else 0)
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = WindowAttention(store, f"{name}.attn", dim, heads, w)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.mlp = Mlp(store, f"{name}.mlp", dim, ffn_ratio)

    def __call__(self, x: Tensor, return_attn: bool = False):
        res = windowed_attention(self.attn, self.norm1(x), None, self.shift, return_attn)
        a, attn = res if return_attn else (res, None)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return (x, attn) if return_attn else x


def block_params(dim: int, heads: int, window: int, ffn_ratio: int) -> int:
    return 4 * dim + attention_params(dim, heads, window) + mlp_params(dim, ffn_ratio)


def attention_params(dim: int, heads: int, window: int) -> int:
    """q, v (biased), k (bias-free), output projection and relative bias table."""
    return 3 * dim * dim + 2 * dim + linear_params(dim, dim) + (2 * window - 1) ** 2 * heads


# ----------------------------------------------------------------------
# resampling layers

class PatchEmbed(Module):
    def __init__(self, store, name, in_ch: int, dim: int):
        super().__init__(store, name)
        self.proj = Linear(store, f"{name}.proj", PATCH * PATCH * in_ch, dim)

    def __call__(self, e: Tensor) -> Tensor:
        """``[B, C_e, H, W]`` -> ``[B, H/4, W/4, C]``."""
        b, ce, h, w = e.shape
        check_input_size(h, w)
        x = T.reshape(e, (b, ce, h // PATCH, PATCH, w // PATCH, PATCH))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (b, h // PATCH, w // PATCH, ce * PATCH * PATCH))
        return self.proj(x)


def space_to_depth(x: Tensor) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, H/2, W/2, 4C]``; channel blocks ordered (h0w0, h1w0, h0w1, h1w1)."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch merging needs even grid sides, got {h}x{w}")
    x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 4, 2, 5))
    return T.reshape(x, (b, h // 2, w // 2, 4 * c))


def depth_to_space(x: Tensor) -> Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    b, h, w, c4 = x.shape
    c = c4 // 4
    x = T.reshape(x, (b, h, w, 2, 2, c))
    x = T.transpose(x, (0, 1, 4, 2, 3, 5))
    return T.reshape(x, (b, 2 * h, 2 * w, c))


class PatchMerging(Module):
    """2x2 neighbourhood concat then ``4C -> 2C`` projection."""

    def __init__(self, store, name, dim: int):
        super().__init__(store, name)
        self.reduction = Linear(store, f"{name}.reduction", 4 * dim, 2 * dim, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.reduction(space_to_depth(x))


class PatchSplitting(Module):
    """``C -> 2C`` projection then fold each token into a 2x2 block of ``C/2`` channels."""

    def __init__(self, store, name, dim: int):
        super().__init__(store, name)
        self.expand = Linear(store, f"{name}.expand", dim, 2 * dim, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return depth_to_space(self.expand(x))


@lru_cache(maxsize=None)
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` bilinear resampling (half-pixel centres, edge clamp)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


class DepthHead(Module):
    """Per-token ``C -> 1`` projection, bilinear x4 upsampling, sigmoid."""

    def __init__(self, store, name, dim: int):
        super().__init__(store, name)
        self.proj = Linear(store, f"{name}.proj", dim, 1)

    def __call__(self, d0: Tensor) -> Tensor:
        b, h, w, _ = d0.shape
        y = T.reshape(self.proj(d0), (b, h, w))
        uh = bilinear_matrix(h * PATCH, h).astype(y.dtype)
        uw = bilinear_matrix(w * PATCH, w).astype(y.dtype)
        y = T.matmul(T.matmul(Tensor(uh, dtype=y.dtype.type), y), Tensor(uw.T.copy(), dtype=y.dtype.type))
        return T.sigmoid(y)


# ----------------------------------------------------------------------
# encoder / decoder

class Stage(Module):
    """A run of Swin blocks alternating regular and shifted windows."""

    def __init__(self, store, name, dim, heads, grid_hw, window, depth, ffn_ratio):
        super().__init__(store, name)
        self.blocks = [SwinBlock(store, f"{name}.block{j}", dim, heads, grid_hw, window, j % 2 == 1, ffn_ratio)
                       for j in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(Module):
    def __init__(self, store, name, cfg: BackboneConfig, height: int, width: int):
        super().__init__(store, name)
        check_input_size(height, width)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(store, f"{name}.patch_embed", cfg.in_channels, cfg.base_channels)
        self.stages, self.merges = [], []
        for i in range(4):
            dim = cfg.channels(i)
            if i > 0:
                self.merges.append(PatchMerging(store, f"{name}.merge{i}", cfg.channels(i - 1)))
            self.stages.append(Stage(store, f"{name}.layer{i}", dim, cfg.heads[i], grid_shape(height, width, i),
                                     cfg.window, cfg.encoder_depths[i], cfg.ffn_ratio))

    def __call__(self, e: Tensor) -> list[Tensor]:
        x = self.patch_embed(e)
        feats = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(Module):
    """Bottleneck-up decoder; ``skips[i]`` fuses the decoder grid with encoder scale ``i`` (i = 0..2)."""

    def __init__(self, store, name, cfg: BackboneConfig, height: int, width: int, skips):
        super().__init__(store, name)
        self.stages, self.splits = {}, {}
        for i in range(3, -1, -1):
            self.stages[i] = Stage(store, f"{name}.layer{i}", cfg.channels(i), cfg.heads[i],
                                   grid_shape(height, width, i), cfg.window, cfg.decoder_depths[i], cfg.ffn_ratio)
            if i > 0:
                self.splits[i] = PatchSplitting(store, f"{name}.split{i}", cfg.channels(i))
        self.skips = skips
        self.head = DepthHead(store, f"{name}.head", cfg.base_channels)

    def features(self, fused: list[Tensor]) -> list[Tensor]:
        """Decoder grids (d3 after its blocks, then d2, d1, d0 after fusion and blocks)."""
        d = self.stages[3](fused[3])
        out = [d]
        for i in (2, 1, 0):
            d = self.splits[i + 1](d)
            if d.shape != fused[i].shape:
                raise ValueError(f"decoder grid {d.shape} does not match skip feature {fused[i].shape}")
            d = self.skips[i](d, fused[i])
            d = self.stages[i](d)
            out.append(d)
        return out

    def __call__(self, fused: list[Tensor]) -> Tensor:
        return self.head(self.features(fused)[-1])


def encoder_params(cfg: BackboneConfig, height: int, width: int) -> int:
    n = linear_params(PATCH * PATCH * cfg.in_channels, cfg.base_channels)
    for i in range(4):
        dim = cfg.channels(i)
        w, _ = effective_window(*grid_shape(height, width, i), cfg.window)
        if i > 0:
            n += linear_params(4 * cfg.channels(i - 1), dim, bias=False)
        n += cfg.encoder_depths[i] * block_params(dim, cfg.heads[i], w, cfg.ffn_ratio)
    return n


def decoder_params(cfg: BackboneConfig, height: int, width: int) -> int:
    """Decoder blocks, splitting layers and head (skip modules excluded)."""
    n = linear_params(cfg.base_channels, 1)
    for i in range(4):
        dim = cfg.channels(i)
        w, _ = effective_window(*grid_shape(height, width, i), cfg.window)
        n += cfg.decoder_depths[i] * block_params(dim, cfg.heads[i], w, cfg.ffn_ratio)
        if i > 0:
            n += linear_params(dim, 2 * dim, bias=False)
    return n
