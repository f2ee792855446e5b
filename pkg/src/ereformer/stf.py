"""Skip connections between encoder and decoder grids: STF cross-attention, ADD and CONCAT."""

from __future__ import annotations

from . import tensor as T
from .backbone import WindowAttention, attention_params, effective_window, windowed_attention
from .nn import LayerNorm, Linear, Mlp, Module, linear_params, mlp_params
from .tensor import Tensor

SKIP_MODES = ("stf", "add", "concat")


class CrossStage(Module):
    """Windowed cross-attention (queries from the decoder) followed by ``out + FFN(out)``."""

    def __init__(self, store, name, dim, heads, window, shift, ffn_ratio):
        super().__init__(store, name)
        self.shift = shift
        self.norm_q = LayerNorm(store, f"{name}.norm_q", dim)
        self.norm_kv = LayerNorm(store, f"{name}.norm_kv", dim)
        self.attn = WindowAttention(store, f"{name}.attn", dim, heads, window, cross=True)
        self.norm_ffn = LayerNorm(store, f"{name}.norm_ffn", dim)
        self.ffn = Mlp(store, f"{name}.ffn", dim, ffn_ratio)

    def __call__(self, d: Tensor, f: Tensor, return_attn: bool = False):
        res = windowed_attention(self.attn, self.norm_q(d), self.norm_kv(f), self.shift, return_attn)
        a, attn = res if return_attn else (res, None)
        out = a + self.ffn(self.norm_ffn(a))
        return (out, attn) if return_attn else out


class STF(Module):
    """Two cross-attention stages (regular, then shifted windows) and an outer residual."""

    def __init__(self, store, name, dim: int, heads: int, grid_hw, window: int, ffn_ratio: int = 4):
        super().__init__(store, name)
        w, shift = effective_window(*grid_hw, window)
        self.stage1 = CrossStage(store, f"{name}.stage1", dim, heads, w, 0, ffn_ratio)
        self.stage2 = CrossStage(store, f"{name}.stage2", dim, heads, w, shift, ffn_ratio)

    def __call__(self, d: Tensor, f: Tensor) -> Tensor:
        if d.shape != f.shape:
            raise ValueError(f"STF operands differ in shape: {d.shape} vs {f.shape}")
        d_tilde = self.stage1(d, f)
        d_bar = self.stage2(d_tilde, f)
        return d_bar + d


class SkipAdd:
    def __call__(self, d: Tensor, f: Tensor) -> Tensor:
        return skip_add(d, f)


class SkipConcat(Module):
    def __init__(self, store, name, dim: int):
        super().__init__(store, name)
        self.reduce = Linear(store, f"{name}.reduce", 2 * dim, dim)

    def __call__(self, d: Tensor, f: Tensor) -> Tensor:
        return skip_concat(d, f, self.reduce)


def skip_add(d: Tensor, f: Tensor) -> Tensor:
    if d.shape != f.shape:
        raise ValueError(f"skip operands differ in shape: {d.shape} vs {f.shape}")
    return d + f


def skip_concat(d: Tensor, f: Tensor, reduce) -> Tensor:
    if d.shape != f.shape:
        raise ValueError(f"skip operands differ in shape: {d.shape} vs {f.shape}")
    return reduce(T.concat([d, f], axis=-1))


def make_skip(mode: str, store, name: str, dim: int, heads: int, grid_hw, window: int, ffn_ratio: int):
    if mode == "stf":
        return STF(store, name, dim, heads, grid_hw, window, ffn_ratio)
    if mode == "add":
        return SkipAdd()
    if mode == "concat":
        return SkipConcat(store, name, dim)
    raise ValueError(f"unknown skip mode {mode!r}")


def skip_params(mode: str, dim: int, heads: int, window: int, ffn_ratio: int) -> int:
    if mode == "add":
        return 0
    if mode == "concat":
        return linear_params(2 * dim, dim)
    stage = 6 * dim + attention_params(dim, heads, window) + mlp_params(dim, ffn_ratio)
    return 2 * stage
