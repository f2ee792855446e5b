"""Gate recurrent vision transformer unit.

One unit sits on each encoder scale and carries a hidden state across event
bins. The attention gate mixes current features with the previous state via
linear attention with an ``elu + 1`` feature map; the update gate forms the
next state as a convex combination of the old state and the attended feature.
"""

from __future__ import annotations

import weakref

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, linear_params, mlp_params
from .tensor import Tensor

TRANSFER_MODES = ("update_gate", "attended", "residual")


class RecurrentState:
    """Hidden state ``[B, N, C]`` of one scale; every live instance is tracked."""

    _live: "weakref.WeakSet[RecurrentState]" = weakref.WeakSet()

    def __init__(self, h: Tensor, step: int = 0):
        self.h = h
        self.step = step
        RecurrentState._live.add(self)

    @classmethod
    def zeros(cls, batch: int, tokens: int, dim: int, dtype=None) -> RecurrentState:
        return cls(Tensor(np.zeros((batch, tokens, dim)), dtype=dtype))

    @classmethod
    def live_count(cls) -> int:
        return len(cls._live)

    def detach(self) -> RecurrentState:
        return RecurrentState(self.h.detach(), self.step)


def feature_map(x: Tensor) -> Tensor:
    return T.elu(x) + 1.0


def linear_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """``(elu(Q)+1) ((elu(K)+1)^T V)`` per head, right-associated; ``[B, N, C]`` in and out."""
    b, n, c = q.shape
    if c % heads:
        raise ValueError(f"{heads} heads do not divide {c} channels")
    d = c // heads

    def split_heads(x):
        return T.transpose(T.reshape(x, (b, n, heads, d)), (0, 2, 1, 3))

    qf, kf, vh = feature_map(split_heads(q)), feature_map(split_heads(k)), split_heads(v)
    kv = T.matmul(T.transpose(kf, (0, 1, 3, 2)), vh)  # [B, m, d, d]
    a = T.matmul(qf, kv)
    return T.reshape(T.transpose(a, (0, 2, 1, 3)), (b, n, c))


class ScaleNorm(Module):
    """Layer norm without the additive term, so an all-zero state stays exactly zero."""

    def __init__(self, store, name, dim: int, eps: float = 1e-5):
        super().__init__(store, name)
        self.gain = self.param("gain", (dim,), "ones")
        self.eps = eps
        self._zero = None

    def __call__(self, x: Tensor) -> Tensor:
        if self._zero is None or self._zero.dtype != x.dtype:
            self._zero = Tensor(np.zeros(x.shape[-1]), dtype=x.dtype.type)
        return T.layer_norm(x, self.gain, self._zero, self.eps)


class GRViT(Module):
    def __init__(self, store, name, dim: int, tokens: int, heads: int, ffn_ratio: int = 4,
                 transfer: str = "update_gate"):
        super().__init__(store, name)
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide {dim} channels")
        if transfer not in TRANSFER_MODES:
            raise ValueError(f"unknown transfer mode {transfer!r}")
        self.dim, self.tokens, self.heads, self.transfer = dim, tokens, heads, transfer
        for part in ("q", "k", "v"):
            for src in ("f", "h"):
                setattr(self, f"w_{part}{src}", self.param(f"w_{part}_{src}", (dim, dim)))
        self.norm_f = LayerNorm(store, f"{name}.norm_f", dim)
        self.norm_h = ScaleNorm(store, f"{name}.norm_h", dim)
        # The unnormalized attention sum grows with the token count, so it is
        # layer-normed before the output projection to keep A_t on the scale of f_t.
        self.attn_norm = LayerNorm(store, f"{name}.attn_norm", dim)
        self.out = Linear(store, f"{name}.w_a", dim, dim)
        self.gate = Linear(store, f"{name}.w_p", 2 * dim, dim)
        self.ffn_norm = LayerNorm(store, f"{name}.ffn_norm", dim)
        self.ffn = Mlp(store, f"{name}.ffn", dim, ffn_ratio)
        self.pos = self.param("pos", (tokens, dim))

    def qkv(self, f: Tensor, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (T.matmul(f, self.w_qf) + T.matmul(h, self.w_qh),
                T.matmul(f, self.w_kf) + T.matmul(h, self.w_kh),
                T.matmul(f, self.w_vf) + T.matmul(h, self.w_vh))

    def attention_gate(self, fn: Tensor, hn: Tensor) -> Tensor:
        """Attended feature ``A_t`` from normalized features and state."""
        q, k, v = self.qkv(fn, hn)
        return self.out(self.attn_norm(linear_attention(q, k, v, self.heads)))

    def update_gate(self, fn: Tensor, hn: Tensor) -> Tensor:
        return T.sigmoid(self.gate(T.concat([fn, hn], axis=-1)))

    def transfer_state(self, h: Tensor, a: Tensor, gate: Tensor | None) -> Tensor:
        if self.transfer == "attended":
            return a
        if self.transfer == "residual":
            return h + a
        return (1.0 - gate) * h + gate * a

    def step(self, f_t: Tensor, state: RecurrentState, gate: Tensor | None = None):
        """One bin: returns ``(f_hat, new_state)``. ``gate`` overrides the learned update gate."""
        b, hs, ws, c = f_t.shape
        n = hs * ws
        if state.h.shape != (b, n, c):
            raise ValueError(f"state shape {state.h.shape} does not match features {(b, n, c)}")
        f = T.reshape(f_t, (b, n, c)) + self.pos
        h = state.h
        fn, hn = self.norm_f(f), self.norm_h(h)
        a = self.attention_gate(fn, hn)
        x = a + f
        f_hat = x + self.ffn(self.ffn_norm(x))
        if gate is None and self.transfer == "update_gate":
            gate = self.update_gate(fn, hn)
        h_new = self.transfer_state(h, a, gate)
        return T.reshape(f_hat, (b, hs, ws, c)), RecurrentState(h_new, state.step + 1)

    def zero_state(self, batch: int, dtype=None) -> RecurrentState:
        return RecurrentState.zeros(batch, self.tokens, self.dim, dtype or self.pos.dtype.type)

    def run_sequence(self, feats: list[Tensor], state: RecurrentState | None = None,
                     probe: list[int] | None = None) -> list[Tensor]:
        """Fold :meth:`step` over bins starting from zeros; ``probe`` collects live-state counts."""
        if not feats:
            raise ValueError("run_sequence needs at least one bin")
        state = state or self.zero_state(feats[0].shape[0])
        outs = []
        for f in feats:
            f_hat, state = self.step(f, state)
            outs.append(f_hat)
            if probe is not None:
                probe.append(RecurrentState.live_count())
        return outs


def grvit_params(dim: int, tokens: int, ffn_ratio: int) -> int:
    return (6 * dim * dim + 5 * dim + linear_params(dim, dim) + linear_params(2 * dim, dim)
            + 2 * dim + mlp_params(dim, ffn_ratio) + tokens * dim)
