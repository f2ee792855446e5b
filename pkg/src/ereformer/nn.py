"""Parameter store and the small layer vocabulary shared by all model parts."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .tensor import Tensor, get_default_dtype


class ParameterStore:
    """Hierarchically named trainable tensors.

    Initial values depend only on (seed, name), never on creation order.
    """

    def __init__(self, seed: int = 0, dtype=None):
        self.seed = seed
        self.dtype = dtype or get_default_dtype()
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def create(self, name: str, shape, init: str = "trunc_normal", std: float = 0.02) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        shape = tuple(int(s) for s in shape)
        if init == "trunc_normal":
            data = rng_mod.trunc_normal(self.seed, name, shape, std, self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, self.dtype)
        elif init == "ones":
            data = np.ones(shape, self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name, dtype=self.dtype)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in state.items():
            if k in self.params:
                p = self.params[k]
                if p.shape != v.shape:
                    raise ValueError(f"shape mismatch for {k}: {p.shape} vs {v.shape}")
                p.data = np.ascontiguousarray(v, dtype=p.dtype)


class Module:
    def __init__(self, store: ParameterStore, name: str):
        self.store = store
        self.name = name

    def param(self, suffix: str, shape, init: str = "trunc_normal") -> Tensor:
        return self.store.create(f"{self.name}.{suffix}", shape, init)


class Linear(Module):
    def __init__(self, store, name, fan_in: int, fan_out: int, bias: bool = True):
        super().__init__(store, name)
        self.weight = self.param("weight", (fan_in, fan_out))
        self.bias = self.param("bias", (fan_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, store, name, dim: int, eps: float = 1e-5):
        super().__init__(store, name)
        self.gain = self.param("gain", (dim,), "ones")
        self.bias = self.param("bias", (dim,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    """linear -> gelu -> linear."""

    def __init__(self, store, name, dim: int, ratio: int = 4):
        super().__init__(store, name)
        self.fc1 = Linear(store, f"{name}.fc1", dim, dim * ratio)
        self.fc2 = Linear(store, f"{name}.fc2", dim * ratio, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def linear_params(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def mlp_params(dim: int, ratio: int) -> int:
    return linear_params(dim, dim * ratio) + linear_params(dim * ratio, dim)
