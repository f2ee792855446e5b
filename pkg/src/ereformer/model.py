"""Full network: encoder -> per-scale GRViT -> decoder with skip fusion -> depth head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, Decoder, Encoder, check_input_size, effective_window, grid_shape, \
    decoder_params, encoder_params
from .grvit import GRViT, RecurrentState, TRANSFER_MODES, grvit_params
from .nn import ParameterStore
from .stf import SKIP_MODES, make_skip, skip_params
from .tensor import Tensor


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    skip_mode: str = "stf"
    transfer_mode: str = "update_gate"
    recurrence: bool = True
    grvit_scales: str = "all"  # or "bottleneck"
    event_norm: str = "log1p"

    def __post_init__(self):
        check_input_size(self.height, self.width)
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"unknown skip mode {self.skip_mode!r}")
        if self.transfer_mode not in TRANSFER_MODES:
            raise ValueError(f"unknown transfer mode {self.transfer_mode!r}")
        if self.grvit_scales not in ("all", "bottleneck"):
            raise ValueError(f"unknown grvit_scales {self.grvit_scales!r}")

    def recurrent_levels(self) -> list[int]:
        if not self.recurrence:
            return []
        return [0, 1, 2, 3] if self.grvit_scales == "all" else [3]


class EReFormer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        self.store = ParameterStore(seed, dtype)
        bb = cfg.backbone
        h, w = cfg.height, cfg.width
        self.encoder = Encoder(self.store, "encoder", bb, h, w)
        self.grvits: dict[int, GRViT] = {}
        for i in cfg.recurrent_levels():
            gh, gw = grid_shape(h, w, i)
            self.grvits[i] = GRViT(self.store, f"grvit{i}", bb.channels(i), gh * gw, bb.heads[i],
                                   bb.ffn_ratio, cfg.transfer_mode)
        skips = {i: make_skip(cfg.skip_mode, self.store, f"skip{i}", bb.channels(i), bb.heads[i],
                              grid_shape(h, w, i), bb.window, bb.ffn_ratio) for i in range(3)}
        self.decoder = Decoder(self.store, "decoder", bb, h, w, skips)

    @property
    def dtype(self):
        return self.store.dtype

    def init_states(self, batch: int) -> dict[int, RecurrentState]:
        return {i: g.zero_state(batch, self.dtype) for i, g in self.grvits.items()}

    def prepare_input(self, event_images: np.ndarray) -> Tensor:
        """Raw ``[B, 2, H, W]`` polarity counts -> normalized input tensor."""
        from .events import normalize_embedding

        x = np.asarray(event_images)
        if x.shape[-2:] != (self.cfg.height, self.cfg.width):
            raise ValueError(f"input resolution {x.shape[-2:]} does not match model "
                             f"{(self.cfg.height, self.cfg.width)}")
        return Tensor(normalize_embedding(x, self.cfg.event_norm), dtype=self.dtype)

    def temporal(self, feats: list[Tensor], states: dict[int, RecurrentState]):
        fused, new_states = [], {}
        for i, f in enumerate(feats):
            if i in self.grvits:
                f_hat, new_states[i] = self.grvits[i].step(f, states[i])
                fused.append(f_hat)
            else:
                fused.append(f)
        return fused, new_states

    def forward_bin(self, x: Tensor, states: dict[int, RecurrentState]):
        """One bin: returns normalized depth ``[B, H, W]`` in (0, 1) and the next states."""
        feats = self.encoder(x)
        fused, states = self.temporal(feats, states)
        return self.decoder(fused), states

    def forward_sequence(self, xs: list[Tensor], states=None):
        states = states if states is not None else self.init_states(xs[0].shape[0])
        preds = []
        for x in xs:
            p, states = self.forward_bin(x, states)
            preds.append(p)
        return preds, states


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg`` (must equal the built store's size)."""
    bb, h, w = cfg.backbone, cfg.height, cfg.width
    n = encoder_params(bb, h, w) + decoder_params(bb, h, w)
    for i in cfg.recurrent_levels():
        gh, gw = grid_shape(h, w, i)
        n += grvit_params(bb.channels(i), gh * gw, bb.ffn_ratio)
    for i in range(3):
        win, _ = effective_window(*grid_shape(h, w, i), bb.window)
        n += skip_params(cfg.skip_mode, bb.channels(i), bb.heads[i], win, bb.ffn_ratio)
    return n


def parameter_table(cfg: ModelConfig) -> dict[str, int]:
    """Per-component closed-form breakdown, keyed like the store's top-level prefixes."""
    bb, h, w = cfg.backbone, cfg.height, cfg.width
    table = {"encoder": encoder_params(bb, h, w), "decoder": decoder_params(bb, h, w)}
    for i in cfg.recurrent_levels():
        gh, gw = grid_shape(h, w, i)
        table[f"grvit{i}"] = grvit_params(bb.channels(i), gh * gw, bb.ffn_ratio)
    for i in range(3):
        win, _ = effective_window(*grid_shape(h, w, i), bb.window)
        n = skip_params(cfg.skip_mode, bb.channels(i), bb.heads[i], win, bb.ffn_ratio)
        if n:
            table[f"skip{i}"] = n
    return table
