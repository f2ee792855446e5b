"""Training, evaluation, inference and ablation drivers."""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import rng as rng_mod
from . import tensor as T
from .config import RunConfig, parse_config
from .depth import (
    MetricReport, average_reports, colorize, compute_metrics, decode_depth, gradient_matching_loss,
    load_depth_dir, normalized_to_log, save_png, scale_invariant_loss, valid_mask, write_pfm,
)
from .events import EventFormatError, parse_events, rasterize, split_into_bins
from .model import EReFormer
from .simulator import emit_events, random_scene, save_sequence
from .tensor import Tensor

CODE_VERSION = "ereformer-1"


class NumericalError(RuntimeError):
    pass


class DataError(ValueError):
    pass


# ----------------------------------------------------------------------
# schedule and optimizer

def one_cycle_lr(step: int, total_steps: int, max_lr: float = 3.2e-5, warmup: float = 0.3,
                 start_div: float = 25.0, final_div: float = 75.0) -> float:
    """Linear warm-up from ``max_lr/start_div`` to ``max_lr``, then cosine decay to ``max_lr/final_div``."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, final = max_lr / start_div, max_lr / final_div
    peak = warmup * total_steps
    if step <= peak:
        return start + (max_lr - start) * (step / peak if peak > 0 else 1.0)
    span = (total_steps - 1) - peak
    progress = (step - peak) / span if span > 0 else 1.0
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied to matrices (rank >= 2) only."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m/{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"adam.v/{k}"].astype(self.v[k].dtype)
        self.t = t


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if math.isfinite(total) and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * s).astype(p.grad.dtype, copy=False)
    return total


# ----------------------------------------------------------------------
# data

@dataclass
class Sequence:
    name: str
    events: np.ndarray  # [T, 2, H, W] polarity counts
    depths: np.ndarray  # [T, H, W] metric depth at bin ends
    masks: np.ndarray  # [T, H, W] valid ground truth

    @property
    def num_bins(self) -> int:
        return len(self.depths)


def bin_images(stream, dt_us: int) -> np.ndarray:
    bins = split_into_bins(stream, dt_us)
    if not bins:
        return np.zeros((0, 2, stream.height, stream.width), np.float32)
    return np.stack([rasterize(b, stream.width, stream.height).values for b in bins])


def _from_stream(name, stream, depths, dt_us) -> Sequence:
    events = bin_images(stream, dt_us)
    depths = np.asarray(depths, np.float32)
    if len(events) != len(depths):
        raise DataError(f"{name}: {len(events)} event bins but {len(depths)} depth maps")
    return Sequence(name, events, depths, valid_mask(depths))


def generate_dataset(cfg: RunConfig, log: Callable[[str], None] | None = None):
    """Simulated sequences; every ``val_every``-th one (1-based) is held out for validation."""
    d = cfg.data
    train, val = [], []
    for i in range(d.num_sequences):
        spec = random_scene(d.seed * 1000 + i, d.width, d.height, d.duration_us, d.n_planes, d.speed,
                            d.threshold, d.pause_period_us, d.pause_fraction)
        lab = emit_events(spec, d.dt_us)
        seq = _from_stream(f"seq_{i:03d}", lab.stream, lab.depths, d.dt_us)
        (val if (i + 1) % d.val_every == 0 else train).append(seq)
        if log:
            log(f"simulated {seq.name}: {lab.stream.num_events} events, {seq.num_bins} bins")
    return train, val


def write_dataset(cfg: RunConfig, out_dir, log=None) -> None:
    d = cfg.data
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(d.num_sequences):
        spec = random_scene(d.seed * 1000 + i, d.width, d.height, d.duration_us, d.n_planes, d.speed,
                            d.threshold, d.pause_period_us, d.pause_fraction)
        name = f"seq_{i:03d}"
        save_sequence(emit_events(spec, d.dt_us), out / name)
        lines.append(f"{name} {'val' if (i + 1) % d.val_every == 0 else 'train'}")
        if log:
            log(f"wrote {out / name}")
    (out / "split.txt").write_text("\n".join(lines) + "\n")


def read_sequence(path) -> Sequence:
    path = Path(path)
    meta_path = path / "meta.txt"
    if not meta_path.exists():
        raise DataError(f"{path}: missing meta.txt")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = int(v)
    try:
        stream = parse_events(path / "events.bin", window=(0, meta["duration_us"]))
        depths = load_depth_dir(path)
    except (KeyError, EventFormatError, OSError) as e:
        raise DataError(f"{path}: {e}") from None
    return _from_stream(path.name, stream, depths, meta["dt_us"])


def read_dataset(path, split: str | None = None) -> list[Sequence]:
    """Sequences listed in ``split.txt`` (optionally only one split), or every subdirectory."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path}: not a dataset directory")
    split_file = path / "split.txt"
    if split_file.exists():
        entries = [line.split() for line in split_file.read_text().splitlines() if line.strip()]
        names = [n for n, s in entries if split is None or s == split]
    else:
        names = sorted(p.name for p in path.iterdir() if (p / "meta.txt").exists())
    if not names:
        raise DataError(f"{path}: no sequences found")
    return [read_sequence(path / n) for n in names]


# ----------------------------------------------------------------------
# model checkpoints

def model_to_checkpoint(model: EReFormer, cfg: RunConfig, opt: AdamW | None = None,
                        progress: dict | None = None) -> ckpt_io.Checkpoint:
    blob = cfg.to_text()
    if progress is not None:
        blob += "\n[progress]\n" + json.dumps(progress, sort_keys=True) + "\n"
    arrays = {f"param/{k}": p.data for k, p in model.store.items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    return ckpt_io.Checkpoint(blob, arrays)


def split_blob(blob: str) -> tuple[RunConfig, dict | None]:
    text, sep, progress = blob.partition("\n[progress]\n")
    return parse_config(text, "<checkpoint>"), (json.loads(progress) if sep else None)


def load_model(path) -> tuple[EReFormer, RunConfig, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    cfg, _ = split_blob(ck.blob)
    model = EReFormer(cfg.model_config(), seed=cfg.train.seed)
    state = {k[len("param/"):]: v for k, v in ck.arrays.items() if k.startswith("param/")}
    model.store.load_state(state)
    return model, cfg, ck


def code_hash() -> str:
    h = hashlib.sha256(CODE_VERSION.encode())
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------------
# forward passes

def _gt_log(depths: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return np.log(np.where(masks, depths, 1.0))


def window_loss(model: EReFormer, cfg: RunConfig, events, depths, masks, states):
    """Mean loss over the bins of one truncated window ``[B, T, ...]``; returns (loss, states)."""
    total, used = None, 0
    for t in range(events.shape[1]):
        pred, states = model.forward_bin(model.prepare_input(events[:, t]), states)
        m = masks[:, t]
        keep = m.reshape(len(m), -1).any(axis=1)
        if not keep.all():
            continue  # a sample without any valid pixel carries no signal this bin
        pred_log = normalized_to_log(pred)
        gt = _gt_log(depths[:, t], m)
        loss = scale_invariant_loss(pred_log, gt, m, cfg.train.si_lambda)
        if cfg.train.grad_match_weight:
            loss = loss + T.scale(gradient_matching_loss(pred_log, gt, m), cfg.train.grad_match_weight)
        total = loss if total is None else total + loss
        used += 1
    if total is None:
        return None, states
    return T.scale(total, 1.0 / used), states


def predict_sequence(model: EReFormer, events: np.ndarray) -> np.ndarray:
    """Streaming metric-depth prediction ``[T, H, W]`` for one sequence from a zero state."""
    out = []
    with T.no_grad():
        states = model.init_states(1)
        for t in range(len(events)):
            pred, states = model.forward_bin(model.prepare_input(events[t:t + 1]), states)
            out.append(decode_depth(np.clip(pred.data[0].astype(np.float64), 0.0, 1.0)))
    return np.asarray(out)


@dataclass
class EvalResult:
    per_sequence: dict[str, MetricReport]
    aggregate: MetricReport
    per_bin: dict[str, list[MetricReport]] = field(default_factory=dict)


def evaluate(model: EReFormer, seqs: list[Sequence], predictions: dict[str, np.ndarray] | None = None) -> EvalResult:
    """Per-bin metrics averaged per sequence; the aggregate averages all bins.

    ``predictions`` replaces the network output (used to inject oracles).
    """
    per_seq, per_bin = {}, {}
    for seq in seqs:
        if (model.cfg.height, model.cfg.width) != seq.depths.shape[1:]:
            raise DataError(f"{seq.name}: resolution {seq.depths.shape[1:]} does not match the model "
                            f"({model.cfg.height}, {model.cfg.width})")
        pred = predictions[seq.name] if predictions is not None else predict_sequence(model, seq.events)
        reports = [compute_metrics(pred[t], seq.depths[t], seq.masks[t])
                   for t in range(seq.num_bins) if seq.masks[t].any()]
        if not reports:
            raise DataError(f"{seq.name}: no valid ground truth")
        per_bin[seq.name] = reports
        per_seq[seq.name] = average_reports(reports)
    everything = [r for name in sorted(per_bin) for r in per_bin[name]]
    return EvalResult(per_seq, average_reports(everything), per_bin)


# ----------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: EReFormer
    manifest: dict
    out_dir: Path

    @property
    def final_val(self) -> dict:
        return self.manifest["epochs"][-1]["val"]

    @property
    def initial_val(self) -> dict:
        return self.manifest["initial_val"]


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    order = rng_mod.stream(seed, f"epoch{epoch}").permutation(n)
    return [sorted(order[i:i + batch_size].tolist()) for i in range(0, n, batch_size)]


def _largest_grad(model: EReFormer) -> str:
    best, name = -1.0, "none"
    for k, p in model.store.items():
        if p.grad is not None:
            g = np.abs(np.nan_to_num(p.grad, nan=np.inf))
            if g.size and float(g.max()) > best:
                best, name = float(g.max()), k
    return f"{name} (|g|max={best:.3g})"


def _val_dict(rep: MetricReport) -> dict:
    return {k: v for k, v in rep.as_dict().items()}


def train(cfg: RunConfig, out_dir, data=None, resume: bool = False, stop_after: int | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Train with truncated BPTT; writes ``last.ckpt``, ``best.ckpt`` and ``manifest.json``.

    ``data`` is ``(train_seqs, val_seqs)``; by default it is simulated from
    ``cfg.data``. With ``resume`` training continues from ``out_dir/last.ckpt``.
    ``stop_after`` ends the run after that many epochs in total without
    changing the schedule.
    """
    log = log or (lambda s: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_seqs, val_seqs = data if data is not None else generate_dataset(cfg, log)
    if not train_seqs or not val_seqs:
        raise DataError("need at least one training and one validation sequence")
    tc = cfg.train
    model = EReFormer(cfg.model_config(), seed=tc.seed)
    for s in train_seqs + val_seqs:
        if s.depths.shape[1:] != (cfg.data.height, cfg.data.width):
            raise DataError(f"{s.name}: resolution {s.depths.shape[1:]} does not match the config")
    opt = AdamW(dict(model.store.items()), tc.beta1, tc.beta2, tc.eps, tc.weight_decay)

    n_bins = train_seqs[0].num_bins
    if any(s.num_bins != n_bins for s in train_seqs):
        raise DataError("training sequences must have equal length")
    windows = math.ceil(n_bins / tc.t_bptt)
    batches_per_epoch = math.ceil(len(train_seqs) / tc.batch_size)
    total_steps = tc.epochs * batches_per_epoch * windows

    manifest = {
        "config": cfg.to_text(), "seed": tc.seed, "code_hash": code_hash(),
        "dataset": {"train": [s.name for s in train_seqs], "val": [s.name for s in val_seqs]},
        "total_steps": total_steps, "epochs": [], "checkpoints": {"best": "best.ckpt", "last": "last.ckpt"},
    }
    start_epoch, step, best = 0, 0, math.inf
    if resume:
        ck = ckpt_io.load(out / "last.ckpt")
        saved_cfg, progress = split_blob(ck.blob)
        if saved_cfg.to_text() != cfg.to_text():
            raise DataError("checkpoint config differs from the requested config")
        model.store.load_state({k[6:]: v for k, v in ck.arrays.items() if k.startswith("param/")})
        opt.load_state_arrays(ck.arrays, progress["adam_t"])
        start_epoch, step, best = progress["epoch"], progress["step"], progress["best"]
        manifest["initial_val"] = progress["initial_val"]
        manifest["epochs"] = progress["log"]
        manifest["best_epoch"] = progress["best_epoch"]
    else:
        manifest["initial_val"] = _val_dict(evaluate(model, val_seqs).aggregate)
        manifest["best_epoch"] = 0
        log(f"untrained val abs_rel {manifest['initial_val']['abs_rel']:.4f}")

    params = list(model.store)
    last_epoch = tc.epochs if stop_after is None else min(stop_after, tc.epochs)
    for epoch in range(start_epoch, last_epoch):
        losses = []
        for bidx, batch in enumerate(_batches(len(train_seqs), tc.batch_size, tc.seed, epoch)):
            seqs = [train_seqs[i] for i in batch]
            ev = np.stack([s.events for s in seqs])
            dp = np.stack([s.depths for s in seqs])
            mk = np.stack([s.masks for s in seqs])
            states = model.init_states(len(seqs))
            for w in range(windows):
                sl = slice(w * tc.t_bptt, (w + 1) * tc.t_bptt)
                lr = one_cycle_lr(step, total_steps, tc.max_lr, tc.warmup_fraction, tc.start_div, tc.final_div)
                model.store.zero_grad()
                loss, states = window_loss(model, cfg, ev[:, sl], dp[:, sl], mk[:, sl], states)
                step += 1
                if loss is None:
                    continue
                value = float(loss.data)
                loss.backward()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch + 1}, batch {bidx + 1}, "
                                         f"window {w + 1}; largest gradient in {_largest_grad(model)}")
                clip_grad_norm(params, tc.clip_norm)
                opt.step(lr)
                losses.append(value)
                states = {k: s.detach() for k, s in states.items()}
        model.store.zero_grad()
        rep = evaluate(model, val_seqs).aggregate
        entry = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else None,
                 "val": _val_dict(rep), "lr_end": one_cycle_lr(step - 1, total_steps, tc.max_lr, tc.warmup_fraction,
                                                              tc.start_div, tc.final_div)}
        manifest["epochs"].append(entry)
        log(f"epoch {epoch + 1}/{tc.epochs} loss {entry['train_loss']:.4f} val abs_rel {rep.abs_rel:.4f}")
        progress = {"epoch": epoch + 1, "step": step, "adam_t": opt.t, "best": best,
                    "best_epoch": manifest["best_epoch"], "initial_val": manifest["initial_val"],
                    "log": manifest["epochs"]}
        if rep.abs_rel < best:
            best = rep.abs_rel
            manifest["best_epoch"] = epoch + 1
            progress.update(best=best, best_epoch=epoch + 1)
            ckpt_io.save(out / "best.ckpt", model_to_checkpoint(model, cfg, None, progress))
        ckpt_io.save(out / "last.ckpt", model_to_checkpoint(model, cfg, opt, progress))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return TrainResult(model, manifest, out)


# ----------------------------------------------------------------------
# inference

def infer(ckpt_path, events_path, out_dir, fmt: str | None = None, log=None) -> int:
    """Write ``depth_XXXX.pfm`` and ``preview_XXXX.png`` per bin; returns the number of bins."""
    log = log or (lambda s: None)
    model, cfg, _ = load_model(ckpt_path)
    stream = parse_events(events_path, fmt, width=cfg.data.width, height=cfg.data.height)
    if (stream.width, stream.height) != (cfg.data.width, cfg.data.height):
        raise DataError(f"event sensor {stream.width}x{stream.height} does not match the model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stream.num_events == 0:
        log("no events in input; nothing to do")
        return 0
    depths = predict_sequence(model, bin_images(stream, cfg.data.dt_us))
    for i, d in enumerate(depths, start=1):
        write_pfm(out / f"depth_{i:04d}.pfm", d.astype(np.float32))
        save_png(out / f"preview_{i:04d}.png", colorize(d))
    log(f"wrote {len(depths)} depth maps to {out}")
    return len(depths)


# ----------------------------------------------------------------------
# ablations

VARIANTS = {
    "full": {},
    "no_recurrence": {"recurrence": False},
    "attended": {"transfer_mode": "attended"},
    "residual": {"transfer_mode": "residual"},
    "add_skip": {"skip_mode": "add"},
}


@dataclass
class AblationResult:
    scores: dict[str, list[float]]

    def median(self, variant: str) -> float:
        return statistics.median(self.scores[variant])

    def table(self) -> str:
        rows = [f"{'variant':<14} {'median abs_rel':>14}  per-seed"]
        for k, v in self.scores.items():
            rows.append(f"{k:<14} {statistics.median(v):>14.4f}  " + " ".join(f"{x:.4f}" for x in v))
        return "\n".join(rows)


def ablation_suite(base: RunConfig, seeds: list[int], variants: dict[str, dict] | None = None,
                   out_dir=None, data=None, log=None) -> AblationResult:
    """Train every variant for every seed on one shared dataset; score = final validation abs_rel."""
    if len(set(seeds)) < 3:
        raise ValueError("the ablation suite needs at least 3 distinct seeds")
    log = log or (lambda s: None)
    variants = variants or VARIANTS
    data = data if data is not None else generate_dataset(base, log)
    root = Path(out_dir) if out_dir is not None else None
    scores = {}
    for name, change in variants.items():
        scores[name] = []
        for seed in seeds:
            cfg = base.replace("model", **change).replace("train", seed=seed)
            with _run_dir(root, f"{name}_seed{seed}") as run_dir:
                res = train(cfg, run_dir, data=data)
            scores[name].append(res.final_val["abs_rel"])
            log(f"{name} seed {seed}: val abs_rel {scores[name][-1]:.4f}")
    return AblationResult(scores)


@contextlib.contextmanager
def _run_dir(root: Path | None, name: str):
    """``root/name``, or a scratch directory removed once the run is scored."""
    if root is not None:
        yield root / name
        return
    with tempfile.TemporaryDirectory(prefix="ereformer-ablate-") as tmp:
        yield Path(tmp) / name
