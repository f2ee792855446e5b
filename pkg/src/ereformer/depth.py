"""Depth codec, training losses, evaluation metrics and PFM I/O."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

D_MAX = 80.0
ALPHA = math.log(40.0)  # v = 0 decodes to 2 m
MIN_VALID = 0.1


def decode_depth(v, d_max: float = D_MAX, alpha: float = ALPHA) -> np.ndarray:
    """Normalized log depth in [0, 1] to metric meters: ``d_max * exp(alpha * (v - 1))``."""
    if d_max <= 0 or alpha <= 0:
        raise ValueError("d_max and alpha must be positive")
    v = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValueError("normalized depth must lie in [0, 1]")
    return d_max * np.exp(alpha * (v - 1.0))


def encode_depth(depth, d_max: float = D_MAX, alpha: float = ALPHA) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("metric depth must be positive")
    return 1.0 + np.log(depth / d_max) / alpha


def normalized_to_log(v: Tensor, d_max: float = D_MAX, alpha: float = ALPHA) -> Tensor:
    """Differentiable map from network output to natural-log metric depth."""
    return T.scale(v, alpha) + (math.log(d_max) - alpha)


def valid_mask(gt: np.ndarray, d_max: float = D_MAX) -> np.ndarray:
    gt = np.asarray(gt)
    with np.errstate(invalid="ignore"):
        return np.isfinite(gt) & (gt > MIN_VALID) & (gt <= d_max)


# ----------------------------------------------------------------------
# losses

def _per_sample_axes(x) -> tuple[int, ...]:
    return tuple(range(x.ndim - 2, x.ndim))


def scale_invariant_loss(pred_log: Tensor, gt_log: np.ndarray, mask: np.ndarray, lam: float = 0.85) -> Tensor:
    """``mean(d^2) - lam * mean(d)^2`` over valid pixels, with ``d = pred_log - gt_log``.

    Inputs are ``[H, W]`` or batched ``[..., H, W]``; batched losses are averaged over samples.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    mask = np.asarray(mask, dtype=bool)
    axes = _per_sample_axes(mask)
    n = mask.sum(axis=axes)
    if np.any(n == 0):
        raise ValueError("empty validity mask")
    m = mask.astype(pred_log.dtype)
    gt = np.where(mask, gt_log, 0.0).astype(pred_log.dtype)
    d = (pred_log - gt) * m
    inv_n = (1.0 / n).astype(pred_log.dtype)
    sq = T.sum_(d * d, axis=axes) * inv_n
    mu = T.sum_(d, axis=axes) * inv_n
    return T.mean(sq - T.scale(mu * mu, lam))


def gradient_matching_loss(pred_log: Tensor, gt_log: np.ndarray, mask: np.ndarray, scales: int = 4) -> Tensor:
    """Mean absolute spatial gradient of the log-depth residual, averaged over dyadic scales."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    gt = np.where(mask, gt_log, 0.0).astype(pred_log.dtype)
    d = pred_log - gt
    total, used = None, 0
    for k in range(scales):
        s = 2 ** k
        if mask.shape[-1] < 2 * s and mask.shape[-2] < 2 * s:
            break
        dk = d[..., ::s, ::s]
        mk = mask[..., ::s, ::s]
        terms = []
        for axis in (-1, -2):
            a, b = _shift_pair(dk.ndim, axis)
            pair = mk[a] & mk[b]
            if pair.any():
                diff = T.abs_(dk[a] - dk[b]) * pair.astype(d.dtype)
                terms.append(T.scale(diff.sum(), 1.0 / pair.sum()))
        if not terms:
            continue
        term = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        total = term if total is None else total + term
        used += 1
    if total is None:
        raise ValueError("no valid neighbouring pixel pairs")
    return T.scale(total, 1.0 / used)


def _shift_pair(ndim: int, axis: int):
    a = [slice(None)] * ndim
    b = [slice(None)] * ndim
    a[axis] = slice(1, None)
    b[axis] = slice(None, -1)
    return tuple(a), tuple(b)


# ----------------------------------------------------------------------
# metrics

CUTOFFS = (10, 20, 30)


@dataclass
class MetricReport:
    abs_rel: float
    rmse_log: float
    silog: float
    delta1: float
    delta2: float
    delta3: float
    err_10m: float | None
    err_20m: float | None
    err_30m: float | None
    n_pixels: int
    n_10m: int
    n_20m: int
    n_30m: int

    def as_dict(self) -> dict:
        return asdict(self)

    def kv_lines(self) -> str:
        return "\n".join(f"{k}={'absent' if v is None else v}" for k, v in self.as_dict().items())

    def table(self) -> str:
        rows = [(k, "absent" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v)))
                for k, v in self.as_dict().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>12}" for k, v in rows)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = valid_mask(gt) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    p, g = pred[mask], gt[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("depths must be positive on the mask")
    d = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    err = np.abs(p - g)
    cut = {}
    for c in CUTOFFS:
        sel = g <= c
        cut[c] = (float(err[sel].mean()) if sel.any() else None, int(sel.sum()))
    return MetricReport(
        abs_rel=float(np.mean(err / g)),
        rmse_log=float(np.sqrt(np.mean(d * d))),
        silog=float(np.mean(d * d) - np.mean(d) ** 2),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        err_10m=cut[10][0], err_20m=cut[20][0], err_30m=cut[30][0],
        n_pixels=int(mask.sum()), n_10m=cut[10][1], n_20m=cut[20][1], n_30m=cut[30][1],
    )


def average_reports(reports: list[MetricReport]) -> MetricReport:
    """Unweighted mean over reports; cut-off errors average only where present."""
    if not reports:
        raise ValueError("no reports to average")
    out = {}
    for k, v in reports[0].as_dict().items():
        vals = [getattr(r, k) for r in reports if getattr(r, k) is not None]
        if k.startswith("n_"):
            out[k] = int(sum(vals))
        else:
            out[k] = float(np.mean(vals)) if vals else None
    return MetricReport(**out)


# ----------------------------------------------------------------------
# PFM

def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(image).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline().strip())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} samples, found {data.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def colorize(depth: np.ndarray, d_max: float = D_MAX) -> np.ndarray:
    """8-bit RGB preview of a metric depth map (near = warm, far = cool)."""
    import matplotlib

    depth = np.where(np.isfinite(depth), depth, d_max)
    v = np.clip(encode_depth(np.clip(depth, d_max * np.exp(-ALPHA), d_max), d_max), 0.0, 1.0)
    rgb = matplotlib.colormaps["magma"](1.0 - v)[..., :3]
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def save_png(path, rgb: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(rgb).save(path)


def load_depth_dir(path) -> list[np.ndarray]:
    return [read_pfm(p) for p in sorted(Path(path).glob("depth_*.pfm"))]
