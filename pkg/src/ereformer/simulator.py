"""Synthetic event scenes: textured fronto-parallel planes under lateral camera motion.

Intensity is an analytic function of world coordinates, so rendering at any
time is exact. Events follow the usual per-pixel reference-level model: a
pixel fires whenever its log intensity moves ``threshold`` away from the level
at its last event, with crossing times interpolated linearly between frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .depth import write_pfm
from .events import EventStream, write_bin

MAX_EVENTS = 10 ** 8
FRAME_US = 1000  # 1 kHz internal rendering


@dataclass
class Plane:
    depth: float
    seed: int = 0
    # world-space rectangle (x0, x1, y0, y1) in meters at the plane's depth; None = unbounded
    extent: tuple[float, float, float, float] | None = None


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    duration_us: int = 800_000
    velocity: tuple[float, float] = (1.0, 0.0)
    planes: list[Plane] = field(default_factory=list)
    threshold: float = 0.2
    seed: int = 0
    focal: float | None = None  # pixels; defaults to the sensor width
    pause_period_us: int = 0  # stop-and-go motion when > 0
    pause_fraction: float = 0.0

    def __post_init__(self):
        self.velocity = tuple(float(v) for v in self.velocity)
        self.planes = [p if isinstance(p, Plane) else Plane(**p) for p in self.planes]
        self.validate()

    @property
    def f(self) -> float:
        return float(self.focal or self.width)

    def validate(self) -> None:
        if self.width % 32 or self.height % 32:
            raise ValueError("sensor width and height must be divisible by 32")
        if self.threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.duration_us <= 0:
            raise ValueError("duration must be positive")
        if any(p.depth <= 0 for p in self.planes):
            raise ValueError("plane depths must be positive")
        if not 0.0 <= self.pause_fraction < 1.0:
            raise ValueError("pause fraction must lie in [0, 1)")


@dataclass
class LabeledSequence:
    stream: EventStream
    depths: np.ndarray  # [T, H, W] metric depth, 0 where undefined
    masks: np.ndarray  # [T, H, W]
    dt_us: int

    @property
    def num_bins(self) -> int:
        return len(self.depths)


def camera_offset(spec: SceneSpec, t_us) -> np.ndarray:
    """Lateral camera position in meters at time ``t_us`` (piecewise linear)."""
    t = np.asarray(t_us, dtype=np.float64)
    if spec.pause_period_us > 0 and spec.pause_fraction > 0:
        period = float(spec.pause_period_us)
        moving = (1.0 - spec.pause_fraction) * period
        travelled = np.floor(t / period) * moving + np.minimum(np.mod(t, period), moving)
    else:
        travelled = t
    s = travelled * 1e-6
    return np.stack([spec.velocity[0] * s, spec.velocity[1] * s], axis=-1)


def _texture_params(plane: Plane, f: float):
    r = rng_mod.stream(plane.seed, "texture")
    k = 6
    # spatial frequencies in cycles per pixel at the plane's own depth
    freq = r.uniform(0.02, 0.12, k) * r.choice([-1, 1], k)
    ang = r.uniform(0, math.pi, k)
    phase = r.uniform(0, 2 * math.pi, k)
    amp = r.uniform(0.5, 1.0, k)
    fx = freq * np.cos(ang) * f / plane.depth  # cycles per meter
    fy = freq * np.sin(ang) * f / plane.depth
    base = r.uniform(-0.5, 0.5)
    return fx, fy, phase, amp / amp.sum(), base


def _pixel_rays(spec: SceneSpec):
    u = np.arange(spec.width) + 0.5 - spec.width / 2
    v = np.arange(spec.height) + 0.5 - spec.height / 2
    return np.meshgrid(u / spec.f, v / spec.f)  # normalized image coords [H, W]


def _covers(plane: Plane, X, Y) -> np.ndarray:
    if plane.extent is None:
        return np.ones(X.shape, dtype=bool)
    x0, x1, y0, y1 = plane.extent
    return (X >= x0) & (X < x1) & (Y >= y0) & (Y < y1)


def _front_to_back(spec: SceneSpec) -> list[Plane]:
    return sorted(spec.planes, key=lambda p: p.depth)


def _render(spec: SceneSpec, t_us: float, want_intensity: bool = True):
    xn, yn = _pixel_rays(spec)
    cx, cy = camera_offset(spec, t_us)
    intensity = np.full(xn.shape, 0.5)
    depth = np.zeros(xn.shape)
    free = np.ones(xn.shape, dtype=bool)
    for plane in _front_to_back(spec):
        X = xn * plane.depth + cx
        Y = yn * plane.depth + cy
        hit = free & _covers(plane, X, Y)
        if not hit.any():
            continue
        depth[hit] = plane.depth
        if want_intensity:
            fx, fy, phase, amp, base = _texture_params(plane, spec.f)
            arg = 2 * math.pi * (X[hit][:, None] * fx + Y[hit][:, None] * fy) + phase
            s = (np.sin(arg) * amp).sum(axis=1) * 2.0 + base
            intensity[hit] = 0.5 + 0.45 * np.tanh(s)
        free &= ~hit
    return intensity, depth


def render_intensity(spec: SceneSpec, t_us: float) -> np.ndarray:
    """Intensity image in (0, 1] at time ``t_us``; nearer planes occlude farther ones."""
    if not 0 <= t_us <= spec.duration_us:
        raise ValueError("render time outside the scene duration")
    return _render(spec, t_us)[0]


def render_depth(spec: SceneSpec, t_us: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact depth from plane geometry; the mask is False where no plane projects."""
    depth = _render(spec, t_us, want_intensity=False)[1]
    return depth, depth > 0


def emit_events(spec: SceneSpec, dt_us: int = 50_000) -> LabeledSequence:
    """Simulate the event stream and the depth maps aligned to bin ends."""
    if dt_us <= 0:
        raise ValueError("bin duration must be positive")
    n_frames = int(math.ceil(spec.duration_us / FRAME_US))
    ref = np.log(render_intensity(spec, 0.0)).ravel()
    prev = ref.copy()
    chunks = []
    total = 0
    theta = spec.threshold
    w = spec.width
    for k in range(1, n_frames + 1):
        t0 = (k - 1) * FRAME_US
        t1 = min(k * FRAME_US, spec.duration_us)
        cur = np.log(_render(spec, t1)[0]).ravel()
        for sign in (1, -1):
            n = np.floor(sign * (cur - ref) / theta).astype(np.int64)
            n[n < 0] = 0
            if not n.any():
                continue
            pix = np.repeat(np.arange(cur.size), n)
            # j-th crossing of each firing pixel, j = 1..n
            j = np.arange(pix.size) - np.repeat(np.cumsum(n) - n, n) + 1
            level = ref[pix] + sign * theta * j
            span = cur[pix] - prev[pix]
            frac = np.clip((level - prev[pix]) / span, 0.0, 1.0)
            t = np.floor(t0 + frac * (t1 - t0)).astype(np.int64)
            t = np.minimum(t, spec.duration_us - 1)
            chunks.append((t, pix % w, pix // w, np.full(pix.size, sign, dtype=np.int64)))
            ref += sign * theta * n
            total += pix.size
            if total > MAX_EVENTS:
                raise RuntimeError(f"event count exceeded {MAX_EVENTS}; raise the threshold or shorten the scene")
        prev = cur
    if chunks:
        t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
        order = np.lexsort((p, x, y, t))
        t, x, y, p = t[order], x[order], y[order], p[order]
    else:
        t = x = y = p = np.zeros(0, dtype=np.int64)
    stream = EventStream(spec.width, spec.height, t, x, y, p, 0, spec.duration_us)
    n_bins = int(math.ceil(spec.duration_us / dt_us))
    depths, masks = [], []
    for b in range(1, n_bins + 1):
        d, m = render_depth(spec, min(b * dt_us, spec.duration_us))
        depths.append(d)
        masks.append(m)
    return LabeledSequence(stream, np.asarray(depths, dtype=np.float32), np.asarray(masks), dt_us)


def random_scene(seed: int, width: int = 64, height: int = 64, duration_us: int = 800_000,
                 n_planes: int = 3, speed: float = 1.5, threshold: float = 0.2,
                 pause_period_us: int = 0, pause_fraction: float = 0.0) -> SceneSpec:
    """A far unbounded backdrop plus ``n_planes`` nearer finite rectangles at random depths."""
    r = rng_mod.stream(seed, "scene")
    f = float(width)
    planes = [Plane(depth=float(r.uniform(25.0, 60.0)), seed=int(r.integers(2 ** 31)))]
    direction = r.choice([-1.0, 1.0])
    travel = speed * duration_us * 1e-6
    for _ in range(n_planes):
        z = float(np.exp(r.uniform(np.log(2.5), np.log(20.0))))
        half_w = z * width / f * r.uniform(0.15, 0.4)
        half_h = z * height / f * r.uniform(0.2, 0.5)
        # centre chosen so the rectangle is in view for a good part of the sequence
        cx = r.uniform(-0.3, 0.3) * z * width / f + direction * travel * r.uniform(0.0, 0.6)
        cy = r.uniform(-0.25, 0.25) * z * height / f
        planes.append(Plane(z, int(r.integers(2 ** 31)), (cx - half_w, cx + half_w, cy - half_h, cy + half_h)))
    return SceneSpec(width, height, duration_us, (direction * speed, 0.0), planes, threshold, seed,
                     pause_period_us=pause_period_us, pause_fraction=pause_fraction)


def save_sequence(seq: LabeledSequence, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bin(seq.stream, out / "events.bin")
    for i, d in enumerate(seq.depths, start=1):
        write_pfm(out / f"depth_{i:04d}.pfm", d)
    (out / "meta.txt").write_text(f"dt_us = {seq.dt_us}\nduration_us = {seq.stream.t_end}\n")
