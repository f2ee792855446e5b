"""Central finite-difference oracle for the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_branches


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# central stencils as (offset, weight) pairs applied to f(x + oh) - f(x - oh);
# differencing symmetric pairs first keeps a constant function exactly at zero
_STENCILS = {
    2: ((1, 1 / 2),),
    4: ((1, 8 / 12), (2, -1 / 12)),
}


def _evaluate(f: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with record_branches() as branches:
        value = float(f().data.item())
    return value, branches


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4,
                 coords: Sequence[int] | None = None, order: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. the flat coordinates of ``x``.

    ``order`` selects the 3-point (2) or 5-point (4) stencil. A coordinate
    whose perturbation moves any elu or abs input across zero gets NaN: the
    function is not smooth over the stencil there. ``x.data`` is perturbed in
    place and restored. Returns (coords, grads).
    """
    stencil = _STENCILS[order]
    _, base = _evaluate(f)
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(idx.size, dtype=np.float64)
    for k, i in enumerate(idx):
        orig = flat[i]
        total, smooth = 0.0, True
        try:
            for o, wt in stencil:
                flat[i] = orig + o * h
                fp, bp = _evaluate(f)
                flat[i] = orig - o * h
                fm, bm = _evaluate(f)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite function value when perturbing coordinate {int(i)}")
                smooth = smooth and _same_branches(bp, base) and _same_branches(bm, base)
                total += wt * (fp - fm)
        finally:
            flat[i] = orig
        out[k] = total / h if smooth else np.nan
    return idx, out


def grad_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-4,
               max_coords: int | None = None, seed: int = 0, floor: float | None = None,
               order: int = 2) -> float:
    """Max relative error between backprop and central differences.

    ``f`` must be a deterministic zero-argument closure producing a scalar
    from the current values of ``x``. All tensors in ``x`` must be float64.
    With ``max_coords``, a seeded random subset of coordinates is checked
    per tensor.

    ``floor`` bounds the denominator of the relative error from below
    (default 1e-8). Deep functions whose roundoff swamps tiny derivatives
    should pass :func:`resolution_floor` of their value instead. ``order=4``
    uses the 5-point stencil, whose truncation error is negligible next to
    roundoff for the smooth composite functions of a whole layer.

    Coordinates where the stencil straddles a kink are left out. If that
    removes more than a quarter of the checked coordinates the check would
    say little, so ``ValueError`` is raised instead.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        t.requires_grad = True
        t.grad = None
    y = f()
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite function value at the base point")
    y.backward()
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for t in xs:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        idx, num = numeric_grad(f, t, h, coords, order)
        smooth = np.isfinite(num)
        checked += idx.size
        skipped += int((~smooth).sum())
        if smooth.any():
            err = relative_error(analytic[idx][smooth], num[smooth], 1e-8 if floor is None else floor)
            worst = max(worst, float(err.max()))
    if skipped * 4 > checked:
        raise ValueError(f"{skipped} of {checked} coordinates sit on a kink; choose another point")
    return worst


def resolution_floor(value: float, h: float = 1e-4) -> float:
    """Smallest derivative central differences resolve to 1e-5 relative accuracy.

    Roundoff in a float64 evaluation of ``value`` is a few ulps times the
    magnitudes involved; divided by ``2h`` it is ~1e-11 for an O(1) loss at
    h=1e-4, which 1e-5 relative accuracy turns into a ~1e-6 floor.
    """
    return 1e-6 * max(1.0, abs(value)) * (1e-4 / h)
