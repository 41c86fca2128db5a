"""Finite-difference verification of the tape's analytic gradients.

Programs are re-run in float64 regardless of their production dtype so the
1e-3 relative tolerance stays meaningful.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, TapeError, Tensor, backward


def coordinate_masks(arrays: Sequence[np.ndarray], sample: int | None,
                     seed: int = 0) -> list[np.ndarray]:
    """Boolean masks of the coordinates to difference: all of them, or about
    `sample` in total, spread over the inputs proportionally to their size."""
    if sample is None:
        return [np.ones(a.size, dtype=bool) for a in arrays]
    total = sum(a.size for a in arrays)
    rng = np.random.default_rng(seed)
    masks = []
    for a in arrays:
        take = min(a.size, max(1, round(sample * a.size / total)))
        mask = np.zeros(a.size, dtype=bool)
        mask[rng.choice(a.size, size=take, replace=False)] = True
        masks.append(mask)
    return masks


def numeric_gradients(fn: Callable[[list[Tensor]], Tensor],
                      arrays: Sequence[np.ndarray], h: float = 1e-4,
                      masks: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Central differences of the scalar program, step 1e-4 * max(1, |theta|).

    Coordinates outside `masks` are left as NaN placeholders so callers can
    restrict the comparison to what was actually differenced.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    if masks is None:
        masks = [np.ones(a.size, dtype=bool) for a in arrays]

    def evaluate() -> float:
        out = fn([Tensor(a, dtype=np.float64) for a in arrays])
        if out.size != 1:
            raise TapeError(f"grad_check target must be scalar, got shape {out.shape}")
        return out.item()

    grads = []
    for arr, mask in zip(arrays, masks):
        g = np.full_like(arr, np.nan)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in np.flatnonzero(mask):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_gradients(fn: Callable[[list[Tensor]], Tensor],
                       arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        out = fn(tensors)
    if out.size != 1:
        raise TapeError(f"grad_check target must be scalar, got shape {out.shape}")
    backward(out, tape)
    return [t.grad for t in tensors]


def _coordinate_errors(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def grad_check(fn: Callable[[list[Tensor]], Tensor],
               inputs: Sequence, h: float = 1e-4,
               sample: int | None = None, sample_seed: int = 0,
               refine: Sequence[float] = (), tolerance: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` maps a list of tensors to a scalar tensor; `inputs` are the arrays
    to differentiate with respect to. Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). With `sample`
    set, only about that many coordinates are differenced (chosen with
    `sample_seed`); the analytic side always covers everything.

    `refine` lists fallback step sizes: coordinates whose error exceeds
    `tolerance` are re-differenced at each smaller step and keep their best
    error. Between kinks these programs are piecewise smooth, so a kink
    that falls inside the first difference window disappears once the step
    shrinks below its distance, while a genuinely wrong gradient stays
    wrong at every step.
    """
    arrays = [np.array(getattr(a, "data", a), dtype=np.float64) for a in inputs]
    analytic = analytic_gradients(fn, arrays)
    masks = coordinate_masks(arrays, sample, sample_seed)
    numeric = numeric_gradients(fn, arrays, h=h, masks=masks)
    errors = []
    for a, n, mask in zip(analytic, numeric, masks):
        err = np.zeros(a.size)
        err[mask] = _coordinate_errors(a.reshape(-1)[mask], n.reshape(-1)[mask])
        errors.append(err)
    for h_retry in refine:
        retry_masks = [e > tolerance for e in errors]
        if not any(m.any() for m in retry_masks):
            break
        numeric = numeric_gradients(fn, arrays, h=h_retry, masks=retry_masks)
        for a, n, mask, err in zip(analytic, numeric, retry_masks, errors):
            if mask.any():
                fresh = _coordinate_errors(a.reshape(-1)[mask], n.reshape(-1)[mask])
                err[mask] = np.minimum(err[mask], fresh)
    return max(float(e.max()) for e in errors) if errors else 0.0
