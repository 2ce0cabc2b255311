"""Central finite-difference gradient oracle.

The oracle is independent of the tape: it re-evaluates the forward function
at perturbed inputs and never inspects recorded gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def fd_gradient(
    f: Callable[[Sequence[Tensor]], Tensor],
    values: Sequence[np.ndarray],
    index: int,
    h: float = 1e-5,
    coords=None,
) -> np.ndarray:
    """Central differences of scalar f w.r.t. values[index].

    coords limits evaluation to a subset of flat coordinates (grad entries
    elsewhere are left zero); None checks every coordinate.
    """
    base = [np.array(v, dtype=np.float64) for v in values]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        hi = f([Tensor(v) for v in base]).item()
        flat[i] = orig - h
        lo = f([Tensor(v) for v in base]).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def tape_gradients(
    f: Callable[[Sequence[Tensor]], Tensor], values: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Reverse-mode gradients of scalar f w.r.t. every input."""
    xs = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in values]
    with Tape() as tape:
        loss = f(xs)
        tape.backward(loss)
    return [np.zeros_like(x.data) if x.grad is None else x.grad for x in xs]


def check_gradient(
    f: Callable[[Sequence[Tensor]], Tensor],
    values: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    The error is normalized by the largest finite-difference magnitude over
    the checked coordinates.  max_coords > 0 subsamples coordinates per input
    (for large parameter sets); 0 checks everything.
    """
    tape_grads = tape_gradients(f, values)
    worst = 0.0
    scale = 0.0
    diffs = []
    for idx, v in enumerate(values):
        n = int(np.asarray(v).size)
        if max_coords and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        else:
            coords = list(range(n))
        fd = fd_gradient(f, values, idx, h=h, coords=coords)
        tg = tape_grads[idx].reshape(-1)
        fdf = fd.reshape(-1)
        for i in coords:
            diffs.append(abs(tg[i] - fdf[i]))
            scale = max(scale, abs(fdf[i]), abs(tg[i]))
    if not diffs:
        return 0.0
    denom = max(scale, 1e-8)
    worst = max(diffs) / denom
    return worst
