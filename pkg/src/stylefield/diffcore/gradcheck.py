"""Central-difference gradient checking.

The checker compares reverse-mode gradients of a scalar-valued function
against (f(x+eps) - f(x-eps)) / 2eps per coordinate, in 64-bit.  Coordinates
sitting on (or within eps of) a non-smooth kink are detected through the
second difference f(x+eps) - 2 f(x) + f(x-eps): for a smooth function that
quantity is O(eps^2), across a kink it is O(eps * slope-jump).  Flagged
coordinates are excluded from the pass/fail verdict and reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DiffcoreError, Tensor, backward


@dataclass
class FDReport:
    max_rel_err: float
    n_checked: int
    excluded: list = field(default_factory=list)
    worst_index: int = -1

    def passed(self, threshold: float) -> bool:
        return self.n_checked > 0 and self.max_rel_err < threshold


def finite_diff_check(
    fn,
    point,
    eps: float = 1e-4,
    *,
    atol: float = 1e-6,
    kink_tol: float = 1e-2,
    max_coords: int | None = None,
    seed: int = 0,
) -> FDReport:
    """Check d fn / d point at every coordinate (or a seeded subset).

    ``fn`` maps a Tensor to a scalar Tensor.  ``point`` is coerced to
    float64; pass ``max_coords`` to bound runtime on large inputs.
    """
    if eps <= 0:
        raise DiffcoreError(f"finite_diff_check: eps must be positive, got {eps}")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    pt = Tensor(x.copy(), requires_grad=True)
    loss = fn(pt)
    if loss.data.size != 1:
        raise DiffcoreError("finite_diff_check: fn must be scalar-valued")
    backward(loss, [pt])
    grad = (pt.grad if pt.grad is not None else np.zeros_like(x)).reshape(-1)

    flat = x.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, max_coords, replace=False)
        coords.sort()

    f0 = float(loss.data.reshape(()))

    def eval_at(v):
        out = fn(Tensor(v.reshape(x.shape)))
        return float(out.data.reshape(()))

    max_rel = 0.0
    worst = -1
    excluded = []
    n_checked = 0
    scale = max(abs(f0), 1.0)
    for c in coords:
        orig = flat[c]
        v = flat.copy()
        v[c] = orig + eps
        fp = eval_at(v)
        v[c] = orig - eps
        fm = eval_at(v)
        fd = (fp - fm) / (2.0 * eps)
        second = fp - 2.0 * f0 + fm
        slope = max(abs(fd), abs(grad[c]), 1e-12)
        if abs(second) > kink_tol * eps * slope and abs(second) > 1e-9 * scale:
            excluded.append(int(c))
            continue
        rel = abs(fd - grad[c]) / max(abs(fd), abs(grad[c]), atol)
        n_checked += 1
        if rel > max_rel:
            max_rel = rel
            worst = int(c)
    return FDReport(max_rel_err=max_rel, n_checked=n_checked, excluded=excluded, worst_index=worst)
