"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int
    skipped: int = 0
    worst: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(ga: float, gn: float) -> float:
    return abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)


def grad_check(
    loss_fn: Callable[[], float],
    analytic: Callable[[], dict[str, np.ndarray]],
    arrays: dict[str, np.ndarray],
    n_coords: int = 60,
    step: float = 1e-4,
    seed: int = 0,
    signature: Callable[[], object] | None = None,
    name: str = "",
) -> GradReport:
    """Compare analytic gradients with central differences at random coordinates.

    ``arrays`` maps names to the float64 arrays being differentiated; they
    are perturbed in place and restored.  ``analytic()`` must return the
    gradient of ``loss_fn()`` for each name at the unperturbed point.  When
    ``signature`` is given it should summarise the piecewise regime of the
    function (ReLU masks, pooling arg-maxes); coordinates whose perturbation
    changes it straddle a kink and are skipped.
    """
    rng = np.random.default_rng(seed)
    grads = analytic()
    base_sig = signature() if signature is not None else None
    names = list(arrays)
    sizes = np.array([arrays[k].size for k in names], dtype=float)
    worst = 0.0
    checked = skipped = 0
    details = []
    attempts = 0
    while checked < n_coords and attempts < 20 * n_coords:
        attempts += 1
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = arrays[k]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + step
        fp = loss_fn()
        sig_p = signature() if signature is not None else None
        arr[idx] = old - step
        fm = loss_fn()
        sig_m = signature() if signature is not None else None
        arr[idx] = old
        if signature is not None and not (_same(sig_p, base_sig) and _same(sig_m, base_sig)):
            skipped += 1
            continue
        gn = (fp - fm) / (2 * step)
        ga = float(grads[k][idx])
        err = rel_error(ga, gn)
        details.append((k, idx, ga, gn))
        worst = max(worst, err)
        checked += 1
    if signature is not None:
        loss_fn()  # restore cached state at the unperturbed point
    details.sort(key=lambda d: -rel_error(d[2], d[3]))
    return GradReport(name, worst, checked, skipped, details[:5])


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)
