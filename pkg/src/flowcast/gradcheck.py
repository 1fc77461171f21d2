"""Central finite differences, used as the independent oracle for the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def finite_difference(fn: Callable[[], float], arrays: Sequence[np.ndarray],
                      step: float = 1e-6, indices: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Perturb each entry of ``arrays`` in place and difference ``fn()``.

    ``fn`` must read the arrays afresh on every call. Entries are restored
    exactly after each probe. With ``indices`` (flat positions per array) only
    those entries are probed and the result holds one value per index.
    """
    grads = []
    for n, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        probe = np.arange(flat.size) if indices is None else np.asarray(indices[n], dtype=int)
        g = np.zeros(probe.size)
        for j, i in enumerate(probe):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn()
            flat[i] = orig - step
            fm = fn()
            flat[i] = orig
            g[j] = (fp - fm) / (2.0 * step)
        grads.append(g.reshape(arr.shape) if indices is None else g)
    return grads


def max_relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor) over all entries.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference roundoff by nothing.
    """
    worst = 0.0
    for x, y in zip(a, b):
        den = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / den)))
    return worst
