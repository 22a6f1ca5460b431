"""Central finite-difference oracle for gradient tests."""

from __future__ import annotations

import numpy as np

from telcos import numerics as nx

EPS = 1e-5
RTOL = 1e-4


def numeric_grad(fn, arrays: list[np.ndarray], eps: float = EPS) -> list[np.ndarray]:
    """d fn / d arrays by central differences; fn maps arrays -> float."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = fn(arrays)
            a[i] = old - eps
            fm = fn(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def tape_grad(build, arrays: list[np.ndarray]) -> list[np.ndarray]:
    ts = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with nx.GradTape() as tape:
        loss = build(ts)
    return tape.backward(loss, ts)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check(build, arrays: list[np.ndarray], eps: float = EPS) -> float:
    """Largest relative error between tape and finite-difference gradients."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = tape_grad(build, arrays)
    numeric = numeric_grad(lambda arrs: float(build([nx.Tensor(x) for x in arrs]).data), arrays, eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))
