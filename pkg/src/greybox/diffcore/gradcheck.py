"""Central finite differences, used as an independent gradient oracle."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Mapping

import numpy as np

from ..errors import ContractError


def finite_diff_grad(f: Callable[[Mapping[str, np.ndarray]], float],
                     params: Mapping[str, np.ndarray], h: float = 1e-5) -> "OrderedDict[str, np.ndarray]":
    """(f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate of every entry.

    ``f`` receives a dict of perturbed copies; the caller's arrays are not
    modified.
    """
    if not h > 0:
        raise ContractError("step h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def grad_agreement(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray],
                   floor: float = 1e-6) -> tuple[float, float]:
    """Compare gradient maps against a reference ``b``.

    Returns (worst relative error over entries with |b| > floor,
    worst absolute error over the remaining entries).
    """
    rel, small = 0.0, 0.0
    if set(a) != set(b):
        raise ContractError(f"gradient keys differ: {sorted(set(a) ^ set(b))}")
    for k in b:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        big = np.abs(y) > floor
        if big.any():
            rel = max(rel, float(np.max(np.abs(x[big] - y[big]) / np.abs(y[big]))))
        if (~big).any():
            small = max(small, float(np.max(np.abs(x[~big] - y[~big]))))
    return rel, small
