"""Central-difference gradient checking against the tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad


def numerical_grad(f: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray],
                   h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of scalar ``f`` with respect to every entry of ``params``."""
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = f(params)
            flat[k] = old - h
            down = f(params)
            flat[k] = old
            g.reshape(-1)[k] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over a whole parameter tensor."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def check(f_tensor: Callable[[dict[str, ad.Tensor]], ad.Tensor], params: dict[str, np.ndarray],
          h: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error between tape and finite-difference gradients.

    ``f_tensor`` builds the scalar from Tensor parameters; it is called once
    under a tape and then repeatedly without one for the differences.
    """
    tensors = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    with ad.Tape() as tape:
        out = f_tensor(tensors)
    analytic = dict(zip(tensors, ad.grad(tape, out, tensors.values())))
    work = {k: v.copy() for k, v in params.items()}

    def f(p):
        return float(f_tensor({k: ad.Tensor(v) for k, v in p.items()}).value)

    numeric = numerical_grad(f, work, h)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}
