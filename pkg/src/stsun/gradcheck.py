"""Central finite-difference checks of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward and central differences w.r.t. ``x``.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    out = f(x)
    _scalar(out)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return _rel_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params, eps: float = 1e-5,
                      per_param: int = 2, seed: int = 0) -> float:
    """Spot-check parameter gradients at ``per_param`` random coordinates each.

    ``params`` is an iterable of (name, Tensor); ``loss_fn`` re-runs the forward
    pass reading the current parameter values.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    out = loss_fn()
    _scalar(out)
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for _, p in params:
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size)
            picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(loss_fn())
                flat[i] = orig - eps
                fm = _scalar(loss_fn())
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                worst = max(worst, abs(grad[i] - num) / max(1.0, abs(grad[i])))
    return worst


@dataclass
class CheckResult:
    module: str
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol
