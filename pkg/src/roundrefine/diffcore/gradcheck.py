"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0.0 else self.abs_err / scale

    def ok(self, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
        return self.abs_err <= atol or self.rel_err <= rtol


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    select: Optional[Callable[[str, np.ndarray], Iterable[tuple]]] = None,
) -> list[GradCheckResult]:
    """Compare backprop gradients with (f(x+h) - f(x-h)) / 2h per element.

    ``select(name, array)`` picks element indices to check; default is all.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}
    out = []
    with no_grad():
        for name, p in params.items():
            idxs = select(name, p.data) if select else np.ndindex(*p.data.shape)
            for idx in idxs:
                idx = tuple(int(i) for i in idx)
                orig = p.data[idx]
                p.data[idx] = orig + h
                fp = float(loss_fn().data)
                p.data[idx] = orig - h
                fm = float(loss_fn().data)
                p.data[idx] = orig
                out.append(GradCheckResult(name, idx, float(analytic[name][idx]), (fp - fm) / (2 * h)))
    for p in params.values():
        p.grad = None
    return out
