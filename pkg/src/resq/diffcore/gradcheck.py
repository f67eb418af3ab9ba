"""Central finite-difference verification of taped gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, no_grad


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare analytic gradients of the scalar f(*inputs) against central
    differences over every entry of every input.

    Returns the max over entries of |analytic - fd| / max(1, |fd|). The
    caller decides pass/fail against tol; a convenience assert is
    available via ``assert_grad_check``.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    for x in inputs:
        x.zero_grad()
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check target must produce a scalar tensor")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                for x in inputs]

    worst = 0.0
    with no_grad():
        for x, an in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                fp = f(*inputs).item()
                flat[i] = keep - h
                fm = f(*inputs).item()
                flat[i] = keep
                fd = (fp - fm) / (2.0 * h)
                rel = abs(an_flat[i] - fd) / max(1.0, abs(fd))
                if rel > worst:
                    worst = rel
    return worst


def assert_grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-4) -> float:
    err = grad_check(f, inputs, h=h, tol=tol)
    if err > tol:
        raise AssertionError(f"gradient check failed: max rel err {err:.3e} > {tol:.1e}")
    return err
