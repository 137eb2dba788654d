"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .autograd import Tensor, no_grad
from .errors import NumericError


def gradient_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
) -> float:
    """Compare the tape gradient of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Every coordinate of every parameter is perturbed by ``+/- eps``;
    the result is the maximum over coordinates of
    ``|g_tape - g_fd| / max(1, |g_fd|)``.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise NumericError("gradient_check: loss is non-finite at the base point")
    loss.backward()
    tape_grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    max_rel = 0.0
    with no_grad():
        for name, p in params.items():
            g_flat = tape_grads[name].reshape(-1)
            for i, idx in enumerate(np.ndindex(p.data.shape)):
                orig = p.data[idx]
                p.data[idx] = orig + eps
                f_plus = f().item()
                p.data[idx] = orig - eps
                f_minus = f().item()
                p.data[idx] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(
                        f"gradient_check: non-finite loss while perturbing '{name}'[{i}]"
                    )
                g_fd = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(g_flat[i] - g_fd) / max(1.0, abs(g_fd))
                if rel > max_rel:
                    max_rel = rel
    return max_rel
