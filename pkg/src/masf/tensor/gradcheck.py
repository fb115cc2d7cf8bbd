"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from masf.errors import GradientCheckError
from masf.tensor.core import Tensor


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | list[Tensor],
    epsilon: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic and central-difference gradients of the scalar ``fn()``.

    ``inputs`` are perturbed in place (and restored). With ``max_checks`` set, at most
    that many entries of each input are sampled. Returns
    ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    if not isinstance(inputs, Mapping):
        inputs = {str(i): t for i, t in enumerate(inputs)}
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in inputs.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            bad = np.unravel_index(int(np.argmax(~np.isfinite(analytic))), analytic.shape)
            raise GradientCheckError(name, bad)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        aflat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn().item()
            flat[i] = orig - epsilon
            fm = fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            if not np.isfinite(numeric):
                raise GradientCheckError(name, np.unravel_index(int(i), t.shape),
                                         "non-finite numeric derivative")
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
