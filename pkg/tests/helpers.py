"""Shared oracles for the test modules."""

import numpy as np

from diffgan import tensor as T


def param_grad_error(loss_fn, p: T.TapeVar, coords=None, eps: float = 1e-6) -> float:
    """Relative error of the tape gradient of ``loss_fn()`` w.r.t. the leaf ``p``.

    ``p`` is perturbed in place, so networks holding it see the change. The
    error per coordinate is ``|ad - fd| / max(1, |fd|)``, as in ``grad_check``.
    """
    p.zero_grad()
    T.backward(loss_fn())
    ad = p.grad.reshape(-1).copy()
    flat = p.value.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        keep = flat[i]
        flat[i] = keep + eps
        fp = float(loss_fn().value)
        flat[i] = keep - eps
        fm = float(loss_fn().value)
        flat[i] = keep
        fd = (fp - fm) / (2 * eps)
        worst = max(worst, abs(ad[i] - fd) / max(1.0, abs(fd)))
    return worst
