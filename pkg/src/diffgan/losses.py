"""Adversarial objectives and probe-based gradient penalties.

All functions take discriminator logits (pre-sigmoid) as TapeVars and return
scalar TapeVars.
"""

from __future__ import annotations

import numpy as np

from diffgan import tensor as T
from diffgan.errors import ArgumentError


def _nonempty(*xs: T.TapeVar) -> None:
    for x in xs:
        if x.size == 0:
            raise ArgumentError("loss on empty logits")


def d_loss_ns(real_logits: T.TapeVar, fake_logits: T.TapeVar) -> T.TapeVar:
    """``mean(softplus(-real)) + mean(softplus(fake))``.

    Equal to ``-(mean log D(x) + mean log(1 - D(G(z))))`` with
    ``D = sigmoid(logit)``, so minimizing it maximizes the minimax value.
    """
    _nonempty(real_logits, fake_logits)
    return T.add(T.reduce_mean(T.softplus(T.scale(real_logits, -1.0))),
                 T.reduce_mean(T.softplus(fake_logits)))


def g_loss_ns(fake_logits: T.TapeVar) -> T.TapeVar:
    """Non-saturating generator loss ``mean(softplus(-fake))``."""
    _nonempty(fake_logits)
    return T.reduce_mean(T.softplus(T.scale(fake_logits, -1.0)))


def g_loss_saturating(fake_logits: T.TapeVar) -> T.TapeVar:
    """Literal ``mean(log(1 - D(G(z))))`` = ``-mean(softplus(fake))``."""
    _nonempty(fake_logits)
    return T.scale(T.reduce_mean(T.softplus(fake_logits)), -1.0)


def d_loss_w(real_logits: T.TapeVar, fake_logits: T.TapeVar) -> T.TapeVar:
    """Critic loss ``mean(fake) - mean(real)``; no activation."""
    _nonempty(real_logits, fake_logits)
    return T.sub(T.reduce_mean(fake_logits), T.reduce_mean(real_logits))


def g_loss_w(fake_logits: T.TapeVar) -> T.TapeVar:
    _nonempty(fake_logits)
    return T.scale(T.reduce_mean(fake_logits), -1.0)


def _unit_probes(rng: T.Rng, n_probes: int, shape: tuple, dtype) -> np.ndarray:
    u = rng.normal((n_probes,) + shape).astype(np.float64)
    flat = u.reshape(n_probes, shape[0], -1)
    flat /= np.linalg.norm(flat, axis=2, keepdims=True)
    return flat.reshape((n_probes,) + shape).astype(dtype)


def _probe_sq_slopes(d, x: np.ndarray, t, n_probes: int, eps: float, rng: T.Rng):
    """Squared directional slopes ``((D(x + eps u) - D(x)) / eps)^2 * dim``.

    Returns a TapeVar of shape ``[n_probes, N]`` whose mean over probes
    estimates ``|grad_x D|^2`` per sample (uniform unit probes have
    ``E[(g.u)^2] = |g|^2 / dim``).
    """
    n = x.shape[0]
    dim = int(np.prod(x.shape[1:]))
    u = _unit_probes(rng, n_probes, x.shape, x.dtype)
    base = d(T.constant(x), t)
    # one discriminator call per probe keeps batch-statistic groups aligned with `base`
    slopes = [T.sub(d(T.constant(x + x.dtype.type(eps) * u[p]), t), base)
              for p in range(n_probes)]
    slope = T.scale(T.concat(slopes, axis=0), 1.0 / eps)
    return T.reshape(T.scale(T.square(slope), float(dim)), (n_probes, n))


def r1_penalty_zo(d, x_real: np.ndarray, t, gamma: float, n_probes: int = 1,
                  eps: float = 1e-3, rng: T.Rng | None = None) -> T.TapeVar:
    """Zero-order estimate of ``(gamma / 2) E|grad_x D(x, t)|^2`` at real data.

    Differentiable in the discriminator parameters only; the probes are
    constants.
    """
    if gamma < 0 or eps <= 0 or n_probes < 1:
        raise ArgumentError(f"r1_penalty_zo: gamma={gamma}, eps={eps}, n_probes={n_probes}")
    if gamma == 0:
        return T.constant(np.zeros((), dtype=x_real.dtype))
    sq = _probe_sq_slopes(d, x_real, t, n_probes, eps, rng or T.Rng(0))
    return T.scale(T.reduce_mean(sq), gamma / 2.0)


def gp_penalty_zo(d, x_real: np.ndarray, x_fake: np.ndarray, t, lam: float,
                  n_probes: int = 1, eps: float = 1e-3, rng: T.Rng | None = None) -> T.TapeVar:
    """Zero-order estimate of ``lam E[(|grad D(xhat)| - 1)^2]``.

    ``xhat`` interpolates real and fake samples with ``alpha ~ U(0, 1)`` per sample.
    """
    if lam < 0 or eps <= 0 or n_probes < 1:
        raise ArgumentError(f"gp_penalty_zo: lambda={lam}, eps={eps}, n_probes={n_probes}")
    if lam == 0:
        return T.constant(np.zeros((), dtype=x_real.dtype))
    rng = rng or T.Rng(0)
    n = x_real.shape[0]
    alpha = rng.child("alpha").uniform((n,) + (1,) * (x_real.ndim - 1)).astype(x_real.dtype)
    xhat = alpha * x_real + (1 - alpha) * x_fake
    sq = _probe_sq_slopes(d, xhat, t, n_probes, eps, rng.child("probe"))
    norm = T.sqrt(T.add(T.mean_axis(sq, 0), T.constant(np.asarray(1e-12, dtype=x_real.dtype))))
    return T.scale(T.reduce_mean(T.square(T.sub(norm, T.constant(np.ones(n, dtype=x_real.dtype))))), lam)
