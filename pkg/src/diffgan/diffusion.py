"""Forward noising chain, timestep list sampling and the adaptive chain length.

The chain uses the per-step kernel ``x_t ~ N(sqrt(1 - beta_t) x_{t-1},
beta_t sigma^2 I)``. Composing it gives the closed form used for one-shot
sampling, ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) sigma eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffgan import tensor as T
from diffgan.errors import ArgumentError, ConfigError

TEPL_SIZE = 64
TEPL_ZEROS = 32


@dataclass(frozen=True)
class NoiseSchedule:
    t_max: int
    beta_min: float
    beta_max: float
    sigma: float
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t) -> np.ndarray:
        """``abar_t`` with the convention ``abar_0 = 1``; accepts arrays."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])


def make_schedule(t_max: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2,
                  sigma: float = 0.05) -> NoiseSchedule:
    """Linear beta schedule over ``t_max`` steps with precomputed alpha-bars."""
    if int(t_max) != t_max or t_max < 1:
        raise ConfigError(f"t_max must be a positive integer, got {t_max}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    t_max = int(t_max)
    if t_max == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, t_max, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(t_max, float(beta_min), float(beta_max), float(sigma),
                         betas, alpha_bars)


def q_sample(x0: T.TapeVar, t, schedule: NoiseSchedule, rng: T.Rng) -> T.TapeVar:
    """Diffuse ``x0`` to step ``t`` in one shot, differentiably in ``x0``.

    ``t`` is either one int or one int per sample (leading axis). Samples with
    ``t == 0`` pass through unchanged. The noise is a constant leaf, so the
    gradient with respect to ``x0`` is ``sqrt(abar_t)``.
    """
    ts = np.asarray(t, dtype=np.int64)
    if ts.ndim > 1 or (ts.ndim == 1 and ts.shape[0] != x0.shape[0]):
        raise ArgumentError(f"q_sample: t of shape {ts.shape} for input {x0.shape}")
    if np.any(ts < 0) or np.any(ts > schedule.t_max):
        raise ArgumentError(f"q_sample: t outside [0, {schedule.t_max}]")
    if not np.any(ts):
        return x0
    dtype = x0.value.dtype
    abar = schedule.alpha_bar(ts)
    noise_scale = np.sqrt(1.0 - abar) * schedule.sigma
    eps = T.randn(rng, x0.shape, dtype=dtype)
    if ts.ndim == 0:
        data = T.scale(x0, float(np.sqrt(abar)))
        return T.add(data, T.constant(eps * dtype.type(noise_scale)))
    bshape = (-1,) + (1,) * (x0.value.ndim - 1)
    keep = np.broadcast_to(np.sqrt(abar).reshape(bshape), x0.shape).astype(dtype)
    noise = (eps * noise_scale.reshape(bshape)).astype(dtype)
    return T.add(T.mul(x0, T.constant(keep)), T.constant(noise))


def marginal_equivalence_check(schedule: NoiseSchedule, t: int, n_samples: int,
                               rng: T.Rng, x0: float = 1.0) -> dict:
    """Compare ``t`` composed single-step transitions with the closed form.

    Returns empirical and closed-form moments plus their relative errors.
    """
    if not 1 <= t <= schedule.t_max:
        raise ArgumentError(f"t={t} outside [1, {schedule.t_max}]")
    x = np.full(n_samples, float(x0))
    for s in range(t):
        beta = schedule.betas[s]
        x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * schedule.sigma * rng.normal(n_samples)
    abar = schedule.alpha_bars[t - 1]
    mean_cf = np.sqrt(abar) * x0
    var_cf = (1.0 - abar) * schedule.sigma ** 2
    mean_emp = float(x.mean())
    var_emp = float(x.var(ddof=1))
    return {
        "t": t,
        "n": n_samples,
        "mean_empirical": mean_emp,
        "mean_closed_form": float(mean_cf),
        "var_empirical": var_emp,
        "var_closed_form": float(var_cf),
        "mean_rel_error": _rel(mean_emp, mean_cf),
        "var_rel_error": _rel(var_emp, var_cf),
        # one standard error of each empirical moment
        "mean_std_error": float(np.sqrt(var_cf / n_samples)),
        "var_std_error": float(var_cf * np.sqrt(2.0 / (n_samples - 1))),
    }


def _rel(a: float, b: float) -> float:
    if b == 0:
        return abs(a)
    return float(abs(a - b) / abs(b))


@dataclass
class DiffusionState:
    """Adaptive chain length ``t_current`` and the timestep list."""

    t_current: int = 4
    t_min: int = 4
    t_max: int = 1000
    d_target: float = 0.6
    c_step: int = 2
    p_pi: str = "priority"
    tepl: list = field(default_factory=lambda: [0] * TEPL_SIZE)

    def __post_init__(self):
        if self.p_pi not in ("uniform", "priority"):
            raise ConfigError(f"p_pi must be 'uniform' or 'priority', got {self.p_pi!r}")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if not 0 < self.d_target < 1:
            raise ConfigError(f"d_target must lie in (0, 1), got {self.d_target}")
        if self.c_step < 1:
            raise ConfigError(f"c_step must be positive, got {self.c_step}")
        self.t_current = int(min(max(self.t_current, self.t_min), self.t_max))


def timestep_probs(t_current: int, p_pi: str) -> np.ndarray:
    """Probabilities of ``t = 1..t_current``: flat or proportional to ``t``."""
    w = np.arange(1, t_current + 1, dtype=np.float64)
    if p_pi == "uniform":
        w = np.ones_like(w)
    return w / w.sum()


def sample_tepl(state: DiffusionState, rng: T.Rng) -> None:
    """Refresh ``state.tepl`` with 32 zeros followed by 32 draws from p_pi."""
    if state.t_current < 1:
        raise ArgumentError("sample_tepl needs t_current >= 1")
    p = timestep_probs(state.t_current, state.p_pi)
    draws = rng.choice(state.t_current, TEPL_SIZE - TEPL_ZEROS, p=p) + 1
    state.tepl = [0] * TEPL_ZEROS + [int(v) for v in draws]


def draw_t(state: DiffusionState, rng: T.Rng, m: int) -> np.ndarray:
    """Pick ``m`` entries of ``state.tepl`` uniformly with replacement."""
    if not state.tepl:
        raise ArgumentError("draw_t on an empty tepl list")
    tepl = np.asarray(state.tepl, dtype=np.int64)
    return tepl[rng.integers(0, len(tepl), m)]


def compute_rd(real_logits) -> float:
    """Mean of ``sign(sigmoid(logit) - 0.5)`` over diffused-real logits."""
    z = np.asarray(real_logits, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ArgumentError("compute_rd on empty logits")
    return float(np.mean(np.sign(T._sigmoid(z) - 0.5)))


def update_T(state: DiffusionState, r_d: float) -> None:
    """Move ``t_current`` by ``sign(r_d - d_target) * c_step``, clamped."""
    step = int(np.sign(r_d - state.d_target)) * state.c_step
    state.t_current = int(min(max(state.t_current + step, state.t_min), state.t_max))
