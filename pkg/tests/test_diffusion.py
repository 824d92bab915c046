import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffgan import diffusion as D
from diffgan import tensor as T
from diffgan.errors import ArgumentError, ConfigError


def test_schedule_constant_beta():
    s = D.make_schedule(2, 0.5, 0.5, 1.0)
    np.testing.assert_allclose(s.alpha_bars, [0.5, 0.25], rtol=0, atol=1e-15)


def test_schedule_single_step():
    s = D.make_schedule(1, 0.3, 0.3, 1.0)
    np.testing.assert_allclose(s.alpha_bars, [0.7])


def test_schedule_default_monotone_and_small_tail():
    s = D.make_schedule()
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 0.01
    assert s.alpha_bar(0) == 1.0


@pytest.mark.parametrize("args", [(0, 1e-4, 2e-2, 0.05), (10, 0.0, 0.1, 0.05),
                                  (10, 0.2, 0.1, 0.05), (10, 1e-4, 1.0, 0.05),
                                  (10, 1e-4, 2e-2, 0.0), (2.5, 1e-4, 2e-2, 0.05)])
def test_schedule_bad_ranges(args):
    with pytest.raises(ConfigError):
        D.make_schedule(*args)


@settings(max_examples=50)
@given(t_max=st.integers(2, 400), lo=st.floats(1e-5, 0.2), span=st.floats(0, 0.5))
def test_alpha_bar_strictly_decreasing(t_max, lo, span):
    s = D.make_schedule(t_max, lo, min(lo + span, 0.9), 0.05)
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_q_sample_t0_identity(nprng):
    s = D.make_schedule()
    x = T.constant(nprng.normal(size=(3, 4)))
    y = D.q_sample(x, 0, s, T.Rng(0))
    assert y.value.tobytes() == x.value.tobytes()


def test_q_sample_mean_constant_beta():
    s = D.make_schedule(10, 0.02, 0.02, 1.0)
    abar5 = 0.98 ** 5
    assert s.alpha_bars[4] == pytest.approx(abar5, rel=1e-14)
    assert abar5 == pytest.approx(0.903921, abs=1e-6)
    x0 = 2.0
    y = D.q_sample(T.constant(np.full(100_000, x0)), 5, s, T.Rng(3))
    assert abs(y.value.mean() / (math.sqrt(abar5) * x0) - 1) < 0.01


def test_q_sample_per_sample_t_zero_rows_untouched(nprng):
    s = D.make_schedule()
    x = nprng.normal(size=(4, 2, 3, 3))
    y = D.q_sample(T.constant(x), np.array([0, 5, 0, 900]), s, T.Rng(1)).value
    np.testing.assert_array_equal(y[0], x[0])
    np.testing.assert_array_equal(y[2], x[2])
    assert not np.array_equal(y[1], x[1])


def test_q_sample_range_errors():
    s = D.make_schedule(10)
    x = T.constant(np.zeros((2, 3)))
    with pytest.raises(ArgumentError):
        D.q_sample(x, 11, s, T.Rng(0))
    with pytest.raises(ArgumentError):
        D.q_sample(x, -1, s, T.Rng(0))
    with pytest.raises(ArgumentError):
        D.q_sample(x, np.array([1, 2, 3]), s, T.Rng(0))


@pytest.mark.parametrize("t", [1, 7, 500, 1000])
def test_q_sample_gradient_is_sqrt_alpha_bar(t, nprng):
    s = D.make_schedule()
    x = T.param(nprng.normal(size=(5, 3)))
    T.backward(T.sum(D.q_sample(x, t, s, T.Rng(t))))
    np.testing.assert_allclose(x.grad, math.sqrt(s.alpha_bars[t - 1]), rtol=0, atol=1e-12)


def test_marginal_single_step_within_3_se():
    s = D.make_schedule()
    r = D.marginal_equivalence_check(s, 1, 10_000, T.Rng(1))
    assert abs(r["mean_empirical"] - r["mean_closed_form"]) < 3 * r["mean_std_error"]
    assert abs(r["var_empirical"] - r["var_closed_form"]) < 3 * r["var_std_error"]


def test_marginal_t50_within_2pct():
    s = D.make_schedule()
    r = D.marginal_equivalence_check(s, 50, 10_000, T.Rng(2))
    assert r["mean_rel_error"] < 0.02 and r["var_rel_error"] < 0.02


def test_marginal_zero_noise_exact():
    s = D.make_schedule(100, 1e-4, 2e-2, 1.0)
    # the schedule rejects sigma=0, so swap it in on a copy
    s0 = D.NoiseSchedule(s.t_max, s.beta_min, s.beta_max, 0.0, s.betas, s.alpha_bars)
    r = D.marginal_equivalence_check(s0, 40, 100, T.Rng(0), x0=1.5)
    assert r["var_empirical"] == pytest.approx(0.0, abs=1e-28)
    assert r["mean_empirical"] == pytest.approx(math.sqrt(s.alpha_bars[39]) * 1.5, rel=1e-12)


def test_marginal_t_range():
    with pytest.raises(ArgumentError):
        D.marginal_equivalence_check(D.make_schedule(10), 11, 10, T.Rng(0))


# ---------------------------------------------------------------- tepl / draw_t

def test_tepl_t1_all_ones():
    for p in ("uniform", "priority"):
        st_ = D.DiffusionState(t_current=1, t_min=1, p_pi=p)
        D.sample_tepl(st_, T.Rng(0))
        assert st_.tepl[:32] == [0] * 32 and st_.tepl[32:] == [1] * 32


def test_tepl_priority_t2_frequencies():
    st_ = D.DiffusionState(t_current=2, t_min=1, p_pi="priority")
    rng = T.Rng(5)
    ones = total = 0
    for _ in range(100_000 // 32 + 1):
        D.sample_tepl(st_, rng)
        nz = st_.tepl[32:]
        ones += nz.count(1)
        total += len(nz)
    assert abs(ones / total - 1 / 3) < 0.01


@settings(max_examples=50)
@given(tc=st.integers(1, 1000), seed=st.integers(0, 2 ** 31), p=st.sampled_from(["uniform", "priority"]))
def test_tepl_composition(tc, seed, p):
    st_ = D.DiffusionState(t_current=tc, t_min=1, p_pi=p)
    D.sample_tepl(st_, T.Rng(seed))
    assert len(st_.tepl) == 64
    assert st_.tepl.count(0) == 32
    assert max(st_.tepl) <= tc and min(st_.tepl[32:]) >= 1


def test_draw_t_all_zero():
    st_ = D.DiffusionState()
    assert not D.draw_t(st_, T.Rng(0), 100).any()


def test_draw_t_half_zero():
    st_ = D.DiffusionState(tepl=[0] * 32 + [1] * 32)
    t = D.draw_t(st_, T.Rng(9), 100_000)
    assert abs((t == 0).mean() - 0.5) < 0.01


def test_draw_t_empty():
    with pytest.raises(ArgumentError):
        D.draw_t(D.DiffusionState(tepl=[]), T.Rng(0), 3)


def test_priority_probs():
    np.testing.assert_allclose(D.timestep_probs(4, "priority"), [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(D.timestep_probs(4, "uniform"), [0.25] * 4)


# ---------------------------------------------------------------- r_d / update_T

def test_rd_examples():
    assert D.compute_rd([2, -1, 3]) == pytest.approx(1 / 3)
    assert D.compute_rd(np.zeros(10)) == 0.0
    assert D.compute_rd(np.full(10, 20.0)) == 1.0
    with pytest.raises(ArgumentError):
        D.compute_rd([])


@pytest.mark.parametrize("t0,rd,want", [(8, 0.9, 10), (8, 0.3, 6), (1000, 1.0, 1000),
                                        (4, -1.0, 4), (8, 0.6, 8), (999, 0.9, 1000), (5, 0.0, 4)])
def test_update_T_examples(t0, rd, want):
    st_ = D.DiffusionState(t_current=t0)
    D.update_T(st_, rd)
    assert st_.t_current == want


def test_controller_reaches_t_max_without_overshoot():
    st_ = D.DiffusionState(t_current=4, t_max=101, c_step=2)
    steps = 0
    while st_.t_current < 101:
        D.update_T(st_, 0.9)
        steps += 1
        assert st_.t_current <= 101
    assert steps == math.ceil((101 - 4) / 2)


def test_state_validation():
    with pytest.raises(ConfigError):
        D.DiffusionState(p_pi="bogus")
    with pytest.raises(ConfigError):
        D.DiffusionState(d_target=1.0)
    with pytest.raises(ConfigError):
        D.DiffusionState(t_min=0)
