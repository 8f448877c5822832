import numpy as np
import pytest

from vesseldiff.schedule import ddim_subsequence, linear_schedule


def test_single_step_alpha_bar():
    sched = linear_schedule(1, 0.1, 0.1)
    assert sched.alpha_bar[1] == pytest.approx(0.9)


def test_zero_beta_rejected_and_small_beta_limit():
    with pytest.raises(ValueError):
        linear_schedule(5, 0.0, 0.0)
    sched = linear_schedule(5, 1e-12, 1e-12)
    assert np.all(sched.alpha_bar > 1.0 - 1e-10)


def test_full_scale_running_product():
    sched = linear_schedule(1000, 1e-4, 0.02)
    # independent oracle: explicit running product
    betas = np.linspace(1e-4, 0.02, 1000)
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert sched.alpha_bar[1000] == pytest.approx(prod, rel=1e-12)
    assert prod == pytest.approx(4.0e-5, rel=0.1)


def test_alpha_bar_strictly_decreasing():
    sched = linear_schedule(500)
    assert np.all(np.diff(sched.alpha_bar[1:]) < 0)
    assert np.all((sched.alpha_bar[1:] > 0) & (sched.alpha_bar[1:] < 1))


def test_consistency_ratio():
    sched = linear_schedule(300)
    ratio = sched.alpha_bar[1:] / sched.alpha_bar[:-1]
    assert np.allclose(ratio, 1.0 - sched.beta[1:], atol=1e-12, rtol=0)


def test_sigma_is_sqrt_beta():
    sched = linear_schedule(100)
    assert np.allclose(sched.sigma ** 2, sched.beta)


def test_invalid_ranges():
    with pytest.raises(ValueError):
        linear_schedule(10, 0.5, 0.1)
    with pytest.raises(ValueError):
        linear_schedule(0)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.1, 1.0)


class TestSubsequence:
    def test_full_scale_stride(self):
        sub = ddim_subsequence(1000, 50)
        assert sub.steps == tuple(20 * i for i in range(1, 51))

    def test_full_sequence(self):
        sub = ddim_subsequence(7, 7)
        assert sub.steps == (1, 2, 3, 4, 5, 6, 7)

    def test_rounding(self):
        assert ddim_subsequence(10, 3).steps == (3, 7, 10)

    def test_strictly_increasing_last_le_t(self):
        for T, S in [(200, 20), (100, 7), (13, 5)]:
            steps = ddim_subsequence(T, S).steps
            assert all(b > a for a, b in zip(steps, steps[1:]))
            assert steps[-1] <= T

    def test_s_greater_than_t_rejected(self):
        with pytest.raises(ValueError):
            ddim_subsequence(5, 6)
