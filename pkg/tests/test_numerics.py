import numpy as np
import pytest

from plrlab.errors import DimensionError, DomainError, NumericError
from plrlab.numerics import (
    SeededRng,
    batch_moments,
    finite_diff_grad,
    matmul,
    normal_sample,
)


def test_same_seed_same_stream():
    a = SeededRng(123).normal((4, 3))
    b = SeededRng(123).normal((4, 3))
    assert (a == b).all()


def test_different_seeds_differ():
    a = SeededRng(1).normal((100,))
    b = SeededRng(2).normal((100,))
    assert not (a == b).all()


def test_seed_is_masked_to_64_bits():
    big = SeededRng(2**64 + 5)
    small = SeededRng(5)
    assert (big.normal((8,)) == small.normal((8,))).all()


def test_spawn_is_deterministic_and_position_independent():
    parent = SeededRng(7)
    first = parent.spawn(3).normal((5,))
    parent.normal((100,))  # move the parent stream along
    second = parent.spawn(3).normal((5,))
    assert (first == second).all()


def test_spawn_children_are_distinct():
    parent = SeededRng(7)
    a = parent.spawn(0).normal((50,))
    b = parent.spawn(1).normal((50,))
    assert not (a == b).all()


def test_uniform_bounds():
    x = SeededRng(0).uniform(-10.0, 10.0, (1000,))
    assert x.min() >= -10.0 and x.max() < 10.0


def test_permutation_contents():
    p = SeededRng(3).permutation(17)
    assert sorted(p.tolist()) == list(range(17))


class TestNormalSample:
    def test_scale_zero_draws_but_returns_zeros(self):
        # swapping scale must not shift later draws
        r1 = SeededRng(11)
        z = normal_sample(r1, (3, 3), 0.0)
        after_zero = r1.normal((4,))
        r2 = SeededRng(11)
        normal_sample(r2, (3, 3), 0.5)
        after_half = r2.normal((4,))
        assert (z == 0).all()
        assert (after_zero == after_half).all()

    def test_scale_multiplies(self):
        a = normal_sample(SeededRng(5), (100,), 1.0)
        b = normal_sample(SeededRng(5), (100,), 0.01)
        assert np.allclose(b, 0.01 * a)

    def test_negative_scale_rejected(self):
        with pytest.raises(DomainError):
            normal_sample(SeededRng(0), (2,), -0.1)


class TestMatmul:
    def test_hand_value(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        # [1*5+2*6, 3*5+4*6]
        assert out.tolist() == [[17.0], [39.0]]

    def test_rank_checked(self):
        with pytest.raises(DimensionError):
            matmul(np.ones(3), np.ones((3, 2)))

    def test_inner_extent_checked(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((4, 2)))


class TestBatchMoments:
    def test_hand_values_single_axis(self):
        x = np.array([[1.0, 10.0], [2.0, 10.0], [3.0, 10.0]])
        mean, var = batch_moments(x, axis=0)
        assert mean.tolist() == [2.0, 10.0]
        # population variance: ((1)^2 + 0 + 1^2)/3
        assert np.allclose(var, [2.0 / 3.0, 0.0])

    def test_population_not_sample_variance(self):
        x = np.array([[0.0], [2.0]])
        _, var = batch_moments(x)
        assert var[0] == pytest.approx(1.0)  # /N; sample variance would be 2

    def test_multi_axis_matches_loop(self):
        rng = SeededRng(9)
        x = rng.normal((4, 3, 5, 5))
        mean, var = batch_moments(x, axis=(0, 2, 3))
        for c in range(3):
            vals = []
            for n in range(4):
                for i in range(5):
                    for j in range(5):
                        vals.append(x[n, c, i, j])
            vals = np.array(vals)
            assert mean[c] == pytest.approx(vals.mean(), abs=1e-12)
            assert var[c] == pytest.approx(((vals - vals.mean()) ** 2).mean(), abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(DomainError):
            batch_moments(np.zeros((0, 4)))


class TestFiniteDiff:
    def test_cubic_gradient(self):
        x = SeededRng(2).normal((3, 4))
        g = finite_diff_grad(lambda t: float((t**3).sum()), x)
        assert np.allclose(g, 3 * x**2, rtol=1e-6, atol=1e-8)

    def test_does_not_modify_input(self):
        x = np.ones(4)
        before = x.copy()
        finite_diff_grad(lambda t: float((t**2).sum()), x)
        assert (x == before).all()

    def test_bad_eps(self):
        with pytest.raises(DomainError):
            finite_diff_grad(lambda t: 0.0, np.ones(2), eps=0.0)

    def test_nonfinite_evaluation(self):
        with pytest.raises(NumericError):
            finite_diff_grad(lambda t: float("nan"), np.ones(2))
