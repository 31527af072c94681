"""Optimizer update rules and learning-rate schedules against hand arithmetic."""

import numpy as np
import pytest

import hikfs.autodiff as ad
from hikfs.autodiff import Tensor
from hikfs.optim import SGD, Adam, cosine_lr, halving_lr, make_schedule


def _param(value):
    t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    return t


class TestSGD:
    def test_plain_step(self):
        p = _param([1.0, 2.0])
        p.grad = np.array([0.5, -1.0])
        SGD({"p": p}).step(lr=0.1)
        np.testing.assert_allclose(p.data, [0.95, 2.1], atol=1e-15)

    def test_momentum_and_weight_decay_sequence(self):
        # v <- m*v + g + wd*p ; p <- p - lr*v, two steps by hand.
        p = _param([1.0])
        opt = SGD({"p": p}, momentum=0.9, weight_decay=0.1)
        v = 0.0
        ref = 1.0
        for g in (0.2, -0.3):
            p.grad = np.array([g])
            opt.step(lr=0.5)
            v = 0.9 * v + g + 0.1 * ref
            ref = ref - 0.5 * v
            np.testing.assert_allclose(p.data, [ref], atol=1e-15)

    def test_grads_zeroed_after_step(self):
        p = _param([1.0])
        p.grad = np.array([1.0])
        SGD({"p": p}).step(lr=0.1)
        assert p.grad is None

    def test_missing_grad_names_parameter(self):
        p, q = _param([1.0]), _param([2.0])
        p.grad = np.array([1.0])
        opt = SGD({"weights": p, "bias": q})
        with pytest.raises(RuntimeError, match="bias"):
            opt.step(lr=0.1)

    def test_step_counter_strictly_increases(self):
        p = _param([1.0])
        opt = SGD({"p": p})
        for expected in (1, 2, 3):
            p.grad = np.array([0.1])
            opt.step(lr=0.01)
            assert opt.step_count == expected


class TestAdam:
    def test_two_steps_match_hand_arithmetic(self):
        p = _param([1.0])
        opt = Adam({"p": p})
        b1, b2, eps = 0.9, 0.999, 1e-8
        m = v = 0.0
        ref = 1.0
        for t, g in ((1, 0.3), (2, -0.2)):
            p.grad = np.array([g])
            opt.step(lr=0.01)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            ref = ref - 0.01 * mhat / (np.sqrt(vhat) + eps)
            np.testing.assert_allclose(p.data, [ref], atol=1e-15)

    def test_descends_a_quadratic(self):
        p = _param([5.0])
        opt = Adam({"p": p})
        for _ in range(200):
            loss = ad.mean(ad.mul(p, p))
            loss.backward()
            opt.step(lr=0.1)
        assert abs(p.data[0]) < 0.5


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_lr(0.1, 0, 1000) == pytest.approx(0.1, abs=1e-15)
        assert cosine_lr(0.1, 1000, 1000) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_monotone_decreasing(self):
        vals = [cosine_lr(0.1, s, 100) for s in range(101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_halving_boundary(self):
        assert halving_lr(1e-3, 9999) == pytest.approx(1e-3, rel=1e-15)
        assert halving_lr(1e-3, 10000) == pytest.approx(5e-4, rel=1e-15)
        assert halving_lr(1e-3, 20000) == pytest.approx(2.5e-4, rel=1e-15)

    def test_make_schedule_kinds(self):
        assert make_schedule("constant", 0.2, 10)(7) == 0.2
        assert make_schedule("cosine", 0.2, 10)(0) == pytest.approx(0.2)
        assert make_schedule("halving", 1e-3, 10)(10000) == pytest.approx(5e-4)
        with pytest.raises(ValueError, match="schedule"):
            make_schedule("warmup", 0.1, 10)
