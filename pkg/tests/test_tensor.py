import numpy as np
import pytest

from vreid import NonFiniteError, ShapeError, Tape, Tensor, backward
from vreid import ops


class TestTensor:
    def test_wraps_contiguous_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.shape == (2, 2)
        assert t.size == 4

    def test_rejects_nan_and_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_grad_accumulates(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        t.accumulate_grad(np.array([1.0, 1.0]))
        t.accumulate_grad(np.array([2.0, 3.0]))
        np.testing.assert_array_equal(t.grad, [3.0, 4.0])
        t.zero_grad()
        assert t.grad is None

    def test_detach_shares_data_without_grad(self):
        t = Tensor([1.0], requires_grad=True)
        d = t.detach()
        assert not d.requires_grad
        assert d.data is t.data

    def test_item_on_scalar(self):
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()


class TestTape:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x)
            backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.scale(x, 2.0)
            with pytest.raises(ShapeError):
                backward(tape, y)

    def test_reuse_accumulates_through_fanout(self):
        # loss = sum(x + x) should give gradient 2 everywhere
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            y = ops.add_maps(x, x)
            loss = ops.sum_all(y)
            backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_no_tape_means_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        y = ops.scale(x, 3.0)
        assert not y.requires_grad

    def test_softmax_cross_entropy_identity(self):
        # analytic gradient of CE(softmax(z), q) w.r.t. z is p - q
        rng = np.random.default_rng(7)
        z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        q = np.zeros((4, 5))
        q[np.arange(4), rng.integers(0, 5, size=4)] = 1.0
        with Tape() as tape:
            p = ops.softmax(z)
            loss = ops.cross_entropy(p, q)
            backward(tape, loss)
        np.testing.assert_allclose(z.grad, (p.data - q) / 4, atol=1e-12)
