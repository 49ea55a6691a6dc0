import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miso.engine import (
    BACKWARD_RULES,
    Adam,
    AdamMoments,
    DomainError,
    GradientError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    grad_check,
    no_grad,
    ops,
)


def central_diff(f, x, h=1e-5):
    """Numeric gradient of a scalar numpy function (independent of the tape)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, n, floor=1e-8):
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))


def tape_grad(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        backward(fn(*ts))
    return [t.grad for t in ts]


class TestForward:
    def test_add(self):
        np.testing.assert_array_equal(ops.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_exp_identity(self):
        np.testing.assert_array_equal(ops.exp(Tensor([0, 0, 0])).data, [1, 1, 1])

    def test_matmul_identity(self):
        x = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal((x @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])

    def test_matmul_small(self):
        np.testing.assert_array_equal((Tensor([[1, 2]]) @ Tensor([[3], [4]])).data, [[11]])

    def test_sum(self):
        assert ops.sum(Tensor([1, 2, 3])).item() == 6

    def test_mean_empty_axes_is_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert ops.mean(x, axes=()) is x

    def test_broadcast_trailing(self):
        out = ops.add(Tensor(np.ones((3, 2))), Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [[2, 3]] * 3)

    @pytest.mark.parametrize("shapes", [((3, 2), (3,)), ((2, 3), (2, 1, 3)), ((4,), (2,))])
    def test_broadcast_rejects_misaligned(self, shapes):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones(shapes[0])), Tensor(np.ones(shapes[1])))

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            ops.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            ops.sqrt(Tensor([-1.0]))
        with pytest.raises(DomainError):
            ops.div(Tensor([1.0]), Tensor([0.0]))

    def test_non_finite_forward(self):
        with pytest.raises(NonFiniteError):
            ops.exp(Tensor([1000.0]))

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ops.sum(Tensor(np.ones((2, 2))), axes=2)

    def test_sigmoid_extremes_stay_finite(self):
        out = ops.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


UNARY = {
    "neg": (ops.neg, np.negative),
    "exp": (ops.exp, np.exp),
    "square": (ops.square, np.square),
    "tanh": (ops.tanh, np.tanh),
    "sigmoid": (ops.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "leaky_relu": (ops.leaky_relu, lambda x: np.where(x > 0, x, 0.2 * x)),
    "abs": (ops.abs, np.abs),
}
POSITIVE = {"log": (ops.log, np.log), "sqrt": (ops.sqrt, np.sqrt)}
BINARY = {
    "add": (ops.add, np.add),
    "sub": (ops.sub, np.subtract),
    "mul": (ops.mul, np.multiply),
    "div": (ops.div, np.divide),
}


def _away_from_zero(x, margin=1e-3):
    return np.where(np.abs(x) < margin, margin, x)


class TestGradients:
    """Reverse mode vs. central differences (h = 1e-5), max rel. error < 1e-6."""

    rng = np.random.default_rng(0)

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name):
        op, ref = UNARY[name]
        x = _away_from_zero(self.rng.uniform(-2, 2, (3, 4)))
        w = self.rng.uniform(-1, 1, (3, 4))
        (g,) = tape_grad(lambda t: ops.sum(op(t) * w), x)
        assert rel_err(g, central_diff(lambda a: np.sum(ref(a) * w), x)) < 1e-6

    @pytest.mark.parametrize("name", sorted(POSITIVE))
    def test_positive_domain(self, name):
        op, ref = POSITIVE[name]
        x = self.rng.uniform(0.1, 2, (5,))
        (g,) = tape_grad(lambda t: ops.sum(op(t)), x)
        assert rel_err(g, central_diff(lambda a: np.sum(ref(a)), x)) < 1e-6

    @pytest.mark.parametrize("name", sorted(BINARY))
    @pytest.mark.parametrize("yshape", [(3, 4), (4,)])
    def test_binary(self, name, yshape):
        op, ref = BINARY[name]
        x = self.rng.uniform(-2, 2, (3, 4))
        y = self.rng.uniform(0.5, 2, yshape) * self.rng.choice([-1, 1], yshape)
        gx, gy = tape_grad(lambda a, b: ops.sum(op(a, b)), x, y)
        assert rel_err(gx, central_diff(lambda a: np.sum(ref(a, y)), x)) < 1e-6
        assert rel_err(gy, central_diff(lambda b: np.sum(ref(x, b)), y)) < 1e-6

    def test_abs_matches_fd(self):
        x = _away_from_zero(self.rng.uniform(-2, 2, 6))
        (g,) = tape_grad(lambda t: ops.sum(ops.abs(t)), x)
        assert rel_err(g, central_diff(lambda a: np.abs(a).sum(), x)) < 1e-6

    def test_abs_subgradient_zero(self):
        (g,) = tape_grad(lambda t: ops.sum(ops.abs(t)), np.array([0.0, 1.0, -1.0]))
        np.testing.assert_array_equal(g, [0.0, 1.0, -1.0])

    def test_matmul(self):
        x = self.rng.uniform(-2, 2, (3, 4))
        y = self.rng.uniform(-2, 2, (4, 2))
        w = self.rng.uniform(-1, 1, (3, 2))
        gx, gy = tape_grad(lambda a, b: ops.sum((a @ b) * w), x, y)
        assert rel_err(gx, central_diff(lambda a: np.sum((a @ y) * w), x)) < 1e-6
        assert rel_err(gy, central_diff(lambda b: np.sum((x @ b) * w), y)) < 1e-6

    @pytest.mark.parametrize("axes", [None, 0, 1, (0, 1)])
    def test_mean(self, axes):
        x = self.rng.uniform(-2, 2, (3, 4))
        w = self.rng.uniform(-1, 1, np.mean(x, axis=axes).shape)
        (g,) = tape_grad(lambda t: ops.sum(ops.mean(t, axes) * w), x)
        assert rel_err(g, central_diff(lambda a: np.sum(np.mean(a, axis=axes) * w), x)) < 1e-6

    def test_mean_gradient_is_one_over_n(self):
        (g,) = tape_grad(ops.mean, np.ones((2, 5)))
        np.testing.assert_allclose(g, np.full((2, 5), 0.1), rtol=0, atol=1e-15)

    def test_concat_take_clamp(self):
        x = self.rng.uniform(-2, 2, (3, 2))
        y = self.rng.uniform(-2, 2, (3, 3))
        w = self.rng.uniform(-1, 1, (3, 2))

        def f(a, b):
            c = ops.concat([a, b], axis=1)
            return ops.sum(ops.clamp(c[:, 1:3], -1.0, 1.0) * w)

        def ref(a, b):
            return np.sum(np.clip(np.concatenate([a, b], 1)[:, 1:3], -1, 1) * w)

        gx, gy = tape_grad(f, x, y)
        assert rel_err(gx, central_diff(lambda a: ref(a, y), x)) < 1e-6
        assert rel_err(gy, central_diff(lambda b: ref(x, b), y)) < 1e-6


class TestBackward:
    def test_square_sum(self):
        (g,) = tape_grad(lambda t: ops.sum(ops.square(t)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_unused_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        with Tape():
            _ = y * 2.0
            backward(ops.sum(x * 3.0))
        np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    def test_fan_out_accumulates(self):
        (g,) = tape_grad(lambda t: ops.sum(t * t + t), np.array([2.0]))
        np.testing.assert_array_equal(g, [5.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape(), pytest.raises(GradientError):
            backward(x * 2.0)

    def test_detached_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = ops.sum(x * 2.0)
        with Tape(), pytest.raises(GradientError):
            backward(loss)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape, no_grad():
            ops.exp(x)
        assert len(tape) == 0

    def test_linearity(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))

        def l1():
            return ops.mean(ops.tanh(x @ w))

        def l2():
            return ops.sum(ops.square(x @ w))

        with Tape():
            backward(l1() + l2())
        both = w.grad
        w.grad = None
        with Tape():
            backward(l1())
        with Tape():
            backward(l2())
        np.testing.assert_allclose(both, w.grad, rtol=1e-13, atol=1e-13)

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(4)
        w0 = rng.normal(size=(3, 3))
        x = rng.normal(size=(2, 3))
        results = []
        for _ in range(2):
            w = Tensor(w0, requires_grad=True)
            with Tape():
                loss = ops.mean(ops.sigmoid(Tensor(x) @ w))
                backward(loss)
            results.append((loss.data.tobytes(), w.grad.tobytes()))
        assert results[0] == results[1]

    def test_tape_is_topologically_ordered(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.exp(x) * x
            ops.sum(y)
        seen = set()
        for rec in tape.records:
            for t in rec.inputs:
                if t.node is not None:
                    assert id(t) in seen
            seen.add(id(rec.out))

    def test_clear(self):
        x = Tensor([1.0], requires_grad=True)
        tape = Tape()
        with tape:
            loss = ops.sum(x * 2.0)
        tape.clear()
        assert len(tape) == 0 and loss.node is None


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6))
def test_tanh_mul_chain_matches_fd(values):
    x = np.array(values)
    (g,) = tape_grad(lambda t: ops.sum(ops.tanh(t) * t), x)
    # FD roundoff is ~1e-11 absolute, so near-zero gradients are compared against a floor
    assert rel_err(g, central_diff(lambda a: np.sum(np.tanh(a) * a), x), floor=1e-4) < 1e-6


class TestGradCheck:
    def test_square_at_three(self):
        x = Tensor([3.0], requires_grad=True)
        report = grad_check(lambda: ops.sum(ops.square(x)), [x], h=1e-5, tol=1e-9)
        assert report.passed, report.max_rel_error

    def test_constant(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        report = grad_check(lambda: ops.sum(x * 0.0) + 5.0, [x])
        assert report.worst == 0.0

    def test_detects_broken_rule(self, monkeypatch):
        monkeypatch.setitem(BACKWARD_RULES, "tanh", lambda g, r: (g,))
        x = Tensor([0.5, -1.0], requires_grad=True)
        report = grad_check(lambda: ops.sum(ops.tanh(x)), [x], names=["x"])
        assert not report.passed and report.failures() == ["x"]

    def test_non_finite_perturbation(self):
        x = Tensor([1e-6], requires_grad=True)
        with pytest.raises((NonFiniteError, DomainError)):
            grad_check(lambda: ops.sum(ops.log(x)), [x], h=1e-5)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        adam_step([p], [np.zeros(2)], AdamMoments.zeros_like([p]), lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_sign(self):
        p = Tensor([0.0, 0.0, 0.0], requires_grad=True)
        g = np.array([3.0, -0.01, 250.0])
        adam_step([p], [g], AdamMoments.zeros_like([p]), lr=0.1, beta1=0.5, beta2=0.999, eps=1e-8)
        np.testing.assert_allclose(p.data, -0.1 * np.sign(g), rtol=1e-5)

    def test_quadratic_converges(self):
        # scalar recurrence written out independently of adam_step
        x_ref, m, v = 5.0, 0.0, 0.0
        for t in range(1, 101):
            g = 2 * x_ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x_ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        p = Tensor([5.0], requires_grad=True)
        opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
        for _ in range(100):
            opt.zero_grad()
            with Tape():
                backward(ops.sum(ops.square(p)))
            opt.step()
        assert abs(p.data[0]) < 0.5
        assert p.data[0] == pytest.approx(x_ref, rel=1e-12, abs=1e-12)

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0])
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(3)], AdamMoments.zeros_like([p]), lr=0.1)
