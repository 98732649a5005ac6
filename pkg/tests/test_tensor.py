import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kml.errors import ContractViolation, GraphConfigError
from kml.tensor import (
    GradTape,
    Tensor,
    average_pool,
    broadcast_to,
    col2im,
    constant,
    conv2d,
    dense,
    exp,
    grad,
    grad2,
    im2col,
    log,
    mse,
    no_grad,
    parameter,
    precision,
    relu,
    sgd_step,
    softmax_cross_entropy,
)


class TestGradBasics:
    def test_square(self):
        x = parameter(3.0)
        (g,) = grad(x * x, [x])
        assert g.item() == 6.0

    def test_bilinear(self):
        x, y = parameter(2.0), parameter(5.0)
        gx, gy = grad(x * y, [x, y])
        assert (gx.item(), gy.item()) == (5.0, 2.0)

    def test_nonscalar_loss_rejected(self):
        x = parameter(np.ones(3))
        with pytest.raises(ContractViolation):
            grad(x * x, [x])

    def test_detached_wrt_gets_zeros(self):
        x = parameter(np.ones((2, 2)))
        other = parameter(np.ones((3,)))
        (g,) = grad((x * x).sum(), [other])
        assert np.array_equal(g.data, np.zeros(3))

    def test_two_layer_net_matches_fd(self, rng):
        xin = constant(rng.standard_normal((5, 4)))
        tgt = constant(rng.standard_normal((5, 2)))
        params = [
            parameter(0.5 * rng.standard_normal((4, 6))),
            parameter(0.1 * rng.standard_normal(6)),
            parameter(0.5 * rng.standard_normal((6, 2))),
            parameter(0.1 * rng.standard_normal(2)),
        ]

        def loss_fn(ps):
            h = relu(dense(xin, ps[0], ps[1]))
            return mse(dense(h, ps[2], ps[3]), tgt)

        analytic = grad(loss_fn(params), params)
        numeric = oracles.central_fd(loss_fn, params, h=1e-5)
        assert oracles.max_rel_error(analytic, numeric) < 1e-4

    def test_linearity(self, rng):
        x = parameter(rng.standard_normal((4, 3)))
        a, b = 0.7, -1.3
        l1 = (x * x).sum()
        l2 = exp(x * 0.1).sum()
        combined = grad(a * l1 + b * l2, [x])[0].data
        separate = a * grad(l1, [x])[0].data + b * grad(l2, [x])[0].data
        assert np.max(np.abs(combined - separate)) < 1e-10

    def test_replay_bitwise(self, rng):
        vals = rng.standard_normal((3, 3))

        def build():
            x = parameter(vals)
            l = (relu(x @ x.transpose()) * 0.5).sum()
            return l, grad(l, [x])[0]

        l1, g1 = build()
        l2, g2 = build()
        assert l1.item() == l2.item()
        assert np.array_equal(g1.data, g2.data)

    def test_gradtape_visits_each_node_once(self):
        x = parameter(2.0)
        y = x * x
        z = y + y            # diamond: y consumed twice
        tape = GradTape(z * z)
        assert len(tape.operations) == len({id(t) for t in tape.operations})
        (g,) = tape.gradient([x])
        # d/dx (2x^2)^2 = 16x^3
        assert g.item() == pytest.approx(16 * 2 ** 3)


class TestSecondOrder:
    def test_cubic_second_derivative(self):
        x = parameter(2.0)
        (g,) = grad(x * x * x, [x], create_graph=True)
        (h,) = grad2(g, [x])
        assert h.item() == pytest.approx(12.0)

    def test_quadratic_inner_step_closed_form(self, rng):
        a = rng.standard_normal((3, 3))
        a = a @ a.T + 3.0 * np.eye(3)
        th0 = rng.standard_normal((3, 1))
        alpha = 0.05
        th = parameter(th0)
        ac = constant(a)

        def quad(t):
            return (0.5 * (t.transpose() @ (ac @ t))).reshape(())

        (g,) = grad(quad(th), [th], create_graph=True)
        meta = quad(th - alpha * g)
        (mg,) = grad2(meta, [th])
        closed = (np.eye(3) - alpha * a) @ a @ (th0 - alpha * a @ th0)
        rel = np.abs(mg.data - closed) / np.maximum(np.abs(closed), 1e-9)
        assert rel.max() < 1e-8

    def test_first_order_freezes_inner_gradient(self, rng):
        a = rng.standard_normal((3, 3))
        a = a @ a.T + 3.0 * np.eye(3)
        th0 = rng.standard_normal((3, 1))
        alpha = 0.1
        th = parameter(th0)
        ac = constant(a)

        def quad(t):
            return (0.5 * (t.transpose() @ (ac @ t))).reshape(())

        (g,) = grad(quad(th), [th], create_graph=True)
        meta = quad(th - alpha * g)
        (fo,) = grad2(meta, [th], first_order=True)
        frozen_expected = a @ (th0 - alpha * a @ th0)
        assert np.max(np.abs(fo.data - frozen_expected)) < 1e-12

    def test_frozen_inner_gradient_raises(self):
        th = parameter(np.ones((2, 1)))
        loss = (th * th).sum()
        (g,) = grad(loss, [th])  # recorded without create_graph
        meta = ((th - 0.1 * g) * (th - 0.1 * g)).sum()
        with pytest.raises(GraphConfigError):
            grad2(meta, [th])
        # but the first-order reading is fine
        (fo,) = grad2(meta, [th], first_order=True)
        assert fo.shape == (2, 1)


class TestPrimitivesAgainstFD:
    CASES = [
        ("add", lambda ps: (ps[0] + ps[1]).sum(), [(3, 4), (3, 4)]),
        ("add_broadcast", lambda ps: (ps[0] + ps[1]).sum(), [(3, 4), (4,)]),
        ("sub", lambda ps: (ps[0] - ps[1] * 2.0).sum(), [(2, 5), (2, 5)]),
        ("mul", lambda ps: (ps[0] * ps[1]).sum(), [(4, 2), (4, 2)]),
        ("div", lambda ps: (ps[0] / (ps[1] * ps[1] + 2.0)).sum(), [(3, 3), (3, 3)]),
        ("exp", lambda ps: exp(ps[0] * 0.3).sum(), [(3, 4)]),
        ("log", lambda ps: log(ps[0] * ps[0] + 1.5).sum(), [(3, 4)]),
        ("matmul", lambda ps: (ps[0] @ ps[1]).sum(), [(3, 4), (4, 2)]),
        ("transpose", lambda ps: (ps[0].transpose((1, 0)) @ ps[0]).sum(), [(3, 4)]),
        ("reshape", lambda ps: (ps[0].reshape((6,)) * ps[0].reshape((6,))).sum(), [(2, 3)]),
        ("broadcast", lambda ps: (broadcast_to(ps[0], (4, 3)) * 1.5).sum(), [(1, 3)]),
        ("sum_axis", lambda ps: (ps[0].sum(axis=1) * ps[0].sum(axis=1)).sum(), [(3, 4)]),
        ("mean", lambda ps: (ps[0].mean(axis=(1, 2)) * 2.0).sum(), [(2, 3, 4)]),
        ("relu", lambda ps: (relu(ps[0]) * ps[0]).sum(), [(4, 4)]),
        ("im2col", lambda ps: (im2col(ps[0], 3, 2, 1) * 0.5).sum(), [(2, 2, 6, 6)]),
        ("col2im", lambda ps: (col2im(ps[0], (1, 2, 5, 5), 3, 2, 1) * 0.5).sum(), [(1, 18, 4)]),
        ("avg_pool", lambda ps: (average_pool(ps[0], 2) * 2.0).sum(), [(2, 2, 4, 4)]),
        ("mse", lambda ps: mse(ps[0], ps[1]), [(3, 4), (3, 4)]),
    ]

    @pytest.mark.parametrize("name,loss_fn,shapes", CASES, ids=[c[0] for c in CASES])
    def test_primitive_fd(self, name, loss_fn, shapes, rng):
        params = [parameter(rng.standard_normal(s)) for s in shapes]
        analytic = grad(loss_fn(params), params)
        numeric = oracles.central_fd(loss_fn, params, h=1e-5)
        assert oracles.max_rel_error(analytic, numeric) < 1e-4

    def test_conv2d_fd(self, rng):
        x = parameter(rng.standard_normal((2, 2, 5, 5)))
        w = parameter(rng.standard_normal((3, 2, 3, 3)))
        b = parameter(rng.standard_normal(3))

        def loss_fn(ps):
            return (conv2d(ps[0], ps[1], ps[2], stride=2, padding=1) * 0.5).sum()

        analytic = grad(loss_fn([x, w, b]), [x, w, b])
        numeric = oracles.central_fd(loss_fn, [x, w, b], h=1e-5)
        assert oracles.max_rel_error(analytic, numeric) < 1e-4

    def test_softmax_ce_fd(self, rng):
        logits = parameter(rng.standard_normal((6, 4)))
        labels = rng.integers(0, 4, size=6)

        def loss_fn(ps):
            return softmax_cross_entropy(ps[0], labels)

        analytic = grad(loss_fn([logits]), [logits])
        numeric = oracles.central_fd(loss_fn, [logits], h=1e-5)
        assert oracles.max_rel_error(analytic, numeric) < 1e-4


class TestConv:
    def test_identity_1x1(self, rng):
        x = constant(rng.standard_normal((2, 1, 4, 4)))
        w = constant(np.ones((1, 1, 1, 1)))
        b = constant(np.zeros(1))
        out = conv2d(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_all_ones_3x3_on_constant_image(self):
        c = 0.7
        x = constant(np.full((1, 1, 5, 5), c))
        w = constant(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, constant(np.zeros(1)))  # valid padding
        assert np.allclose(out.data, 9 * c)

    def test_matches_loop_oracle(self, rng):
        x = constant(rng.standard_normal((2, 3, 7, 7)))
        w = constant(rng.standard_normal((4, 3, 3, 3)))
        b = constant(rng.standard_normal(4))
        ours = conv2d(x, w, b, stride=2, padding=1).data
        ref = oracles.loop_conv2d(x.data, w.data, b.data, stride=2, padding=1)
        assert np.max(np.abs(ours - ref)) < 1e-12

    def test_channel_mismatch_rejected(self, rng):
        x = constant(rng.standard_normal((1, 2, 5, 5)))
        w = constant(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ContractViolation):
            conv2d(x, w, constant(np.zeros(1)))

    def test_im2col_col2im_adjoint(self, rng):
        x = constant(rng.standard_normal((2, 3, 6, 6)))
        cols = constant(rng.standard_normal((2, 27, 9)))
        lhs = float((im2col(x, 3, 2, 1).data * cols.data).sum())
        rhs = float((x.data * col2im(cols, (2, 3, 6, 6), 3, 2, 1).data).sum())
        assert abs(lhs - rhs) < 1e-10


class TestOtherPrimitives:
    def test_softmax_ce_uniform_is_log_n(self):
        for n in (2, 5, 7):
            logits = constant(np.zeros((3, n)))
            assert softmax_cross_entropy(logits, [0, 1, 0][:3]).item() == pytest.approx(np.log(n))

    def test_relu_values(self):
        out = relu(constant([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_sgd_step_zero_lr_is_bitwise_identity(self, rng):
        p = parameter(rng.standard_normal((3, 3)))
        g = constant(rng.standard_normal((3, 3)))
        (out,) = sgd_step([p], [g], 0.0)
        assert out is p

    def test_sgd_step_does_not_mutate(self, rng):
        arr = rng.standard_normal(4)
        p = parameter(arr)
        g = constant(np.ones(4))
        (out,) = sgd_step([p], [g], 0.5)
        assert np.array_equal(p.data, arr)
        assert np.allclose(out.data, arr - 0.5)

    def test_average_pool_window(self):
        x = constant(np.arange(16.0).reshape(1, 1, 4, 4))
        out = average_pool(x, 2)
        expect = np.array([[2.5, 4.5], [10.5, 12.5]])
        assert np.allclose(out.data[0, 0], expect)

    def test_average_pool_indivisible_rejected(self):
        with pytest.raises(ContractViolation):
            average_pool(constant(np.zeros((1, 1, 5, 5))), 2)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=50, deadline=None)
    def test_mul_grads_hypothesis(self, a, b):
        x, y = parameter(a), parameter(b)
        gx, gy = grad(x * y, [x, y])
        assert gx.item() == b
        assert gy.item() == a


class TestPrecisionAndImmutability:
    def test_precision_switch(self):
        with precision("f32"):
            t = constant([1.0, 2.0])
            assert t.dtype == np.float32
        assert constant([1.0]).dtype == np.float64

    def test_f32_pipeline(self, rng):
        with precision("f32"):
            x = parameter(rng.standard_normal((2, 4)).astype(np.float32))
            w = parameter(rng.standard_normal((4, 3)).astype(np.float32))
            loss = (x @ w).sum()
            gs = grad(loss, [x, w])
            assert loss.dtype == np.float32
            assert all(g.dtype == np.float32 for g in gs)

    def test_tensor_data_is_readonly(self):
        t = constant(np.ones(3))
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_no_grad_blocks_recording(self):
        x = parameter(1.0)
        with no_grad():
            y = x * x
        assert y.node is None
