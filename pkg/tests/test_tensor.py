import numpy as np
import pytest

from ktda import tensor as T
from ktda.tensor import Tensor, ShapeError, gradcheck


def rnd(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestElementwise:
    def test_add_values(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_add_identity(self):
        a = Tensor(rnd(3, 3))
        out = a + 0.0
        np.testing.assert_array_equal(out.data, a.data)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 5)))
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)

    def test_grad_of_sum_a_times_b_is_b(self):
        # finite-difference oracle, step 1e-6
        a = Tensor(rnd(3, 3, seed=1), requires_grad=True)
        b = Tensor(rnd(3, 3, seed=2), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_allclose(a.grad, b.data, rtol=1e-12)
        rep = gradcheck(lambda x, y: (x * y).sum(), [a, b], name="mul-sum", tol=1e-6)
        assert rep.passed, rep

    def test_broadcast_backward_reduces(self):
        a = Tensor(rnd(4, 3, seed=3), requires_grad=True)
        b = Tensor(rnd(3, seed=4), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0), rtol=1e-12)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_gradcheck_elementwise(self, op):
        f = getattr(T, op)
        a = rnd(2, 5, seed=10) + 3.0  # keep div away from zero
        b = rnd(2, 5, seed=11) + 3.0
        rep = gradcheck(
            lambda x, y: f(x, y).sum(),
            [Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)],
            name=op,
            tol=1e-6,
        )
        assert rep.passed, rep


class TestMatmul:
    def test_identity(self):
        x = rnd(3, 4, seed=5)
        out = Tensor(np.eye(3)) @ Tensor(x)
        np.testing.assert_allclose(out.data, x, rtol=1e-15)

    def test_worked_example(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))

    def test_gradcheck_4x5_5x3(self):
        a = Tensor(rnd(4, 5, seed=6), requires_grad=True)
        b = Tensor(rnd(5, 3, seed=7), requires_grad=True)
        rep = gradcheck(lambda x, y: (x @ y).sum(), [a, b], name="matmul", tol=1e-5)
        assert rep.passed, rep

    def test_gradcheck_batched(self):
        a = Tensor(rnd(2, 3, 4, seed=8), requires_grad=True)
        b = Tensor(rnd(4, 5, seed=9), requires_grad=True)
        rep = gradcheck(lambda x, y: ((x @ y) * (x @ y)).sum(), [a, b], name="bmm", tol=1e-5)
        assert rep.passed, rep


class TestConv2d:
    def test_1x1_identity_kernel(self):
        x = rnd(2, 3, 5, 5, seed=12)
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x, rtol=1e-14)

    def test_3x3_ones_center(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, Tensor(np.zeros(1)), pad=1)
        assert out.data[0, 0, 1, 1] == 9.0
        # corners see a 2x2 window of ones
        assert out.data[0, 0, 0, 0] == 4.0

    def test_non_integral_output_raises(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, stride=2, pad=1)

    def test_kernel_size_restricted(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_gradcheck(self):
        x = Tensor(rnd(2, 3, 5, 5, seed=13), requires_grad=True)
        w = Tensor(rnd(4, 3, 3, 3, seed=14) * 0.5, requires_grad=True)
        b = Tensor(rnd(4, seed=15), requires_grad=True)
        rep = gradcheck(
            lambda xx, ww, bb: (T.conv2d(xx, ww, bb, pad=1) ** 2.0).sum(),
            [x, w, b],
            name="conv2d",
            tol=1e-4,
        )
        assert rep.passed, rep

    def test_gradcheck_strided(self):
        # (7 - 3) / 2 + 1 = 3 is integral
        x = Tensor(rnd(1, 2, 7, 7, seed=16), requires_grad=True)
        w = Tensor(rnd(3, 2, 3, 3, seed=17) * 0.5, requires_grad=True)
        rep = gradcheck(
            lambda xx, ww: (T.conv2d(xx, ww, stride=2) ** 2.0).sum(),
            [x, w],
            name="conv2d-s2",
            tol=1e-4,
        )
        assert rep.passed, rep


def bilinear_reference(src, out_h, out_w):
    """Scalar half-pixel bilinear resize, the independent oracle."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = (i + 0.5) * h / out_h - 0.5
            sx = (j + 0.5) * w / out_w - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            top = src[y0c, x0c] * (1 - fx) + src[y0c, x1c] * fx
            bot = src[y1c, x0c] * (1 - fx) + src[y1c, x1c] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


class TestBilinearResize:
    def test_same_size_is_exact_identity(self):
        x = rnd(2, 3, 7, 5, seed=18)
        out = T.bilinear_resize(Tensor(x), 7, 5)
        np.testing.assert_array_equal(out.data, x)

    def test_1x1_constant_extension(self):
        out = T.bilinear_resize(Tensor(np.full((1, 1, 1, 1), 3.5)), 4, 6)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 4, 6), 3.5))

    def test_2x2_to_4x4_frozen_values(self):
        # frozen from the scalar reference oracle
        expected = np.array(
            [
                [0.0, 0.5, 1.5, 2.0],
                [1.0, 1.5, 2.5, 3.0],
                [3.0, 3.5, 4.5, 5.0],
                [4.0, 4.5, 5.5, 6.0],
            ]
        )
        src = np.array([[0.0, 2.0], [4.0, 6.0]])
        np.testing.assert_allclose(bilinear_reference(src, 4, 4), expected, rtol=1e-12)
        out = T.bilinear_resize(Tensor(src.reshape(1, 1, 2, 2)), 4, 4)
        np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-12)

    def test_matches_reference_on_random_sizes(self):
        for seed, (h, w, oh, ow) in enumerate([(3, 5, 7, 2), (8, 8, 3, 3), (2, 2, 9, 9)]):
            src = rnd(h, w, seed=20 + seed)
            out = T.bilinear_resize(Tensor(src.reshape(1, 1, h, w)), oh, ow)
            np.testing.assert_allclose(out.data[0, 0], bilinear_reference(src, oh, ow), rtol=1e-10)

    def test_zero_target_raises(self):
        with pytest.raises(ValueError):
            T.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)

    @pytest.mark.parametrize("oh,ow", [(6, 6), (2, 2)])
    def test_gradcheck(self, oh, ow):
        x = Tensor(rnd(1, 2, 4, 4, seed=23), requires_grad=True)
        rep = gradcheck(
            lambda xx: (T.bilinear_resize(xx, oh, ow) ** 2.0).sum(),
            [x],
            name="bilinear",
            tol=1e-4,
        )
        assert rep.passed, rep


class TestSoftmax:
    def test_constant_input_uniform(self):
        out = T.softmax(Tensor(np.full((3, 4), 2.0)), axis=1)
        np.testing.assert_allclose(out.data, np.full((3, 4), 0.25), rtol=1e-15)

    def test_sums_to_one(self):
        x = rnd(5, 7, seed=24, scale=30.0)
        out = T.softmax(Tensor(x), axis=-1)
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_axis_out_of_bounds(self):
        with pytest.raises(ValueError):
            T.softmax(Tensor(np.zeros((2, 2))), axis=5)

    def test_gradcheck_through_sum_of_squares(self):
        x = Tensor(rnd(3, 6, seed=25), requires_grad=True)
        rep = gradcheck(
            lambda xx: (T.softmax(xx, axis=1) ** 2.0).sum(), [x], name="softmax", tol=1e-5
        )
        assert rep.passed, rep

    def test_log_softmax_gradcheck(self):
        x = Tensor(rnd(3, 6, seed=26), requires_grad=True)
        rep = gradcheck(
            lambda xx: (T.log_softmax(xx, axis=1) * T.log_softmax(xx, axis=1)).sum(),
            [x],
            name="log_softmax",
            tol=1e-5,
        )
        assert rep.passed, rep


class TestActivationsAndNorm:
    def test_relu_values(self):
        out = T.relu(Tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_layernorm_constant_row_zero(self):
        x = Tensor(np.full((2, 5), 3.0))
        out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_layernorm_standardizes(self):
        x = Tensor(rnd(4, 16, seed=27, scale=5.0))
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-3)

    @pytest.mark.parametrize(
        "name,f",
        [
            ("relu", lambda x: (T.relu(x) * T.relu(x)).sum()),
            ("gelu", lambda x: (T.gelu(x) * T.gelu(x)).sum()),
            ("exp", lambda x: T.exp(x).sum()),
            ("sqrt", lambda x: T.sqrt(x * x + 1.0).sum()),
        ],
    )
    def test_gradcheck_unary(self, name, f):
        x = rnd(3, 5, seed=28)
        x = np.where(np.abs(x) < 1e-2, x + 0.5, x)  # keep relu away from the kink
        rep = gradcheck(f, [Tensor(x, requires_grad=True)], name=name, tol=1e-6)
        assert rep.passed, rep

    def test_gradcheck_layernorm(self):
        x = Tensor(rnd(2, 8, seed=29), requires_grad=True)
        g = Tensor(rnd(8, seed=30), requires_grad=True)
        b = Tensor(rnd(8, seed=31), requires_grad=True)
        rep = gradcheck(
            lambda xx, gg, bb: (T.layer_norm(xx, gg, bb) ** 2.0).sum(),
            [x, g, b],
            name="layer_norm",
            tol=1e-4,
        )
        assert rep.passed, rep

    def test_gradcheck_log(self):
        x = Tensor(np.abs(rnd(3, 4, seed=32)) + 0.5, requires_grad=True)
        rep = gradcheck(lambda xx: T.log(xx).sum(), [x], name="log", tol=1e-6)
        assert rep.passed, rep


class TestBackwardGraph:
    def test_sum_grad_is_ones(self):
        a = Tensor(rnd(3, 3, seed=33), requires_grad=True)
        a.sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((3, 3)))

    def test_tensor_used_twice_accumulates(self):
        a = Tensor(rnd(4, seed=34), requires_grad=True)
        (a + a).sum().backward()
        np.testing.assert_array_equal(a.grad, np.full(4, 2.0))

    def test_two_paths_sum(self):
        a = Tensor(rnd(4, seed=35), requires_grad=True)
        b = a * 2.0
        c = a * 3.0
        (b + c).sum().backward()
        np.testing.assert_allclose(a.grad, np.full(4, 5.0), rtol=1e-15)

    def test_backward_on_non_scalar_raises(self):
        a = Tensor(rnd(3, seed=36), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_no_grad_suppresses_graph(self):
        a = Tensor(rnd(3, seed=37), requires_grad=True)
        with T.no_grad():
            out = a * 2.0
        assert out.node is None and not out.requires_grad

    def test_frozen_parent_never_differentiable(self):
        frozen = Tensor(rnd(3, seed=38), requires_grad=False)
        live = Tensor(rnd(3, seed=39), requires_grad=True)
        (frozen * live).sum().backward()
        assert frozen.grad is None
        assert live.grad is not None

    def test_deep_chain_no_recursion_limit(self):
        a = Tensor(np.ones(2), requires_grad=True)
        x = a
        for _ in range(3000):
            x = x + 1.0
        x.sum().backward()
        np.testing.assert_array_equal(a.grad, np.full(2, 1.0))

    def test_determinism(self):
        def run():
            x = Tensor(rnd(4, 4, seed=40), requires_grad=True)
            y = T.softmax(x @ Tensor(rnd(4, 4, seed=41)), axis=1).sum()
            y.backward()
            return y.data.copy(), x.grad.copy()

        y1, g1 = run()
        y2, g2 = run()
        assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


class TestGradcheckHarness:
    def test_linear_function_near_exact(self):
        x = Tensor(rnd(5, seed=42), requires_grad=True)
        rep = gradcheck(lambda xx: (xx * 3.0).sum(), [x], name="linear", tol=1e-9)
        assert rep.passed and rep.max_rel_error < 1e-9

    def test_matmul_chain(self):
        a = Tensor(rnd(3, 3, seed=43), requires_grad=True)
        b = Tensor(rnd(3, 3, seed=44), requires_grad=True)
        rep = gradcheck(lambda x, y: (x @ y @ x).sum(), [a, b], name="chain", tol=1e-6)
        assert rep.passed, rep

    def test_corrupted_backward_detected(self):
        def bad_square(x):
            out_data = x.data**2

            def backward(g):
                x._accumulate(g * 3.0 * x.data)  # wrong rule on purpose

            return T._make(out_data, "bad_square", (x,), backward)

        x = Tensor(rnd(4, seed=45) + 2.0, requires_grad=True)
        rep = gradcheck(lambda xx: bad_square(xx).sum(), [x], name="bad", tol=1e-4)
        assert not rep.passed

    def test_report_invariant(self):
        x = Tensor(rnd(3, seed=46), requires_grad=True)
        rep = gradcheck(lambda xx: (xx * xx).sum(), [x], name="sq", tol=1e-6)
        assert rep.passed == (rep.max_rel_error <= rep.tolerance)

    def test_requires_float64(self):
        with T.precision("float32"):
            x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            gradcheck(lambda xx: xx.sum(), [x], name="f32")


class TestPrecisionModes:
    def test_default_dtype_switch(self):
        with T.precision("float32"):
            assert Tensor(np.ones(3)).dtype == np.float32
        assert Tensor(np.ones(3)).dtype == np.float64

    def test_fd_agreement_many_seeds(self):
        # composite op pipeline agrees with FD on >= 5 seeds
        for seed in range(5):
            x = Tensor(rnd(2, 6, seed=100 + seed), requires_grad=True)
            rep = gradcheck(
                lambda xx: (T.gelu(xx @ Tensor(rnd(6, 3, seed=200 + seed))) ** 2.0).sum(),
                [x],
                name=f"pipeline-{seed}",
                tol=1e-4,
            )
            assert rep.passed, rep
