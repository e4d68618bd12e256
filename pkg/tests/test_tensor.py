"""Tensor ops: hand cases, oracle comparisons, gradient soundness, serialization."""

import io

import numpy as np
import pytest

from rvoslab import tensor as T
from rvoslab.params import ParamStore

import oracles


def rng_for(name, idx=0):
    return np.random.Generator(np.random.PCG64([hash(name) & 0xFFFF, idx]))


def check_grad(build, leaves, rtol=1e-6, step=1e-5):
    """Autodiff gradients of build() vs central finite differences."""
    loss = build()
    loss.backward()
    for leaf in leaves:
        ad = leaf.grad.copy()
        fd = oracles.finite_diff(lambda: build().item(), leaf.data, step=step)
        assert oracles.rel_err(ad, fd) <= rtol, f"gradient mismatch on leaf {leaf.shape}"
        leaf.zero_grad()


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = T.Tensor(np.eye(2))
        out = T.matmul(eye, a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_case(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_against_loops(self):
        rng = rng_for("matmul")
        for _ in range(5):
            a = rng.standard_normal((4, 3))
            b = rng.standard_normal((3, 5))
            got = T.matmul(T.Tensor(a), T.Tensor(b)).data
            np.testing.assert_allclose(got, oracles.matmul_loops(a, b), rtol=1e-12)

    def test_gradients(self):
        rng = rng_for("matmul-grad")
        a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        c = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.matmul(T.matmul(a, b), c)), [a, b, c])


class TestConv2d:
    def test_1x1_identity_kernel(self):
        rng = rng_for("conv-id")
        x = rng.standard_normal((5, 4, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        out = T.conv2d(T.Tensor(x), T.Tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel(self):
        x = rng_for("conv-zero").standard_normal((4, 4, 2))
        out = T.conv2d(T.Tensor(x), T.Tensor(np.zeros((3, 3, 2, 5))))
        assert not out.data.any()

    def test_ones_kernel_hand_case(self):
        out = T.conv2d(T.Tensor(np.ones((3, 3, 1))), T.Tensor(np.ones((3, 3, 1, 1))))
        assert out.data[1, 1, 0] == 9.0
        for corner in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out.data[corner + (0,)] == 4.0

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.conv2d(T.Tensor(np.zeros((4, 4, 2))), T.Tensor(np.zeros((3, 3, 3, 1))))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_against_loops(self, stride):
        rng = rng_for("conv-rand", stride)
        x = rng.standard_normal((5, 6, 2))
        k = rng.standard_normal((3, 3, 2, 4))
        got = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride).data
        np.testing.assert_allclose(got, oracles.conv2d_loops(x, k, stride), rtol=1e-12)

    def test_batched_matches_per_frame(self):
        rng = rng_for("conv-batch")
        x = rng.standard_normal((3, 4, 4, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        batched = T.conv2d(T.Tensor(x), T.Tensor(k)).data
        for t in range(3):
            single = T.conv2d(T.Tensor(x[t]), T.Tensor(k)).data
            np.testing.assert_array_equal(batched[t], single)

    def test_gradients(self):
        rng = rng_for("conv-grad")
        x = T.Tensor(rng.standard_normal((4, 5, 2)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((3, 3, 2, 3)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.conv2d(x, k), 2.0)), [x, k])


class TestTemporalConv1d:
    def test_center_tap_identity(self):
        rng = rng_for("tconv-id")
        x = rng.standard_normal((6, 3))
        k = np.zeros((3, 3, 3))
        k[1] = np.eye(3)
        out = T.temporal_conv1d(T.Tensor(x), T.Tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_uniform_taps_on_constant(self):
        x = np.full((5, 1), 2.0)
        k = np.full((3, 1, 1), 1.0 / 3.0)
        out = T.temporal_conv1d(T.Tensor(x), T.Tensor(k)).data
        np.testing.assert_allclose(out[1:-1, 0], 2.0, rtol=1e-12)
        np.testing.assert_allclose(out[[0, -1], 0], 2.0 * 2.0 / 3.0, rtol=1e-12)

    def test_single_frame_identity(self):
        k = np.zeros((3, 2, 2))
        k[1] = np.eye(2)
        x = np.array([[1.5, -2.0]])
        out = T.temporal_conv1d(T.Tensor(x), T.Tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_against_loops_spatial_sites(self):
        rng = rng_for("tconv-rand")
        x = rng.standard_normal((4, 2, 3, 2))
        k = rng.standard_normal((3, 2, 2))
        got = T.temporal_conv1d(T.Tensor(x), T.Tensor(k)).data
        np.testing.assert_allclose(got, oracles.temporal_conv1d_loops(x, k), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.temporal_conv1d(T.Tensor(np.zeros((4, 3))), T.Tensor(np.zeros((3, 2, 2))))

    def test_gradients(self):
        rng = rng_for("tconv-grad")
        x = T.Tensor(rng.standard_normal((4, 2, 2)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.temporal_conv1d(x, k), 2.0)), [x, k])


class TestPixelShuffle:
    def test_d1_identity(self):
        x = rng_for("ps-1").standard_normal((3, 4, 1))
        out = T.pixel_shuffle(T.Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_layout_hand_case(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4)
        out = T.pixel_shuffle(T.Tensor(x))
        np.testing.assert_array_equal(out.data[:, :, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_not_square(self):
        with pytest.raises(T.NotSquare):
            T.pixel_shuffle(T.Tensor(np.zeros((2, 2, 3))))

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_inverse_roundtrip(self, d):
        x = rng_for("ps-inv", d).standard_normal((3, 5, d * d))
        shuffled = T.pixel_shuffle(T.Tensor(x))
        back = T.pixel_unshuffle(shuffled, d)
        np.testing.assert_array_equal(back.data, x)

    def test_gradients(self):
        x = T.Tensor(rng_for("ps-grad").standard_normal((2, 3, 4)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.pixel_shuffle(x), 2.0)), [x])


class TestUpsample:
    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    @pytest.mark.parametrize("factor", [2, 4])
    def test_constant_invariance(self, mode, factor):
        x = np.full((3, 4, 2), 1.25)
        out = T.upsample(T.Tensor(x), factor, mode).data
        assert out.shape == (3 * factor, 4 * factor, 2)
        np.testing.assert_array_equal(out, np.full(out.shape, 1.25))

    def test_nearest_replicates(self):
        out = T.upsample(T.Tensor([[[3.0]]]), 2, "nearest").data
        np.testing.assert_array_equal(out, np.full((2, 2, 1), 3.0))

    def test_bilinear_column_hand_case(self):
        x = np.array([0.0, 1.0]).reshape(2, 1, 1)
        out = T.upsample(T.Tensor(x), 2, "bilinear").data
        np.testing.assert_allclose(out[:, 0, 0], [0.0, 0.25, 0.75, 1.0], rtol=1e-15)

    @pytest.mark.parametrize("factor", [2, 4])
    def test_bilinear_against_loops(self, factor):
        x = rng_for("up-rand", factor).standard_normal((3, 5, 2))
        got = T.upsample(T.Tensor(x), factor, "bilinear").data
        np.testing.assert_allclose(got, oracles.bilinear2d_loops(x, factor), rtol=1e-12)

    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_gradients(self, mode):
        x = T.Tensor(rng_for("up-grad").standard_normal((3, 4, 2)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.upsample(x, 2, mode), 2.0)), [x])


class TestAvgPool:
    def test_mean_blocks(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        out = T.avg_pool(T.Tensor(x), 2).data
        np.testing.assert_array_equal(out[:, :, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_gradients(self):
        x = T.Tensor(rng_for("pool-grad").standard_normal((4, 4, 2)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.avg_pool(x, 2), 2.0)), [x])


class TestBackward:
    def test_square_gradient(self):
        x = T.Tensor(3.0, requires_grad=True)
        loss = T.mul(x, x)
        loss.backward()
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_loss(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.NonScalarLoss):
            x.backward()

    def test_unreachable_parameter_gets_zero_grad(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.Tensor([3.0], requires_grad=True)
        loss = T.tensor_sum(T.mul(x, x))
        loss.backward()
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_matmul_chain_vs_finite_diff(self):
        rng = rng_for("chain")
        a = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.relu(T.matmul(T.matmul(a, b), a))), [a, b])

    def test_shared_node_accumulates(self):
        x = T.Tensor(2.0, requires_grad=True)
        y = T.mul(x, x)
        loss = T.add(y, y)
        loss.backward()
        assert x.grad == pytest.approx(8.0)


class TestElementwiseGradients:
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "maximum", "minimum"])
    def test_binary(self, op):
        rng = rng_for("elem", len(op))
        a = T.Tensor(rng.standard_normal((3, 4)) + 3.0, requires_grad=True)
        b = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        fn = getattr(T, op if op not in ("add", "sub", "mul", "div") else op)
        check_grad(lambda: T.tensor_sum(T.power(fn(a, b), 2.0)), [a, b])

    @pytest.mark.parametrize("op", ["relu", "sigmoid", "softplus", "exp", "sqrt", "absolute"])
    def test_unary(self, op):
        rng = rng_for("unary", len(op))
        base = rng.standard_normal((3, 4))
        if op == "sqrt":
            base = np.abs(base) + 0.5
        a = T.Tensor(base, requires_grad=True)
        fn = getattr(T, op)
        check_grad(lambda: T.tensor_sum(T.power(fn(a), 2.0)), [a])

    def test_log(self):
        a = T.Tensor(np.abs(rng_for("log").standard_normal((3, 3))) + 0.5, requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.log(a)), [a])

    def test_broadcast_mul(self):
        rng = rng_for("bcast")
        a = T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((4,)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.mul(a, b), 2.0)), [a, b])

    def test_softmax_rows_sum_to_one(self):
        x = T.softmax(T.Tensor(rng_for("sm").standard_normal((4, 6))), axis=-1)
        np.testing.assert_allclose(x.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_gradients(self):
        a = T.Tensor(rng_for("sm-grad").standard_normal((3, 5)), requires_grad=True)
        w = rng_for("sm-grad", 1).standard_normal((3, 5))
        check_grad(lambda: T.tensor_sum(T.mul(T.softmax(a, axis=-1), w)), [a])

    def test_structural_gradients(self):
        rng = rng_for("struct")
        a = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)

        def build():
            top = T.narrow(a, 0, 0, 2)
            picked = T.gather_rows(a, [0, 2, 2])
            joined = T.concat([top, picked], axis=0)
            return T.tensor_sum(T.power(T.transpose(joined, (1, 0)), 2.0))

        check_grad(build, [a])

    def test_bmm_gradients(self):
        rng = rng_for("bmm")
        a = T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
        check_grad(lambda: T.tensor_sum(T.power(T.bmm(a, b), 2.0)), [a, b])


class TestDeterminism:
    def test_ops_bit_identical(self):
        rng = rng_for("det")
        x = rng.standard_normal((6, 6, 4))
        k = rng.standard_normal((3, 3, 4, 4))
        a = T.conv2d(T.Tensor(x), T.Tensor(k)).data
        b = T.conv2d(T.Tensor(x.copy()), T.Tensor(k.copy())).data
        assert a.tobytes() == b.tobytes()

    def test_no_nan_inf_from_listed_ops(self):
        rng = rng_for("finite")
        x = rng.standard_normal((4, 4, 4)) * 1e3
        k = rng.standard_normal((3, 3, 4, 4)) * 1e3
        for out in [
            T.conv2d(T.Tensor(x), T.Tensor(k)).data,
            T.temporal_conv1d(T.Tensor(x), T.Tensor(rng.standard_normal((3, 4, 4)))).data,
            T.pixel_shuffle(T.Tensor(x)).data,
            T.upsample(T.Tensor(x), 2, "bilinear").data,
        ]:
            assert np.isfinite(out).all()


class TestParamStore:
    def test_init_pure_function_of_name_and_seed(self):
        s1 = ParamStore(7)
        s2 = ParamStore(7)
        a1 = s1.get("enc.w", (4, 4))
        _ = s2.get("other.w", (2, 2))
        a2 = s2.get("enc.w", (4, 4))
        np.testing.assert_array_equal(a1.data, a2.data)

    def test_different_seed_differs(self):
        a = ParamStore(1).get("w", (8, 8))
        b = ParamStore(2).get("w", (8, 8))
        assert not np.array_equal(a.data, b.data)

    def test_fan_in_scale(self):
        p = ParamStore(3).get("w", (100, 50))
        assert np.abs(p.data).max() <= np.sqrt(1.0 / 100) + 1e-12

    def test_shape_reuse_error(self):
        s = ParamStore(0)
        s.get("w", (2, 2))
        with pytest.raises(ValueError):
            s.get("w", (3, 3))

    def test_roundtrip(self):
        s = ParamStore(11)
        s.get("b.w", (3, 2))
        s.get("a.w", (2,), init="zeros")
        buf = io.BytesIO()
        s.write(buf)
        buf.seek(0)
        s2 = ParamStore.read(buf, 11)
        assert s2.names() == sorted(s.names())
        for name, p in s.items():
            np.testing.assert_array_equal(s2.get(name, p.shape).data, p.data)


class TestTensorSerialization:
    def test_roundtrip_bit_exact(self):
        arr = rng_for("ser").standard_normal((2, 3, 4))
        buf = io.BytesIO()
        T.write_tensor(buf, arr)
        buf.seek(0)
        back = T.read_tensor(buf)
        assert back.tobytes() == arr.tobytes()
        assert back.shape == arr.shape

    def test_header_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.zeros((2, 5)))
        raw = buf.getvalue()
        assert raw[:4] == b"TNS1"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 5

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            T.read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))
