import math

import numpy as np
import pytest

from ktda import tensor as T
from ktda.losses import (
    LossToggles,
    LossWeights,
    ce_loss,
    da_loss,
    kl_loss,
    kt_loss,
    mse_loss,
    total_loss,
)
from ktda.model import SegOutput
from ktda.tensor import Tensor, gradcheck


def pyr(*arrays, grad=False):
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad) for a in arrays]


def random_pyramid(seed, scales=2, shape=(1, 4, 3, 3), grad=False, scale=1.0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.standard_normal(shape) * scale, requires_grad=grad) for _ in range(scales)]


class TestMse:
    def test_identical_pyramids_zero(self):
        a = random_pyramid(0)
        assert mse_loss(a, a).item() == 0.0

    def test_worked_example(self):
        s = pyr([[1.0, 2.0]])
        t = pyr([[0.0, 0.0]])
        assert mse_loss(s, t).item() == pytest.approx(2.5, abs=1e-12)

    def test_literal_sum_variant(self):
        s = pyr([[1.0, 2.0]])
        t = pyr([[0.0, 0.0]])
        assert mse_loss(s, t, literal_sum=True).item() == pytest.approx(5.0, abs=1e-12)

    def test_gradient_closed_form(self):
        s = random_pyramid(1, grad=True)
        t = random_pyramid(2)
        loss = mse_loss(s, t)
        loss.backward()
        n = len(s)
        for si, ti in zip(s, t):
            expected = 2.0 * (si.data - ti.data) / (n * si.data.size)
            np.testing.assert_allclose(si.grad, expected, rtol=1e-10)

    def test_gradcheck(self):
        s = random_pyramid(3, grad=True)
        t = random_pyramid(4)
        rep = gradcheck(
            lambda a, b: mse_loss([a, b], t), s, name="mse", tol=1e-5
        )
        assert rep.passed, rep

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            mse_loss(pyr(np.zeros((1, 2))), pyr(np.zeros((1, 3))))


class TestKl:
    def test_identical_logits_zero(self):
        a = random_pyramid(5)
        assert kl_loss(a, a).item() == pytest.approx(0.0, abs=1e-10)

    def test_ln2_case(self):
        # near-one-hot student vs uniform teacher -> KL ~ ln 2; oracle is
        # direct summation over the softmaxed values
        s_logits = np.array([20.0, -20.0]).reshape(1, 2, 1, 1)
        q_logits = np.zeros((1, 2, 1, 1))
        p = np.exp(s_logits) / np.exp(s_logits).sum(axis=1, keepdims=True)
        q = np.exp(q_logits) / np.exp(q_logits).sum(axis=1, keepdims=True)
        direct = float((p * (np.log(p + 1e-300) - np.log(q))).sum())
        assert direct == pytest.approx(math.log(2), abs=1e-6)
        got = kl_loss(pyr(s_logits), pyr(q_logits)).item()
        assert got == pytest.approx(math.log(2), abs=1e-6)

    def test_nonnegative_on_1000_random_pyramids(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            s = [Tensor(rng.standard_normal((1, 3, 2, 2)) * 3)]
            t = [Tensor(rng.standard_normal((1, 3, 2, 2)) * 3)]
            assert kl_loss(s, t).item() >= 0.0

    def test_no_grad_into_teacher(self):
        s = random_pyramid(7, grad=True)
        t = random_pyramid(8, grad=True)
        kl_loss(s, t).backward()
        assert all(ti.grad is None for ti in t)
        assert all(si.grad is not None for si in s)

    def test_gradcheck(self):
        s = random_pyramid(9, grad=True, scales=1)
        t = random_pyramid(10, scales=1)
        rep = gradcheck(lambda a: kl_loss([a], t), s, name="kl", tol=1e-5)
        assert rep.passed, rep


class TestKt:
    def test_default_weights_half_half(self):
        s = random_pyramid(11)
        t = random_pyramid(12)
        w = LossWeights()
        expected = 0.5 * mse_loss(s, t).item() + 0.5 * kl_loss(s, t).item()
        assert kt_loss(s, t, w).item() == pytest.approx(expected, rel=1e-12)

    def test_mse_disabled_reduces_to_kl(self):
        s = random_pyramid(13)
        t = random_pyramid(14)
        w = LossWeights()
        got = kt_loss(s, t, w, LossToggles(mse=False)).item()
        assert got == pytest.approx(0.5 * kl_loss(s, t).item(), rel=1e-12)

    def test_linearity_in_weights(self):
        s = random_pyramid(15)
        t = random_pyramid(16)
        one = kt_loss(s, t, LossWeights()).item()
        two = kt_loss(s, t, LossWeights(lambda_mse=1.0, lambda_kl=1.0)).item()
        assert two == pytest.approx(2 * one, rel=1e-12)


class TestCe:
    def test_uniform_logits_ln_k(self):
        k = 5
        logits = Tensor(np.zeros((1, k, 2, 2)))
        target = np.zeros((1, 2, 2), dtype=np.int64)
        loss, deg = ce_loss(logits, target)
        assert not deg
        assert loss.item() == pytest.approx(math.log(k), rel=1e-12)

    def test_confident_correct_drives_loss_down(self):
        target = np.zeros((1, 1, 1), dtype=np.int64)
        prev = None
        for boost in (0.0, 2.0, 5.0, 10.0, 20.0):
            logits = np.zeros((1, 3, 1, 1))
            logits[0, 0] = boost
            loss, _ = ce_loss(Tensor(logits), target)
            if prev is not None:
                assert loss.item() < prev
            prev = loss.item()
        assert prev < 1e-8

    def test_ignore_index_skipped(self):
        logits = Tensor(np.random.default_rng(17).standard_normal((1, 3, 2, 2)))
        target = np.full((1, 2, 2), 255, dtype=np.int64)
        target[0, 0, 0] = 1
        full, _ = ce_loss(logits, target)
        only = -T.log_softmax(logits, axis=1).data[0, 1, 0, 0]
        assert full.item() == pytest.approx(only, rel=1e-12)

    def test_all_ignored_returns_zero_with_flag(self):
        logits = Tensor(np.zeros((1, 3, 2, 2)))
        target = np.full((1, 2, 2), 255, dtype=np.int64)
        loss, degenerate = ce_loss(logits, target)
        assert loss.item() == 0.0 and degenerate

    def test_out_of_range_class_raises(self):
        logits = Tensor(np.zeros((1, 3, 1, 1)))
        with pytest.raises(ValueError, match="out of range"):
            ce_loss(logits, np.array([[[7]]]))

    def test_gradcheck(self):
        logits = Tensor(
            np.random.default_rng(18).standard_normal((1, 4, 3, 3)), requires_grad=True
        )
        target = np.random.default_rng(19).integers(0, 4, (1, 3, 3))
        rep = gradcheck(
            lambda l: ce_loss(l, target)[0], [logits], name="ce", tol=1e-5
        )
        assert rep.passed, rep


class TestDa:
    def test_default_weights(self):
        rng = np.random.default_rng(20)
        y_hat = Tensor(rng.standard_normal((1, 3, 2, 2)))
        y_aux = Tensor(rng.standard_normal((1, 3, 2, 2)))
        y = rng.integers(0, 3, (1, 2, 2))
        got, _ = da_loss(y_hat, y_aux, y, LossWeights())
        expected = ce_loss(y_hat, y)[0].item() + 0.4 * ce_loss(y_aux, y)[0].item()
        assert got.item() == pytest.approx(expected, rel=1e-12)

    def test_aux_disabled(self):
        rng = np.random.default_rng(21)
        y_hat = Tensor(rng.standard_normal((1, 3, 2, 2)))
        y_aux = Tensor(rng.standard_normal((1, 3, 2, 2)))
        y = rng.integers(0, 3, (1, 2, 2))
        got, _ = da_loss(y_hat, y_aux, y, LossWeights(), LossToggles(aux=False))
        assert got.item() == pytest.approx(ce_loss(y_hat, y)[0].item(), rel=1e-12)

    def test_identical_heads_factor(self):
        rng = np.random.default_rng(22)
        y_hat = Tensor(rng.standard_normal((1, 3, 2, 2)))
        y = rng.integers(0, 3, (1, 2, 2))
        got, _ = da_loss(y_hat, y_hat, y, LossWeights())
        assert got.item() == pytest.approx(1.4 * ce_loss(y_hat, y)[0].item(), rel=1e-12)


def fake_output(seed, k=3, with_features=True):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((1, k, 4, 4)), requires_grad=True)
    aux = Tensor(rng.standard_normal((1, k, 4, 4)), requires_grad=True)
    if with_features:
        aligned = [Tensor(rng.standard_normal((1, 4, 2, 2)), requires_grad=True) for _ in range(2)]
        teacher = [Tensor(rng.standard_normal((1, 4, 2, 2))) for _ in range(2)]
        modulated = aligned
    else:
        aligned = teacher = modulated = None
    return SegOutput(logits, aux, aligned, modulated, teacher)


class TestTotal:
    def test_default_wiring(self):
        out = fake_output(23)
        y = np.random.default_rng(24).integers(0, 3, (1, 4, 4))
        bd = total_loss(out, y, LossWeights(), LossToggles())
        expected = (
            0.5 * bd.mse + 0.5 * bd.kl + 1.0 * bd.ce + 0.4 * bd.aux
        )
        assert bd.total == pytest.approx(expected, abs=1e-9)
        assert bd.kt == pytest.approx(0.5 * bd.mse + 0.5 * bd.kl, abs=1e-12)
        assert bd.da == pytest.approx(bd.ce + 0.4 * bd.aux, abs=1e-12)

    def test_only_ce(self):
        out = fake_output(25)
        y = np.random.default_rng(26).integers(0, 3, (1, 4, 4))
        bd = total_loss(out, y, LossWeights(), LossToggles(mse=False, kl=False, aux=False))
        assert bd.total == pytest.approx(bd.ce, rel=1e-12)
        assert bd.mse == bd.kl == bd.aux == 0.0

    def test_disabled_terms_not_in_graph(self):
        out = fake_output(27)
        y = np.random.default_rng(28).integers(0, 3, (1, 4, 4))
        bd = total_loss(out, y, LossWeights(), LossToggles(mse=False, kl=False))
        bd.total_tensor.backward()
        assert all(a.grad is None for a in out.aligned)

    def test_toggle_grid_rows_run(self):
        rows = [
            LossToggles(kl=True, mse=True, aux=True, ce=True),
            LossToggles(kl=True, mse=True, aux=False, ce=True),
            LossToggles(kl=True, mse=False, aux=True, ce=True),
            LossToggles(kl=False, mse=True, aux=True, ce=True),
        ]
        y = np.random.default_rng(29).integers(0, 3, (1, 4, 4))
        for tog in rows:
            bd = total_loss(fake_output(30), y, LossWeights(), tog)
            assert math.isfinite(bd.total)
            if not tog.aux:
                assert bd.aux == 0.0
            if not tog.mse:
                assert bd.mse == 0.0
            if not tog.kl:
                assert bd.kl == 0.0

    def test_all_disabled_raises(self):
        out = fake_output(31)
        with pytest.raises(ValueError):
            total_loss(
                out,
                np.zeros((1, 4, 4), dtype=int),
                LossWeights(),
                LossToggles(mse=False, kl=False, ce=False, aux=False),
            )

    def test_linearity_in_lambda_kt(self):
        out1 = fake_output(32)
        out2 = fake_output(32)
        y = np.random.default_rng(33).integers(0, 3, (1, 4, 4))
        a = total_loss(out1, y, LossWeights(lambda_kt=1.0), LossToggles())
        b = total_loss(out2, y, LossWeights(lambda_kt=2.0), LossToggles())
        assert b.total - b.da == pytest.approx(2 * (a.total - a.da), rel=1e-10)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_kl=-0.1)

    def test_csv_row_format(self):
        out = fake_output(34)
        y = np.random.default_rng(35).integers(0, 3, (1, 4, 4))
        bd = total_loss(out, y, LossWeights(), LossToggles())
        row = bd.csv_row(12)
        parts = row.split(",")
        assert parts[0] == "12" and len(parts) == 8
        assert float(parts[-1]) == pytest.approx(bd.total)

    def test_gradcheck_composite(self):
        y = np.random.default_rng(36).integers(0, 3, (1, 4, 4))
        out = fake_output(37)
        inputs = [out.logits, out.logits_aux] + out.aligned

        def f(*ps):
            return total_loss(out, y, LossWeights(), LossToggles()).total_tensor

        rep = gradcheck(f, inputs, name="total", tol=1e-5, max_coords=8)
        assert rep.passed, rep
