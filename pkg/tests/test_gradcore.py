import math

import numpy as np
import pytest

from lexalign.errors import NumericalError, ValidationError
from lexalign.gradcore import Tape, finite_diff, forward_backward, grad_check, relative_error
from lexalign.losses import PenaltySchedule, Temperature, total_objective
from lexalign.model import TRAINABLE, encode_image_batch, encode_text_batch, gradcheck_instance, init_params, objective_graph


def _check(build, params, inputs=None, tol=1e-6):
    report = grad_check(Tape(build), params, inputs, tol=tol)
    assert report.passed, report.as_table()
    return report


def _unit(rng, shape):
    x = rng.random(shape) + 0.1
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestOps:
    def test_matmul_family(self, rng):
        def build(t):
            h = t.tanh(t.add_bias(t.matmul(t.param("x"), t.param("w")), t.param("b")))
            return t.sum_squares(t.matmul_nt(h, t.param("z")))

        _check(build, {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 5)),
                       "b": rng.normal(size=5), "z": rng.normal(size=(6, 5))})

    def test_elu1p_both_branches(self, rng):
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
        _check(lambda t: t.sum_squares(t.elu1p(t.param("x"))), {"x": x})

    def test_normalize_rows(self, rng):
        _check(lambda t: t.sum_squares(t.matmul_nt(t.normalize_rows(t.param("x")), t.param("y"))),
               {"x": rng.normal(size=(3, 4)), "y": rng.normal(size=(2, 4))})

    def test_max_pool(self, rng):
        def build(t):
            return t.sum_squares(t.max_pool(t.reshape(t.param("x"), (2, 3, 4))))

        _check(build, {"x": rng.normal(size=(6, 4))})

    def test_info_nce(self, rng):
        def build(t):
            return t.info_nce(t.normalize_rows(t.param("a")), t.normalize_rows(t.param("b")), t.param("li"), 100.0)

        _check(build, {"a": rng.random((4, 5)) + 0.1, "b": rng.random((4, 5)) + 0.1, "li": np.asarray(1.3)})

    def test_info_nce_matches_losses(self, rng):
        A, B = _unit(rng, (4, 6)), _unit(rng, (4, 6))
        tape = Tape(lambda t: t.info_nce(t.param("a"), t.param("b"), t.param("li"), 100.0))
        out = tape.run({"a": A, "b": B, "li": np.asarray(math.log(5.0))})
        from lexalign.losses import info_nce

        assert float(out.value) == pytest.approx(info_nce(A, B, Temperature(math.log(5.0))), abs=1e-13)

    @pytest.mark.parametrize("kind", ["flops", "overuse"])
    def test_penalties(self, rng, kind):
        _check(lambda t: getattr(t, kind)(t.elu1p(t.param("s"))), {"s": rng.normal(size=(4, 6)) + 2.0})

    def test_add_and_scale(self, rng):
        def build(t):
            x = t.param("x")
            return t.add(t.scale(t.sum_squares(x), 0.5), t.sum_squares(t.plus(x, x)))

        report = _check(build, {"x": rng.normal(size=3)})
        assert report.params[0].checked == 3

    def test_reused_node_accumulates(self):
        # f = sum (x*w)^2 with x used twice through plus
        tape = Tape(lambda t: t.sum_squares(t.plus(t.param("x"), t.param("x"))))
        _, grads = forward_backward(tape, {"x": np.array([1.0, -2.0])})
        np.testing.assert_allclose(grads["x"], 8 * np.array([1.0, -2.0]))


class TestTemperatureGradient:
    def _grad(self, log_inverse):
        A = np.array([[0.6, 0.8], [0.8, 0.6]])
        tape = Tape(lambda t: t.info_nce(t.param("a"), t.param("b"), t.param("li"), 100.0))
        return forward_backward(tape, {"a": A, "b": A.copy(), "li": np.asarray(log_inverse)})[1]["li"]

    def test_zero_when_clamped(self):
        assert float(self._grad(math.log(200.0))) == 0.0

    def test_nonzero_inside_range(self):
        assert float(self._grad(math.log(5.0))) != 0.0


class TestFailures:
    def test_non_finite_forward_names_node(self):
        tape = Tape(lambda t: t.sum_squares(t.elu1p(t.param("x"))))
        with pytest.raises(NumericalError, match="elu1p|param"):
            tape.run({"x": np.array([np.inf, 0.0])})

    def test_overflow_detected(self):
        tape = Tape(lambda t: t.sum_squares(t.elu1p(t.param("x"))))
        with np.errstate(over="ignore"), pytest.raises(NumericalError, match="sum_squares"):
            tape.run({"x": np.array([1e300, 1.0])})

    def test_zero_row_normalize(self):
        tape = Tape(lambda t: t.sum_squares(t.normalize_rows(t.param("x"))))
        with pytest.raises(NumericalError):
            tape.run({"x": np.zeros((2, 3))})

    def test_unknown_param(self):
        with pytest.raises(ValidationError):
            Tape(lambda t: t.sum_squares(t.param("nope"))).run({})

    def test_non_scalar_output(self):
        with pytest.raises(ValidationError):
            Tape(lambda t: t.param("x")).run({"x": np.ones(3)})

    def test_detects_wrong_gradient(self, rng):
        class BrokenTape(Tape):
            def tanh(self, x):
                y = np.tanh(x.value)
                return self._push("tanh", y, (x,), lambda g: (g * (1.0 - y),))  # wrong derivative

        report = grad_check(BrokenTape(lambda t: t.sum_squares(t.tanh(t.param("x")))), {"x": rng.normal(size=4)})
        assert not report.passed
        assert report.failures == ["x"]


class TestMaxPoolTies:
    def test_tie_routes_to_lowest_row(self):
        x = np.array([[[1.0, 2.0], [1.0, 0.0]]])
        tape = Tape(lambda t: t.sum_squares(t.max_pool(t.param("x"))))
        _, grads = forward_backward(tape, {"x": x})
        np.testing.assert_array_equal(grads["x"], [[[2.0, 4.0], [0.0, 0.0]]])
        assert tape.pool_ties()[0].tolist() == [[True, False]]

    def test_grad_check_skips_tied_coordinates(self):
        x = np.array([[[1.0, 2.0], [1.0, 0.0]]])
        report = grad_check(Tape(lambda t: t.sum_squares(t.max_pool(t.param("x")))), {"x": x})
        assert report.passed
        assert report.params[0].skipped >= 1


class TestHelpers:
    def test_finite_diff_quadratic(self):
        g = finite_diff(lambda v: float(np.sum(v**2)), np.array([1.0, -3.0]))
        np.testing.assert_allclose(g, [2.0, -6.0], atol=1e-8)

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-9) < 1e-2
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


class TestObjectiveGraph:
    def test_matches_numpy_objective(self, rng):
        params = init_params(12, 6, 5, 7, seed=3)
        params.arrays["txt_w2"] = rng.normal(size=params.arrays["txt_w2"].shape)
        txt, img = rng.normal(size=(4, 6)), rng.normal(size=(4, 3, 5))
        tape = Tape(objective_graph("overuse", 0.3, 0.6))
        out = tape.run(params.arrays, {"txt": txt, "img": img})
        S_img, S_txt = encode_image_batch(params, img), encode_text_batch(params, txt)
        expected, _ = total_objective(S_img, S_txt, params.temperature, PenaltySchedule(0.3, 0.6, 1), 10)
        assert float(out.value) == pytest.approx(expected, abs=1e-12)
        np.testing.assert_allclose(tape.tags["s_img"].value, S_img, atol=1e-14)

    @pytest.mark.parametrize("kind", ["overuse", "flops", "none"])
    def test_instance_passes(self, kind):
        tape, params, inputs = gradcheck_instance([9, 1], penalty_kind=kind)
        report = grad_check(tape, params, inputs, names=TRAINABLE)
        assert report.passed, report.as_table()

    def test_frozen_codebook_has_gradient_but_is_not_trainable(self):
        tape, params, inputs = gradcheck_instance(0)
        _, grads = forward_backward(tape, params, inputs)
        assert "z_txt" not in TRAINABLE
        assert np.any(grads["z_txt"] != 0)
