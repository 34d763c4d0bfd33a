"""Finite-difference gradient verification and the standard probe suite."""

import numpy as np

import tinyir.tensor as T
from tinyir.gradcheck import (check_gradients, pipeline_probe,
                              primitive_probes, run_standard_suite)
from tinyir.tensor import Tensor


class TestCheckGradients:
    def test_correct_gradients_pass(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)),
                   requires_grad=True)
        report = check_gradients(lambda: T.sum_all(T.mul(x, x)), {"x": x})
        assert report.ok
        assert report.checked == 12
        assert report.max_err < 1e-7

    def test_untracked_computation_path_is_caught(self):
        """A loss term that reads x.data through numpy moves under finite
        differences but contributes nothing to the tape gradient; the checker
        must flag every entry."""
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3)),
                   requires_grad=True)

        def leaky_loss():
            tracked = T.sum_all(T.mul(x, x))
            leak = T.constant(np.array([[float(x.data.sum())]]))
            return T.add(tracked, leak)

        report = check_gradients(leaky_loss, {"x": x})
        assert not report.ok
        assert len(report.failures) == 6
        name, idx, analytic, numeric, err = report.failures[0]
        assert name == "x"
        assert isinstance(idx, tuple) and len(idx) == 2
        assert abs(analytic - numeric) > 0.5

    def test_entry_subsampling_limits_work(self):
        x = Tensor(np.random.default_rng(2).normal(size=(10, 10)),
                   requires_grad=True)
        report = check_gradients(lambda: T.sum_all(T.mul(x, x)), {"x": x},
                                 max_entries_per_param=7,
                                 rng=np.random.default_rng(0))
        assert report.checked == 7
        assert report.ok

    def test_nonfinite_values_count_as_failures(self):
        """log of a negative entry poisons the loss with NaN; NaN compares
        false against any tolerance, so it needs explicit handling."""
        x = Tensor(np.array([[2.0, -1.0]]), requires_grad=True)
        with np.errstate(invalid="ignore"):
            report = check_gradients(lambda: T.sum_all(T.log(x)), {"x": x})
        assert not report.ok
        assert report.max_err == float("inf")

    def test_parameter_is_restored_after_probing(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        before = x.data.copy()
        check_gradients(lambda: T.sum_all(T.mul(x, x)), {"x": x})
        np.testing.assert_array_equal(x.data, before)


class TestProbeSuite:
    def test_every_primitive_has_a_probe(self):
        names = {name for name, _, _ in primitive_probes()}
        expected = {"matmul", "add", "sub", "mul", "scale", "exp", "log",
                    "transpose", "slice2d", "embedding_lookup", "rms_norm",
                    "sum_all", "mean_all", "dropout", "softmax_rows",
                    "softmax_rows_masked", "gelu", "unit_rows", "cosine_rows",
                    "rotate_pairs", "cross_entropy_rows"}
        assert expected <= names

    def test_all_primitive_probes_pass(self):
        for name, params, build in primitive_probes(seed=0):
            report = check_gradients(build, params, tol=1e-5)
            assert report.ok, f"{name}: {report.failures[:3]}"

    def test_pipeline_probe_passes_on_a_sample(self):
        name, params, build = pipeline_probe(seed=0)
        assert name == "model_pipeline"
        report = check_gradients(build, params, max_entries_per_param=2,
                                 rng=np.random.default_rng(0))
        assert report.ok, report.failures[:3]

    def test_standard_suite_reports_one_entry_per_probe(self):
        results = run_standard_suite(pipeline_entries=1)
        assert len(results) == len(primitive_probes()) + 1
        assert results[-1][0] == "model_pipeline"
        assert all(rep.ok for _, rep in results)
