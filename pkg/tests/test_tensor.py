"""Autodiff substrate: shapes, primitive semantics, and gradients.

Gradient correctness is checked by central finite differences through the
standard probe set; a handful of hand-derived gradients are asserted
directly so a probe-suite bug cannot silently pass everything.
"""

import numpy as np
import pytest

import tinyir.tensor as T
from tinyir.errors import NumericalError, ShapeError
from tinyir.gradcheck import check_gradients, primitive_probes


class TestShapes:
    def test_scalars_and_vectors_become_2d(self):
        assert T.constant(3.0).shape == (1, 1)
        assert T.constant([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_3d_rejected(self):
        with pytest.raises(ShapeError):
            T.constant(np.zeros((2, 2, 2)))

    def test_integer_input_promotes_to_float64(self):
        assert T.constant([[1, 2]]).dtype == np.float64

    def test_matmul_inner_dim_checked(self):
        with pytest.raises(ShapeError):
            T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 3))))

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            T.constant([[1.0, 2.0]]).item()


class TestBackwardMechanics:
    def test_hand_derived_product_rule(self):
        """d/da sum(a*b + a) = b + 1, d/db = a."""
        a = T.Tensor([[2.0, 3.0]], requires_grad=True)
        b = T.Tensor([[5.0, 7.0]], requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.add(T.mul(a, b), a))
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, [[6.0, 8.0]])
        np.testing.assert_allclose(b.grad, [[2.0, 3.0]])

    def test_matmul_grads_match_transpose_identities(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.matmul(a, b))
            tape.backward(loss)
        ones = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, ones @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ ones)

    def test_reuse_accumulates(self):
        a = T.Tensor([[1.5]], requires_grad=True)
        with T.Tape() as tape:
            loss = T.add(T.mul(a, a), a)  # a^2 + a, d/da = 2a + 1
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, [[4.0]])

    def test_backward_needs_scalar_loss(self):
        a = T.Tensor([[1.0, 2.0]], requires_grad=True)
        with T.Tape() as tape:
            out = T.mul(a, a)
            with pytest.raises(ShapeError):
                tape.backward(out)

    def test_backward_without_tape_fails(self):
        a = T.Tensor([[1.0]], requires_grad=True)
        loss = T.sum_all(a)  # no tape active
        with pytest.raises(NumericalError):
            T.backward(loss)

    def test_untracked_tensors_get_no_grad(self):
        a = T.Tensor([[1.0]], requires_grad=True)
        c = T.constant([[2.0]])
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(a, c))
            tape.backward(loss)
        assert c.grad is None
        assert a.grad is not None


class TestPrimitiveSemantics:
    def test_rotate_pairs_block_rotation(self):
        x = T.constant([[1.0, 2.0, 3.0, 4.0]])
        np.testing.assert_allclose(T.rotate_pairs(x).data,
                                   [[-2.0, 1.0, -4.0, 3.0]])

    def test_rotate_pairs_needs_even_columns(self):
        with pytest.raises(ShapeError):
            T.rotate_pairs(T.constant([[1.0, 2.0, 3.0]]))

    def test_unit_rows_normalizes(self):
        rng = np.random.default_rng(1)
        x = T.constant(rng.normal(size=(5, 8)))
        norms = np.linalg.norm(T.unit_rows(x).data, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_cosine_rows_matches_numpy(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        got = T.cosine_rows(T.constant(a), T.constant(b)).data[:, 0]
        want = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1)
                                        * np.linalg.norm(b, axis=1))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rms_norm_matches_formula(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 8))
        gain = rng.normal(size=(1, 8))
        got = T.rms_norm(T.constant(x), T.constant(gain)).data
        rms = np.sqrt((x * x).mean(axis=1, keepdims=True) + 1e-6)
        np.testing.assert_allclose(got, x / rms * gain, atol=1e-12)

    def test_embedding_lookup_selects_rows(self):
        table = T.constant(np.arange(12.0).reshape(4, 3))
        out = T.embedding_lookup(table, [2, 0, 2])
        np.testing.assert_allclose(out.data, table.data[[2, 0, 2]])

    def test_cross_entropy_matches_log_softmax(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 7))
        targets = [3, 0, 6, 2, 2]
        got = T.cross_entropy_rows(T.constant(logits), targets).item()
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        want = -np.mean([logp[i, t] for i, t in enumerate(targets)])
        assert got == pytest.approx(want, abs=1e-12)

    def test_concat_slice_round_trip(self):
        a = T.constant(np.ones((2, 3)))
        b = T.constant(np.zeros((1, 3)))
        cat = T.concat([a, b], axis=0)
        assert cat.shape == (3, 3)
        back = T.slice2d(cat, slice(0, 2), slice(0, 3))
        np.testing.assert_allclose(back.data, a.data)


class TestMaskingAndDropout:
    def test_masked_entries_are_exactly_zero(self):
        """Sentinel-masked logits must not leak probability mass at all;
        bit-exact zeros are what the causality checks rely on."""
        x = T.constant([[0.3, T.NEG_INF, 1.1, T.NEG_INF]])
        probs = T.softmax_rows(x).data[0]
        assert probs[1] == 0.0 and probs[3] == 0.0
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_fully_masked_row_is_an_error(self):
        x = T.constant([[T.NEG_INF, T.NEG_INF]])
        with pytest.raises(NumericalError):
            T.softmax_rows(x)

    def test_dropout_zero_p_is_identity(self):
        x = T.constant([[1.0, 2.0]])
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_scales_surviving_entries(self):
        x = T.constant(np.ones((100, 100)))
        out = T.dropout(x, 0.25, np.random.default_rng(0)).data
        kept = out != 0.0
        np.testing.assert_allclose(out[kept], 1.0 / 0.75)
        assert 0.70 < kept.mean() < 0.80

    def test_dropout_deterministic_for_seeded_rng(self):
        x = T.constant(np.ones((10, 10)))
        a = T.dropout(x, 0.5, np.random.default_rng(7)).data
        b = T.dropout(x, 0.5, np.random.default_rng(7)).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_rejects_p_one(self):
        with pytest.raises(NumericalError):
            T.dropout(T.constant([[1.0]]), 1.0, np.random.default_rng(0))


class TestFiniteDifferences:
    def test_every_primitive_probe_passes(self):
        """Central finite differences at 64-bit for each primitive's probe."""
        failures = []
        for name, params, build in primitive_probes(seed=0):
            report = check_gradients(build, params, tol=1e-5)
            if not report.ok:
                failures.append((name, report.max_err, report.failures[:3]))
        assert not failures, f"primitive gradients out of tolerance: {failures}"
