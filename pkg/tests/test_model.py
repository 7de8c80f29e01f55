import numpy as np
import pytest

from gpcca import (
    DataError,
    DegenerateCovarianceError,
    LatentPosterior,
    ModalityLayout,
    ModelParams,
    stack_modalities,
    validate_dataset,
)


class TestModalityLayout:
    def test_offsets(self):
        layout = ModalityLayout((2, 3, 4))
        assert layout.offsets == (0, 2, 5)
        assert layout.total == 9
        assert layout.n_modalities == 3

    def test_single_modality_rejected(self):
        with pytest.raises(DataError, match="R >= 2"):
            ModalityLayout((5,))

    def test_empty_modality_rejected(self):
        with pytest.raises(DataError, match="empty modality"):
            ModalityLayout((2, 0))


class TestValidateDataset:
    def test_fully_observed(self):
        values = np.arange(6.0).reshape(3, 2)
        data = validate_dataset(values, np.ones((3, 2)), ModalityLayout((2, 1)))
        assert data.observed_counts.tolist() == [3, 3]
        assert data.complete

    def test_sample_without_observations(self):
        mask = np.ones((3, 3))
        mask[:, 1] = 0
        with pytest.raises(DataError, match="sample 2 has no observed entries"):
            validate_dataset(np.zeros((3, 3)), mask, ModalityLayout((2, 1)))

    def test_feature_without_observations(self):
        mask = np.ones((3, 4))
        mask[1] = 0
        with pytest.raises(DataError, match="feature 2 has no observed entries"):
            validate_dataset(np.zeros((3, 4)), mask, ModalityLayout((2, 1)))

    def test_feature_seen_once_rejected(self):
        mask = np.ones((3, 4))
        mask[1, 1:] = 0
        with pytest.raises(DataError, match="fewer than 2 samples"):
            validate_dataset(np.zeros((3, 4)), mask, ModalityLayout((2, 1)))

    def test_nan_at_observed_position(self):
        values = np.zeros((3, 2))
        values[0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite observed value"):
            validate_dataset(values, np.ones((3, 2)), ModalityLayout((2, 1)))

    def test_masked_entries_zeroed(self):
        values = np.full((3, 3), 7.0)
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 0] = False
        data = validate_dataset(values, mask, ModalityLayout((1, 2)))
        assert data.values[0, 0] == 0.0
        assert data.values[1, 1] == 7.0

    def test_masked_nan_is_fine(self):
        values = np.zeros((3, 3))
        values[0, 0] = np.nan
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 0] = False
        data = validate_dataset(values, mask, ModalityLayout((1, 2)))
        assert data.values[0, 0] == 0.0

    def test_mask_entries_checked(self):
        with pytest.raises(DataError, match="0 or 1"):
            validate_dataset(np.zeros((3, 2)), np.full((3, 2), 2), ModalityLayout((2, 1)))

    def test_layout_total_checked(self):
        with pytest.raises(DataError, match="does not match"):
            validate_dataset(np.zeros((3, 2)), np.ones((3, 2)), ModalityLayout((2, 2)))

    def test_immutable(self):
        data = validate_dataset(np.zeros((3, 2)), np.ones((3, 2)), ModalityLayout((2, 1)))
        with pytest.raises(ValueError):
            data.values[0, 0] = 1.0


class TestStackModalities:
    def test_concatenation(self, rng):
        blocks = [rng.standard_normal((2, 5)), rng.standard_normal((3, 5))]
        data = stack_modalities(blocks)
        assert data.values.shape == (5, 5)
        assert data.layout.sizes == (2, 3)

    def test_single_block_rejected(self, rng):
        with pytest.raises(DataError, match="R >= 2"):
            stack_modalities([rng.standard_normal((2, 5))])

    def test_sample_count_mismatch(self, rng):
        with pytest.raises(DataError, match="sample count mismatch"):
            stack_modalities(
                [rng.standard_normal((2, 5)), rng.standard_normal((3, 4))]
            )

    def test_nan_convention(self, rng):
        blocks = [rng.standard_normal((2, 4)), rng.standard_normal((3, 4))]
        blocks[0][0, 1] = np.nan
        data = stack_modalities(blocks)
        assert not data.mask[0, 1]
        assert data.values[0, 1] == 0.0

    def test_round_trip(self, rng):
        blocks = [rng.standard_normal((2, 6)), rng.standard_normal((4, 6))]
        masks = [rng.random((2, 6)) > 0.2, rng.random((4, 6)) > 0.2]
        masks[0][:, masks[0].sum(0) == 0] = True
        for mk in masks:
            mk[mk.sum(1) < 2] = True
        data = stack_modalities([np.where(mk, b, 0.0) for b, mk in zip(blocks, masks)], masks)
        for original, mk, got_b, got_m in zip(
            blocks, masks, data.blocks(), data.block_masks()
        ):
            assert np.array_equal(got_m, mk)
            assert np.array_equal(got_b[mk], original[mk])

    def test_column_permutation_invariance(self, rng):
        blocks = [rng.standard_normal((2, 6)), rng.standard_normal((4, 6))]
        perm = rng.permutation(6)
        stack_modalities(blocks)  # validates
        stack_modalities([b[:, perm] for b in blocks])  # still validates


class TestModelParams:
    def test_d_range(self, rng):
        layout = ModalityLayout((2, 3))
        w = rng.standard_normal((5, 3))
        with pytest.raises(DataError, match="out of range"):
            ModelParams(w, np.zeros(5), [np.eye(2), np.eye(3)], layout)

    def test_asymmetric_block_rejected(self):
        layout = ModalityLayout((2, 2))
        block = np.array([[1.0, 0.5], [0.1, 1.0]])
        with pytest.raises(DegenerateCovarianceError, match="not symmetric"):
            ModelParams(np.zeros((4, 1)), np.zeros(4), [block, np.eye(2)], layout)

    def test_indefinite_block_rejected(self):
        layout = ModalityLayout((2, 2))
        block = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(DegenerateCovarianceError, match="not positive definite"):
            ModelParams(np.zeros((4, 1)), np.zeros(4), [np.eye(2), block], layout)

    def test_lambda_range(self):
        layout = ModalityLayout((1, 1))
        with pytest.raises(DataError, match="lambda"):
            ModelParams(
                np.zeros((2, 1)), np.zeros(2), [np.eye(1), np.eye(1)], layout, 1.5
            )

    def test_psi_dense(self, rng):
        from tests.conftest import random_params

        params = random_params(rng, [2, 3], 2)
        dense = params.psi_dense()
        assert np.array_equal(dense[:2, :2], params.psi_blocks[0])
        assert np.array_equal(dense[2:, 2:], params.psi_blocks[1])
        assert np.all(dense[:2, 2:] == 0.0)


class TestLatentPosterior:
    def test_prior_dominance_enforced(self):
        with pytest.raises(DataError, match="wider than the prior"):
            LatentPosterior(np.zeros((1, 2)), np.full((2, 1, 1), 1.5))

    def test_valid(self):
        post = LatentPosterior(np.zeros((2, 3)), np.broadcast_to(0.5 * np.eye(2), (3, 2, 2)).copy())
        assert post.n == 3 and post.d == 2
