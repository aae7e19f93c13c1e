"""SVD-threshold imputation baseline."""

import numpy as np
import pytest

from mfai import baselines, data


def low_rank(n, m, k, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(n, k)) @ rng.normal(size=(k, m))
    return truth + noise * rng.normal(size=(n, m)), truth


class TestHardImpute:
    def test_fully_observed_is_truncated_svd(self):
        """With no holes the estimate is one rank-k projection of the data."""
        values, _ = low_rank(12, 9, 5, seed=0, noise=0.3)
        est = baselines.hard_impute(values, 3)
        u, s, vt = np.linalg.svd(values)
        expected = (u[:, :3] * s[:3]) @ vt[:3]
        np.testing.assert_allclose(est, expected, rtol=0, atol=1e-10)

    def test_exact_rank_recovered_through_holes(self):
        """A rank-2 matrix with a third of its entries hidden is restored to
        working precision."""
        values, truth = low_rank(30, 25, 2, seed=1)
        y = data.mask_entries(values, 0.33, seed=2)
        est = baselines.hard_impute(y, 2, max_iter=500, tol=1e-12)
        hidden = ~y.mask
        err = np.max(np.abs(est[hidden] - truth[hidden]))
        scale = np.max(np.abs(truth))
        assert err < 1e-6 * scale

    def test_two_by_two_hand_completion(self):
        """[[2, 4], [1, ?]] has the rank-1 completion ? = 2, and the
        estimate also reproduces the three observed entries."""
        y = data.MaskedMatrix([[2.0, 4.0], [1.0, np.nan]])
        est = baselines.hard_impute(y, 1)
        np.testing.assert_allclose(est, [[2.0, 4.0], [1.0, 2.0]], atol=1e-4)

    def test_estimate_has_working_rank(self):
        values, _ = low_rank(15, 10, 3, seed=3, noise=0.5)
        y = data.mask_entries(values, 0.4, seed=4)
        est = baselines.hard_impute(y, 2)
        sv = np.linalg.svd(est, compute_uv=False)
        assert sv[2] < 1e-10 * sv[0]

    def test_objective_trace_non_increasing(self):
        values, _ = low_rank(20, 18, 3, seed=5, noise=0.2)
        y = data.mask_entries(values, 0.3, seed=6)
        est, trace = baselines.hard_impute(y, 2, return_trace=True)
        assert len(trace) >= 1
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-10 * (1.0 + np.abs(np.array(trace[:-1]))))

    def test_beats_column_means_on_low_rank_data(self):
        values, truth = low_rank(40, 30, 3, seed=7, noise=0.1)
        y = data.mask_entries(values, 0.35, seed=8)
        est = baselines.hard_impute(y, 3)
        col_means = np.nanmean(y.values, axis=0)
        mean_fill = np.broadcast_to(col_means, y.shape)
        hidden = ~y.mask
        rmse_hard = np.sqrt(np.mean((est[hidden] - truth[hidden]) ** 2))
        rmse_mean = np.sqrt(np.mean((mean_fill[hidden] - truth[hidden]) ** 2))
        assert rmse_hard < 0.5 * rmse_mean

    def test_determinism(self):
        values, _ = low_rank(25, 20, 2, seed=9, noise=0.2)
        y = data.mask_entries(values, 0.4, seed=10)
        a = baselines.hard_impute(y, 2)
        b = baselines.hard_impute(y, 2)
        np.testing.assert_array_equal(a, b)

    def test_rank_bounds_validated(self):
        y = data.MaskedMatrix(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            baselines.hard_impute(y, 0)
        with pytest.raises(ValueError):
            baselines.hard_impute(y, 4)

    def test_no_observed_entries_rejected(self):
        y = data.MaskedMatrix(np.full((3, 3), np.nan))
        with pytest.raises(ValueError):
            baselines.hard_impute(y, 1)
