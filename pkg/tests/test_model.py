"""Multi-factor models: greedy fits, rank choice, backfitting, persistence."""

import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from mfai import core, data, model, sim


def three_factor_problem(seed=0, n=150, m=100, pve=0.8, missing=0.3):
    return sim.simulate_dataset(sim.SimConfig(
        n=n, m=m, c=3, k=3, pve=pve, missing_ratio=missing, seed=seed))


class TestFitGreedy:
    def test_single_factor_equivalence(self):
        """k = 1 greedy is exactly one single-factor fit."""
        truth = sim.simulate_dataset(sim.SimConfig(
            n=40, m=30, c=2, k=1, missing_ratio=0.2, seed=1))
        options = core.FitOptions(max_iter=40)
        m1 = model.fit_greedy(truth.y, truth.x, 1, options)
        solo = core.fit_single_factor(truth.y, truth.x, options)
        assert m1.k == 1
        np.testing.assert_array_equal(m1.factors[0].mu, solo.mu)
        np.testing.assert_array_equal(m1.factors[0].nu, solo.nu)
        assert m1.factors[0].elbo_trace == solo.elbo_trace

    def test_later_factors_fit_running_residual(self):
        """Factor two equals a fresh single-factor fit on y minus factor
        one's mean product."""
        truth = three_factor_problem(seed=2, n=60, m=40)
        options = core.FitOptions(max_iter=25)
        m2 = model.fit_greedy(truth.y, truth.x, 2, options)
        first = m2.factors[0]
        residual = data.MaskedMatrix(
            truth.y.values - np.outer(first.mu, first.nu), truth.y.mask)
        solo = core.fit_single_factor(residual, truth.x, options)
        np.testing.assert_array_equal(m2.factors[1].mu, solo.mu)
        np.testing.assert_array_equal(m2.factors[1].nu, solo.nu)

    def test_recovers_three_factor_span(self):
        """Individual greedy factors can mix correlated true factors, so the
        sharp claim is about the span: every true loading vector is nearly a
        linear combination of the fitted ones, and the best one-to-one match
        pairs each true factor with a distinct estimate."""
        truth = three_factor_problem(seed=3)
        fitted = model.fit_greedy(truth.y, truth.x, 3,
                                  core.FitOptions(max_iter=200))
        basis = np.column_stack([st.mu for st in fitted.factors]
                                + [np.ones(truth.z.shape[0])])
        for b in range(3):
            zb = truth.z[:, b]
            coef, *_ = np.linalg.lstsq(basis, zb, rcond=None)
            r2 = 1.0 - np.sum((zb - basis @ coef) ** 2) \
                / np.sum((zb - zb.mean()) ** 2)
            assert r2 > 0.9, (b, r2)
        corr = np.zeros((3, 3))
        for a in range(3):
            for b in range(3):
                corr[a, b] = abs(np.corrcoef(fitted.factors[a].mu,
                                             truth.z[:, b])[0, 1])
        rows, cols = linear_sum_assignment(-corr)
        assert sorted(cols.tolist()) == [0, 1, 2]
        assert corr[rows, cols].max() > 0.9

    def test_trailing_factor_is_marginal_when_rank_exhausted(self):
        """On an essentially rank-2 matrix the third factor carries an order
        of magnitude less variance than either leading factor."""
        rng = np.random.default_rng(4)
        x = rng.uniform(-10, 10, size=(60, 3))
        z = np.column_stack([sim.factor_mean(x, 0), sim.factor_mean(x, 1)])
        w = rng.normal(size=(40, 2))
        y = z @ w.T + 1e-6 * rng.normal(size=(60, 40))
        fitted = model.fit_greedy(y, x, 3, core.FitOptions(max_iter=300))
        v1, v2, v3 = (model._outer_variance(st.mu, st.nu)
                      for st in fitted.factors)
        assert v3 < 0.05 * v1
        assert v3 < 0.05 * v2

    def test_k_bounds_validated(self):
        truth = three_factor_problem(seed=5, n=20, m=15)
        with pytest.raises(ValueError):
            model.fit_greedy(truth.y, truth.x, 0)
        with pytest.raises(ValueError):
            model.fit_greedy(truth.y, truth.x, 16)

    def test_impute_is_sum_of_mean_products(self):
        truth = three_factor_problem(seed=6, n=30, m=20)
        fitted = model.fit_greedy(truth.y, truth.x, 2,
                                  core.FitOptions(max_iter=10))
        expected = np.outer(fitted.factors[0].mu, fitted.factors[0].nu) \
            + np.outer(fitted.factors[1].mu, fitted.factors[1].nu)
        np.testing.assert_allclose(fitted.impute(), expected, rtol=1e-14)

    def test_importance_shape_and_normalization(self):
        truth = three_factor_problem(seed=7, n=50, m=30)
        fitted = model.fit_greedy(truth.y, truth.x, 2,
                                  core.FitOptions(max_iter=15))
        imp = fitted.importance()
        assert imp.shape == (2, 3)
        norm = fitted.importance(normalize=True)
        np.testing.assert_allclose(norm.sum(axis=1), 1.0, rtol=1e-9)


class TestOuterVariance:
    def test_matches_materialized_variance(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            mu = rng.normal(size=13)
            nu = rng.normal(size=9)
            direct = np.var(np.outer(mu, nu))
            assert model._outer_variance(mu, nu) == pytest.approx(
                direct, rel=1e-10, abs=1e-12)


class TestFitGreedyAuto:
    def test_pure_noise_keeps_no_factor(self):
        rng = np.random.default_rng(9)
        y = rng.normal(size=(60, 50))
        x = rng.uniform(-10, 10, size=(60, 3))
        fitted = model.fit_greedy_auto(y, x, k_max=5, sc=0.01,
                                       options=core.FitOptions(max_iter=80))
        assert fitted.k == 0
        np.testing.assert_array_equal(fitted.impute(), np.zeros((60, 50)))

    def test_two_factor_signal_found(self):
        truth = sim.simulate_dataset(sim.SimConfig(
            n=100, m=80, c=3, k=2, pve=0.7, missing_ratio=0.3, seed=10))
        fitted = model.fit_greedy_auto(truth.y, truth.x, k_max=6, sc=0.01,
                                       options=core.FitOptions(max_iter=150))
        assert fitted.k == 2

    def test_threshold_validated(self):
        truth = three_factor_problem(seed=11, n=20, m=15)
        with pytest.raises(ValueError):
            model.fit_greedy_auto(truth.y, truth.x, k_max=2, sc=0.0)
        with pytest.raises(ValueError):
            model.fit_greedy_auto(truth.y, truth.x, k_max=0)


class TestBackfit:
    def test_objective_not_worse_and_input_untouched(self):
        truth = three_factor_problem(seed=12, n=60, m=40)
        options = core.FitOptions(max_iter=30)
        greedy = model.fit_greedy(truth.y, truth.x, 3, options)
        before = [st.mu.copy() for st in greedy.factors]
        obj_greedy = sum(st.elbo_trace[-1] for st in greedy.factors)
        refined = model.backfit(greedy, truth.y, truth.x, options,
                                max_sweeps=6)
        assert refined is not greedy
        assert refined.sweeps_run >= 1
        for st, old in zip(greedy.factors, before):
            np.testing.assert_array_equal(st.mu, old)
        obj_refined = sum(st.elbo_trace[-1] for st in refined.factors)
        assert obj_refined >= obj_greedy - 1e-6 * (1.0 + abs(obj_greedy))

    def test_empty_model_passes_through(self):
        rng = np.random.default_rng(13)
        y = rng.normal(size=(30, 25))
        x = rng.uniform(-10, 10, size=(30, 3))
        empty = model.fit_greedy_auto(y, x, k_max=2, sc=1e9)
        refined = model.backfit(empty, y, x)
        assert refined.k == 0 and refined.sweeps_run == 0

    def test_shape_mismatch_rejected(self):
        truth = three_factor_problem(seed=14, n=20, m=15)
        fitted = model.fit_greedy(truth.y, truth.x, 1,
                                  core.FitOptions(max_iter=5))
        other = np.zeros((21, 15))
        with pytest.raises(ValueError):
            model.backfit(fitted, other, truth.x)

    def test_progress_labels_carry_sweep_and_factor(self):
        truth = three_factor_problem(seed=15, n=30, m=20)
        fitted = model.fit_greedy(truth.y, truth.x, 2,
                                  core.FitOptions(max_iter=5))
        labels = set()
        model.backfit(fitted, truth.y, truth.x,
                      core.FitOptions(max_iter=3), max_sweeps=2,
                      progress=lambda label, i, v: labels.add(label))
        assert "sweep 1 factor 1" in labels
        assert "sweep 1 factor 2" in labels


class TestSerialization:
    def fit_small(self, noise_mode=core.SHARED):
        truth = three_factor_problem(seed=16, n=40, m=30)
        options = core.FitOptions(max_iter=20, noise_mode=noise_mode)
        return model.fit_greedy(truth.y, truth.x, 2, options)

    def test_dict_round_trip_preserves_predictions(self):
        fitted = self.fit_small()
        rec = json.loads(json.dumps(model.model_to_dict(fitted)))
        back = model.model_from_dict(rec)
        np.testing.assert_array_equal(back.impute(), fitted.impute())
        np.testing.assert_array_equal(back.importance(), fitted.importance())
        assert back.noise_mode == fitted.noise_mode
        assert back.schema == fitted.schema
        assert back.options == fitted.options

    def test_file_round_trip_bit_exact(self, tmp_path):
        fitted = self.fit_small(noise_mode=core.PER_FEATURE)
        path = tmp_path / "model.json"
        model.save_model(path, fitted)
        back = model.load_model(path)
        np.testing.assert_array_equal(back.impute(), fitted.impute())
        np.testing.assert_array_equal(back.factors[0].tau, fitted.factors[0].tau)
        assert back.factors[0].tau.shape == (30,)

    def test_save_is_deterministic(self, tmp_path):
        fitted = self.fit_small()
        model.save_model(tmp_path / "a.json", fitted)
        model.save_model(tmp_path / "b.json", fitted)
        assert (tmp_path / "a.json").read_bytes() == \
            (tmp_path / "b.json").read_bytes()

    def test_categorical_rules_survive_round_trip(self, tmp_path):
        """A model whose trees split on a categorical covariate reloads with
        identical predictions and named level sets in the JSON."""
        rng = np.random.default_rng(17)
        n, m = 90, 25
        codes = rng.integers(0, 3, size=n)
        level_effect = np.array([-6.0, 0.0, 6.0])
        z = level_effect[codes] + 0.1 * rng.normal(size=n)
        w = rng.normal(size=m)
        y = np.outer(z, w) + 0.1 * rng.normal(size=(n, m))
        table = data.AuxTable(values=codes[:, None].astype(float),
                              names=["group"], kinds=["categorical"],
                              levels=[["a", "b", "c"]])
        fitted = model.fit_greedy(y, table, 1, core.FitOptions(max_iter=30))
        path = tmp_path / "cat.json"
        model.save_model(path, fitted)
        text = path.read_text()
        assert '"cat"' in text and '"left_levels"' in text
        back = model.load_model(path)
        np.testing.assert_array_equal(back.impute(), fitted.impute())

    def test_bad_header_rejected(self):
        fitted = self.fit_small()
        rec = model.model_to_dict(fitted)
        wrong = dict(rec, format="other")
        with pytest.raises(ValueError):
            model.model_from_dict(wrong)
        future = dict(rec, version=99)
        with pytest.raises(ValueError):
            model.model_from_dict(future)

    def test_factor_count_consistency_checked(self):
        fitted = self.fit_small()
        rec = model.model_to_dict(fitted)
        rec["k"] = 5
        with pytest.raises(ValueError):
            model.model_from_dict(rec)
