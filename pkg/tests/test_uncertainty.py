import csv
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from bdecf.bayes import BayesianLinear
from bdecf.data import leave_one_out_split
from bdecf.ensemble import build_ensemble_config, train_supermodel
from bdecf.model import LearnerConfig, WeakLearner
from bdecf.uncertainty import (UncertaintyScoreParams, activation_stats, binned_curve,
                               ensemble_uncertainty, prune_model, uncertainty_score,
                               user_uncertainty_profile, user_scores)

from conftest import random_dataset

BASE = LearnerConfig(hidden_dims=(8,), embedding_dim=8, num_tokens=2, num_heads=2, dropout=0.0,
                     mlp_dims=(4,), epochs=2, batch_size=16, dtype="float64", rho_init=-2.0)


def empirical_variance(layer, h, n, rng):
    W_mu, b_mu = layer.params["W_mu"], layer.params["b_mu"]
    sW, sb = layer.sigmas()
    out = np.empty((n, layer.out_dim))
    chunk = 10_000
    for s in range(0, n, chunk):
        m = min(chunk, n - s)
        W = W_mu + sW * rng.standard_normal((m, *W_mu.shape))
        b = b_mu + sb * rng.standard_normal((m, layer.out_dim))
        out[s:s + m] = np.einsum("i,mio->mo", h, W) + b
    return out.var(axis=0)


class TestActivationStats:
    def test_zero_sigma(self):
        layer = BayesianLinear(4, 3, rng=0)
        layer.params["W_rho"][:] = -1000.0
        layer.params["b_rho"][:] = -1000.0
        h = np.arange(4.0)
        st_ = activation_stats(layer, h)
        np.testing.assert_array_equal(st_.var, 0)
        np.testing.assert_allclose(st_.mean, h @ layer.params["W_mu"] + layer.params["b_mu"])

    def test_zero_input_is_bias_variance(self):
        layer = BayesianLinear(4, 3, rng=0, rho_init=-1.0)
        np.testing.assert_allclose(activation_stats(layer, np.zeros(4)).var, layer.sigmas()[1] ** 2)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            layer = BayesianLinear(6, 4, rng=rng, rho_init=-1.0)
            layer.params["W_rho"] += rng.normal(0, 0.5, (6, 4))
            h = rng.uniform(0, 2, 6)
            emp = empirical_variance(layer, h, 100_000, rng)
            np.testing.assert_allclose(activation_stats(layer, h).var, emp, rtol=0.02)

    def test_batch_rows(self):
        layer = BayesianLinear(3, 2, rng=0, rho_init=-1.0)
        H = np.random.default_rng(1).standard_normal((4, 3))
        batch = activation_stats(layer, H)
        for r in range(4):
            np.testing.assert_allclose(batch.var[r], activation_stats(layer, H[r]).var)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            activation_stats(BayesianLinear(3, 2, rng=0), np.ones(4))


class TestScore:
    def test_values(self):
        assert uncertainty_score(0.0) == 0.0
        assert uncertainty_score(1 / 80) == pytest.approx(10 * math.log(2))
        assert UncertaintyScoreParams() == UncertaintyScoreParams(10, 80)

    def test_vector_uses_mean(self):
        assert uncertainty_score(np.array([0.0, 2 / 80])) == pytest.approx(10 * math.log(2))

    @settings(max_examples=100)
    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    @example(999999.9999999999, 1e6)
    def test_monotone(self, a, b):
        if a < b:
            # neighbouring floats can round to the same log
            assert uncertainty_score(a) <= uncertainty_score(b)
            if b > a * (1 + 1e-9):
                assert uncertainty_score(a) < uncertainty_score(b)

    def test_errors(self):
        with pytest.raises(ValueError):
            uncertainty_score(-1.0)
        with pytest.raises(ValueError):
            UncertaintyScoreParams(0, 1)


class TestEnsembleUncertainty:
    def test_values(self):
        assert ensemble_uncertainty([3.0] * 10) == 0.0
        assert ensemble_uncertainty([0] * 5 + [1] * 5) == 0.5

    @settings(max_examples=100)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.floats(-100, 100))
    def test_scale_and_shift(self, z, c):
        z = np.array(z)
        base = ensemble_uncertainty(z)
        assert ensemble_uncertainty(z + c) == pytest.approx(base, abs=1e-9)
        assert ensemble_uncertainty(c * z) == pytest.approx(abs(c) * base, rel=1e-9, abs=1e-9)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            ensemble_uncertainty([1.0])


@pytest.fixture(scope="module")
def setup():
    ds = random_dataset(30, 25, 10, 5)
    # spread user activity so both cohorts are populated at threshold 8
    keep = np.ones(len(ds), dtype=bool)
    for u in range(0, 30, 2):
        keep[np.nonzero(ds.users == u)[0][:4]] = False
    ds = ds.take(np.nonzero(keep)[0])
    split = leave_one_out_split(ds)
    model, _ = train_supermodel(split.train, build_ensemble_config(
        3, BASE, seed=0, depth_cycle=((8,), (8, 6)), meta_epochs=2))
    return split, model


class TestProfile:
    @pytest.mark.parametrize("method", ["reparam", "ensemble"])
    def test_report(self, setup, method, tmp_path):
        split, model = setup
        rep = user_uncertainty_profile(model, split, method, sparse_threshold=8, num_negatives=3)
        assert len(rep.scores) == len(split) * 4
        assert (rep.scores >= 0).all()
        assert set(rep.ratios) == {"sparse_vs_dense", "inconsistent_vs_consistent"}
        assert rep.ratios["sparse_vs_dense"]["value"] is not None
        rep.write_pairs_csv(tmp_path / "pairs.csv")
        rep.write_curve_csv(tmp_path / "curve.csv")
        # independent group-by over the dump reproduces the curve
        counts = split.train.user_counts()
        per_user = defaultdict(list)
        with open(tmp_path / "pairs.csv") as fh:
            for row in csv.DictReader(fh):
                assert row["method"] == method
                per_user[int(row["user"])].append(float(row["score"]))
        users = sorted(per_user)
        means = np.array([np.mean(per_user[u]) for u in users])
        expected = binned_curve(means, counts[users])
        with open(tmp_path / "curve.csv") as fh:
            got = list(csv.DictReader(fh))
        assert [r["ratings_bin"] for r in got] == [r["ratings_bin"] for r in expected]
        for g, e in zip(got, expected):
            assert float(g["mean_score"]) == pytest.approx(e["mean_score"], rel=1e-12)
            assert int(g["count"]) == e["count"]

    def test_zero_sigma_model(self, setup):
        split, model = setup
        learner = WeakLearner.from_state(model.learners[0].state(), model.learners[0].metadata())
        for layer in learner.bayesian_layers:
            layer.params["W_rho"][:] = -1000.0
            layer.params["b_rho"][:] = -1000.0
        rep = user_uncertainty_profile(learner, split, "reparam", sparse_threshold=8)
        np.testing.assert_array_equal(rep.scores, 0)
        for r in rep.ratios.values():
            assert r["value"] is None
            assert "zero" in r["reason"] or "empty" in r["reason"]

    def test_empty_cohort_reported(self, setup):
        split, model = setup
        rep = user_uncertainty_profile(model, split, "reparam", sparse_threshold=0)
        assert rep.ratios["sparse_vs_dense"]["value"] is None
        assert "empty" in rep.ratios["sparse_vs_dense"]["reason"]

    def test_ensemble_method_needs_supermodel(self, setup):
        split, model = setup
        with pytest.raises(ValueError):
            user_uncertainty_profile(model.learners[0], split, "ensemble")

    def test_user_scores_average_learners(self, setup):
        _, model = setup
        each = [user_scores(m, [0, 1]) for m in model.learners]
        np.testing.assert_allclose(user_scores(model, [0, 1]), np.mean(each, axis=0))


class TestPruneModel:
    def test_prunes_each_tower(self, setup):
        split, model = setup
        pruned, masks = prune_model(model, 0.2)
        assert len(masks) == model.K
        for m_orig, m_new, (mu, mi) in zip(model.learners, pruned.learners, masks):
            n = m_orig.user_tower.bayes.params["W_mu"].size
            assert mu.sum() == math.floor(0.2 * n)
            assert np.all(m_new.user_tower.bayes.params["W_mu"][mu] == 0)
            assert np.all(m_new.item_tower.bayes.params["W_mu"][mi] == 0)
            # original untouched
            assert not np.all(m_orig.user_tower.bayes.params["W_mu"][mu] == 0)
        r = pruned.predict(split.train.users, split.train.items)
        assert np.isfinite(r).all()
