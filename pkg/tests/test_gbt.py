import numpy as np
import pytest

from asymcad import gbt as G


def logloss_oracle(y, p):
    """Plain per-sample loop, no vectorized shortcuts."""
    total = 0.0
    for yi, pi in zip(y, p):
        pi = min(max(pi, 1e-15), 1 - 1e-15)
        total += -(yi * np.log(pi) + (1 - yi) * np.log(1 - pi))
    return total / len(y)


class TestFit:
    def test_separable_one_round(self):
        X = np.linspace(0, 1, 40).reshape(-1, 1)
        y = (X[:, 0] > 0.5).astype(int)
        model = G.fit_gbt(X, y, G.GbtParams(n_rounds=1, shrinkage=1.0, max_depth=1))
        pred = (model.predict_proba(X) > 0.5).astype(int)
        assert np.array_equal(pred, y)

    def test_zero_shrinkage_predicts_base(self, rng):
        X = rng.random((30, 3))
        y = rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        model = G.fit_gbt(X, y, G.GbtParams(n_rounds=5, shrinkage=0.0))
        margin = model.decision_function(X)
        assert np.allclose(margin, model.base_score)

    def test_monotone_training_loss_100_rounds(self):
        rng = np.random.default_rng(42)
        X = rng.standard_normal((200, 8))
        y = rng.integers(0, 2, 200)
        y[:2] = [0, 1]
        model = G.fit_gbt(X, y, G.GbtParams(n_rounds=100, shrinkage=0.1, max_depth=3))
        losses = np.array(model.train_losses)
        assert losses.size == 100
        assert (np.diff(losses) <= 1e-12).all()

    def test_logloss_matches_oracle(self, rng):
        y = rng.integers(0, 2, 50).astype(float)
        p = rng.random(50)
        assert abs(G.logloss(y, p) - logloss_oracle(y, p)) < 1e-12

    def test_single_class_errors(self):
        with pytest.raises(G.GbtError):
            G.fit_gbt(np.zeros((10, 2)), np.ones(10))

    def test_bad_params(self):
        with pytest.raises(G.GbtError):
            G.GbtParams(n_rounds=0).validate()
        with pytest.raises(G.GbtError):
            G.GbtParams(shrinkage=1.5).validate()
        with pytest.raises(G.GbtError):
            G.GbtParams(max_depth=0).validate()

    def test_feature_permutation_invariance(self, rng):
        X = rng.standard_normal((80, 5))
        y = (X[:, 2] > 0).astype(int)
        perm = np.array([3, 0, 2, 4, 1])
        params = G.GbtParams(n_rounds=20, shrinkage=0.2, max_depth=2)
        m1 = G.fit_gbt(X, y, params)
        m2 = G.fit_gbt(X[:, perm], y, G.GbtParams(n_rounds=20, shrinkage=0.2, max_depth=2))
        Xt = rng.standard_normal((20, 5))
        assert np.allclose(m1.predict_proba(Xt), m2.predict_proba(Xt[:, perm]))

    def test_base_score_is_logit_of_prevalence(self):
        X = np.zeros((10, 1))
        y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
        model = G.fit_gbt(X, y, G.GbtParams(n_rounds=1, shrinkage=0.0))
        assert abs(model.base_score - np.log(0.3 / 0.7)) < 1e-12


def depth2_data(rng, n=160, noise=0.15):
    """Labels from a literal depth-2 decision tree with label noise; the
    small noisy sample punishes deeper trees in validation."""
    X = rng.standard_normal((n, 6))
    y = np.where(X[:, 0] > 0, X[:, 1] > 0.3, X[:, 2] > -0.3).astype(int)
    flip = rng.random(n) < noise
    y[flip] = 1 - y[flip]
    return X, y


class TestCrossValidate:
    def test_single_point_grid(self, rng):
        X = rng.standard_normal((64, 3))
        y = rng.integers(0, 2, 64)
        y[:32], y[32:] = 0, 1
        best, table = G.cross_validate(X, y, grid=[(0.1, 2)], n_rounds=5)
        assert best == (0.1, 2)
        assert list(table) == [(0.1, 2)]

    def test_duplicated_entries_deterministic(self, rng):
        X = rng.standard_normal((64, 3))
        y = np.r_[np.zeros(32, int), np.ones(32, int)]
        best, table = G.cross_validate(X, y, grid=[(0.1, 2), (0.1, 2), (0.1, 2)],
                                       n_rounds=5)
        assert best == (0.1, 2)
        assert len(table) == 1

    def test_too_few_samples(self):
        X = np.zeros((20, 2))
        y = np.r_[np.zeros(10, int), np.ones(10, int)]
        with pytest.raises(G.GbtError):
            G.cross_validate(X, y)

    def test_folds_partition_and_stratify(self, rng):
        y = rng.integers(0, 2, 200)
        y[:16], y[16:32] = 0, 1
        folds = G.stratified_folds(y, 16, seed=3)
        joined = np.sort(np.concatenate(folds))
        assert np.array_equal(joined, np.arange(200))
        pos_counts = [int(y[f].sum()) for f in folds]
        assert max(pos_counts) - min(pos_counts) <= 1

    def test_deterministic_per_seed(self, rng):
        y = rng.integers(0, 2, 100)
        a = G.stratified_folds(y, 16, seed=7)
        b = G.stratified_folds(y, 16, seed=7)
        assert all(np.array_equal(x, z) for x, z in zip(a, b))

    def test_recovers_shallow_depth(self):
        wins = 0
        for rep in range(10):
            rng = np.random.default_rng(500 + rep)
            X, y = depth2_data(rng)
            best, _ = G.cross_validate(
                X, y, grid=[(0.3, d) for d in (2, 3, 4, 6)],
                n_rounds=20, seed=rep)
            if best[1] in (2, 3):
                wins += 1
        assert wins >= 8


class TestSerialization:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        X = rng.standard_normal((100, 6))
        y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
        model = G.fit_gbt(X, y, G.GbtParams(n_rounds=30, shrinkage=0.1, max_depth=4))
        path = tmp_path / "model.bin"
        G.save_model(model, path)
        back = G.load_model(path)
        Xt = rng.standard_normal((50, 6))
        assert np.array_equal(model.decision_function(Xt), back.decision_function(Xt))
        assert back.base_score == model.base_score

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(G.GbtError):
            G.load_model(path)

    def test_predictions_csv(self, tmp_path):
        path = tmp_path / "pred.csv"
        G.write_predictions_csv(path, ["a", "b"], [0.25, 0.75])
        lines = path.read_text().splitlines()
        assert lines[0] == "sample_id,posterior"
        assert lines[1].startswith("a,0.25")


class TestCoordinateSearch:
    def test_improves_or_keeps_validation_loss(self, rng):
        X, y = depth2_data(rng, n=300)
        Xv, yv = depth2_data(rng, n=200)
        start = G.GbtParams(n_rounds=5, shrinkage=0.1, max_depth=2)
        base = G.fit_gbt(X, y, start)
        base_loss = G.logloss(yv.astype(float), base.predict_proba(Xv))
        best, loss = G.coordinate_search(X, y, Xv, yv, start,
                                         round_choices=(5, 60), mcw_choices=(1e-6,),
                                         max_sweeps=1)
        assert loss <= base_loss + 1e-12

    def test_bounded_choices(self, rng):
        X, y = depth2_data(rng, n=200)
        best, _ = G.coordinate_search(X, y, X, y,
                                      G.GbtParams(n_rounds=5, max_depth=2),
                                      round_choices=(5, 20), mcw_choices=(1e-6, 1e-2),
                                      max_sweeps=1)
        assert best.n_rounds in (5, 20)
        assert best.min_child_weight in (1e-6, 1e-2)
