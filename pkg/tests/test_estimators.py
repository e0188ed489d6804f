import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ovsplat.estimators import (GuidedLanguageField, InstanceFieldDistiller, OpenVocabularySegmenter,
                                QueryClassifier)


def toy_rows(rng, n=240):
    # well separated clusters, like distilled instance features
    lab = rng.integers(0, 4, n)
    x = 2.0 * rng.normal(size=(4, 4))[lab] + 0.1 * rng.normal(size=(n, 4))
    table = np.eye(4, 6)
    return x, lab, table


class TestGuidedLanguageField:
    def test_params_round_trip(self):
        est = GuidedLanguageField(n_codes=5, lambda_ent=0.0)
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(n_iter=3).n_iter == 3

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            GuidedLanguageField().transform(np.zeros((2, 4)))

    def test_fit_improves_and_validates(self, rng):
        x, lab, table = toy_rows(rng)
        y = table[lab]
        short = GuidedLanguageField(n_codes=8, n_iter=2, lift_hidden=32).fit(x, y)
        long = GuidedLanguageField(n_codes=8, n_iter=600, lift_hidden=32).fit(x, y)
        assert long.score(x, y) > short.score(x, y)
        assert long.score(x, y) > 0.9
        assert long.transform(x).shape == (240, 6)
        assert long.predict(x).shape == (240,)
        np.testing.assert_allclose(long.predict_proba(x).sum(axis=1), 1.0)
        with pytest.raises(ValueError):
            long.transform(np.zeros((3, 5)))
        with pytest.raises(ValueError):
            GuidedLanguageField().fit(x, y[:10])

    def test_groups(self, rng):
        x, lab, table = toy_rows(rng)
        est = GuidedLanguageField(n_codes=4, n_iter=5).fit(x, table[lab], groups=lab)
        assert len(est.loss_log_.rows) == 5
        with pytest.raises(ValueError):
            GuidedLanguageField(n_iter=2).fit(x, table[lab], groups=lab[:5])

    def test_deterministic(self, rng):
        x, lab, table = toy_rows(rng)
        a = GuidedLanguageField(n_iter=20).fit(x, table[lab]).transform(x)
        b = GuidedLanguageField(n_iter=20).fit(x, table[lab]).transform(x)
        np.testing.assert_array_equal(a, b)


class TestQueryClassifier:
    def test_exact_queries(self, rng):
        table = rng.normal(size=(3, 5))
        clf = QueryClassifier().fit(table, ["a", "b", "c"])
        assert list(clf.predict(table * 3.0)) == ["a", "b", "c"]
        assert clf.score(table, ["a", "b", "c"]) == 1.0

    def test_zero_query(self):
        with pytest.raises(ValueError):
            QueryClassifier().fit(np.zeros((2, 3)))

    def test_width_check(self, rng):
        clf = QueryClassifier().fit(rng.normal(size=(2, 3)))
        with pytest.raises(ValueError):
            clf.predict(np.zeros((1, 4)))


class TestSceneEstimators:
    def test_distiller(self, tiny_pack):
        d = InstanceFieldDistiller(n_iter=3, anchors_per_axis=3, d_ins=8)
        with pytest.raises(TypeError):
            d.fit(np.zeros((3, 3)))
        d.fit(tiny_pack)
        maps = d.transform(tiny_pack.test_views)
        assert maps.shape == (1, 24, 24, 8)
        with pytest.raises(TypeError):
            d.transform([1, 2])

    def test_segmenter(self, tiny_pack):
        s = OpenVocabularySegmenter(stage1_iter=3, stage2_iter=3, n_codes=4, anchors_per_axis=3)
        with pytest.raises(NotFittedError):
            s.predict(tiny_pack)
        s.fit(tiny_pack)
        pred = s.predict(tiny_pack.test_views)
        assert pred.shape == (1, 24, 24)
        assert set(np.unique(pred)) <= {-1, 0, 1, 2}
        assert 0.0 <= s.score(tiny_pack) <= 1.0
