import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from synprune.estimator import SynapticPruningClassifier, check_images

from .conftest import blob_dataset


@pytest.fixture(scope="module")
def blob_arrays():
    d = blob_dataset(n=96, side=8, classes=3)
    labels = np.array(["a", "b", "c"])[d.y_train]
    return d.x_train[:, 0], labels


def quick(**kw):
    params = dict(width=4, epochs=3, milestones=(2,), lr=0.05, lam=1e-4, batch_size=16, random_state=0)
    params.update(kw)
    return SynapticPruningClassifier(**params)


class TestCheckImages:
    def test_flat_square(self):
        assert check_images(np.zeros((3, 16))).shape == (3, 1, 4, 4)

    def test_flat_with_shape(self):
        assert check_images(np.zeros((2, 24)), (2, 3, 4)).shape == (2, 2, 3, 4)

    def test_stack_and_nchw(self):
        assert check_images(np.zeros((2, 5, 5))).shape == (2, 1, 5, 5)
        assert check_images(np.zeros((2, 3, 5, 5))).shape == (2, 3, 5, 5)

    @pytest.mark.parametrize("X, shape", [(np.zeros((2, 15)), None), (np.zeros((2, 16)), (3, 3)),
                                          (np.zeros((1, 1, 1, 2, 2)), None)])
    def test_rejects(self, X, shape):
        with pytest.raises(ValueError):
            check_images(X, shape)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            check_images(np.full((2, 4), np.nan))


class TestClassifier:
    def test_fit_predict(self, blob_arrays):
        X, y = blob_arrays
        clf = quick().fit(X, y)
        assert set(clf.classes_) == {"a", "b", "c"}
        assert clf.score(X, y) > 0.9
        p = clf.predict_proba(X)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
        np.testing.assert_array_equal(clf.classes_[p.argmax(axis=1)], clf.predict(X))
        assert clf.kernel_sparsity_ == 0.0
        assert len(clf.history_.records) == 3

    def test_prune_hits_exact_count(self, blob_arrays):
        X, y = blob_arrays
        clf = quick(sparsity=0.5, finetune_epochs=1).fit(X, y)
        total = sum(m.size for m in clf.network_.masks().values())
        assert clf.kernel_sparsity_ == pytest.approx(np.floor(0.5 * total) / total)
        assert clf.plan_.pruned_count == int(np.floor(0.5 * total))
        assert clf.predict(X).shape == (len(X),)

    def test_flat_input(self, blob_arrays):
        X, y = blob_arrays
        clf = quick(epochs=1, milestones=()).fit(X.reshape(len(X), -1), y)
        assert clf.n_features_in_ == 64
        assert clf.predict(X.reshape(len(X), -1)).shape == (len(X),)

    def test_deterministic(self, blob_arrays):
        X, y = blob_arrays
        a = quick(epochs=1, milestones=()).fit(X, y).decision_function(X)
        b = quick(epochs=1, milestones=()).fit(X, y).decision_function(X)
        np.testing.assert_array_equal(a, b)

    def test_params_and_clone(self):
        clf = quick(sparsity=0.3)
        params = clf.get_params()
        assert params["sparsity"] == 0.3 and params["width"] == 4
        twin = clone(clf)
        assert twin.get_params() == params and twin is not clf
        clf.set_params(lam=0.5)
        assert clf.lam == 0.5

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            quick().predict(np.zeros((1, 8, 8)))

    def test_feature_mismatch(self, blob_arrays):
        X, y = blob_arrays
        clf = quick(epochs=1, milestones=()).fit(X, y)
        with pytest.raises(ValueError, match="features"):
            clf.predict(np.zeros((2, 6, 6)))

    def test_bad_sparsity(self, blob_arrays):
        X, y = blob_arrays
        with pytest.raises(ValueError, match="sparsity"):
            quick(sparsity=1.0).fit(X, y)

    def test_validation_split(self, blob_arrays):
        X, y = blob_arrays
        clf = quick(epochs=2, milestones=(), validation_fraction=0.25).fit(X, y)
        assert clf.score(X, y) > 0.5

    @pytest.mark.parametrize("variant", ["standard", "non_fix_gamma", "non_kernel_norm"])
    def test_variants_fit(self, blob_arrays, variant):
        X, y = blob_arrays
        clf = quick(epochs=1, milestones=(), variant=variant).fit(X, y)
        assert clf.network_.variant == variant
