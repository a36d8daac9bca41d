import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qcount import QuantityCounter
from qcount.synthdata import DatasetSpec, generate_split

SPEC = DatasetSpec(n_train=6, n_val=3, n_test=0, image_size=32, count_range=(1, 6),
                   distractor_count_range=(1, 3), glyph_radius=(1.5, 2.0), seed=4)


@pytest.fixture(scope="module")
def fitted():
    tr = generate_split(SPEC, "train")
    va = generate_split(SPEC, "val")
    est = QuantityCounter(epochs=2, batch_size=3, lr=1e-3, n_counterfactual=4, image_size=32, embed_dim=16)
    est.fit(tr.images, tr.densities, tr.class_names, eval_set=(va.images, va.densities, va.class_names))
    return est, tr, va


def test_params_and_clone():
    est = QuantityCounter(epochs=3, variant="no_t2c")
    params = est.get_params()
    assert params["epochs"] == 3 and params["variant"] == "no_t2c"
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        QuantityCounter(image_size=32).predict(np.zeros((1, 32, 32, 3), np.uint8), "discs")


def test_fit_predict(fitted):
    est, tr, va = fitted
    assert len(est.history_) == 2 and "val_mae" in est.history_[0]
    assert est.classes_ == sorted(set(tr.class_names))
    dens = est.predict_density(va.images, va.class_names)
    assert dens.shape == (3, 32, 32) and (dens >= 0).all()
    np.testing.assert_allclose(est.predict(va.images, va.class_names), dens.sum(axis=(1, 2)), rtol=1e-6)
    # float images in [0, 1] give the same answer as their uint8 source
    as_float = est.predict(va.images.astype(np.float32) / 255, va.class_names)
    np.testing.assert_allclose(as_float, est.predict(va.images, va.class_names), rtol=1e-5)
    assert np.isfinite(est.score(va.images, va.counts, va.class_names))
    assert est.score(va.images, va.densities, va.class_names) == pytest.approx(
        est.score(va.images, va.densities.sum(axis=(1, 2)), va.class_names))


def test_single_class_name_broadcasts(fitted):
    est, _, va = fitted
    a = est.predict(va.images, "discs")
    b = est.predict(va.images, ["discs"] * 3)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("bad", [
    np.zeros((2, 32, 32), np.uint8),
    np.zeros((2, 16, 16, 3), np.uint8),
    np.full((1, 32, 32, 3), 2.0),
    np.full((1, 32, 32, 3), np.nan),
])
def test_input_validation(fitted, bad):
    with pytest.raises(ValueError):
        fitted[0].predict(bad, "discs")


def test_class_name_length_mismatch(fitted):
    est, _, va = fitted
    with pytest.raises(ValueError):
        est.predict(va.images, ["discs"])
    with pytest.raises(ValueError):
        QuantityCounter(image_size=32).fit(va.images, -va.densities, va.class_names)
