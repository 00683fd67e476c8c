import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pranet.estimators import PRANetClassifier, PRANetKeypointEstimator, PRANetPartSegmenter, evaluate_estimator
from pranet.exceptions import DimensionError, NumericError
from pranet.geometry import PointCloud
from pranet.trainkit import NUM_PARTS, make_split
from pranet.validation import check_categories, check_clouds, check_point_labels

FAST = {"epochs": 1, "batch_size": 4}


@pytest.fixture(scope="module")
def data():
    return make_split(["sphere", "cube"], n_train=6, n_test=4, points=48, seed=2)


@pytest.mark.parametrize("cls", [PRANetClassifier, PRANetPartSegmenter, PRANetKeypointEstimator])
def test_get_params_and_clone(cls):
    est = cls(lr=0.05, use_irl=False)
    params = est.get_params()
    assert params["lr"] == 0.05 and params["use_irl"] is False
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    with pytest.raises(NotFittedError):
        twin._raw(np.zeros((1, 8, 3)))


def test_classifier_with_string_labels(data):
    (X, y, _, _), (Xte, yte, _, _) = data
    names = np.array(["ball", "box"])
    clf = PRANetClassifier(**FAST).fit(X, names[y], eval_set=(Xte, names[yte]))
    np.testing.assert_array_equal(clf.classes_, names)
    assert set(clf.predict(Xte)) <= set(names)
    proba = clf.predict_proba(Xte)
    assert proba.shape == (4, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert 0.0 <= clf.score(Xte, names[yte]) <= 1.0
    assert "val_oa" in clf.history_[-1]
    record = evaluate_estimator(clf, Xte, names[yte])
    assert set(record) == {"oa", "macc"}


def test_part_segmenter(data):
    (X, y, parts, _), (Xte, yte, parts_te, _) = data
    seg = PRANetPartSegmenter(num_parts=NUM_PARTS, num_categories=2, **FAST).fit(X, parts, y)
    pred = seg.predict(Xte, yte)
    assert pred.shape == parts_te.shape and pred.max() < NUM_PARTS
    assert 0.0 <= seg.score(Xte, parts_te, yte) <= 1.0
    assert seg.predict_proba(Xte, yte).shape == parts_te.shape + (NUM_PARTS,)


def test_keypoint_estimator(data):
    (X, _, _, mask), (Xte, _, _, mask_te) = data
    kp = PRANetKeypointEstimator(**FAST).fit(X, mask)
    p = kp.predict_proba(Xte)
    assert p.shape == mask_te.shape and np.all((p > 0) & (p < 1))
    assert set(np.unique(kp.predict(Xte))) <= {0, 1}
    assert 0.0 <= kp.score(Xte, mask_te) <= 1.0


def test_input_validation():
    with pytest.raises(DimensionError):
        check_clouds(np.zeros((2, 5, 2)))
    with pytest.raises(DimensionError):
        check_clouds([np.zeros((4, 3)), np.zeros((5, 3))])
    with pytest.raises(NumericError):
        check_clouds(np.full((1, 4, 3), np.nan))
    assert check_clouds(PointCloud(np.zeros((4, 3)))).shape == (1, 4, 3)
    with pytest.raises(ValueError):
        check_point_labels(np.array([[0, 2]]), (1, 2), binary=True)
    with pytest.raises(ValueError):
        check_point_labels(np.array([[0.5, 1.0]]), (1, 2))
    with pytest.raises(ValueError):
        check_categories([0, 3], 2, num_categories=3)
    with pytest.raises(ValueError):
        check_categories(None, 2)
    with pytest.raises(DimensionError):
        PRANetClassifier(**FAST).fit(np.zeros((3, 8, 3)), [0, 1])
