"""scikit-learn style estimators wrapping the networks and the training loop.

Inputs are (B, N, 3) coordinate arrays (or lists of equally sized clouds).
Fitted attributes end in an underscore: ``spec_``, ``params_``, ``history_``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import models
from .trainkit import TrainConfig, evaluate, fit_network, keypoint_metrics, partseg_metrics, predict_raw
from .validation import check_categories, check_class_labels, check_clouds, check_point_labels


class _NetworkEstimator(BaseEstimator):
    _task = ""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            scheduler=self.scheduler,
            label_smoothing=self.label_smoothing,
            batch_size=self.batch_size,
            epochs=self.epochs,
            scale_min=self.scale_min,
            scale_max=self.scale_max,
            shift_range=self.shift_range,
            bn_schedule=getattr(self, "bn_schedule", False),
            pos_weight=getattr(self, "pos_weight", 1.0),
            eval_every=self.eval_every,
            seed=self.random_state,
        )

    def _irl_kw(self) -> dict:
        return {"partition": self.partition, "sampler": self.sampler}

    def _fit(self, X, y, categories=None, eval_set=None):
        self.spec_ = self._build_spec()
        self.params_ = models.init_params(self.spec_, self.random_state)
        log = print if self.verbose else None
        self.history_ = fit_network(self.spec_, self.params_, X, y, self._train_config(), categories, eval_set, log=log)
        self.n_points_ = X.shape[1]
        return self

    def _raw(self, X, categories=None) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_raw(self.spec_, self.params_, X, categories, self.batch_size)


class PRANetClassifier(ClassifierMixin, _NetworkEstimator):
    """Shape classifier; labels may be any sortable values."""

    _task = "classify"

    def __init__(self, fusion="dfa", use_irl=True, static_graph=False, partition="dilated_top_s", sampler="knn_based",
                 optimizer="sgd", lr=0.1, momentum=0.9, weight_decay=0.0, scheduler="cosine", label_smoothing=0.2,
                 batch_size=32, epochs=50, scale_min=0.66, scale_max=1.33, shift_range=0.2, eval_every=1,
                 random_state=0, verbose=False):
        self.fusion = fusion
        self.use_irl = use_irl
        self.static_graph = static_graph
        self.partition = partition
        self.sampler = sampler
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.scheduler = scheduler
        self.label_smoothing = label_smoothing
        self.batch_size = batch_size
        self.epochs = epochs
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.shift_range = shift_range
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    def _build_spec(self):
        return models.build_classifier(len(self.classes_), self.fusion, self.use_irl, self.static_graph, **self._irl_kw())

    def fit(self, X, y, eval_set=None):
        X = check_clouds(X)
        y = check_class_labels(y, X.shape[0])
        self.classes_, yi = np.unique(y, return_inverse=True)
        ev = None
        if eval_set is not None:
            Xe = check_clouds(eval_set[0])
            ye = np.searchsorted(self.classes_, check_class_labels(eval_set[1], Xe.shape[0]))
            ev = (Xe, ye)
        return self._fit(X, yi, eval_set=ev)

    def decision_function(self, X) -> np.ndarray:
        return self._raw(check_clouds(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class PRANetPartSegmenter(_NetworkEstimator):
    """Per-point part labelling conditioned on the object category."""

    _task = "partseg"

    def __init__(self, num_parts=None, num_categories=None, fusion="dfa", use_irl=True, static_graph=False,
                 partition="dilated_top_s", sampler="knn_based", optimizer="adam", lr=0.001, momentum=0.9,
                 weight_decay=0.0, scheduler="step", label_smoothing=0.0, batch_size=16, epochs=50, scale_min=0.66,
                 scale_max=1.33, shift_range=0.2, bn_schedule=True, eval_every=1, random_state=0, verbose=False):
        self.num_parts = num_parts
        self.num_categories = num_categories
        self.fusion = fusion
        self.use_irl = use_irl
        self.static_graph = static_graph
        self.partition = partition
        self.sampler = sampler
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.scheduler = scheduler
        self.label_smoothing = label_smoothing
        self.batch_size = batch_size
        self.epochs = epochs
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.shift_range = shift_range
        self.bn_schedule = bn_schedule
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    def _build_spec(self):
        return models.build_partseg_net(self.n_parts_, self.n_categories_, self.fusion, self.use_irl, self.static_graph,
                                        **self._irl_kw())

    def fit(self, X, y, categories, eval_set=None):
        X = check_clouds(X)
        y = check_point_labels(y, X.shape[:2])
        cats = check_categories(categories, X.shape[0], self.num_categories)
        self.n_parts_ = self.num_parts or int(y.max()) + 1
        self.n_categories_ = self.num_categories or int(cats.max()) + 1
        ev = None
        if eval_set is not None:
            Xe = check_clouds(eval_set[0])
            ev = (Xe, check_point_labels(eval_set[1], Xe.shape[:2]), check_categories(eval_set[2], Xe.shape[0]))
        return self._fit(X, y, cats, ev)

    def decision_function(self, X, categories) -> np.ndarray:
        X = check_clouds(X)
        return self._raw(X, check_categories(categories, X.shape[0], self.n_categories_))

    def predict_proba(self, X, categories) -> np.ndarray:
        return softmax(self.decision_function(X, categories), axis=-1)

    def predict(self, X, categories) -> np.ndarray:
        return self.decision_function(X, categories).argmax(axis=-1)

    def score(self, X, y, categories) -> float:
        """Instance mIoU."""
        X = check_clouds(X)
        y = check_point_labels(y, X.shape[:2])
        return partseg_metrics(self.predict(X, categories), y, categories)["instance_miou"]


class PRANetKeypointEstimator(_NetworkEstimator):
    """Per-point keypoint saliency; targets are 0/1 masks of shape (B, N)."""

    _task = "keypoint"

    def __init__(self, fusion="dfa", use_irl=True, static_graph=False, partition="dilated_top_s", sampler="knn_based",
                 optimizer="adam", lr=0.001, momentum=0.9, weight_decay=0.0, scheduler="cosine", label_smoothing=0.0,
                 batch_size=32, epochs=50, scale_min=0.66, scale_max=1.33, shift_range=0.2, pos_weight=1.0,
                 threshold=0.01, eval_every=1, random_state=0, verbose=False):
        self.fusion = fusion
        self.use_irl = use_irl
        self.static_graph = static_graph
        self.partition = partition
        self.sampler = sampler
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.scheduler = scheduler
        self.label_smoothing = label_smoothing
        self.batch_size = batch_size
        self.epochs = epochs
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.shift_range = shift_range
        self.pos_weight = pos_weight
        self.threshold = threshold
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    def _build_spec(self):
        return models.build_keypoint_net(1, self.fusion, self.use_irl, self.static_graph, **self._irl_kw())

    def fit(self, X, y, eval_set=None):
        X = check_clouds(X)
        y = check_point_labels(y, X.shape[:2], binary=True)
        ev = None
        if eval_set is not None:
            Xe = check_clouds(eval_set[0])
            ev = (Xe, check_point_labels(eval_set[1], Xe.shape[:2], binary=True))
        return self._fit(X, y, eval_set=ev)

    def predict_proba(self, X) -> np.ndarray:
        return expit(self._raw(check_clouds(X))[..., 0])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.int64)

    def score(self, X, y) -> float:
        """Keypoint mIoU at the configured distance threshold."""
        X = check_clouds(X)
        y = check_point_labels(y, X.shape[:2], binary=True)
        return keypoint_metrics(self.predict_proba(X), X, y, self.threshold)["miou"]


def evaluate_estimator(est: _NetworkEstimator, X, y, categories=None) -> dict:
    """Full metric record for a fitted estimator."""
    check_is_fitted(est, "params_")
    X = check_clouds(X)
    if isinstance(est, PRANetClassifier):
        y = np.searchsorted(est.classes_, y)
    return evaluate(est.spec_, est.params_, X, np.asarray(y), categories, est.batch_size)
