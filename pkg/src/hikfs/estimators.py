"""Scikit-learn style wrappers over the supervised and episodic pipelines.

These estimators cover flat feature matrices only; raster datasets and the
file formats go through the library API or the command-line tool.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .hierarchy import ClassHierarchy, marginal_fine_probs
from .memory import bank_slot_list, coarse_slot_union, task_slot_tensors
from .model import forward_full, head_plan
from .training import (
    TrainConfig,
    encode_dataset,
    evaluate_episodes,
    finetune_supervised,
    pretrain_supervised,
    train_meta,
)


def _build_hierarchy(classes: np.ndarray, parent_map):
    """Two-level hierarchy over the observed labels.

    ``parent_map`` maps each fine label to an arbitrary hashable coarse
    label; None collapses everything under one coarse class. Returns the
    hierarchy plus the sorted coarse label values.
    """
    if parent_map is None:
        return ClassHierarchy.single_coarse(len(classes)), np.zeros(1, dtype=np.int64)
    missing = [c for c in classes if c not in parent_map]
    if missing:
        raise ValueError(f"parent_map is missing fine labels {missing!r}")
    coarse_values = np.unique(np.asarray([parent_map[c] for c in classes]))
    parent = np.searchsorted(coarse_values,
                             np.asarray([parent_map[c] for c in classes]))
    return ClassHierarchy(parent, num_coarse=len(coarse_values)), coarse_values


def _label_indices(y, classes: np.ndarray) -> np.ndarray:
    return np.searchsorted(classes, y).astype(np.int64)


def _marginal_probs(params, plan, hier, X, *, fine_slots=None,
                    coarse_slots=None, k=1, metric="dot_cosine",
                    chunk=256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(X), chunk):
            a, b = forward_full(params, X[start:start + chunk], plan=plan,
                                fine_slots=fine_slots,
                                coarse_slots=coarse_slots, k=k, metric=metric)
            out.append(marginal_fine_probs(a, b, hier).data)
    return np.concatenate(out)


class CoarseToFineClassifier(BaseEstimator, ClassifierMixin):
    """Supervised coarse-to-fine classifier with a memory-backed KNN head.

    ``fit`` runs the two-stage pipeline: pretrain the encoder and both
    linear heads, then (with the KNN head enabled) seed the class memory
    and fine-tune the scoring transforms while everything else stays
    frozen. Prediction scores each sample by the fine-class marginal,
    summing conditional fine probabilities against the coarse posterior.

    Parameters mirror TrainConfig; ``parent_map`` assigns each fine label
    a coarse label (None puts all classes under a single coarse class).

    Attributes after fit: ``classes_``, ``coarse_classes_``,
    ``hierarchy_``, ``params_``, ``memory_``, ``n_features_in_``.
    """

    def __init__(self, parent_map=None, encoder=None, epochs=5,
                 finetune_epochs=2, batch_size=32, lr=0.01, momentum=0.9,
                 weight_decay=0.0, optimizer=None, schedule=None,
                 slots_per_class=12, refresh_clusters=3, merge_rate=0.95,
                 utility_up=1.05, utility_down=0.95, top_k=1, metric=None,
                 use_hierarchy=True, use_attention=True, use_mlp=True,
                 use_knn=True, seed=0):
        self.parent_map = parent_map
        self.encoder = encoder
        self.epochs = epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.schedule = schedule
        self.slots_per_class = slots_per_class
        self.refresh_clusters = refresh_clusters
        self.merge_rate = merge_rate
        self.utility_up = utility_up
        self.utility_down = utility_down
        self.top_k = top_k
        self.metric = metric
        self.use_hierarchy = use_hierarchy
        self.use_attention = use_attention
        self.use_mlp = use_mlp
        self.use_knn = use_knn
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            setting="supervised", epochs=self.epochs,
            finetune_epochs=self.finetune_epochs, batch_size=self.batch_size,
            lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, optimizer=self.optimizer,
            schedule=self.schedule, slots_per_class=self.slots_per_class,
            refresh_clusters=self.refresh_clusters,
            merge_rate=self.merge_rate, utility_up=self.utility_up,
            utility_down=self.utility_down, top_k=self.top_k,
            metric=self.metric, encoder=self.encoder,
            use_hierarchy=self.use_hierarchy,
            use_attention=self.use_attention, use_mlp=self.use_mlp,
            use_knn=self.use_knn, seed=self.seed)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype="float64")
        cfg = self._config()
        self.classes_ = np.unique(y)
        hier, coarse_values = _build_hierarchy(self.classes_, self.parent_map)
        self.coarse_classes_ = coarse_values
        self.hierarchy_ = hier
        ds = Dataset(X, _label_indices(y, self.classes_), hier,
                     split_tag="train")
        params = pretrain_supervised(cfg, ds)
        if cfg.use_knn:
            params, bank = finetune_supervised(cfg, params, ds)
            self.memory_ = bank
        else:
            self.memory_ = None
        self.params_ = params
        self.n_features_in_ = X.shape[1]
        return self

    def _check_predict_input(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = check_array(X, dtype="float64")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, "
                             f"expected {self.n_features_in_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_predict_input(X)
        cfg = self._config()
        plan = head_plan("supervised", use_mlp=cfg.use_mlp,
                         use_knn=cfg.use_knn)
        slots = bank_slot_list(self.memory_) if cfg.use_knn else None
        hier = (self.hierarchy_ if cfg.use_hierarchy
                else ClassHierarchy.single_coarse(len(self.classes_)))
        return _marginal_probs(self.params_, plan, hier, X,
                               fine_slots=slots, k=cfg.top_k,
                               metric=cfg.metric)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Encoder embedding of each row."""
        X = self._check_predict_input(X)
        out = []
        with ad.no_grad():
            for start in range(0, len(X), 256):
                out.append(self.params_.encode(X[start:start + 256]).data)
        return np.concatenate(out)


class EpisodicFewShotClassifier(BaseEstimator, ClassifierMixin):
    """Episodically trained few-shot classifier.

    ``fit`` meta-trains the encoder (and attention transforms) on N-way
    K-shot tasks sampled from the training data. The fitted object can
    score samples of the *training* classes directly, using a memory
    built from the full training set, or measure few-shot transfer on a
    disjoint label space via ``evaluate_episodes``.

    Attributes after fit: ``classes_``, ``coarse_classes_``,
    ``hierarchy_``, ``params_``, ``memory_``, ``n_features_in_``.
    """

    def __init__(self, parent_map=None, encoder=None, iterations=1000,
                 lr=0.001, momentum=0.9, weight_decay=0.0, optimizer=None,
                 schedule=None, memory_mode="mem3", metric=None, top_k=1,
                 way=5, shot=5, queries=5, eval_episodes=600,
                 use_hierarchy=True, use_attention=True, use_mlp=True,
                 use_knn=True, seed=0):
        self.parent_map = parent_map
        self.encoder = encoder
        self.iterations = iterations
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.schedule = schedule
        self.memory_mode = memory_mode
        self.metric = metric
        self.top_k = top_k
        self.way = way
        self.shot = shot
        self.queries = queries
        self.eval_episodes = eval_episodes
        self.use_hierarchy = use_hierarchy
        self.use_attention = use_attention
        self.use_mlp = use_mlp
        self.use_knn = use_knn
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            setting="meta", iterations=self.iterations, lr=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay,
            optimizer=self.optimizer, schedule=self.schedule,
            memory_mode=self.memory_mode, metric=self.metric,
            top_k=self.top_k, way=self.way, shot=self.shot,
            queries=self.queries, eval_episodes=self.eval_episodes,
            encoder=self.encoder, use_hierarchy=self.use_hierarchy,
            use_attention=self.use_attention, use_mlp=self.use_mlp,
            use_knn=self.use_knn, seed=self.seed)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype="float64")
        cfg = self._config()
        self.classes_ = np.unique(y)
        hier, coarse_values = _build_hierarchy(self.classes_, self.parent_map)
        self.coarse_classes_ = coarse_values
        self.hierarchy_ = hier
        ds = Dataset(X, _label_indices(y, self.classes_), hier,
                     split_tag="train")
        self.params_ = train_meta(cfg, ds)
        # frozen slots from the whole training set, so the fitted object
        # can score training-class samples without a fresh support set
        feats = encode_dataset(self.params_, ds)
        support = [feats[np.flatnonzero(ds.fine_labels == j)]
                   for j in range(hier.num_fine)]
        with ad.no_grad():
            slots = task_slot_tensors(support, cfg.memory_mode)
        self.memory_ = [t.data.copy() for t in slots]
        self.n_features_in_ = X.shape[1]
        return self

    def _check_predict_input(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = check_array(X, dtype="float64")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, "
                             f"expected {self.n_features_in_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_predict_input(X)
        cfg = self._config()
        plan = head_plan("meta", use_mlp=cfg.use_mlp, use_knn=cfg.use_knn)
        hier = (self.hierarchy_ if cfg.use_hierarchy
                else ClassHierarchy.single_coarse(len(self.classes_)))
        fine_slots = [Tensor(m) for m in self.memory_]
        coarse_slots = coarse_slot_union(fine_slots, hier.parent,
                                         hier.num_coarse)
        return _marginal_probs(self.params_, plan, hier, X,
                               fine_slots=fine_slots,
                               coarse_slots=coarse_slots, k=cfg.top_k,
                               metric=cfg.metric)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Encoder embedding of each row."""
        X = self._check_predict_input(X)
        out = []
        with ad.no_grad():
            for start in range(0, len(X), 256):
                out.append(self.params_.encode(X[start:start + 256]).data)
        return np.concatenate(out)

    def evaluate_episodes(self, X, y, parent_map=None, n_episodes=None,
                          seed=None, workers=1):
        """Few-shot transfer: N-way episodes over a fresh label space.

        ``y`` may name classes never seen in fit; ``parent_map`` gives
        their coarse labels (defaults to the map used at fit time, which
        must then cover the new labels). Returns (mean_acc, ci95,
        per-episode accuracies).
        """
        check_is_fitted(self)
        X, y = check_X_y(X, y, dtype="float64")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, "
                             f"expected {self.n_features_in_}")
        classes = np.unique(y)
        pmap = self.parent_map if parent_map is None else parent_map
        hier, _ = _build_hierarchy(classes, pmap)
        ds = Dataset(X, _label_indices(y, classes), hier, split_tag="test")
        return evaluate_episodes(self.params_, ds, self._config(),
                                 n_episodes=n_episodes, seed=seed,
                                 workers=workers)
