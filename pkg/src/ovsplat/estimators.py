"""scikit-learn style wrappers around the training stages.

``InstanceFieldDistiller`` fits stage 1 on a supervision pack and transforms
views into instance feature maps. ``GuidedLanguageField`` is the stage-2
head on plain arrays: instance features in, language features out.
``QueryClassifier`` turns language features into labels by cosine score,
and ``OpenVocabularySegmenter`` chains both stages for label maps.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import substream
from .rasterizer import Camera
from .semantics import CodebookPair, GuidedAttention, code_assignment, language_field
from .synthscene import SupervisionPack, View
from .trainer import TrainConfig, fit_language_rows, train_stage1, train_stage2

__all__ = ["InstanceFieldDistiller", "GuidedLanguageField", "QueryClassifier",
           "OpenVocabularySegmenter"]


def _check_pack(pack) -> SupervisionPack:
    if not isinstance(pack, SupervisionPack):
        raise TypeError(f"expected a SupervisionPack, got {type(pack).__name__}")
    return pack


def _cameras(X) -> list[Camera]:
    if isinstance(X, SupervisionPack):
        X = X.views
    if isinstance(X, (Camera, View)):
        X = [X]
    cams = [x.camera if isinstance(x, View) else x for x in X]
    for c in cams:
        if not isinstance(c, Camera):
            raise TypeError(f"expected cameras or views, got {type(c).__name__}")
    return cams


class InstanceFieldDistiller(TransformerMixin, BaseEstimator):
    """Stage 1: geometry, appearance and the contrastive instance field."""

    def __init__(self, n_iter: int = 3000, lambda_ins: float = 0.001, tau: float = 0.1,
                 pixel_budget: int = 256, anchors_per_axis: int = 6, d_ins: int = 16,
                 seed: int = 7):
        self.n_iter = n_iter
        self.lambda_ins = lambda_ins
        self.tau = tau
        self.pixel_budget = pixel_budget
        self.anchors_per_axis = anchors_per_axis
        self.d_ins = d_ins
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, iters1=self.n_iter, lambda_ins=self.lambda_ins,
                           tau=self.tau, pixel_budget=self.pixel_budget,
                           anchors_per_axis=self.anchors_per_axis, d_ins=self.d_ins)

    def fit(self, X, y=None):
        pack = _check_pack(X)
        self.model_, self.loss_log_ = train_stage1(pack, self._config())
        self.n_features_out_ = self.d_ins
        return self

    def transform(self, X) -> np.ndarray:
        """Instance maps ``(n_views, H, W, d_ins)`` for cameras, views or a pack."""
        check_is_fitted(self, "model_")
        return np.stack([self.model_.render(c)[1].values.numpy() for c in _cameras(X)])


class GuidedLanguageField(TransformerMixin, BaseEstimator):
    """Codebook attention plus lift, fit on ``(instance features, language targets)``.

    ``groups`` in :meth:`fit` splits rows into minibatches (one per view, say);
    without it every step sees all rows.
    """

    def __init__(self, n_codes: int = 64, lift_hidden: int = 64, n_iter: int = 1500,
                 lambda_ent: float = 10.0, learning_rate: float = 1e-3,
                 use_attention: bool = True, use_residual: bool = True, use_lift: bool = True,
                 strict_linear: bool = False, seed: int = 7):
        self.n_codes = n_codes
        self.lift_hidden = lift_hidden
        self.n_iter = n_iter
        self.lambda_ent = lambda_ent
        self.learning_rate = learning_rate
        self.use_attention = use_attention
        self.use_residual = use_residual
        self.use_lift = use_lift
        self.strict_linear = strict_linear
        self.seed = seed

    def fit(self, X, Y, groups=None):
        X, Y = check_X_y(X, Y, multi_output=True, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[1] < 1:
            raise ValueError("Y must be a 2-D array of language targets")
        if self.n_codes < 1 or self.n_iter < 1:
            raise ValueError("n_codes and n_iter must be at least 1")
        d_ins, d_lang = X.shape[1], Y.shape[1]
        d_c = d_ins if self.use_lift else d_lang
        sem = substream(self.seed, "semantics")
        self.codebooks_ = CodebookPair(self.n_codes, d_ins, d_c, sem)
        self.attention_ = GuidedAttention(
            d_ins, d_c, d_lang, self.lift_hidden, self.n_codes, sem,
            strict_linear=self.strict_linear, use_attention=self.use_attention,
            use_residual=self.use_residual, use_lift=self.use_lift)
        if groups is None:
            feats, targets = [X], [Y]
        else:
            groups = np.asarray(groups)
            if groups.shape != (X.shape[0],):
                raise ValueError("groups must have one entry per row")
            keys = np.unique(groups)
            feats = [X[groups == g] for g in keys]
            targets = [Y[groups == g] for g in keys]
        self.loss_log_ = fit_language_rows(
            self.codebooks_, self.attention_, feats, targets, self.n_iter, self.lambda_ent,
            self.learning_rate, substream(self.seed, "sampling-stage2"))
        self.n_features_in_ = d_ins
        self.n_features_out_ = d_lang
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "codebooks_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X) -> np.ndarray:
        lang, _ = language_field(self._checked(X), self.codebooks_, self.attention_)
        return lang.numpy()

    def predict(self, X) -> np.ndarray:
        """Most probable code per row."""
        return code_assignment(self._checked(X), self.codebooks_, self.attention_)

    def predict_proba(self, X) -> np.ndarray:
        _, probs = language_field(self._checked(X), self.codebooks_, self.attention_)
        if probs is None:
            raise ValueError("this variant has no attention probabilities")
        return probs.numpy()

    def score(self, X, Y) -> float:
        """Mean cosine similarity between predicted and target language rows."""
        pred = self.transform(X)
        Y = check_array(Y, dtype=np.float64)
        num = (pred * Y).sum(axis=1)
        den = np.maximum(np.linalg.norm(pred, axis=1) * np.linalg.norm(Y, axis=1), 1e-12)
        return float(np.mean(num / den))


class QueryClassifier(ClassifierMixin, BaseEstimator):
    """Nearest text query by cosine score.

    ``fit`` takes the query embeddings (one row per class) and optional class
    labels; ``predict`` maps language features to the best label. Ties go to
    the earlier query.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("query embeddings must be nonzero")
        self.queries_ = X / norms
        self.classes_ = np.arange(X.shape[0]) if y is None else np.asarray(y)
        if self.classes_.shape != (X.shape[0],):
            raise ValueError("y must have one label per query")
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "queries_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        norms = np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
        return (X / norms) @ self.queries_.T

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class OpenVocabularySegmenter(BaseEstimator):
    """Both stages end to end; predicts per-pixel class maps for views."""

    def __init__(self, stage1_iter: int = 3000, stage2_iter: int = 1500, n_codes: int = 64,
                 lambda_ins: float = 0.001, lambda_ent: float = 10.0, anchors_per_axis: int = 6,
                 seed: int = 7):
        self.stage1_iter = stage1_iter
        self.stage2_iter = stage2_iter
        self.n_codes = n_codes
        self.lambda_ins = lambda_ins
        self.lambda_ent = lambda_ent
        self.anchors_per_axis = anchors_per_axis
        self.seed = seed

    def fit(self, X, y=None):
        pack = _check_pack(X)
        cfg = TrainConfig(seed=self.seed, iters1=self.stage1_iter, iters2=self.stage2_iter,
                          n_codes=self.n_codes, lambda_ins=self.lambda_ins,
                          lambda_ent=self.lambda_ent, anchors_per_axis=self.anchors_per_axis,
                          d_lang=pack.table.dim)
        model, _ = train_stage1(pack, cfg)
        self.model_, _ = train_stage2(model, pack)
        self.classifier_ = QueryClassifier().fit(pack.table.vectors)
        return self

    def predict(self, X) -> np.ndarray:
        """Class maps ``(n_views, H, W)``; pixels with alpha under 0.5 get -1."""
        check_is_fitted(self, "model_")
        out = []
        for cam in _cameras(X):
            _, inst, trans = self.model_.render(cam)
            f = inst.values.numpy()
            h, w, d = f.shape
            lang, _ = language_field(f.reshape(-1, d), self.model_.codebooks, self.model_.attention)
            labels = self.classifier_.predict(lang.numpy()).reshape(h, w)
            out.append(np.where(1.0 - np.asarray(trans) >= 0.5, labels, -1))
        return np.stack(out)

    def score(self, X, y=None) -> float:
        """Mean held-out mIoU on a supervision pack."""
        from .evalkit import evaluate_2d

        check_is_fitted(self, "model_")
        miou, _, _ = evaluate_2d(self.model_, _check_pack(X))
        return float(miou)

