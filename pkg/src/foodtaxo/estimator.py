"""scikit-learn compatible wrappers around preprocessing and staged inference."""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .engine import FIELDS, RecoveryPolicy, classify_many
from .imageio import PreparedImage, PreprocessConfig, preprocess
from .ontology import StageId
from .textnorm import DEFAULT_TAU, NormalizerConfig, load_synonyms
from .validation import check_image_ids, check_images, check_taxonomy


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer: raw JPEG/PNG bytes (or paths) -> PreparedImage."""

    def __init__(self, max_side=896, center_crop=False, jpeg_quality=90):
        self.max_side = max_side
        self.center_crop = center_crop
        self.jpeg_quality = jpeg_quality

    def fit(self, X=None, y=None):
        self.config_ = PreprocessConfig(self.max_side, self.center_crop, self.jpeg_quality)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return [
            preprocess(x.data if isinstance(x, PreparedImage) else x, self.config_)
            for x in check_images(X)
        ]


class StagedFoodClassifier(ClassifierMixin, BaseEstimator):
    """Predicts taxonomy-valid (category, subcategory, cooking_style) rows.

    Nothing is learned: ``fit`` validates the taxonomy and freezes the
    recovery policy and normalizer so ``predict`` is reproducible. Inputs
    are image bytes, paths, or PreparedImage objects (e.g. from
    :class:`ImagePreprocessor` in a pipeline).

    Parameters
    ----------
    backend : object with ``query`` and ``max_concurrency``
    taxonomy : Taxonomy, path, or YAML text
    max_retries : re-prompts per stage
    tau : approximate-match threshold for canonical mapping
    synonyms : path to a synonym table, a {level: {surface: canonical}} dict, or None
    one_shot : use the single-prompt baseline instead of staged inference
    """

    def __init__(
        self,
        backend=None,
        taxonomy=None,
        max_retries=3,
        canonical_mapping=True,
        tau=DEFAULT_TAU,
        synonyms=None,
        mixed=False,
        max_items=3,
        one_shot=False,
        max_side=896,
        center_crop=False,
        jpeg_quality=90,
        workers=1,
    ):
        self.backend = backend
        self.taxonomy = taxonomy
        self.max_retries = max_retries
        self.canonical_mapping = canonical_mapping
        self.tau = tau
        self.synonyms = synonyms
        self.mixed = mixed
        self.max_items = max_items
        self.one_shot = one_shot
        self.max_side = max_side
        self.center_crop = center_crop
        self.jpeg_quality = jpeg_quality
        self.workers = workers

    def fit(self, X=None, y=None):
        if self.backend is None or not hasattr(self.backend, "query"):
            raise ValueError("backend must provide a query(request) method")
        self.taxonomy_ = check_taxonomy(self.taxonomy)
        self.policy_ = RecoveryPolicy(int(self.max_retries), bool(self.canonical_mapping))
        if self.synonyms is None:
            self.config_ = NormalizerConfig(tau=self.tau)
        elif isinstance(self.synonyms, (str, os.PathLike)):
            with open(self.synonyms, "rb") as fh:
                self.config_ = load_synonyms(fh, self.taxonomy_, tau=self.tau)
        else:
            table = {StageId.parse(k): dict(v) for k, v in self.synonyms.items()}
            self.config_ = NormalizerConfig(tau=self.tau, synonyms=table)
        self.preprocess_ = PreprocessConfig(self.max_side, self.center_crop, self.jpeg_quality)
        if self.max_items < 1:
            raise ValueError("max_items must be positive")
        self.classes_ = {
            stage.key: np.array([lab.canonical for lab in self.taxonomy_.labels(stage)], dtype=object)
            for stage in StageId
        }
        return self

    def _prepare(self, X):
        return [x if isinstance(x, PreparedImage) else preprocess(x, self.preprocess_) for x in check_images(X)]

    def predict_records(self, X, image_ids=None):
        check_is_fitted(self, "taxonomy_")
        images = self._prepare(X)
        ids = check_image_ids(image_ids, len(images))
        return classify_many(
            self.backend,
            self.taxonomy_,
            list(zip(ids, images)),
            policy=self.policy_,
            config=self.config_,
            mixed_mode=self.mixed,
            max_items=self.max_items if self.mixed else 1,
            one_shot=self.one_shot,
            workers=self.workers,
        )

    def predict(self, X):
        """Array of shape (n_images, 3); the first item per image in mixed mode."""
        records = self.predict_records(X)
        return np.array([[getattr(r.items[0], key) for key in FIELDS] for r in records], dtype=object)

    def score(self, X, y, sample_weight=None):
        """Fraction of images whose full triple matches ``y`` (n_images, 3)."""
        pred = self.predict(X)
        truth = np.asarray(y, dtype=object)
        if truth.shape != pred.shape:
            raise ValueError(f"y must have shape {pred.shape}, got {truth.shape}")
        hits = np.all(pred == truth, axis=1).astype(float)
        return float(np.average(hits, weights=sample_weight))
