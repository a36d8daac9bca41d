"""scikit-learn style wrapper around the training and inference loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from .config import OptimConfig, RunConfig
from .model import ModelConfig
from .synthdata import CountingData, DatasetSpec
from .training import predict_density, train
from .validation import check_class_names, check_densities, check_images


class QuantityCounter(BaseEstimator):
    """Text-prompted counter: ``fit(images, densities, class_names)``, ``predict(images, class_names)``.

    ``predict`` returns counts (sum of the predicted density); ``predict_density``
    returns the maps. Only the category prompt is used at prediction time.
    """

    def __init__(self, variant="full", epochs=30, batch_size=16, lr=1e-4, n_counterfactual=8,
                 image_size=128, embed_dim=64, random_state=0):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_counterfactual = n_counterfactual
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        return RunConfig(
            model=ModelConfig(image_size=self.image_size, embed_dim=self.embed_dim),
            data=DatasetSpec(n_train=0, n_val=0, n_test=0, image_size=self.image_size),
            optim=OptimConfig(lr=self.lr),
            epochs=self.epochs,
            batch_size=self.batch_size,
            seeds=(self.random_state,),
            variant=self.variant,
            n_counterfactual=self.n_counterfactual,
        )

    def fit(self, X, y, class_names, eval_set=None):
        """``y`` holds the ground-truth density maps; ``eval_set`` is an optional (X, y, class_names)."""
        cfg = self._run_config()
        data = self._as_data(X, y, class_names)
        val = self._as_data(*eval_set) if eval_set is not None else None
        result = train(cfg, data, val, seed=self.random_state)
        self.model_ = result.model
        self.vocab_ = result.vocab
        self.history_ = result.history
        self.classes_ = sorted(set(data.class_names))
        return self

    def _as_data(self, X, y, class_names) -> CountingData:
        images = check_images(X, self.image_size)
        if images.dtype != np.uint8:
            images = (images * 255).round().astype(np.uint8)
        dens = check_densities(y, len(images), self.image_size)
        counts = np.maximum(1, np.rint(dens.sum(axis=(1, 2), dtype=np.float64))).astype(np.int64)
        return CountingData(images, dens, check_class_names(class_names, len(images)), counts,
                            np.arange(len(images), dtype=np.int64))

    def predict_density(self, X, class_names) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_size)
        names = check_class_names(class_names, len(images))
        return predict_density(self.model_, self.vocab_, images, names, self.batch_size)

    def predict(self, X, class_names) -> np.ndarray:
        return self.predict_density(X, class_names).sum(axis=(1, 2), dtype=np.float64)

    def score(self, X, y, class_names) -> float:
        """R^2 of predicted counts against ``y`` (counts, or density maps summed per image)."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 3:
            y = y.sum(axis=(1, 2))
        return float(r2_score(y, self.predict(X, class_names)))
