"""scikit-learn style wrapper around training, K-run inference and thresholding."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import anomaly, metrics
from .errors import ConfigError
from .masking import inference_schedule
from .models import ModelConfig, build


def check_images(X, bands: int | None = None, size: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float64 ``(N, H, W, B)`` stack of square images."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ConfigError(f"expected images shaped (N, H, W, B), got {X.shape}")
    if X.shape[0] == 0:
        raise ConfigError("no images given")
    if X.shape[1] != X.shape[2]:
        raise ConfigError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ConfigError("images contain NaN or infinite values")
    if bands is not None and X.shape[3] != bands:
        raise ConfigError(f"expected {bands} bands, got {X.shape[3]}")
    if size is not None and X.shape[1] != size:
        raise ConfigError(f"expected {size}x{size} images, got {X.shape[1]}x{X.shape[2]}")
    return X


def check_masks(y, n: int, size: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n, size, size):
        raise ConfigError(f"expected label masks shaped {(n, size, size)}, got {y.shape}")
    return y.astype(bool)


class AnomalySegmenter(BaseEstimator):
    """Masked-autoencoder anomaly segmenter.

    ``fit`` trains on a stack of images; ``transform`` returns the K-run mean
    error maps; ``predict`` thresholds them at each map's knee point.

    Example::

        seg = AnomalySegmenter(epochs=20).fit(train_images)
        maps = seg.predict(test_images)
    """

    def __init__(self, variant="swin-mae", patch_size=4, embed_dim=16, stages=3,
                 heads_per_stage=(2, 2, 4), window=2, mask_ratio=0.75, epochs=300,
                 batch_size=16, learning_rate=1e-3, weight_decay=0.05, asl=True,
                 loss_support="masked", k=32, stratified=True, random_state=0):
        self.variant = variant
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.stages = stages
        self.heads_per_stage = heads_per_stage
        self.window = window
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.asl = asl
        self.loss_support = loss_support
        self.k = k
        self.stratified = stratified
        self.random_state = random_state

    def _configs(self, X: np.ndarray) -> tuple[ModelConfig, anomaly.TrainConfig]:
        mcfg = ModelConfig(image_size=X.shape[1], bands=X.shape[3], patch_size=self.patch_size,
                           embed_dim=self.embed_dim, stages=self.stages,
                           heads_per_stage=tuple(self.heads_per_stage), window=self.window,
                           mask_ratio=self.mask_ratio, variant=self.variant)
        tcfg = anomaly.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                   learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                                   asl=self.asl, loss_support=self.loss_support,
                                   seed=self.random_state)
        return mcfg.validate(), tcfg.validate()

    def fit(self, X, y=None):
        X = check_images(X)
        mcfg, tcfg = self._configs(X)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        mcfg = anomaly.prepare_model_config(mcfg, tcfg, X)
        model = build(mcfg, tcfg.seed)
        state = anomaly.TrainState.create(model, tcfg)
        anomaly.train(state, X)
        self.model_ = model
        self.config_ = mcfg
        self.loss_history_ = list(state.loss_history)
        self.weight_maps_ = None if state.weight_maps is None else state.weight_maps.values
        return self

    def transform(self, X) -> np.ndarray:
        """Mean error map per image, shape ``(N, H, W)``."""
        check_is_fitted(self, "model_")
        cfg = self.config_
        X = check_images(X, bands=cfg.bands, size=cfg.image_size)
        rng = np.random.default_rng([self.random_state, 1])
        out = np.empty(X.shape[:3])
        for i, image in enumerate(X):
            plan = inference_schedule(cfg.grid, cfg.grid, cfg.effective_mask_window, cfg.mask_ratio,
                                      self.k, rng, stratified=self.stratified)
            out[i] = anomaly.infer(self.model_, image, plan)
        return out

    def predict(self, X) -> np.ndarray:
        """Binary anomaly maps (uint8), one knee threshold per image."""
        return np.stack([anomaly.threshold_map(e).values for e in self.transform(X)])

    def score(self, X, y) -> float:
        """Mean per-image IoU against ground-truth masks ``y``."""
        pred = self.predict(X)
        y = check_masks(y, pred.shape[0], pred.shape[1])
        return metrics.miou([metrics.iou(p, g) for p, g in zip(pred, y)])
