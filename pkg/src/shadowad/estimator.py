"""scikit-learn style wrapper around adversarial detector training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from shadowad.adversarial import TrainConfig, attenuate_linear, train_loop
from shadowad.errors import ValidationError
from shadowad.evaluation import ConfusionCounts, EvalProtocol, binarize, ber, confusion_counts, predict_batch
from shadowad.imaging import Image
from shadowad.nets import attenuator_config, detector_config
from shadowad.physics import LossWeights
from shadowad.synthdata import Sample


def check_images(X) -> np.ndarray:
    """Validate an ``N x H x W x 3`` batch; uint8 is scaled to [0, 1]."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValidationError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError("empty image batch")
    if X.dtype == np.uint8:
        return X.astype(np.float64) / 255.0
    if not np.issubdtype(X.dtype, np.floating):
        raise ValidationError(f"unsupported image dtype {X.dtype}")
    X = X.astype(np.float64)
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValidationError("float images must be finite and lie in [0, 1]")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape[:3]:
        raise ValidationError(f"masks of shape {y.shape} do not match images {X.shape[:3]}")
    if y.dtype != bool:
        if not np.all(np.isin(y, (0, 1))):
            raise ValidationError("masks must be boolean or 0/1")
        y = y.astype(bool)
    return y


class ShadowDetector(BaseEstimator):
    """Shadow detector trained jointly with a shadow attenuator.

    ``fit`` takes linear RGB images and their shadow masks; ``predict`` returns
    binary masks at the input resolution. ``transform`` weakens the shadows of
    images using the trained attenuator.
    """

    def __init__(self, depth=3, base_channels=16, image_size=64, iterations=2000, batch_size=8,
                 learning_rate=2e-4, weights=(30.0, 1.0, 100.0, 0.8, 0.2), epsilon=0.05,
                 use_attenuator=True, threshold=0.5, random_state=0):
        self.depth = depth
        self.base_channels = base_channels
        self.image_size = image_size
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weights = weights
        self.epsilon = epsilon
        self.use_attenuator = use_attenuator
        self.threshold = threshold
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        nsd, sd, ph, real, adv = self.weights
        adam = {"lr": self.learning_rate, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8}
        return TrainConfig(
            weights=LossWeights(nsd=nsd, sd=sd, ph=ph, real=real, adv0=adv, epsilon=self.epsilon),
            batch_size=self.batch_size,
            iterations=self.iterations,
            adam_a=dict(adam),
            adam_d=dict(adam),
            seed=int(self.random_state),
            image_size=self.image_size,
            checkpoint_every=self.iterations,
            attenuator=attenuator_config(self.depth, self.base_channels),
            detector=detector_config(self.depth, self.base_channels),
            use_attenuator=self.use_attenuator,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        config = self._train_config()
        samples = [Sample(Image(x), m, name=f"{i:06d}") for i, (x, m) in enumerate(zip(X, y))]
        result = train_loop(samples, config)
        self.detector_ = result.detector
        self.attenuator_ = result.attenuator
        self.records_ = result.records
        self.config_ = config
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel shadow probabilities, shape ``N x H x W``."""
        check_is_fitted(self, "detector_")
        return predict_batch(self.detector_, check_images(X), EvalProtocol(size=self.image_size))

    def predict(self, X) -> np.ndarray:
        return np.stack([binarize(p, self.threshold) for p in self.predict_proba(X)])

    def score(self, X, y) -> float:
        """``1 - BER / 100`` over the summed pixel counts of the batch."""
        X = check_images(X)
        y = check_masks(y, X)
        pred = self.predict(X)
        total = ConfusionCounts()
        for p, g in zip(pred, y):
            total = total + confusion_counts(p, g)
        return 1.0 - ber(total) / 100.0

    def transform(self, X, y=None) -> np.ndarray:
        """Attenuated linear images; ``y`` gives the shadow masks (predicted when omitted)."""
        check_is_fitted(self, "detector_")
        if self.attenuator_ is None:
            raise ValidationError("fitted without an attenuator")
        X = check_images(X)
        y = self.predict(X) if y is None else check_masks(y, X)
        return attenuate_linear(self.attenuator_, X, y, self.image_size)

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X, y)
