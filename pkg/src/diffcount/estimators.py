"""Scikit-learn style front end.

The generative model, the counter and the feature maps all compose with
sklearn pipelines and tooling: estimators inherit ``get_params`` /
``set_params`` from BaseEstimator, validate their inputs, and follow the
fit/sample/predict/transform conventions.

    model = DiffusionGenerator(image_shape=(32, 32)).fit(X)
    samples = model.sample(100, solver="solver2", steps=50)
    counts = ShapeCounter().predict(samples_2d)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import counting
from .metrics import DownsampleFeatures, RandomConvFeatures, failure_rates
from .models import TinyNet, TrainConfig, train_tinynet
from .samplers import SamplerConfig, sample
from .schedules import build_schedule
from .shapes import PROFILES, CountProfile

__all__ = [
    "DiffusionGenerator",
    "ShapeCounter",
    "DownsampleFeaturizer",
    "RandomConvFeaturizer",
]


def _as_image_batch(X, image_shape=None):
    """Accept (n, H, W) stacks or (n, d) flats; return (n, H, W)."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and image_shape is not None:
        h, w = image_shape
        if arr.shape[1] != h * w:
            raise ValueError(f"flat width {arr.shape[1]} != {h}x{w}")
        arr = arr.reshape(-1, h, w)
    if arr.ndim == 2:
        # square fallback for flat input without an explicit shape
        side = int(round(np.sqrt(arr.shape[1])))
        if side * side != arr.shape[1]:
            raise ValueError("cannot infer image shape from flat input; "
                             "pass image_shape")
        arr = arr.reshape(-1, side, side)
    if arr.ndim != 3:
        raise ValueError(f"expected image batch, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain non-finite values")
    return arr


class DiffusionGenerator(BaseEstimator):
    """Trainable denoising generative model over flattened images.

    fit(X) trains the tiny denoiser on images scaled to [-1, 1];
    sample(n) runs the configured reverse-process solver and returns
    images clamped back to [0, 1].
    """

    def __init__(self, image_shape=(32, 32), hidden=(256, 256),
                 T=1000, schedule_kind="linear", beta_min=1e-4,
                 beta_max=0.02, lr=1e-4, steps=2000, batch=128,
                 random_state=0):
        self.image_shape = image_shape
        self.hidden = hidden
        self.T = T
        self.schedule_kind = schedule_kind
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.lr = lr
        self.steps = steps
        self.batch = batch
        self.random_state = random_state

    def fit(self, X, y=None):
        images = _as_image_batch(X, self.image_shape)
        h, w = images.shape[1:]
        flat = images.reshape(len(images), -1) * 2.0 - 1.0
        self.schedule_ = build_schedule(self.schedule_kind, self.T,
                                        self.beta_min, self.beta_max)
        net = TinyNet(input_dim=h * w, hidden=tuple(self.hidden),
                      image_shape=(h, w), seed=self.random_state)
        cfg = TrainConfig(lr=self.lr, steps=self.steps, batch=self.batch,
                          seed=self.random_state)
        result = train_tinynet(net, flat, self.schedule_, cfg)
        self.net_ = result.net
        self.train_result_ = result
        self.train_data_ = flat
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("call fit before sampling")

    def sample(self, n_samples, solver="ancestral", steps=None,
               init="normal", seed=0, clamp=True):
        """Generate n_samples images with the chosen reverse solver."""
        self._check_fitted()
        if steps is None:
            steps = self.T if solver == "ancestral" else 50
        cfg = SamplerConfig(solver=solver, steps=steps, init=init, seed=seed)
        flat, _ = sample(self.net_, cfg, self.schedule_,
                         dataset=self.train_data_, n=n_samples)
        images = (flat.reshape(n_samples, *self.image_shape) + 1.0) / 2.0
        return np.clip(images, 0.0, 1.0) if clamp else images


class ShapeCounter(BaseEstimator):
    """Stateless classical counter exposed as an estimator.

    predict returns the (n, 3) matrix of per-category counts in the
    (triangle, square, pentagon) order; judge returns full verdicts for
    a named or explicit count profile.
    """

    def __init__(self, threshold=0.5, min_area=counting.MIN_BLOB_AREA):
        self.threshold = threshold
        self.min_area = min_area

    def fit(self, X=None, y=None):
        return self

    def predict(self, X):
        images = _as_image_batch(X)
        out = np.zeros((len(images), len(counting.CATEGORIES)), dtype=int)
        for i, img in enumerate(images):
            counts, _, _ = counting.count_objects(
                img, threshold=self.threshold, min_area=self.min_area)
            out[i] = [counts[c] for c in counting.CATEGORIES]
        return out

    def judge(self, X, profile="standard", indicator=None):
        if isinstance(profile, str):
            profile = PROFILES[profile]
        elif not isinstance(profile, CountProfile):
            raise TypeError("profile must be a name or CountProfile")
        images = _as_image_batch(X)
        return [counting.judge(img, profile, indicator=indicator,
                               threshold=self.threshold,
                               min_area=self.min_area)
                for img in images]

    def score(self, X, y):
        """Exact-match per-image accuracy against (n, 3) count labels."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=int)
        if y.shape != pred.shape:
            raise ValueError(f"label shape {y.shape} != {pred.shape}")
        return float(np.mean(np.all(pred == y, axis=1)))

    def failure_rates(self, X, profile="standard", indicator=None):
        return failure_rates(self.judge(X, profile, indicator))


class DownsampleFeaturizer(TransformerMixin, BaseEstimator):
    """Block-mean pooled pixel features (stateless transform)."""

    def __init__(self, out_size=8):
        self.out_size = out_size

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return DownsampleFeatures(self.out_size)(_as_image_batch(X))


class RandomConvFeaturizer(TransformerMixin, BaseEstimator):
    """Frozen random convolution features (stateless transform)."""

    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return RandomConvFeatures(seed=self.seed)(_as_image_batch(X))
