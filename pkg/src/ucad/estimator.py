"""Scikit-learn style front end for the continual detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .encoder import EncoderConfig, init_encoder
from .inference import DEFAULT_NEIGHBORS, DEFAULT_SIGMA, infer
from .memory import MemorySpace, build_task_entry, load, persist
from .scl import SclConfig


def check_images(X, patch_size=None):
    """Validate a batch of images and return it as float64 ``(N, H, W[, Cin])``.

    A single 2-D image is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim not in (3, 4):
        raise ValueError(f"expected images of shape (N, H, W[, C]), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or inf")
    if patch_size is not None and (X.shape[1] % patch_size or X.shape[2] % patch_size):
        raise ValueError(
            f"image size {X.shape[1]}x{X.shape[2]} is not divisible by patch size {patch_size}"
        )
    return X


def check_label_maps(label_maps, images):
    """Validate per-pixel structure labels against ``images``."""
    maps = np.asarray(label_maps)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.shape != images.shape[:3]:
        raise ValueError(f"label maps {maps.shape} do not match images {images.shape[:3]}")
    if not np.issubdtype(maps.dtype, np.integer):
        if not np.array_equal(maps, np.round(maps)):
            raise ValueError("label maps must hold integer labels")
        maps = maps.astype(np.int64)
    if maps.min() < 0:
        raise ValueError("labels must be non-negative")
    return maps


class ContinualAnomalyDetector(BaseEstimator):
    """Unsupervised anomaly detector that learns one task at a time without replay.

    Each call to :meth:`partial_fit` adds a frozen (key, prompts, knowledge)
    entry for a new task. At test time the task is picked from the keys, so
    no task id is needed.

    Parameters
    ----------
    encoder_config : EncoderConfig or dict, optional
        Frozen backbone settings; defaults to ``EncoderConfig()``.
    knowledge_multiplier : int, default=1
        Knowledge rows kept per task, in units of patches per image.
    n_neighbors : int, default=3
        Neighborhood size used to re-weight patch scores.
    sigma : float, default=4.0
        Gaussian smoothing of the pixel map.
    epochs, batch_size, learning_rate, momentum, lambda_alpha, lambda_beta
        Prompt training settings.
    random_state : int, default=0
        Seed for mini-batch shuffling.

    Attributes
    ----------
    encoder_ : Encoder
    memory_ : MemorySpace
    loss_traces_ : list of list of float
        Per-epoch prompt training loss for each task.
    """

    def __init__(self, encoder_config=None, knowledge_multiplier=1, n_neighbors=DEFAULT_NEIGHBORS,
                 sigma=DEFAULT_SIGMA, epochs=25, batch_size=8, learning_rate=0.0005,
                 momentum=0.9, lambda_alpha=1.0, lambda_beta=1.0, random_state=0):
        self.encoder_config = encoder_config
        self.knowledge_multiplier = knowledge_multiplier
        self.n_neighbors = n_neighbors
        self.sigma = sigma
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lambda_alpha = lambda_alpha
        self.lambda_beta = lambda_beta
        self.random_state = random_state

    def _encoder_config(self):
        cfg = self.encoder_config
        if cfg is None:
            return EncoderConfig()
        if isinstance(cfg, dict):
            return EncoderConfig.from_dict(cfg)
        return cfg

    def _scl_config(self):
        return SclConfig(
            lambda_alpha=self.lambda_alpha,
            lambda_beta=self.lambda_beta,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
        )

    def _reset(self):
        self.encoder_ = init_encoder(self._encoder_config())
        self.memory_ = MemorySpace.for_encoder(self.encoder_)
        self.loss_traces_ = []

    def partial_fit(self, X, label_maps=None, task_name=""):
        """Learn one more task from its normal images.

        Parameters
        ----------
        X : array-like of shape (n_images, H, W) or (n_images, H, W, C)
        label_maps : array-like of shape (n_images, H, W), optional
            Structure labels for prompt training; quantized flood fill is
            used when omitted.
        task_name : str

        Returns
        -------
        self
        """
        if not hasattr(self, "memory_"):
            self._reset()
        X = check_images(X, self.encoder_.config.patch_size)
        segmenter = None if label_maps is None else list(check_label_maps(label_maps, X))
        if self.knowledge_multiplier < 1:
            raise ValueError("knowledge_multiplier must be >= 1")
        gh, gw = self.encoder_.grid_shape(X.shape[1], X.shape[2])
        task_id = len(self.memory_)
        entry, trace = build_task_entry(
            task_id, X, self.encoder_, segmenter, self._scl_config(),
            self.knowledge_multiplier * gh * gw, name=task_name,
            created_step=task_id, return_trace=True,
        )
        self.memory_.append(entry)
        self.loss_traces_.append(trace)
        return self

    def fit(self, X, label_maps=None, task_name=""):
        """Forget everything and learn ``X`` as the first task."""
        self._reset()
        return self.partial_fit(X, label_maps, task_name)

    @property
    def n_tasks_(self):
        check_is_fitted(self, "memory_")
        return len(self.memory_)

    def infer(self, X, task=None):
        """Full results (routing, patch scores, maps) for every image."""
        check_is_fitted(self, "memory_")
        X = check_images(X, self.encoder_.config.patch_size)
        return [infer(img, self.encoder_, self.memory_, self.n_neighbors, self.sigma, task)
                for img in X]

    def predict_task(self, X):
        """Task index each image is routed to."""
        return np.array([r.selected_task for r in self.infer(X)])

    def decision_function(self, X):
        """Image-level anomaly score; larger means more anomalous."""
        return np.array([r.image_score for r in self.infer(X)])

    def anomaly_maps(self, X):
        """Pixel-level anomaly maps, one per image."""
        return np.stack([r.map for r in self.infer(X)])

    def predict(self, X, threshold):
        """1 for images whose score exceeds ``threshold``, else 0."""
        return (self.decision_function(X) > threshold).astype(int)

    def save(self, path):
        check_is_fitted(self, "memory_")
        return persist(self.memory_, path)

    @classmethod
    def load(cls, path, **params):
        """Rebuild a detector from a memory file written by :meth:`save`."""
        mem = load(path)
        if mem.encoder_config is None:
            raise ValueError("memory file has no sidecar with the encoder settings")
        est = cls(encoder_config=EncoderConfig.from_dict(mem.encoder_config), **params)
        est.encoder_ = init_encoder(est._encoder_config())
        mem.check_encoder(est.encoder_)
        est.memory_ = mem
        est.loss_traces_ = []
        return est
