"""Scikit-learn style estimator wrapping the training engine.

The classifier follows the usual estimator conventions: constructor arguments
are hyperparameters stored verbatim (so `get_params`/`set_params` and
grid-search tooling work), `fit` learns from an embedding bundle plus a
category split, and fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import engine
from .data import Bundle, GzslSplit
from .errors import ValidationError
from .fusion import PrototypeSet


def check_bundle(bundle) -> Bundle:
    """Validate a bundle argument, with a friendly error for foreign types."""
    if not isinstance(bundle, Bundle):
        raise ValidationError(f"expected a Bundle, got {type(bundle).__name__}")
    return bundle.validate()


def check_split(bundle: Bundle, split) -> GzslSplit:
    """Validate a split argument against its bundle."""
    if not isinstance(split, GzslSplit):
        raise ValidationError(f"expected a GzslSplit, got {type(split).__name__}")
    return split.validate(bundle)


class HyperbolicGzslClassifier(BaseEstimator):
    """Generalized zero-shot classifier over precomputed embedding bundles.

    Trains hyperbolic-geometry encoders, a conditional feature generator, and
    prototype scoring on the seen categories of a split, then predicts over
    seen and unseen categories with calibration stacking (the calibration
    factor is selected on the validation portion during fit).
    """

    def __init__(
        self,
        latent_dim: int = 768,
        learning_rate: float = 1e-3,
        epochs: int = 20,
        batch_size: int = 14,
        eta: float = 5.0,
        zeta: float = 1.0,
        gamma_grid_size: int = 21,
        k_synthetic: int = 1,
        ib_beta: float = 1.0,
        curvature: float = -1.0,
        seed: int = 0,
        optimizer: str = "adam",
        exclude_true_in_rank: bool = False,
        train_unseen_source: str = "unseen",
    ):
        self.latent_dim = latent_dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta = eta
        self.zeta = zeta
        self.gamma_grid_size = gamma_grid_size
        self.k_synthetic = k_synthetic
        self.ib_beta = ib_beta
        self.curvature = curvature
        self.seed = seed
        self.optimizer = optimizer
        self.exclude_true_in_rank = exclude_true_in_rank
        self.train_unseen_source = train_unseen_source

    def _config(self) -> engine.TrainConfig:
        return engine.TrainConfig(
            latent_dim=self.latent_dim,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            eta=self.eta,
            zeta=self.zeta,
            gamma_grid_size=self.gamma_grid_size,
            k_synthetic=self.k_synthetic,
            ib_beta=self.ib_beta,
            curvature=self.curvature,
            seed=self.seed,
            optimizer=self.optimizer,
            exclude_true_in_rank=self.exclude_true_in_rank,
            train_unseen_source=self.train_unseen_source,
        ).validate()

    def fit(self, bundle: Bundle, split: GzslSplit) -> "HyperbolicGzslClassifier":
        check_bundle(bundle)
        check_split(bundle, split)
        cfg = self._config()
        result = engine.train(bundle, split, cfg)
        self.config_ = cfg
        self.result_ = result
        self.checkpoint_ = result.best
        self.gamma_ = result.best.gamma
        self.task_ = bundle.task
        self.prototypes_seen_ = bundle.prototypes.subset(
            [bundle.prototypes.index(n) for n in split.seen_categories]
        )
        self.prototypes_unseen_ = bundle.prototypes.subset(
            [bundle.prototypes.index(n) for n in split.unseen_categories]
        )
        self.classes_ = np.array(
            self.prototypes_seen_.names + self.prototypes_unseen_.names, dtype=object
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("this classifier has not been fitted yet; call fit first")

    def _prediction_space(self) -> PrototypeSet:
        return PrototypeSet(
            list(self.classes_),
            np.concatenate(
                [self.prototypes_seen_.vectors, self.prototypes_unseen_.vectors], axis=0
            ),
        )

    def decision_function(self, samples) -> np.ndarray:
        """Calibrated scores per sample over seen-then-unseen categories."""
        self._check_fitted()
        weights = engine.ModelWeights(self.checkpoint_.params)
        feats = engine.compute_features(list(samples), weights, self.config_, self.task_)
        scores = engine.score_features(feats, self._prediction_space(), weights)
        seen_mask = np.arange(len(self.classes_)) < len(self.prototypes_seen_)
        return scores - self.gamma_ * seen_mask

    def predict(self, samples) -> np.ndarray:
        """Predicted category names over the seen+unseen label space."""
        calibrated = self.decision_function(samples)
        return self.classes_[np.argmax(calibrated, axis=1)]

    def evaluate(self, bundle: Bundle, split: GzslSplit, gamma: float | None = None):
        """EvalReport on the split's test portion (fitted gamma by default)."""
        self._check_fitted()
        check_bundle(bundle)
        check_split(bundle, split)
        return engine.evaluate(
            bundle, split, self.checkpoint_, self.config_,
            self.gamma_ if gamma is None else gamma,
        )

    def score(self, bundle: Bundle, split: GzslSplit) -> float:
        """Harmonic-mean accuracy on the test portion (the GZSL headline metric)."""
        return self.evaluate(bundle, split).overall_accuracy
