"""Estimator-style front end over training and sliding-window inference."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .inference import DEFAULT_OVERLAP, DEFAULT_SIGMA_SCALE, binarize, sliding_window_predict
from .metrics import dice_coefficient
from .model import FoldModel
from .training import strategy_preset, train_fold
from .validation import check_cases


class LesionSegmenter(BaseEstimator):
    """Fit a single residual-encoder U-Net on a list of cases and segment new ones.

    Parameters
    ----------
    strategy : StrategyConfig or str, default "BASELINE"
        A full strategy, or a preset id expanded at desk scale.
    overlap, sigma_scale : float
        Sliding-window tile overlap and Gaussian width (fraction of the patch).
    threshold : float
        Foreground probability above which a voxel is labelled lesion.
    augmented_pool : list of CaseRecord, optional
        Pre-generated mixed cases, required by the CRAVEMIX strategy.
    """

    def __init__(self, strategy="BASELINE", overlap=DEFAULT_OVERLAP, sigma_scale=DEFAULT_SIGMA_SCALE,
                 threshold=0.5, augmented_pool=None):
        self.strategy = strategy
        self.overlap = overlap
        self.sigma_scale = sigma_scale
        self.threshold = threshold
        self.augmented_pool = augmented_pool

    def _strategy(self):
        if isinstance(self.strategy, str):
            return strategy_preset(self.strategy, scale="desk")
        return self.strategy

    def fit(self, cases, y=None, progress=None):
        cases = check_cases(cases)
        self.checkpoint_, self.training_log_ = train_fold(self._strategy(), None, cases,
                                                          augmented_pool=self.augmented_pool, progress=progress)
        self.model_ = FoldModel(self.checkpoint_)
        return self

    @classmethod
    def from_checkpoints(cls, checkpoints, **params):
        """An ensemble segmenter over already-trained fold checkpoints."""
        est = cls(**params)
        est.models_ = [FoldModel(c) for c in checkpoints]
        est.model_ = est.models_[0]
        return est

    def _models(self):
        check_is_fitted(self, "model_")
        return getattr(self, "models_", [self.model_])

    def predict_proba(self, case):
        """Foreground probability volume for one case."""
        return sliding_window_predict(self._models(), case, overlap=self.overlap, sigma_scale=self.sigma_scale)

    def predict(self, case):
        return binarize(self.predict_proba(case), self.threshold)

    def score(self, cases, y=None):
        """Mean case-level Dice over ``cases``."""
        cases = check_cases(cases)
        return float(np.mean([dice_coefficient(self.predict(c), c.label) for c in cases]))
