"""scikit-learn style wrappers around training, inference and scribble simulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attention import SelfAttentionModule
from .backbone import save_checkpoint
from .harness.train import TrainConfig, model_from_checkpoint, predict_proba, train
from .losses import ScribbleMask
from .metrics import dice3d
from .scribblesim import ScribbleSimConfig, simulate_scribbles
from .validation import check_images, check_label_maps


@dataclass
class _Item:
    image: np.ndarray
    scribbles: ScribbleMask


class ScribbleSegmenter(ClassifierMixin, BaseEstimator):
    """FCN trained from scribbles with optional CRF and attention regularizers.

    ``fit(X, y)`` takes images (N, H, W) and scribble maps (N, H, W) where
    unlabeled pixels hold 255. ``predict`` returns dense class maps.
    Any :class:`~scribseg.harness.train.TrainConfig` field not exposed here
    can be passed through ``options``.
    """

    def __init__(
        self,
        preset="full",
        num_classes=4,
        epochs=30,
        batch_size=8,
        base_lr=0.05,
        lambda_mcrf=0.1,
        lambda_atn=0.1,
        crf_radius=5,
        crf_sigma=0.1,
        atn_radius=5,
        encoder_channels=(16, 32, 64),
        max_rotation=15.0,
        flip=True,
        options=None,
        random_state=0,
    ):
        self.preset = preset
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lambda_mcrf = lambda_mcrf
        self.lambda_atn = lambda_atn
        self.crf_radius = crf_radius
        self.crf_sigma = crf_sigma
        self.atn_radius = atn_radius
        self.encoder_channels = encoder_channels
        self.max_rotation = max_rotation
        self.flip = flip
        self.options = options
        self.random_state = random_state

    def _train_config(self):
        kw = {k: v for k, v in self.get_params().items() if k not in ("options", "random_state")}
        kw.update(self.options or {})
        kw["seed"] = int(self.random_state or 0)
        return TrainConfig(**kw)

    def fit(self, X, y):
        config = self._train_config()
        divisor = 2 ** (len(config.encoder_channels) - 1)
        X = check_images(X, divisor if not config.resize else 1)
        y = check_label_maps(y, X.shape, config.num_classes)
        items = [_Item(img, ScribbleMask(lab, config.num_classes)) for img, lab in zip(X, y)]
        result = train(config, items)
        self.config_ = config
        self.params_ = result.params
        self.module_ = _attention_module(config, result.params)
        self.log_ = result.log
        self.classes_ = np.arange(config.num_classes)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X)
        return predict_proba(self.params_, self.config_, X, self.module_)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y, sample_weight=None):
        """Mean foreground Dice over the classes present in ``y`` or the prediction."""
        pred = self.predict(X)
        y = check_label_maps(y, pred.shape, self.config_.num_classes, allow_unknown=False)
        classes = sorted((set(np.unique(y).tolist()) | set(np.unique(pred).tolist())) - {0})
        if not classes:
            return 1.0
        return float(np.mean([dice3d(pred, y, c) for c in classes]))

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_.to_dict())

    @classmethod
    def load(cls, path):
        config, params, module = model_from_checkpoint(path)
        exposed = set(cls._get_param_names()) - {"options", "random_state"}
        default = TrainConfig()
        kw = {k: getattr(config, k) for k in exposed}
        extra = {
            f: getattr(config, f)
            for f in config.to_dict()
            if f not in exposed and f != "seed" and getattr(config, f) != getattr(default, f)
        }
        est = cls(**kw, options=extra or None, random_state=config.seed)
        est.config_ = config
        est.params_ = params
        est.module_ = module
        est.log_ = []
        est.classes_ = np.arange(config.num_classes)
        return est


def _attention_module(config, params):
    return SelfAttentionModule(config.attention_config, params) if config.uses_attention else None


class ScribbleSimulator(TransformerMixin, BaseEstimator):
    """Turn dense class maps (N, H, W) into scribble maps with 255 for unlabeled."""

    def __init__(self, hull_expand_px=5, num_classes=None, seed=0):
        self.hull_expand_px = hull_expand_px
        self.num_classes = num_classes
        self.seed = seed

    def fit(self, X, y=None):
        X = np.asarray(X)
        self.n_features_in_ = X.shape[-2] * X.shape[-1]
        return self

    def transform(self, X):
        X = np.asarray(X)
        single = X.ndim == 2
        X = X[None] if single else X
        n_classes = self.num_classes or max(int(X.max()) + 1, 2)
        X = check_label_maps(X, X.shape, n_classes, allow_unknown=False, name="masks")
        cfg = ScribbleSimConfig(self.hull_expand_px, self.seed)
        out = np.stack([simulate_scribbles(m, cfg, n_classes).labels for m in X]).astype(np.uint8)
        return out[0] if single else out
