"""scikit-learn compatible wrapper around the attention-MIL network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._random import make_rng
from .cohort import MODALITIES, parse_modality
from .metrics import class_weights as inverse_frequency_weights
from .mil import ModelConfig, forward, init_model, train


def check_bags(X) -> list:
    """Validate a sequence of bags (``Bag`` objects or modality -> array mappings)."""
    if isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of bags, not an array")
    bags = list(X)
    if not bags:
        raise ValueError("X contains no bags")
    for i, bag in enumerate(bags):
        inst = bag.instances if hasattr(bag, "instances") else bag
        n = 0
        for m, x in inst.items():
            x = np.asarray(x)
            if x.ndim != 2:
                raise ValueError(f"bag {i}: {parse_modality(m).value} instances must be 2-D, got shape {x.shape}")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"bag {i}: non-finite instance values; impute before fitting")
            n += x.shape[0]
        if n == 0:
            raise ValueError(f"bag {i} has no instances")
    return bags


def _input_dims(bags) -> dict:
    dims = {}
    for bag in bags:
        inst = bag.instances if hasattr(bag, "instances") else bag
        for m, x in inst.items():
            m = parse_modality(m)
            f = np.asarray(x).shape[1]
            if dims.setdefault(m, f) != f:
                raise ValueError(f"{m.value}: inconsistent feature count {f} vs {dims[m]}")
    return {m: dims[m] for m in MODALITIES if m in dims}


class _LabeledBag:
    __slots__ = ("instances", "label")

    def __init__(self, bag, label):
        self.instances = bag.instances if hasattr(bag, "instances") else bag
        self.label = int(label)


class AttentionMILClassifier(ClassifierMixin, BaseEstimator):
    """Multimodal attention-MIL classifier over variable-length bags.

    ``X`` is a sequence of bags; each bag maps a modality to an
    ``(n_instances, n_features)`` array. Bags built by
    :func:`frailmil.bags.build_bags` can be passed directly.

    Parameters
    ----------
    embed_dim : int
        Shared embedding width ``D``.
    encoder_hidden : int or dict
        Hidden width of each modality encoder.
    attention_dim : int
        Width of the tanh attention layer.
    learning_rate, weight_decay : float
        Adaptive-moment optimizer settings; decay is decoupled.
    max_epochs, patience : int
        Early stopping on validation loss.
    accumulate : int
        Bags per optimizer step.
    class_weight : {"balanced", None} or array of shape (n_classes,)
        ``"balanced"`` uses ``N / (K * n_c)`` from the training labels.
    validation_fraction : float
        Share of bags held out for early stopping when ``fit`` is not given
        an explicit validation set. Bags with a ``patient`` attribute are
        split by patient.
    random_state : int
        Seeds initialization, epoch order and the internal split.
    """

    def __init__(
        self,
        embed_dim=128,
        encoder_hidden=128,
        attention_dim=64,
        n_classes=3,
        learning_rate=1e-3,
        weight_decay=1e-4,
        max_epochs=100,
        patience=10,
        accumulate=8,
        class_weight="balanced",
        validation_fraction=0.2,
        random_state=0,
    ):
        self.embed_dim = embed_dim
        self.encoder_hidden = encoder_hidden
        self.attention_dim = attention_dim
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.accumulate = accumulate
        self.class_weight = class_weight
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: ModelConfig, **kwargs) -> "AttentionMILClassifier":
        return cls(
            embed_dim=config.embed_dim,
            encoder_hidden=config.encoder_hidden,
            attention_dim=config.attention_dim,
            n_classes=config.n_classes,
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            max_epochs=config.max_epochs,
            patience=config.patience,
            accumulate=config.accumulate,
            random_state=config.seed,
            **kwargs,
        )

    def _config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            encoder_hidden=self.encoder_hidden,
            attention_dim=self.attention_dim,
            n_classes=self.n_classes,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            max_epochs=self.max_epochs,
            patience=self.patience,
            accumulate=self.accumulate,
            seed=int(self.random_state or 0),
        )

    def _split(self, bags, y):
        n = len(bags)
        groups = [getattr(b, "patient", i) for i, b in enumerate(bags)]
        uniq = sorted(set(groups), key=str)
        if len(uniq) < 2:
            raise ValueError("need bags from at least two groups to hold out a validation split")
        rng = make_rng(int(self.random_state or 0), "estimator-split")
        n_val = max(1, int(round(self.validation_fraction * len(uniq))))
        val_groups = {uniq[i] for i in rng.permutation(len(uniq))[:n_val]}
        val = [i for i in range(n) if groups[i] in val_groups]
        tr = [i for i in range(n) if groups[i] not in val_groups]
        return [bags[i] for i in tr], y[tr], [bags[i] for i in val], y[val]

    def fit(self, X, y=None, X_val=None, y_val=None):
        """Train on bags ``X`` with labels ``y`` (taken from ``bag.label`` if omitted)."""
        bags = check_bags(X)
        y = np.asarray([b.label for b in bags] if y is None else y, dtype=np.int64)
        if y.shape != (len(bags),):
            raise ValueError(f"y has shape {y.shape}; expected ({len(bags)},)")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if X_val is None:
            bags, y, val_bags, y_val = self._split(bags, y)
        else:
            val_bags = check_bags(X_val)
            y_val = np.asarray([b.label for b in val_bags] if y_val is None else y_val, dtype=np.int64)

        if isinstance(self.class_weight, str):
            if self.class_weight != "balanced":
                raise ValueError(f"unknown class_weight {self.class_weight!r}")
            weights = inverse_frequency_weights(y, self.n_classes)
        elif self.class_weight is None:
            weights = np.ones(self.n_classes)
        else:
            weights = np.asarray(self.class_weight, dtype=np.float64)

        config = self._config()
        self.input_dims_ = _input_dims(list(bags) + list(val_bags))
        model = init_model(config, self.input_dims_)
        self.model_, self.history_ = train(
            model,
            [_LabeledBag(b, c) for b, c in zip(bags, y)],
            [_LabeledBag(b, c) for b, c in zip(val_bags, y_val)],
            config,
            weights,
        )
        self.class_weight_ = weights
        self.classes_ = np.arange(self.n_classes)
        self.n_epochs_ = len(self.history_)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.vstack([forward(self.model_, b).probs for b in check_bags(X)])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def attention(self, X) -> list:
        """Per-bag attention weights, split by modality."""
        check_is_fitted(self, "model_")
        return [forward(self.model_, b).alpha_by_modality() for b in check_bags(X)]
