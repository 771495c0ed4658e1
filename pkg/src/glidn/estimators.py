"""scikit-learn compatible estimators over lists of :class:`VideoSample`.

``X`` is always a sequence of videos. ``y`` is optional: when omitted the
targets stored on the videos are used. Single-label targets may be any
hashable class labels; multi-label targets are a binary indicator matrix.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .context import SchemaError, VideoSample
from .distill import DistillConfig
from .train import (
    Prepared,
    TrainConfig,
    prepare,
    train_dml,
    train_student,
    train_teacher,
)

__all__ = [
    "check_videos",
    "check_targets",
    "GLIDNClassifier",
    "DistilledGLIDNClassifier",
    "MutualLearningClassifier",
]


def check_videos(X, n_features: Optional[int] = None) -> List[VideoSample]:
    """Validate ``X`` as a non-empty sequence of well-formed videos."""
    if isinstance(X, VideoSample):
        raise TypeError("X must be a sequence of VideoSample, not a single video")
    try:
        videos = list(X)
    except TypeError as exc:
        raise TypeError(f"X must be a sequence of VideoSample, got {type(X).__name__}") from exc
    if not videos:
        raise ValueError("X is empty")
    widths = set()
    for v in videos:
        if not isinstance(v, VideoSample):
            raise TypeError(f"X must contain VideoSample objects, got {type(v).__name__}")
        v.validate()
        widths.add(len(v.frames[0].nodes[0].feat))
    if len(widths) > 1:
        raise SchemaError(f"videos have different node feature widths: {sorted(widths)}")
    if n_features is not None and widths != {n_features}:
        raise ValueError(f"X has node feature width {widths.pop()}, estimator was fitted with {n_features}")
    return videos


def check_targets(videos: Sequence[VideoSample], y=None):
    """Return ``(y, multilabel)``, reading targets off the videos when ``y`` is None."""
    if y is None:
        multi = {v.multi_label for v in videos}
        if len(multi) != 1:
            raise ValueError("videos mix single-label and multi-label targets")
        if multi.pop():
            return np.array([v.labels for v in videos], dtype=np.int64), True
        return np.array([v.label for v in videos]), False
    y = np.asarray(y)
    if y.shape[0] != len(videos):
        raise ValueError(f"X has {len(videos)} videos but y has {y.shape[0]} entries")
    if y.ndim == 2:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("multi-label y must be a binary indicator matrix")
        return y.astype(np.int64), True
    if y.ndim != 1:
        raise ValueError(f"y must be 1-d or 2-d, got shape {y.shape}")
    return y, False


def _with_targets(prepared: List[Prepared], targets, multilabel: bool) -> List[Prepared]:
    if multilabel:
        return [Prepared(p.id, p.H, p.frame_index, tuple(int(t) for t in row)) for p, row in zip(prepared, targets)]
    return [Prepared(p.id, p.H, p.frame_index, int(t)) for p, t in zip(prepared, targets)]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class GLIDNClassifier(ClassifierMixin, BaseEstimator):
    """Graph-attention video classifier over one context view.

    Parameters
    ----------
    context : {"baseline", "local", "global"}, default="local"
        ``"local"`` restricts attention to nodes of the same frame,
        ``"global"`` lets every node attend to the whole video and
        ``"baseline"`` skips the graph layers entirely.
    hidden_dim : int, default=16
    num_layers : int, default=2
        Number of stacked attention layers (ignored for ``"baseline"``).
    optimizer : {"adam", "sgd"}, default="adam"
    learning_rate : float, default=0.01
    epochs : int, default=80
    decay_every, decay_factor : int, float
        Step learning-rate decay, applied per epoch.
    batch_size : int, default=16
    random_state : int, default=0
        Seed for initialisation and shuffling; runs are bit-reproducible.

    Attributes
    ----------
    model_ : ModelState
    classes_ : ndarray
    n_features_in_ : int
        Node feature width.
    """

    def __init__(
        self,
        context: str = "local",
        hidden_dim: int = 16,
        num_layers: int = 2,
        optimizer: str = "adam",
        learning_rate: float = 0.01,
        epochs: int = 80,
        decay_every: int = 60,
        decay_factor: float = 0.1,
        batch_size: int = 16,
        leaky_slope: float = 0.2,
        grad_clip: float = 0.0,
        random_state: int = 0,
    ):
        self.context = context
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.batch_size = batch_size
        self.leaky_slope = leaky_slope
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _train_config(self, context: Optional[str] = None) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            base_lr=self.learning_rate,
            epochs=self.epochs,
            decay_every=self.decay_every,
            decay_factor=self.decay_factor,
            batch_size=self.batch_size,
            seed=int(self.random_state),
            context=context or self.context,
            dataset_mode="multi_label" if self.multilabel_ else "single_label",
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            n_classes=len(self.classes_),
            leaky_slope=self.leaky_slope,
            grad_clip=self.grad_clip,
        )

    def _prepare_fit(self, X, y):
        videos = check_videos(X)
        targets, self.multilabel_ = check_targets(videos, y)
        if self.multilabel_:
            self.classes_ = np.arange(targets.shape[1])
            encoded = targets
        else:
            self.classes_, encoded = np.unique(targets, return_inverse=True)
        self.n_features_in_ = len(videos[0].frames[0].nodes[0].feat)
        return _with_targets(prepare(videos), encoded, self.multilabel_)

    def fit(self, X, y=None):
        data = self._prepare_fit(X, y)
        self.model_ = train_teacher(data, self._train_config())
        return self

    def _prepared(self, X) -> List[Prepared]:
        check_is_fitted(self, "model_")
        return prepare(check_videos(X, self.n_features_in_))

    def decision_function(self, X) -> np.ndarray:
        """Raw class logits, shape ``(n_videos, n_classes)``."""
        data = self._prepared(X)
        return self.model_.predict_logits(data)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return _sigmoid(z) if self.multilabel_ else _softmax(z)

    def predict(self, X) -> np.ndarray:
        z = self.decision_function(X)
        if self.multilabel_:
            return (z > 0).astype(np.int64)
        return self.classes_[z.argmax(axis=1)]


class DistilledGLIDNClassifier(GLIDNClassifier):
    """Student network trained against a frozen teacher of the other context.

    If ``teacher`` is not fitted, a clone of it is first fitted on the same
    data; either way the fitted teacher is stored as ``teacher_`` and left
    untouched by student training.

    Parameters
    ----------
    teacher : GLIDNClassifier
    temperature : float, default=10.0
    lambda2 : float, default=0.7
        Weight of the distillation term.
    lambda1 : float or None, default=None
        Weight of the hard-label term; ``None`` means ``1 - lambda2``.
    loss : {"auto", "kl", "l2"}, default="auto"
        ``"auto"`` picks KL for single-label and L2 for multi-label data.
    """

    def __init__(
        self,
        teacher: Optional[GLIDNClassifier] = None,
        temperature: float = 10.0,
        lambda2: float = 0.7,
        lambda1: Optional[float] = None,
        loss: str = "auto",
        context: str = "local",
        hidden_dim: int = 16,
        num_layers: int = 2,
        optimizer: str = "adam",
        learning_rate: float = 0.01,
        epochs: int = 80,
        decay_every: int = 60,
        decay_factor: float = 0.1,
        batch_size: int = 16,
        leaky_slope: float = 0.2,
        grad_clip: float = 0.0,
        random_state: int = 0,
    ):
        super().__init__(
            context=context, hidden_dim=hidden_dim, num_layers=num_layers, optimizer=optimizer,
            learning_rate=learning_rate, epochs=epochs, decay_every=decay_every,
            decay_factor=decay_factor, batch_size=batch_size, leaky_slope=leaky_slope,
            grad_clip=grad_clip, random_state=random_state,
        )
        self.teacher = teacher
        self.temperature = temperature
        self.lambda2 = lambda2
        self.lambda1 = lambda1
        self.loss = loss

    def _distill_config(self, teacher_context: str) -> DistillConfig:
        kind = self.loss
        if kind == "auto":
            kind = "l2" if self.multilabel_ else "kl"
        lambda1 = 1.0 - self.lambda2 if self.lambda1 is None else self.lambda1
        return DistillConfig(
            temperature=self.temperature, lambda1=lambda1, lambda2=self.lambda2, loss_kind=kind,
            teacher_context=teacher_context, student_context=self.context,
        )

    def fit(self, X, y=None):
        if self.teacher is None:
            raise ValueError("DistilledGLIDNClassifier needs a teacher estimator")
        if self.teacher.context == self.context:
            raise ValueError(f"teacher and student share the {self.context!r} context")
        try:
            check_is_fitted(self.teacher, "model_")
            teacher = self.teacher
        except NotFittedError:
            teacher = clone(self.teacher).fit(X, y)
        data = self._prepare_fit(X, y)
        if not np.array_equal(teacher.classes_, self.classes_):
            raise ValueError("teacher was fitted on different classes")
        self.teacher_ = teacher
        dcfg = self._distill_config(teacher.context)
        self.model_ = train_student(data, teacher.model_, self._train_config(), dcfg)
        return self


class MutualLearningClassifier(GLIDNClassifier):
    """Two peer networks (``context`` and ``peer_context``) trained jointly.

    Predictions come from the ``context`` network; the fitted peer is
    exposed as ``peer_`` (a :class:`GLIDNClassifier`).
    """

    def __init__(
        self,
        peer_context: str = "global",
        temperature: float = 10.0,
        lambda2: float = 0.5,
        lambda1: Optional[float] = None,
        loss: str = "auto",
        context: str = "local",
        hidden_dim: int = 16,
        num_layers: int = 2,
        optimizer: str = "adam",
        learning_rate: float = 0.01,
        epochs: int = 80,
        decay_every: int = 60,
        decay_factor: float = 0.1,
        batch_size: int = 16,
        leaky_slope: float = 0.2,
        grad_clip: float = 0.0,
        random_state: int = 0,
    ):
        super().__init__(
            context=context, hidden_dim=hidden_dim, num_layers=num_layers, optimizer=optimizer,
            learning_rate=learning_rate, epochs=epochs, decay_every=decay_every,
            decay_factor=decay_factor, batch_size=batch_size, leaky_slope=leaky_slope,
            grad_clip=grad_clip, random_state=random_state,
        )
        self.peer_context = peer_context
        self.temperature = temperature
        self.lambda2 = lambda2
        self.lambda1 = lambda1
        self.loss = loss

    def fit(self, X, y=None):
        if self.peer_context == self.context:
            raise ValueError("peer_context must differ from context")
        data = self._prepare_fit(X, y)
        kind = self.loss if self.loss != "auto" else ("l2" if self.multilabel_ else "kl")
        lambda1 = 1.0 - self.lambda2 if self.lambda1 is None else self.lambda1
        dcfg = DistillConfig(
            temperature=self.temperature, lambda1=lambda1, lambda2=self.lambda2, loss_kind=kind,
            teacher_context=self.peer_context, student_context=self.context,
        )
        self.model_, peer_state = train_dml(
            data, self._train_config(), self._train_config(self.peer_context), dcfg
        )
        peer = GLIDNClassifier(**{k: v for k, v in self.get_params().items()
                                  if k in GLIDNClassifier().get_params()})
        peer.set_params(context=self.peer_context)
        peer.model_ = peer_state
        peer.classes_, peer.multilabel_, peer.n_features_in_ = self.classes_, self.multilabel_, self.n_features_in_
        self.peer_ = peer
        return self
