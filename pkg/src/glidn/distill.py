"""Logit distillation losses and the student objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    log_softmax,
    mul,
    scale,
    sigmoid,
    square,
    sub,
    tensor_mean,
    tensor_sum,
)

CONTEXTS = ("local", "global")


@dataclass
class DistillConfig:
    """Distillation hyper-parameters.

    ``literal_eq3`` switches the L2 loss to its printed form: sigmoid of
    ``-l / T`` and an unsquared difference. ``t_squared`` multiplies the
    distillation term by ``T**2``.
    """

    temperature: float = 10.0
    lambda1: float = 0.3
    lambda2: float = 0.7
    loss_kind: str = "kl"
    teacher_context: str = "global"
    student_context: str = "local"
    literal_eq3: bool = False
    t_squared: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 cannot both be zero")
        if self.loss_kind not in ("l2", "kl"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.teacher_context not in CONTEXTS or self.student_context not in CONTEXTS:
            raise ValueError(f"contexts must be one of {CONTEXTS}")
        if self.teacher_context == self.student_context:
            raise ValueError("teacher and student contexts must differ")

    @classmethod
    def generalized(cls, temperature: float, lambda2: float, **kwargs) -> "DistillConfig":
        """Config with ``lambda1 = 1 - lambda2``."""
        return cls(temperature=temperature, lambda1=1.0 - lambda2, lambda2=lambda2, **kwargs)

    @classmethod
    def from_dict(cls, d: Dict) -> "DistillConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown DistillConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> Dict:
        return asdict(self)


def _check_pair(teacher_logits, student_logits):
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=float)
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    if t.shape != s.shape:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {s.shape}")
    return t, s


def soften_sigmoid(logits: Tensor, T: float, literal: bool = False) -> Tensor:
    """Temperature-scaled sigmoid ``1 / (1 + exp(-l / T))``.

    With ``literal=True`` the sign of the exponent is flipped.
    """
    if T <= 0:
        raise ValueError("temperature must be > 0")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return sigmoid(scale(logits, (-1.0 if literal else 1.0) / T))


def l2_distill(teacher_logits, student_logits, T: float, literal: bool = False) -> Tensor:
    """Mean squared gap between softened sigmoid outputs.

    The mean runs over classes and, for 2-d input, over the batch. The
    teacher side is a constant.
    """
    t, s = _check_pair(teacher_logits, student_logits)
    if T <= 0:
        raise ValueError("temperature must be > 0")
    # same float path as the student side, so identical logits give exactly 0
    p_teacher = soften_sigmoid(Tensor(t), T, literal).detach()
    diff = sub(p_teacher, soften_sigmoid(s, T, literal))
    return tensor_mean(diff if literal else square(diff))


def kl_distill(teacher_logits, student_logits, T: float) -> Tensor:
    """``KL(softmax(t / T) || softmax(s / T))``, averaged over a batch axis if present."""
    t, s = _check_pair(teacher_logits, student_logits)
    if T <= 0:
        raise ValueError("temperature must be > 0")
    if t.shape[-1] < 2:
        raise DimensionError("kl_distill needs at least 2 classes")
    log_p = log_softmax(scale(Tensor(t), 1.0 / T)).data
    p = np.exp(log_p)
    log_q = log_softmax(scale(s, 1.0 / T))
    inv_rows = 1.0 / (1 if t.ndim == 1 else t.shape[0])
    # sum p (log p - log q); the p log p term is a constant of the student
    cross = scale(tensor_sum(mul(Tensor(p), log_q)), -inv_rows)
    return add(cross, float((p * log_p).sum()) * inv_rows)


def distill_loss(teacher_logits, student_logits, cfg: DistillConfig) -> Tensor:
    if cfg.loss_kind == "kl":
        loss = kl_distill(teacher_logits, student_logits, cfg.temperature)
    else:
        loss = l2_distill(teacher_logits, student_logits, cfg.temperature, literal=cfg.literal_eq3)
    if cfg.t_squared:
        loss = scale(loss, cfg.temperature ** 2)
    return loss


def student_objective(ce_loss: Tensor, distill: Tensor, lambda1: float, lambda2: float) -> Tensor:
    """``lambda1 * hard_loss + lambda2 * distill``."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambdas must be >= 0")
    return add(scale(ce_loss, lambda1), scale(distill, lambda2))


def softmax_entropy(logits, T: float) -> float:
    """Entropy (nats) of ``softmax(logits / T)``."""
    log_p = log_softmax(Tensor(np.asarray(logits, dtype=float) / T)).data
    return float(-(np.exp(log_p) * log_p).sum())
