"""Models, optimizers and the teacher / student / mutual-learning protocols."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tape, Tensor, backward, bce_with_logits, cross_entropy, no_grad, reshape
from .context import ClassifierHead, VideoSample, assemble_nodes, classify, global_mask, local_mask
from .distill import DistillConfig, distill_loss, student_objective
from .gat import GatParams, gat_stack
from .metrics import accuracy
from .synthdata import Rng, derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "glidn-checkpoint/1"
MODEL_CONTEXTS = ("baseline", "local", "global")

# stream ids for derive_seed(cfg.seed, ...)
_INIT_STREAM = 1
_SHUFFLE_STREAM = 2


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class ContextMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    base_lr: float = 0.01
    epochs: int = 80
    decay_every: int = 60
    decay_factor: float = 0.1
    batch_size: int = 16
    seed: int = 0
    context: str = "local"
    dataset_mode: str = "single_label"
    hidden_dim: int = 16
    num_layers: int = 2
    n_classes: int = 0
    leaky_slope: float = 0.2
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.context not in MODEL_CONTEXTS:
            raise ValueError(f"context must be one of {MODEL_CONTEXTS}")
        if self.dataset_mode not in ("single_label", "multi_label"):
            raise ValueError(f"unknown dataset_mode {self.dataset_mode!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @classmethod
    def cad120(cls, **overrides) -> "TrainConfig":
        """Training settings reported for CAD-120: Adam, lr 2e-5, 100 epochs, x0.1 every 50, 3 GAT layers."""
        base = dict(optimizer="adam", base_lr=2e-5, epochs=100, decay_every=50, decay_factor=0.1,
                    num_layers=3, dataset_mode="single_label")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def charades(cls, **overrides) -> "TrainConfig":
        """Charades settings: SGD, lr 0.018, 60 epochs, x0.1 after 40, one GAT layer."""
        base = dict(optimizer="sgd", base_lr=0.018, epochs=60, decay_every=40, decay_factor=0.1,
                    num_layers=1, batch_size=8, dataset_mode="multi_label")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> Dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``base_lr * decay_factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    kind = ""

    def step(self, params: Sequence[Tensor], lr: float) -> None:
        raise NotImplementedError

    def state_dict(self) -> Dict:
        return {"kind": self.kind}

    def load_state_dict(self, d: Dict, params: Sequence[Tensor]) -> None:
        pass


def _check_grads(params: Sequence[Tensor]) -> None:
    for k, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {k} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"parameter {k}: gradient shape {p.grad.shape} vs {p.data.shape}")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise NonFiniteError(f"parameter {k} (shape {p.data.shape}) has {bad} non-finite gradient entries")


class SGD(Optimizer):
    kind = "sgd"

    def step(self, params, lr):
        _check_grads(params)
        for p in params:
            p.data -= lr * p.grad


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: List[np.ndarray] = []
        self.v: List[np.ndarray] = []

    def step(self, params, lr):
        _check_grads(params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "kind": self.kind,
            "t": self.t,
            "m": [m.reshape(-1).tolist() for m in self.m],
            "v": [v.reshape(-1).tolist() for v in self.v],
        }

    def load_state_dict(self, d, params):
        self.t = int(d["t"])
        self.m = [np.array(m, dtype=np.float64).reshape(p.shape) for m, p in zip(d["m"], params)]
        self.v = [np.array(v, dtype=np.float64).reshape(p.shape) for v, p in zip(d["v"], params)]


def make_optimizer(kind: str) -> Optimizer:
    if kind == "adam":
        return Adam()
    if kind == "sgd":
        return SGD()
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(optimizer: Optimizer, params: Sequence[Tensor], lr: float) -> None:
    optimizer.step(params, lr)


# ---------------------------------------------------------------------------
# prepared data and the network


@dataclass(frozen=True)
class Prepared:
    """A video turned into arrays: node features, frame ids and target."""

    id: str
    H: np.ndarray
    frame_index: Tuple[int, ...]
    target: Union[int, Tuple[int, ...]]


def prepare(videos: Sequence[VideoSample]) -> List[Prepared]:
    out = []
    for v in videos:
        H, frame_index = assemble_nodes(v)
        target = v.labels if v.labels is not None else v.label
        out.append(Prepared(v.id, H, tuple(frame_index), target))
    return out


_MASK_CACHE: Dict[Tuple, np.ndarray] = {}


def _mask_for(context: str, frame_index: Tuple[int, ...]) -> Optional[np.ndarray]:
    if context == "baseline":
        return None
    key = (context, frame_index)
    bits = _MASK_CACHE.get(key)
    if bits is None:
        if context == "local":
            bits = local_mask(frame_index).bits
        else:
            bits = global_mask(len(frame_index)).bits
        if len(_MASK_CACHE) > 4096:
            _MASK_CACHE.clear()
        _MASK_CACHE[key] = bits
    return bits


def _uniform_frame_size(frame_index: Tuple[int, ...]) -> int:
    counts = np.bincount(np.asarray(frame_index))
    return int(counts[0]) if counts.size and np.all(counts == counts[0]) else 0


def _group(batch: Sequence[Prepared], context: str):
    """Split a batch into stacks that share a node layout."""
    groups: Dict[Tuple, List[Prepared]] = {}
    for p in batch:
        key = (len(p.frame_index),) if context != "local" else p.frame_index
        groups.setdefault(key, []).append(p)
    for members in groups.values():
        yield members, _mask_for(context, members[0].frame_index)


@dataclass
class ModelState:
    """Trainable state of one context model."""

    context: str
    layers: List[GatParams]
    head: ClassifierHead
    optimizer: Optimizer
    config: TrainConfig
    epoch: int = 0
    loss_trace: List[float] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: TrainConfig, d_in: int, n_classes: int) -> "ModelState":
        rng = Rng(derive_seed(cfg.seed, _INIT_STREAM))
        layers = []
        if cfg.context != "baseline":
            width = d_in
            for _ in range(cfg.num_layers):
                layers.append(GatParams.init(width, cfg.hidden_dim, rng, cfg.leaky_slope))
                width = cfg.hidden_dim
        head_in = layers[-1].d_out if layers else d_in
        head = ClassifierHead.init(n_classes, head_in, rng)
        return cls(cfg.context, layers, head, make_optimizer(cfg.optimizer), cfg)

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend(self.head.parameters())
        return params

    def forward(self, H: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        """Logits for node features ``H`` of shape ``(N, d)`` or ``(B, N, d)``."""
        if self.layers:
            H = gat_stack(H, self.layers, mask)
        return classify(H, self.head)

    def forward_group(self, members: Sequence[Prepared], mask) -> Tensor:
        H = np.stack([m.H for m in members])
        size = _uniform_frame_size(members[0].frame_index) if self.context == "local" else 0
        if not (size and self.layers):
            return self.forward(Tensor(H), mask)
        # block-diagonal attention == independent per-frame graphs; run them as a batch
        B, N, d = H.shape
        frames = Tensor(H.reshape(B, N // size, size, d))
        out = gat_stack(frames, self.layers, np.ones((size, size), dtype=bool))
        return classify(reshape(out, (B, N, out.shape[-1])), self.head)

    def predict_logits(self, data: Sequence[Prepared], batch_size: int = 64) -> np.ndarray:
        out = np.empty((len(data), self.n_classes))
        pos = {id(p): i for i, p in enumerate(data)}
        with no_grad():
            for start in range(0, len(data), batch_size):
                batch = data[start:start + batch_size]
                for members, mask in _group(batch, self.context):
                    logits = self.forward_group(members, mask).data
                    for m, row in zip(members, logits):
                        out[pos[id(m)]] = row
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# losses over a batch


def _hard_loss(logits: Tensor, members: Sequence[Prepared], mode: str) -> Tensor:
    if mode == "single_label":
        return cross_entropy(logits, [m.target for m in members])
    return bce_with_logits(logits, np.array([m.target for m in members], dtype=np.float64))


def _check_finite(loss: Tensor, batch_id: int) -> None:
    if not math.isfinite(loss.item()):
        raise NonFiniteError(f"non-finite loss {loss.item()!r} at batch {batch_id}")


def _clip(params: Sequence[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > max_norm > 0:
        for p in params:
            p.grad *= max_norm / total


def _batches(data: Sequence[Prepared], cfg: TrainConfig, rng: Rng):
    order = list(range(len(data)))
    rng.shuffle(order)
    for start in range(0, len(order), cfg.batch_size):
        yield [data[i] for i in order[start:start + cfg.batch_size]]


def _update(state: ModelState, loss_fn, batch, batch_id: int, lr: float) -> float:
    params = state.parameters()
    for p in params:
        p.zero_grad()
    total = None
    with Tape() as tape:
        for members, mask in _group(batch, state.context):
            part = loss_fn(state, members, mask)
            weight = len(members) / len(batch)
            part = part if weight == 1.0 else part * weight
            total = part if total is None else total + part
    _check_finite(total, batch_id)
    backward(total, tape)
    if state.config.grad_clip > 0:
        _clip(params, state.config.grad_clip)
    state.optimizer.step(params, lr)
    return total.item()


def _ensure_data(data) -> List[Prepared]:
    if not data:
        raise ValueError("training data is empty")
    return data if isinstance(data[0], Prepared) else prepare(data)


def _infer_classes(data: Sequence[Prepared], cfg: TrainConfig) -> int:
    if cfg.n_classes:
        return cfg.n_classes
    if cfg.dataset_mode == "multi_label":
        return len(data[0].target)
    return max(int(p.target) for p in data) + 1


def _check_mode(data: Sequence[Prepared], cfg: TrainConfig) -> None:
    multi = isinstance(data[0].target, tuple)
    if multi != (cfg.dataset_mode == "multi_label"):
        raise ValueError(f"dataset targets do not match dataset_mode={cfg.dataset_mode!r}")


def train_teacher(data, cfg: TrainConfig) -> ModelState:
    """Train one context model on hard labels only."""
    data = _ensure_data(data)
    _check_mode(data, cfg)
    state = ModelState.init(cfg, data[0].H.shape[1], _infer_classes(data, cfg))
    return _fit_hard(state, data)


def _fit_hard(state: ModelState, data: List[Prepared]) -> ModelState:
    cfg = state.config
    rng = Rng(derive_seed(cfg.seed, _SHUFFLE_STREAM))

    def loss_fn(st, members, mask):
        return _hard_loss(st.forward_group(members, mask), members, cfg.dataset_mode)

    batch_id = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        losses = []
        for batch in _batches(data, cfg, rng):
            losses.append(_update(state, loss_fn, batch, batch_id, lr))
            batch_id += 1
        state.epoch = epoch + 1
        state.loss_trace.append(float(np.mean(losses)))
        logger.debug("%s epoch %d loss %.5f", cfg.context, epoch, state.loss_trace[-1])
    return state


def train_student(data, teacher: ModelState, cfg: TrainConfig, dcfg: DistillConfig) -> ModelState:
    """Train ``cfg.context`` against hard labels and a frozen teacher."""
    data = _ensure_data(data)
    _check_mode(data, cfg)
    if teacher.context != dcfg.teacher_context:
        raise ContextMismatchError(
            f"teacher context {teacher.context!r} != distill teacher_context {dcfg.teacher_context!r}"
        )
    if cfg.context != dcfg.student_context:
        raise ContextMismatchError(
            f"student context {cfg.context!r} != distill student_context {dcfg.student_context!r}"
        )
    n_classes = _infer_classes(data, cfg)
    if n_classes != teacher.n_classes:
        raise ContextMismatchError(f"teacher has {teacher.n_classes} classes, student {n_classes}")
    state = ModelState.init(cfg, data[0].H.shape[1], n_classes)
    rng = Rng(derive_seed(cfg.seed, _SHUFFLE_STREAM))

    def loss_fn(st, members, mask):
        with no_grad():
            t_logits = teacher.forward_group(members, _mask_for(teacher.context, members[0].frame_index)).data
        s_logits = st.forward_group(members, mask)
        hard = _hard_loss(s_logits, members, cfg.dataset_mode)
        return student_objective(hard, distill_loss(t_logits, s_logits, dcfg), dcfg.lambda1, dcfg.lambda2)

    batch_id = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        losses = []
        for batch in _batches(data, cfg, rng):
            losses.append(_update(state, loss_fn, batch, batch_id, lr))
            batch_id += 1
        state.epoch = epoch + 1
        state.loss_trace.append(float(np.mean(losses)))
    return state


def mutual_loss(state: ModelState, peer: ModelState, members, mask, mode: str, dcfg: DistillConfig) -> Tensor:
    """Hard loss of ``state`` plus distillation toward ``peer``'s detached predictions."""
    with no_grad():
        target = peer.forward_group(members, _mask_for(peer.context, members[0].frame_index)).data
    logits = state.forward_group(members, mask)
    return student_objective(_hard_loss(logits, members, mode), distill_loss(target, logits, dcfg),
                             dcfg.lambda1, dcfg.lambda2)


def train_dml(data, cfg_a: TrainConfig, cfg_b: TrainConfig, dcfg: DistillConfig) -> Tuple[ModelState, ModelState]:
    """Deep mutual learning: both networks update every batch, ``a`` first."""
    data = _ensure_data(data)
    _check_mode(data, cfg_a)
    if cfg_a.context == cfg_b.context:
        raise ContextMismatchError("mutual learning needs two different contexts")
    if cfg_a.dataset_mode != cfg_b.dataset_mode:
        raise ContextMismatchError("both networks must use the same dataset_mode")
    n_classes = _infer_classes(data, cfg_a)
    if cfg_b.n_classes and cfg_b.n_classes != n_classes:
        raise ContextMismatchError(f"class counts differ: {n_classes} vs {cfg_b.n_classes}")
    a = ModelState.init(cfg_a, data[0].H.shape[1], n_classes)
    b = ModelState.init(cfg_b, data[0].H.shape[1], n_classes)
    rng = Rng(derive_seed(cfg_a.seed, _SHUFFLE_STREAM))
    mode = cfg_a.dataset_mode

    batch_id = 0
    for epoch in range(cfg_a.epochs):
        lr_a, lr_b = lr_schedule(epoch, cfg_a), lr_schedule(epoch, cfg_b)
        la, lb = [], []
        for batch in _batches(data, cfg_a, rng):
            la.append(_update(a, lambda st, m, k: mutual_loss(st, b, m, k, mode, dcfg), batch, batch_id, lr_a))
            lb.append(_update(b, lambda st, m, k: mutual_loss(st, a, m, k, mode, dcfg), batch, batch_id, lr_b))
            batch_id += 1
        a.epoch = b.epoch = epoch + 1
        a.loss_trace.append(float(np.mean(la)))
        b.loss_trace.append(float(np.mean(lb)))
    return a, b


def hard_loss_on(state: ModelState, data) -> float:
    """Mean hard-label loss of ``state`` over ``data`` (no gradient)."""
    data = _ensure_data(data)
    logits = state.predict_logits(data)
    with no_grad():
        if state.config.dataset_mode == "single_label":
            return cross_entropy(Tensor(logits), [p.target for p in data]).item()
        return bce_with_logits(Tensor(logits), np.array([p.target for p in data], dtype=float)).item()


# ---------------------------------------------------------------------------
# leave-one-subject-out


@dataclass
class Fold:
    subject: str
    train_ids: List[str]
    test_ids: List[str]
    accuracy: float


@dataclass
class LoocvResult:
    folds: List[Fold]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))


def subject_folds(videos: Sequence[VideoSample]) -> List[Tuple[str, List[int], List[int]]]:
    """``(subject, train_idx, test_idx)`` per subject, subjects in sorted order."""
    subjects = sorted({v.subject for v in videos if v.subject is not None})
    if any(v.subject is None for v in videos):
        raise ValueError("every video needs a subject for leave-one-subject-out")
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    folds = []
    for s in subjects:
        test = [i for i, v in enumerate(videos) if v.subject == s]
        train = [i for i, v in enumerate(videos) if v.subject != s]
        folds.append((s, train, test))
    return folds


def loocv(videos: Sequence[VideoSample], cfg: TrainConfig, dcfg: Optional[DistillConfig] = None) -> LoocvResult:
    """One fold per subject; with ``dcfg`` each fold trains a teacher then a student.

    Only single-label accuracy is reported.
    """
    videos = list(videos)
    prepared = prepare(videos)
    n_classes = cfg.n_classes or max(p.target for p in prepared) + 1
    cfg = cfg.replace(n_classes=n_classes)
    folds = []
    for subject, train_idx, test_idx in subject_folds(videos):
        train = [prepared[i] for i in train_idx]
        test = [prepared[i] for i in test_idx]
        if dcfg is None:
            model = train_teacher(train, cfg)
        else:
            teacher = train_teacher(train, cfg.replace(context=dcfg.teacher_context))
            model = train_student(train, teacher, cfg.replace(context=dcfg.student_context), dcfg)
        acc = accuracy(model.predict_logits(test), [p.target for p in test])
        folds.append(Fold(subject, [videos[i].id for i in train_idx], [videos[i].id for i in test_idx], acc))
    return LoocvResult(folds)


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_dict(t: Tensor) -> Dict:
    return {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}


def _tensor_from(d: Dict) -> Tensor:
    return Tensor(np.array(d["data"], dtype=np.float64).reshape(d["shape"]), requires_grad=True)


def state_to_dict(state: ModelState) -> Dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "context": state.context,
        "n_classes": state.n_classes,
        "layers": [
            {"weight": _tensor_dict(l.weight), "attn": _tensor_dict(l.attn), "leaky_slope": l.leaky_slope}
            for l in state.layers
        ],
        "head": {"weight": _tensor_dict(state.head.weight), "bias": _tensor_dict(state.head.bias)},
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "loss_trace": list(state.loss_trace),
        "config": state.config.to_dict(),
    }


def state_from_dict(d: Dict) -> ModelState:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint: format={d.get('format')!r}")
    cfg = TrainConfig.from_dict(d["config"])
    layers = [GatParams(_tensor_from(l["weight"]), _tensor_from(l["attn"]), float(l["leaky_slope"])) for l in d["layers"]]
    head = ClassifierHead(_tensor_from(d["head"]["weight"]), _tensor_from(d["head"]["bias"]))
    state = ModelState(d["context"], layers, head, make_optimizer(d["optimizer"]["kind"]), cfg,
                       epoch=int(d["epoch"]), loss_trace=[float(x) for x in d.get("loss_trace", [])])
    state.optimizer.load_state_dict(d["optimizer"], state.parameters())
    return state


def save_checkpoint(state: ModelState, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state_to_dict(state), sort_keys=True) + "\n")


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    return state_from_dict(json.loads(Path(path).read_text()))
