"""Ablation, hyper-parameter sweep and benchmark protocols."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, cross_entropy, grad_check, leaky_relu, no_grad
from .context import global_mask, local_mask
from .distill import DistillConfig, distill_loss, student_objective
from .gat import INTER_LAYER_SLOPE, gat_layer, pairwise_scores
from .metrics import accuracy, mean_average_precision
from .synthdata import GenConfig, Rng, generate
from .train import ModelState, Prepared, TrainConfig, prepare, train_dml, train_student, train_teacher

logger = logging.getLogger(__name__)

ABLATION_ROWS = (
    "Baseline",
    "Local-context",
    "Global-context",
    "Local-teacher",
    "Global-teacher",
    "DML (local)",
    "DML (global)",
)
OTHER = {"local": "global", "global": "local"}


def split(items: Sequence, val_fraction: float = 0.0, test_fraction: float = 0.25):
    """Contiguous ``(train, val, test)`` split in the given order."""
    if not 0 <= val_fraction < 1 or not 0 < test_fraction < 1 or val_fraction + test_fraction >= 1:
        raise ValueError("fractions must leave a non-empty training split")
    n = len(items)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    n_train = n - n_val - n_test
    return list(items[:n_train]), list(items[n_train:n_train + n_val]), list(items[n_train + n_val:])


def score(model: ModelState, data: Sequence[Prepared]) -> float:
    """Accuracy for single-label data, mAP for multi-label data."""
    logits = model.predict_logits(data)
    if model.config.dataset_mode == "single_label":
        return accuracy(logits, [p.target for p in data])
    return mean_average_precision(logits, np.array([p.target for p in data]))[0]


def default_loss_kind(mode: str) -> str:
    return "kl" if mode == "single_label" else "l2"


def train_pair(train: Sequence[Prepared], cfg: TrainConfig) -> Dict[str, ModelState]:
    """One hard-label model per graph context."""
    return {ctx: train_teacher(train, cfg.replace(context=ctx)) for ctx in ("local", "global")}


def distill_from(train, teacher: ModelState, cfg: TrainConfig, temperature: float, lambda2: float,
                 loss_kind: str, lambda1: Optional[float] = None) -> ModelState:
    student_ctx = OTHER[teacher.context]
    dcfg = DistillConfig(
        temperature=temperature,
        lambda1=1.0 - lambda2 if lambda1 is None else lambda1,
        lambda2=lambda2,
        loss_kind=loss_kind,
        teacher_context=teacher.context,
        student_context=student_ctx,
    )
    return train_student(train, teacher, cfg.replace(context=student_ctx), dcfg)


def run_ablation(train, test, cfg: TrainConfig, dcfg: DistillConfig, dml: bool = True) -> List[Tuple[str, float]]:
    """Scores for the ablation rows, all trained on ``train`` and scored on ``test``.

    Both teacher directions use the temperature and weights of ``dcfg``.
    """
    baseline = train_teacher(train, cfg.replace(context="baseline"))
    single = train_pair(train, cfg)
    rows = [
        ("Baseline", score(baseline, test)),
        ("Local-context", score(single["local"], test)),
        ("Global-context", score(single["global"], test)),
    ]
    for teacher_ctx, name in (("local", "Local-teacher"), ("global", "Global-teacher")):
        student = distill_from(train, single[teacher_ctx], cfg, dcfg.temperature, dcfg.lambda2,
                               dcfg.loss_kind, dcfg.lambda1)
        rows.append((name, score(student, test)))
    if dml:
        net_local, net_global = train_dml(
            train, cfg.replace(context="local"), cfg.replace(context="global"),
            DistillConfig(dcfg.temperature, dcfg.lambda1, dcfg.lambda2, dcfg.loss_kind, "global", "local"),
        )
        rows.append(("DML (local)", score(net_local, test)))
        rows.append(("DML (global)", score(net_global, test)))
    return rows


def run_sweep(train, test, cfg: TrainConfig, temperatures: Sequence[float], lambda2s: Sequence[float],
              loss_kind: str, teachers: Optional[Dict[str, ModelState]] = None) -> List[Dict]:
    """Grid over ``(T, lambda2)`` with ``lambda1 = 1 - lambda2``, both teacher directions.

    Teachers are trained once and shared by every cell.
    """
    teachers = teachers or train_pair(train, cfg)
    rows = []
    for T in temperatures:
        for lam in lambda2s:
            row = {"T": float(T), "lambda2": float(lam)}
            for ctx, col in (("global", "global_teacher"), ("local", "local_teacher")):
                row[col] = score(distill_from(train, teachers[ctx], cfg, T, lam, loss_kind), test)
            rows.append(row)
            logger.info("sweep T=%s lambda2=%s -> %s", T, lam, row)
    return rows


def rows_to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [
        [f"{100 * v:.2f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic benchmark


#: Model settings used by the synthetic benchmark.
BENCHMARK_TRAIN = dict(optimizer="adam", base_lr=0.01, epochs=80, decay_every=60, decay_factor=0.1,
                       batch_size=16, hidden_dim=16, num_layers=2)
BENCHMARK_CELLS = ((5.0, 0.3), (10.0, 0.3), (10.0, 0.7))


@dataclass
class BenchmarkResult:
    seed: int
    baseline: float
    local: float
    global_: float
    student: float
    chosen: Tuple[float, float]
    val_scores: Dict[Tuple[float, float], float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def best_single(self) -> float:
        return max(self.local, self.global_)


def benchmark_seed(seed: int, gen_cfg: Optional[GenConfig] = None, train_kwargs: Optional[Dict] = None,
                   cells: Sequence[Tuple[float, float]] = BENCHMARK_CELLS,
                   val_fraction: float = 0.2, test_fraction: float = 0.2) -> BenchmarkResult:
    """Baseline, single-context models and a global-to-local distilled student for one seed.

    The student's ``(T, lambda2)`` is picked on the validation split; all
    reported numbers are test-split accuracies.
    """
    start = time.perf_counter()
    gen_cfg = gen_cfg or GenConfig()
    kwargs = dict(BENCHMARK_TRAIN)
    kwargs.update(train_kwargs or {})
    cfg = TrainConfig(seed=seed, n_classes=gen_cfg.n_classes, dataset_mode=gen_cfg.mode, **kwargs)
    data = prepare(generate(gen_cfg, seed))
    train, val, test = split(data, val_fraction, test_fraction)
    loss_kind = default_loss_kind(gen_cfg.mode)

    baseline = train_teacher(train, cfg.replace(context="baseline"))
    single = train_pair(train, cfg)
    best, best_val, best_model = None, -1.0, None
    val_scores = {}
    for T, lam in cells:
        student = distill_from(train, single["global"], cfg, T, lam, loss_kind)
        val_scores[(T, lam)] = score(student, val)
        if val_scores[(T, lam)] > best_val:
            best, best_val, best_model = (T, lam), val_scores[(T, lam)], student
    return BenchmarkResult(
        seed=seed,
        baseline=score(baseline, test),
        local=score(single["local"], test),
        global_=score(single["global"], test),
        student=score(best_model, test),
        chosen=best,
        val_scores=val_scores,
        seconds=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# gradient oracle on the composed student loss
#
# Two situations make the relative error of a central difference meaningless,
# so they are detected up front instead of being left to inflate the maximum:
#
# * static attention: when no row of a layer has live scores on both sides of
#   the LeakyReLU kink, each row's softmax weights stop depending on the row's
#   own node and the source half of that layer's attention vector has an
#   exactly zero gradient. The finite difference then returns float64 rounding
#   (~1e-11) against a 1e-8 floor. Those entries are checked in absolute terms.
# * kinks: a pre-activation within reach of an eps step of zero is crossed by
#   the perturbation, where the function is not differentiable.

STRUCTURAL_ANALYTIC_TOL = 1e-12
STRUCTURAL_NUMERIC_TOL = 1e-9
KINK_MARGIN = 1e-4


@dataclass
class AttentionRegime:
    static_layers: List[int]
    kink_distance: float

    @property
    def near_kink(self) -> bool:
        return self.kink_distance < KINK_MARGIN


def attention_regime(layers: Sequence, H, mask) -> AttentionRegime:
    """Static layers and the smallest distance of any LeakyReLU input to the kink."""
    static = []
    closest = np.inf
    H = H if isinstance(H, Tensor) else Tensor(H)
    with no_grad():
        for k, params in enumerate(layers):
            scores = pairwise_scores(H, params, mask).data
            live = np.isfinite(scores)
            closest = min(closest, float(np.abs(scores[live]).min()))
            pos = ((scores >= 0) & live).any(axis=-1)
            neg = ((scores < 0) & live).any(axis=-1)
            if not np.any(pos & neg):
                static.append(k)
            H = gat_layer(H, params, mask)
            if k < len(layers) - 1:
                closest = min(closest, float(np.abs(H.data).min()))
                H = leaky_relu(H, INTER_LAYER_SLOPE)
    return AttentionRegime(static, closest)


@dataclass
class SplitCheck:
    """A finite-difference check with structurally zero entries set apart."""

    worst_rel: float
    structural_analytic: float = 0.0
    structural_numeric: float = 0.0


def split_grad_check(f, params: Sequence[Tensor], structural: Sequence[Tuple[int, int]] = (),
                     eps: float = 1e-5) -> SplitCheck:
    """:func:`grad_check` with the listed ``(param index, flat entry)`` pairs checked in absolute terms."""
    _, details = grad_check(f, params, eps=eps, return_details=True)
    skip = set(structural)
    out = SplitCheck(0.0)
    pos = 0
    for pi, p in enumerate(params):
        for i in range(p.size):
            _, _, a, n, err = details[pos]
            pos += 1
            if (pi, i) in skip:
                out.structural_analytic = max(out.structural_analytic, abs(a))
                out.structural_numeric = max(out.structural_numeric, abs(n))
            else:
                out.worst_rel = max(out.worst_rel, err)
    return out


def structural_entries(params: Sequence[Tensor], layers: Sequence, static: Sequence[int]) -> List[Tuple[int, int]]:
    """Entries of ``a_src`` in the static layers, as ``(index into params, flat entry)``."""
    index = {id(p): i for i, p in enumerate(params)}
    out = []
    for k in static:
        out.extend((index[id(layers[k].attn)], j) for j in range(layers[k].d_out))
    return out


@dataclass
class GradcheckTally:
    """Running tally of checks over random instances of one function family."""

    clean: int = 0
    static: int = 0
    near_kink: int = 0
    worst_rel: float = 0.0
    worst_rel_static: float = 0.0
    structural_analytic: float = 0.0
    structural_numeric: float = 0.0

    def add(self, f, params: Sequence[Tensor], layers: Sequence = (), H=None, mask=None,
            eps: float = 1e-5) -> None:
        regime = attention_regime(layers, H, mask) if layers else AttentionRegime([], np.inf)
        if regime.near_kink:
            self.near_kink += 1
            return
        res = split_grad_check(f, params, structural_entries(params, layers, regime.static_layers), eps=eps)
        if regime.static_layers:
            self.static += 1
            self.worst_rel_static = max(self.worst_rel_static, res.worst_rel)
            self.structural_analytic = max(self.structural_analytic, res.structural_analytic)
            self.structural_numeric = max(self.structural_numeric, res.structural_numeric)
        else:
            self.clean += 1
            self.worst_rel = max(self.worst_rel, res.worst_rel)

    @property
    def draws(self) -> int:
        return self.clean + self.static + self.near_kink

    def passed(self, required: int, tol: float = 1e-4) -> bool:
        # worst_rel_static is reported only: with identical attention rows the
        # destination half can carry gradients near 1e-8, where central
        # difference noise alone exceeds the relative tolerance
        return (self.clean >= required and self.worst_rel < tol
                and self.structural_analytic <= STRUCTURAL_ANALYTIC_TOL
                and self.structural_numeric <= STRUCTURAL_NUMERIC_TOL)

    def describe(self) -> str:
        text = f"max relative error {self.worst_rel:.2e} over {self.clean} instances"
        if self.static:
            text += (f"; {self.static} with static attention (other entries {self.worst_rel_static:.1e}, "
                     f"zero entries |a| <= {self.structural_analytic:.0e}, |n| <= {self.structural_numeric:.0e})")
        if self.near_kink:
            text += f"; {self.near_kink} skipped within {KINK_MARGIN:g} of a kink"
        return text


@dataclass
class GradcheckSummary:
    context: str
    loss: str
    required: int
    tally: GradcheckTally

    def passed(self, tol: float = 1e-4) -> bool:
        return self.tally.passed(self.required, tol)

    def to_dict(self) -> Dict:
        return {"context": self.context, "loss": self.loss, "required": self.required, **self.tally.__dict__}


def student_gradcheck(trials: int = 20, seed: int = 0, eps: float = 1e-5,
                      max_draws_factor: int = 12) -> List[GradcheckSummary]:
    """Finite-difference checks of the full student objective for every context and loss kind.

    Each instance is a fresh two-layer model on a random video of 2-3 frames
    with six nodes each, plus a random label, teacher logits, temperature and
    weighting. Draws continue until ``trials`` instances free of static
    attention and near-kink activations have been checked, or
    ``max_draws_factor * trials`` draws.
    """
    rng = Rng(seed)
    nprng = np.random.default_rng(seed)
    d, hidden, k, per_frame = 5, 4, 3, 6
    out = []
    for ctx in ("local", "global"):
        for kind in ("kl", "l2"):
            tally = GradcheckTally()
            while tally.clean < trials and tally.draws < max_draws_factor * trials:
                frame_index = [f for f in range(2 + int(nprng.integers(2))) for _ in range(per_frame)]
                H = Tensor(nprng.normal(size=(len(frame_index), d)))
                label = int(nprng.integers(k))
                teacher_logits = nprng.normal(size=k)
                mask = (local_mask(frame_index) if ctx == "local" else global_mask(len(frame_index))).bits
                cfg = TrainConfig(context=ctx, hidden_dim=hidden, num_layers=2, n_classes=k, seed=rng.next_u64())
                student = ModelState.init(cfg, d, k)
                lam2 = float(nprng.uniform(0.1, 0.9))
                dcfg = DistillConfig(temperature=float(nprng.uniform(1, 20)), lambda1=1 - lam2, lambda2=lam2,
                                     loss_kind=kind, teacher_context=OTHER[ctx], student_context=ctx)

                def f():
                    logits = student.forward(H, mask)
                    return student_objective(cross_entropy(logits, label),
                                             distill_loss(teacher_logits, logits, dcfg),
                                             dcfg.lambda1, dcfg.lambda2)

                tally.add(f, student.parameters(), student.layers, H, mask, eps=eps)
            out.append(GradcheckSummary(ctx, kind, trials, tally))
    return out
