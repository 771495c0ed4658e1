"""Video samples, context masks and the classifier readout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import DimensionError, Tensor, glorot_uniform, linear_transform, pool

HUMAN = "human"


class SchemaError(ValueError):
    """Raised when a video sample violates its structural invariants."""


@dataclass(frozen=True)
class Node:
    type: str
    feat: Tuple[float, ...]
    box: Optional[Tuple[float, float, float, float]] = None


@dataclass(frozen=True)
class Frame:
    t: int
    nodes: Tuple[Node, ...]


@dataclass(frozen=True)
class VideoSample:
    """One video: ordered frames of typed nodes plus its target.

    ``label`` is a class index in single-label mode; ``labels`` is a tuple of
    0/1 ints in multi-label mode. Exactly one of the two is set.
    """

    id: str
    frames: Tuple[Frame, ...]
    label: Optional[int] = None
    labels: Optional[Tuple[int, ...]] = None
    subject: Optional[str] = None

    @property
    def multi_label(self) -> bool:
        return self.labels is not None

    @property
    def num_nodes(self) -> int:
        return sum(len(f.nodes) for f in self.frames)

    def validate(self) -> "VideoSample":
        if not self.frames:
            raise SchemaError(f"video {self.id!r} has no frames")
        if (self.label is None) == (self.labels is None):
            raise SchemaError(f"video {self.id!r} needs exactly one of label / labels")
        width = None
        for frame in self.frames:
            if not frame.nodes:
                raise SchemaError(f"video {self.id!r}: frame {frame.t} has no nodes")
            for node in frame.nodes:
                if width is None:
                    width = len(node.feat)
                elif len(node.feat) != width:
                    raise SchemaError(
                        f"video {self.id!r}: inconsistent feature widths {width} and {len(node.feat)}"
                    )
                if node.box is not None:
                    x1, y1, x2, y2 = node.box
                    if not (x1 < x2 and y1 < y2):
                        raise SchemaError(f"video {self.id!r}: malformed box {node.box}")
        return self


@dataclass(frozen=True, eq=False)
class GraphMask:
    """Boolean ``n x n`` adjacency restricting attention."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise DimensionError(f"GraphMask needs a square matrix, got {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        return isinstance(other, GraphMask) and np.array_equal(self.bits, other.bits)

    def with_self_loops(self) -> "GraphMask":
        bits = self.bits.copy()
        np.fill_diagonal(bits, True)
        return GraphMask(bits)


def assemble_nodes(video: VideoSample) -> Tuple[np.ndarray, List[int]]:
    """Stack node features in frame order, returning ``(H, frame_index)``."""
    video.validate()
    rows, frame_index = [], []
    for k, frame in enumerate(video.frames):
        for node in frame.nodes:
            rows.append(node.feat)
            frame_index.append(k)
    return np.asarray(rows, dtype=np.float64), frame_index


def local_mask(frame_index: Sequence[int]) -> GraphMask:
    """Block-diagonal mask: nodes attend only within their own frame."""
    idx = np.asarray(frame_index)
    if idx.size > 1 and np.any(np.diff(idx) < 0):
        raise ValueError("frame indices must be non-decreasing")
    return GraphMask(idx[:, None] == idx[None, :])


def global_mask(n: int) -> GraphMask:
    """All-true mask: every node attends to every node of the video."""
    if n < 1:
        raise ValueError("global_mask needs n >= 1")
    return GraphMask(np.ones((n, n), dtype=bool))


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, n_classes: int, width: int, rng) -> "ClassifierHead":
        weight = glorot_uniform((n_classes, width), rng)
        return cls(weight, Tensor(np.zeros(n_classes), requires_grad=True))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


def classify(Hout: Tensor, head: ClassifierHead) -> Tensor:
    """Mean-pool the node axis and apply the affine head."""
    Hout = Hout if isinstance(Hout, Tensor) else Tensor(Hout)
    if Hout.shape[-1] != head.weight.shape[1]:
        raise DimensionError(
            f"classify: node width {Hout.shape[-1]} vs head weight shape {head.weight.shape}"
        )
    return linear_transform(pool(Hout, "mean"), head.weight, head.bias)


def baseline_logits(H: Union[Tensor, np.ndarray], head: ClassifierHead) -> Tensor:
    """Readout on raw node features with no relational processing."""
    return classify(H if isinstance(H, Tensor) else Tensor(H), head)
