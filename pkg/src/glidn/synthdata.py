"""Procedural human-object videos whose labels need relational reasoning.

Each video has one human and ``objects_per_frame`` object instances in every
frame. One instance is the *target*: the human moves toward it (approach) or
away from it (retreat) along a piecewise-linear path. The single-label class
is ``2 * target_type + direction``. Every frame contains each object type at
least once, so type counts carry no information about the label; the model
has to relate the human to a specific object across frames.

Random draws come from :class:`Rng` (SplitMix64). Video ``i`` owns the stream
seeded by the ``i``-th output of the master stream, and within a video all
geometry is drawn before any feature noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

from .context import HUMAN, Frame, Node, SchemaError, VideoSample

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
NUM_SUBJECTS = 4


class InfeasibleConfigError(ValueError):
    """Raised when a generator config cannot produce valid videos."""


class DatasetFormatError(ValueError):
    """Raised on a malformed dataset line; the message names the line number."""


def splitmix64(state: int) -> Tuple[int, int]:
    """Advance a SplitMix64 state; returns ``(new_state, value)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class Rng:
    """Portable deterministic generator on top of SplitMix64."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state, value = splitmix64(self.state)
        return value

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * self.random()

    def randint(self, n: int) -> int:
        """Integer in ``[0, n)``; multiply-shift on the top 32 bits."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return ((self.next_u64() >> 32) * n) >> 32

    def normal(self) -> float:
        # Box-Muller, one variate per call (no cached pair)
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, index: int) -> int:
    """Seed of stream ``index``: the ``index``-th output of ``Rng(seed)``."""
    _, value = splitmix64((int(seed) + index * GOLDEN) & MASK64)
    return value


@dataclass
class GenConfig:
    num_videos: int = 2000
    frames_per_video: int = 12
    num_object_types: int = 4
    objects_per_frame: int = 5
    feature_noise_sigma: float = 0.05
    arena_size: float = 10.0
    mode: str = "single_label"
    proximity_radius: float = 1.5

    def __post_init__(self):
        if self.num_videos < 0:
            raise InfeasibleConfigError("num_videos must be >= 0")
        if self.frames_per_video < 2:
            raise InfeasibleConfigError("frames_per_video must be >= 2")
        if self.num_object_types < 2:
            raise InfeasibleConfigError("num_object_types must be >= 2")
        if self.objects_per_frame < 2:
            raise InfeasibleConfigError("objects_per_frame must be >= 2")
        if self.objects_per_frame < self.num_object_types:
            raise InfeasibleConfigError(
                f"objects_per_frame={self.objects_per_frame} cannot hold all "
                f"{self.num_object_types} object types in every frame"
            )
        if self.feature_noise_sigma < 0:
            raise InfeasibleConfigError("feature_noise_sigma must be >= 0")
        if self.arena_size <= 0:
            raise InfeasibleConfigError("arena_size must be > 0")
        if self.mode not in ("single_label", "multi_label"):
            raise InfeasibleConfigError(f"unknown mode {self.mode!r}")

    @property
    def feature_dim(self) -> int:
        return self.num_object_types + 1 + 2 + 2

    @property
    def n_classes(self) -> int:
        if self.mode == "single_label":
            return 2 * self.num_object_types
        return self.num_object_types

    @classmethod
    def from_dict(cls, d: Dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "GenConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> Dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# geometry


def type_name(k: int) -> str:
    return f"obj{k}"


def type_index(name: str) -> int:
    """One-hot slot: 0 for the human, ``k + 1`` for object type ``k``."""
    if name == HUMAN:
        return 0
    return int(name[3:]) + 1


def _lerp(a, b, w):
    return (a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w)


def _human_offsets(rng: Rng, T: int, A: float, approach: bool) -> List[Tuple[float, float]]:
    r_far = rng.uniform(0.18, 0.25) * A
    r_near = rng.uniform(0.03, 0.07) * A
    r_mid = 0.5 * (r_far + r_near) * rng.uniform(0.9, 1.1)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    bend1 = rng.uniform(-0.4, 0.4)
    bend2 = rng.uniform(-0.4, 0.4)
    radii = [r_far, r_mid, r_near]
    angles = [theta, theta + bend1, theta + bend1 + bend2]
    keys = [(r * math.cos(a), r * math.sin(a)) for r, a in zip(radii, angles)]
    if not approach:
        keys.reverse()
    mid = (T - 1) // 2
    out = []
    for t in range(T):
        if t <= mid:
            out.append(_lerp(keys[0], keys[1], t / mid if mid else 1.0))
        else:
            out.append(_lerp(keys[1], keys[2], (t - mid) / (T - 1 - mid)))
    return out


def _drift_path(rng: Rng, T: int, start_low: float, start_high: float, speed: float):
    x0 = rng.uniform(start_low, start_high)
    y0 = rng.uniform(start_low, start_high)
    vx = rng.uniform(-speed, speed)
    vy = rng.uniform(-speed, speed)
    return [(x0 + vx * t, y0 + vy * t) for t in range(T)]


def _dist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def _velocities(path, T: int, A: float):
    out = []
    for t in range(T):
        a, b = (t, t + 1) if t < T - 1 else (t - 1, t)
        out.append(((path[b][0] - path[a][0]) / A * (T - 1), (path[b][1] - path[a][1]) / A * (T - 1)))
    return out


_HALF_SIZE = {HUMAN: (0.02, 0.04)}
_OBJECT_HALF = (0.015, 0.015)


def _box(name: str, p, A: float) -> Tuple[float, float, float, float]:
    hx, hy = _HALF_SIZE.get(name, _OBJECT_HALF)
    return (p[0] - hx * A, p[1] - hy * A, p[0] + hx * A, p[1] + hy * A)


def _box_center(box) -> Tuple[float, float]:
    return (0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3]))


# ---------------------------------------------------------------------------
# labelling rules, applied to emitted geometry


def _tracks(video: VideoSample):
    human, objects = [], None
    for frame in video.frames:
        objs = [n for n in frame.nodes if n.type != HUMAN]
        hum = [n for n in frame.nodes if n.type == HUMAN]
        if len(hum) != 1 or any(n.box is None for n in frame.nodes):
            raise SchemaError(f"video {video.id!r}: labelling needs one boxed human per frame")
        human.append(_box_center(hum[0].box))
        if objects is None:
            objects = [[] for _ in objs]
        for k, node in enumerate(objs):
            objects[k].append((node.type, _box_center(node.box)))
    return human, objects


def single_label_rule(video: VideoSample) -> int:
    """Class ``2 * type + direction`` of the object the human tracks.

    The tracked object is the instance with the smallest mean distance to
    the human; direction is 0 (approach) when the final distance is below
    the initial one, else 1 (retreat).
    """
    human, objects = _tracks(video)
    best, best_mean = 0, math.inf
    for k, track in enumerate(objects):
        mean = sum(_dist(p, h) for (_, p), h in zip(track, human)) / len(human)
        if mean < best_mean:
            best, best_mean = k, mean
    track = objects[best]
    d_first = _dist(track[0][1], human[0])
    d_last = _dist(track[-1][1], human[-1])
    return 2 * (type_index(track[0][0]) - 1) + (0 if d_last < d_first else 1)


def multi_label_rule(video: VideoSample, num_object_types: int, proximity_radius: float) -> Tuple[int, ...]:
    """Object types with an instance within ``proximity_radius`` of the human in >= ceil(T/3) frames."""
    human, objects = _tracks(video)
    need = math.ceil(len(human) / 3)
    present = [0] * num_object_types
    for track in objects:
        close = sum(1 for (_, p), h in zip(track, human) if _dist(p, h) <= proximity_radius)
        if close >= need:
            present[type_index(track[0][0]) - 1] = 1
    return tuple(present)


# ---------------------------------------------------------------------------
# generation


def _generate_video(cfg: GenConfig, index: int, rng: Rng) -> VideoSample:
    T, M, A = cfg.frames_per_video, cfg.num_object_types, cfg.arena_size
    n_obj = cfg.objects_per_frame

    target_type = rng.randint(M)
    approach = rng.randint(2) == 0
    types = list(range(M)) + [rng.randint(M) for _ in range(n_obj - M)]
    rng.shuffle(types)
    candidates = [k for k, t in enumerate(types) if t == target_type]
    target = candidates[rng.randint(len(candidates))]

    target_path = _drift_path(rng, T, 0.3 * A, 0.7 * A, 0.005 * A)
    offsets = _human_offsets(rng, T, A, approach)
    human_path = [(p[0] + o[0], p[1] + o[1]) for p, o in zip(target_path, offsets)]
    reach = max(math.hypot(*o) for o in offsets)

    paths = []
    for k in range(n_obj):
        if k == target:
            paths.append(target_path)
            continue
        for _ in range(1000):
            path = _drift_path(rng, T, 0.0, A, 0.01 * A)
            if cfg.mode == "multi_label":
                break
            if min(_dist(p, h) for p, h in zip(path, human_path)) > reach + 0.05 * A:
                break
        else:
            raise InfeasibleConfigError(f"could not place distractor {k} of video {index}")
        paths.append(path)

    names = [HUMAN] + [type_name(t) for t in types]
    all_paths = [human_path] + paths
    all_vel = [_velocities(p, T, A) for p in all_paths]

    frames = []
    sigma = cfg.feature_noise_sigma
    for t in range(T):
        nodes = []
        for name, path, vel in zip(names, all_paths, all_vel):
            onehot = [0.0] * (M + 1)
            onehot[type_index(name)] = 1.0
            cont = [path[t][0] / A, path[t][1] / A, vel[t][0], vel[t][1]]
            if sigma > 0:
                cont = [c + sigma * rng.normal() for c in cont]
            nodes.append(Node(name, tuple(onehot + cont), _box(name, path[t], A)))
        frames.append(Frame(t, tuple(nodes)))

    draft = VideoSample(
        id=f"v{index:05d}",
        frames=tuple(frames),
        label=0 if cfg.mode == "single_label" else None,
        labels=None if cfg.mode == "single_label" else (0,) * M,
        subject=f"subject{index % NUM_SUBJECTS + 1}",
    )
    if cfg.mode == "single_label":
        return VideoSample(draft.id, draft.frames, label=single_label_rule(draft), subject=draft.subject)
    labels = multi_label_rule(draft, M, cfg.proximity_radius)
    return VideoSample(draft.id, draft.frames, labels=labels, subject=draft.subject)


def generate(cfg: GenConfig, seed: int, start: int = 0) -> List[VideoSample]:
    """Generate ``cfg.num_videos`` videos with indices ``start, start + 1, ...``."""
    return [
        _generate_video(cfg, i, Rng(derive_seed(seed, i)))
        for i in range(start, start + cfg.num_videos)
    ]


# ---------------------------------------------------------------------------
# JSON Lines format


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x!r}")
    return format(x, ".17g")


def _dumps(obj) -> str:
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def video_to_dict(video: VideoSample) -> Dict:
    d: Dict = {"id": video.id, "subject": video.subject}
    if video.labels is not None:
        d["labels"] = list(video.labels)
    else:
        d["label"] = video.label
    d["frames"] = [
        {
            "t": f.t,
            "nodes": [
                {"type": n.type, "box": None if n.box is None else [float(v) for v in n.box], "feat": [float(v) for v in n.feat]}
                for n in f.nodes
            ],
        }
        for f in video.frames
    ]
    return d


def video_from_dict(d: Dict) -> VideoSample:
    for key in ("id", "frames"):
        if key not in d:
            raise SchemaError(f"missing {key!r}")
    if ("label" in d) == ("labels" in d):
        raise SchemaError("expected exactly one of 'label' or 'labels'")
    frames = []
    for fd in d["frames"]:
        nodes = []
        for nd in fd["nodes"]:
            box = nd.get("box")
            nodes.append(
                Node(
                    str(nd["type"]),
                    tuple(float(v) for v in nd["feat"]),
                    None if box is None else tuple(float(v) for v in box),
                )
            )
        frames.append(Frame(int(fd["t"]), tuple(nodes)))
    video = VideoSample(
        id=str(d["id"]),
        frames=tuple(frames),
        label=None if "label" not in d else int(d["label"]),
        labels=None if "labels" not in d else tuple(int(v) for v in d["labels"]),
        subject=d.get("subject"),
    )
    return video.validate()


def write_jsonl(dataset: Iterable[VideoSample], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for video in dataset:
            fh.write(_dumps(video_to_dict(video)) + "\n")


def read_jsonl(path: Union[str, Path]) -> List[VideoSample]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                out.append(video_from_dict(d))
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"line {lineno}: malformed record ({exc})") from exc
    return out
