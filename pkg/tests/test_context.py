import numpy as np
import pytest

from glidn import autodiff as ad
from glidn.context import (
    ClassifierHead,
    Frame,
    GraphMask,
    Node,
    SchemaError,
    VideoSample,
    assemble_nodes,
    baseline_logits,
    classify,
    global_mask,
    local_mask,
)
from glidn.synthdata import Rng


def video(**kw):
    frames = (
        Frame(0, (Node("human", (1.0, 0.0)), Node("obj0", (0.0, 1.0)))),
        Frame(1, (Node("human", (2.0, 0.0)),)),
    )
    return VideoSample(id="v", frames=frames, **{"label": 0, **kw})


def test_assemble_nodes_order():
    H, idx = assemble_nodes(video())
    assert H.tolist() == [[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]
    assert idx == [0, 0, 1]


def test_local_mask_blocks():
    bits = local_mask([0, 0, 1, 2, 2, 2]).bits
    assert bits.sum() == 4 + 1 + 9
    assert bits[0, 1] and not bits[1, 2] and bits[3, 5]


def test_local_mask_rejects_decreasing_index():
    with pytest.raises(ValueError):
        local_mask([0, 1, 0])


def test_single_frame_local_equals_global():
    assert local_mask([0, 0, 0]) == global_mask(3)


def test_global_mask_requires_nodes():
    with pytest.raises(ValueError):
        global_mask(0)


def test_graph_mask_must_be_square():
    with pytest.raises(ValueError):
        GraphMask(np.ones((2, 3), bool))


def test_with_self_loops():
    m = GraphMask(np.zeros((2, 2), bool)).with_self_loops()
    assert np.array_equal(m.bits, np.eye(2, dtype=bool))


@pytest.mark.parametrize(
    "kw",
    [dict(label=None), dict(label=0, labels=(1, 0))],
)
def test_video_needs_exactly_one_label_kind(kw):
    with pytest.raises(SchemaError):
        video(**kw).validate()


def test_video_rejects_ragged_widths():
    frames = (Frame(0, (Node("human", (1.0,)), Node("obj0", (1.0, 2.0)))),)
    with pytest.raises(SchemaError):
        VideoSample("v", frames, label=0).validate()


def test_video_rejects_bad_box():
    frames = (Frame(0, (Node("human", (1.0,), box=(1.0, 0.0, 0.5, 1.0)),)),)
    with pytest.raises(SchemaError):
        VideoSample("v", frames, label=0).validate()


def test_video_rejects_empty_frame():
    with pytest.raises(SchemaError):
        VideoSample("v", (Frame(0, ()),), label=0).validate()


def test_classify_is_mean_then_affine(rng):
    head = ClassifierHead.init(3, 4, Rng(1))
    H = rng.normal(size=(5, 4))
    out = classify(ad.Tensor(H), head).data
    assert np.allclose(out, head.weight.data @ H.mean(axis=0) + head.bias.data, atol=1e-14)


def test_classify_permutation_invariant(rng):
    head = ClassifierHead.init(3, 4, Rng(1))
    H = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    assert np.allclose(baseline_logits(H, head).data, baseline_logits(H[perm], head).data, atol=1e-12)


def test_classify_width_mismatch():
    with pytest.raises(ad.DimensionError):
        classify(ad.Tensor(np.zeros((2, 3))), ClassifierHead.init(2, 4, Rng(0)))


def test_head_init_zero_bias():
    head = ClassifierHead.init(5, 2, Rng(0))
    assert head.n_classes == 5 and np.array_equal(head.bias.data, np.zeros(5))
