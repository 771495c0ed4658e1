import json

import numpy as np
import pytest

from glidn.autodiff import Tensor
from glidn.distill import DistillConfig
from glidn.train import (
    SGD,
    Adam,
    ContextMismatchError,
    ModelState,
    NonFiniteError,
    TrainConfig,
    _group,
    hard_loss_on,
    load_checkpoint,
    loocv,
    lr_schedule,
    make_optimizer,
    prepare,
    save_checkpoint,
    state_from_dict,
    state_to_dict,
    subject_folds,
    train_dml,
    train_student,
    train_teacher,
)

G2L = DistillConfig(temperature=5.0, lambda1=0.7, lambda2=0.3)


def test_lr_schedule_steps():
    cfg = TrainConfig(base_lr=1.0, decay_every=3, decay_factor=0.5)
    assert [lr_schedule(e, cfg) for e in range(7)] == [1, 1, 1, 0.5, 0.5, 0.5, 0.25]


def test_presets():
    cad = TrainConfig.cad120()
    assert (cad.optimizer, cad.base_lr, cad.epochs, cad.decay_every, cad.num_layers) == ("adam", 2e-5, 100, 50, 3)
    ch = TrainConfig.charades()
    assert (ch.optimizer, ch.base_lr, ch.epochs, ch.decay_every, ch.num_layers) == ("sgd", 0.018, 60, 40, 1)
    assert ch.dataset_mode == "multi_label"


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises((TypeError, ValueError)):
        TrainConfig.from_dict({"epoch": 3})


def test_sgd_step():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    SGD().step([p], 0.1)
    assert np.allclose(p.data, [0.95, 2.1])


def test_adam_first_step_is_sign_times_lr():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    Adam().step([p], 0.1)
    assert np.allclose(p.data, [0.9, 2.1], atol=1e-7)


def test_optimizer_rejects_nonfinite_gradient():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        make_optimizer("adam").step([p], 0.1)


def test_grouping_by_layout(tiny_prepared):
    groups = list(_group(tiny_prepared[:8], "local"))
    assert sum(len(m) for m, _ in groups) == 8
    for members, mask in groups:
        assert mask.shape == (len(members[0].frame_index),) * 2


def test_local_fast_path_matches_masked_forward(tiny_prepared, tiny_cfg):
    model = ModelState.init(tiny_cfg, tiny_prepared[0].H.shape[1], 8)
    members, mask = next(_group(tiny_prepared[:4], "local"))
    fast = model.forward_group(members, mask).data
    slow = np.stack([model.forward(Tensor(m.H), mask).data for m in members])
    assert np.allclose(fast, slow, atol=1e-12)


@pytest.mark.parametrize("ctx", ["baseline", "local", "global"])
def test_training_lowers_loss(tiny_prepared, tiny_cfg, ctx):
    cfg = tiny_cfg.replace(context=ctx, epochs=8, decay_every=100)
    init = ModelState.init(cfg, tiny_prepared[0].H.shape[1], 8)
    before = hard_loss_on(init, tiny_prepared)
    after = hard_loss_on(train_teacher(tiny_prepared, cfg), tiny_prepared)
    assert after < before


def test_training_is_deterministic(tiny_prepared, tiny_cfg):
    a = train_teacher(tiny_prepared, tiny_cfg)
    b = train_teacher(tiny_prepared, tiny_cfg)
    assert a.checksum() == b.checksum() and a.loss_trace == b.loss_trace
    assert train_teacher(tiny_prepared, tiny_cfg.replace(seed=4)).checksum() != a.checksum()


def test_multilabel_training(tiny_multilabel):
    data = prepare(tiny_multilabel)
    cfg = TrainConfig(epochs=2, batch_size=4, hidden_dim=4, dataset_mode="multi_label", context="global")
    model = train_teacher(data, cfg)
    assert model.n_classes == 4
    assert model.predict_logits(data).shape == (16, 4)


def test_mode_mismatch(tiny_prepared, tiny_cfg):
    with pytest.raises(ValueError):
        train_teacher(tiny_prepared, tiny_cfg.replace(dataset_mode="multi_label"))


def test_student_leaves_teacher_untouched(tiny_prepared, tiny_cfg):
    teacher = train_teacher(tiny_prepared, tiny_cfg.replace(context="global"))
    before = teacher.checksum()
    student = train_student(tiny_prepared, teacher, tiny_cfg.replace(context="local"), G2L)
    assert teacher.checksum() == before
    assert student.context == "local" and len(student.loss_trace) == tiny_cfg.epochs


def test_student_context_checks(tiny_prepared, tiny_cfg):
    teacher = train_teacher(tiny_prepared, tiny_cfg.replace(context="local", epochs=1))
    with pytest.raises(ContextMismatchError):
        train_student(tiny_prepared, teacher, tiny_cfg.replace(context="local"), G2L)
    global_teacher = train_teacher(tiny_prepared, tiny_cfg.replace(context="global", epochs=1))
    with pytest.raises(ContextMismatchError):
        train_student(tiny_prepared, global_teacher, tiny_cfg.replace(context="global"), G2L)


def test_dml_trains_both(tiny_prepared, tiny_cfg):
    a, b = train_dml(tiny_prepared, tiny_cfg.replace(context="local"), tiny_cfg.replace(context="global"), G2L)
    assert (a.context, b.context) == ("local", "global")
    assert len(a.loss_trace) == len(b.loss_trace) == tiny_cfg.epochs
    with pytest.raises(ContextMismatchError):
        train_dml(tiny_prepared, tiny_cfg, tiny_cfg, G2L)


def test_checkpoint_round_trip(tmp_path, tiny_prepared, tiny_cfg):
    model = train_teacher(tiny_prepared, tiny_cfg)
    save_checkpoint(model, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    assert back.checksum() == model.checksum()
    assert np.array_equal(back.predict_logits(tiny_prepared), model.predict_logits(tiny_prepared))
    save_checkpoint(back, tmp_path / "n.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_optimizer_state_survives_serialization(tiny_prepared, tiny_cfg):
    d = state_to_dict(train_teacher(tiny_prepared, tiny_cfg))
    assert state_from_dict(json.loads(json.dumps(d))).optimizer.state_dict() == d["optimizer"]
    with pytest.raises(ValueError):
        state_from_dict({**d, "format": "other"})


def test_subject_folds_partition(tiny_videos):
    folds = subject_folds(tiny_videos)
    assert len(folds) == 4
    tested = sorted(i for _, _, test in folds for i in test)
    assert tested == list(range(len(tiny_videos)))
    for _, train, test in folds:
        assert not set(train) & set(test)


def test_loocv_runs(tiny_videos, tiny_cfg):
    res = loocv(tiny_videos, tiny_cfg.replace(epochs=1))
    assert [f.subject for f in res.folds] == ["subject1", "subject2", "subject3", "subject4"]
    assert 0.0 <= res.mean_accuracy <= 1.0
    distilled = loocv(tiny_videos, tiny_cfg.replace(epochs=1), G2L)
    assert len(distilled.folds) == 4
