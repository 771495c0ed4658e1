import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from glidn.estimators import (
    DistilledGLIDNClassifier,
    GLIDNClassifier,
    MutualLearningClassifier,
    check_targets,
    check_videos,
)

FAST = dict(epochs=2, decay_every=1, hidden_dim=4, batch_size=8)


def test_get_params_and_clone():
    est = GLIDNClassifier(context="global", hidden_dim=7)
    params = est.get_params()
    assert params["context"] == "global" and params["hidden_dim"] == 7
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_distilled_params_include_nested_teacher():
    est = DistilledGLIDNClassifier(teacher=GLIDNClassifier(context="global"), temperature=5.0)
    params = est.get_params(deep=True)
    assert params["teacher__context"] == "global" and params["temperature"] == 5.0
    est.set_params(teacher__hidden_dim=3)
    assert est.teacher.hidden_dim == 3


def test_fit_predict(tiny_videos):
    est = GLIDNClassifier(**FAST).fit(tiny_videos)
    pred = est.predict(tiny_videos)
    assert pred.shape == (len(tiny_videos),) and set(pred) <= set(est.classes_)
    proba = est.predict_proba(tiny_videos)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert 0.0 <= est.score(tiny_videos, [v.label for v in tiny_videos]) <= 1.0


def test_external_labels_are_encoded(tiny_videos):
    y = np.array(["abcdefgh"[v.label] for v in tiny_videos])
    est = GLIDNClassifier(**FAST).fit(tiny_videos, y)
    assert est.predict(tiny_videos).dtype.kind == "U"


def test_multilabel(tiny_multilabel):
    est = GLIDNClassifier(context="global", **FAST).fit(tiny_multilabel)
    assert est.multilabel_ and est.predict(tiny_multilabel).shape == (16, 4)
    assert np.all((est.predict_proba(tiny_multilabel) > 0) & (est.predict_proba(tiny_multilabel) < 1))


def test_unfitted_raises(tiny_videos):
    with pytest.raises(NotFittedError):
        GLIDNClassifier().predict(tiny_videos)


def test_fit_is_reproducible(tiny_videos):
    a = GLIDNClassifier(**FAST).fit(tiny_videos).decision_function(tiny_videos)
    b = GLIDNClassifier(**FAST).fit(tiny_videos).decision_function(tiny_videos)
    assert np.array_equal(a, b)


def test_distilled_fits_teacher_clone(tiny_videos):
    teacher = GLIDNClassifier(context="global", **FAST)
    student = DistilledGLIDNClassifier(teacher=teacher, **FAST).fit(tiny_videos)
    assert not hasattr(teacher, "model_")
    assert student.teacher_.context == "global" and student.model_.context == "local"


def test_distilled_uses_fitted_teacher_without_changing_it(tiny_videos):
    teacher = GLIDNClassifier(context="global", **FAST).fit(tiny_videos)
    before = teacher.model_.checksum()
    student = DistilledGLIDNClassifier(teacher=teacher, **FAST).fit(tiny_videos)
    assert student.teacher_ is teacher and teacher.model_.checksum() == before


def test_distilled_rejects_same_context(tiny_videos):
    with pytest.raises(ValueError):
        DistilledGLIDNClassifier(teacher=GLIDNClassifier(context="local"), context="local").fit(tiny_videos)


def test_mutual_learning(tiny_videos):
    est = MutualLearningClassifier(**FAST).fit(tiny_videos)
    assert est.peer_.context == "global"
    assert est.peer_.predict(tiny_videos).shape == (len(tiny_videos),)


def test_input_validation(tiny_videos):
    with pytest.raises(TypeError):
        check_videos(tiny_videos[0])
    with pytest.raises(ValueError):
        check_videos([])
    with pytest.raises(TypeError):
        check_videos([1, 2])
    with pytest.raises(ValueError):
        check_targets(tiny_videos, [0, 1])
    with pytest.raises(ValueError):
        check_targets(tiny_videos[:2], np.array([[0, 2], [1, 0]]))
    est = GLIDNClassifier(**FAST).fit(tiny_videos)
    with pytest.raises(ValueError):
        check_videos(tiny_videos, n_features=est.n_features_in_ + 1)
