import csv
import io
import json
import math

import numpy as np
import pytest

from oracles import tally_confusion
from synthetic import tensor_dataset
from wnet.data import ArraySamples
from wnet.harness import (
    CvReport,
    EvalReport,
    FoldResult,
    TrainConfig,
    cross_validate,
    evaluate,
    param_digest,
    train,
)
from wnet.model import ModelConfig, build_wnet
from wnet.preprocess import PreprocessConfig
from wnet.rng import make_rng

SMALL_PRE = PreprocessConfig(target_size=32)
SMALL_NET = ModelConfig(input_shape=(3, 32, 32), conv_filters=(4, 8, 8), fc1_units=32)


@pytest.fixture(scope="module")
def small_set():
    return tensor_dataset(10, seed=1, cfg=SMALL_PRE)


def small_model(seed=0):
    return build_wnet(SMALL_NET, make_rng(seed))


# ---------------------------------------------------------------- training


def test_overfit_default_recipe():
    samples = tensor_dataset(5, seed=0)
    model = build_wnet(ModelConfig(), make_rng(0))
    cfg = TrainConfig(epochs=30, seed=0)
    result = train(model, samples, cfg, make_rng(0, 1))
    model.set_mode("infer")
    assert evaluate(model, samples).overall_accuracy == 1.0
    assert result.history[-1] < result.history[0]


def test_zero_learning_rate_keeps_parameters(small_set):
    model = small_model()
    before = param_digest(model)
    train(model, small_set, TrainConfig(learning_rate=0.0, epochs=2), make_rng(1))
    assert param_digest(model) == before


def test_same_seed_bit_identical(small_set):
    digests = []
    for _ in range(2):
        model = small_model(4)
        train(model, small_set, TrainConfig(epochs=2), make_rng(9))
        digests.append(param_digest(model))
    assert digests[0] == digests[1]
    other = small_model(4)
    train(other, small_set, TrainConfig(epochs=2), make_rng(10))
    assert param_digest(other) != digests[0]


def test_empty_training_set():
    empty = ArraySamples(np.zeros((0, 3, 32, 32), dtype=np.float32), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        train(small_model(), empty, TrainConfig(epochs=1), make_rng(0))


def test_history_length_and_callback(small_set):
    seen = []
    result = train(small_model(), small_set, TrainConfig(epochs=3), make_rng(0), on_epoch=lambda e, l: seen.append(e))
    assert len(result.history) == 3 and seen == [1, 2, 3]
    assert result.optimizer.states["fc2.bias"].t == 3 * 10  # 50 samples / batch 5


def test_eval_every_records_held_out_metrics(small_set):
    cfg = TrainConfig(epochs=2, eval_every=1)
    result = train(small_model(), small_set, cfg, make_rng(0), eval_samples=small_set)
    assert [e["epoch"] for e in result.eval_history] == [1, 2]
    assert 0.0 <= result.eval_history[-1]["macro_accuracy"] <= 1.0


def test_first_batch_loss_near_log5():
    samples = tensor_dataset(1, seed=3)
    model = build_wnet(ModelConfig(dropout_keep=1.0), make_rng(2))
    result = train(model, samples, TrainConfig(epochs=1, dropout_keep=1.0, learning_rate=0.0), make_rng(2))
    assert abs(result.history[0] - math.log(5)) < 0.5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(precision="half")
    with pytest.raises(ValueError):
        TrainConfig(dropout_keep=0.0)


# ---------------------------------------------------------------- evaluation


def test_perfect_predictor():
    y = [0, 1, 2, 3, 4, 0, 1]
    r = EvalReport.from_predictions(y, y)
    assert r.macro_accuracy == 1.0 and r.overall_accuracy == 1.0
    assert np.array_equal(r.confusion, np.diag(np.bincount(y, minlength=5)))


def test_constant_predictor_balanced():
    y = np.repeat(np.arange(5), 4)
    r = EvalReport.from_predictions(y, np.zeros_like(y))
    assert r.per_class_accuracy.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert r.macro_accuracy == pytest.approx(0.2)
    assert r.overall_accuracy == pytest.approx(0.2)


def test_macro_differs_from_overall_when_imbalanced():
    y = [0] * 8 + [1, 2, 3, 4]
    r = EvalReport.from_predictions(y, [0] * 12)
    assert r.overall_accuracy == pytest.approx(8 / 12)
    assert r.macro_accuracy == pytest.approx(0.2)


def test_missing_class_excluded_from_macro():
    r = EvalReport.from_predictions([0, 0, 1, 1], [0, 1, 1, 1])
    acc = r.per_class_accuracy
    assert acc[0] == 0.5 and acc[1] == 1.0 and np.isnan(acc[2:]).all()
    assert r.macro_accuracy == pytest.approx(0.75)
    assert r.to_dict()["per_class_accuracy"][2] is None


def test_random_predictions_match_tally(rng):
    y = rng.integers(0, 5, 50)
    p = rng.integers(0, 5, 50)
    r = EvalReport.from_predictions(y, p)
    assert r.confusion.tolist() == tally_confusion(y.tolist(), p.tolist(), 5)
    assert r.confusion.sum() == 50
    assert np.array_equal(r.class_support, np.bincount(y, minlength=5))


def test_evaluate_uses_predict(small_set):
    model = small_model()
    model.set_mode("infer")
    r = evaluate(model, small_set, batch_size=7)
    preds, _ = model.predict(small_set[np.arange(len(small_set))])
    assert r.confusion.tolist() == tally_confusion(small_set.labels.tolist(), preds, 5)


# ---------------------------------------------------------------- cross-validation


@pytest.fixture(scope="module")
def cv_report(small_set):
    cfg = TrainConfig(epochs=15, learning_rate=1e-3, seed=3)
    return cross_validate(small_set, 2, cfg, SMALL_NET)


def test_cv_learns_separable_set(cv_report):
    assert cv_report.k == 2
    assert all(f.report.macro_accuracy >= 0.8 for f in cv_report.folds)


def test_cv_test_sets_cover_data(cv_report, small_set):
    assert sum(f.test_size for f in cv_report.folds) == len(small_set)
    for f in cv_report.folds:
        assert f.train_size + f.test_size == len(small_set)
        assert f.report.class_support.tolist() == [5] * 5


def test_cv_folds_have_distinct_inits(cv_report):
    inits = [f.init_digest for f in cv_report.folds]
    assert len(set(inits)) == len(inits)
    assert all(f.init_digest != f.final_digest for f in cv_report.folds)


def test_cv_averages_recompute(cv_report):
    grid = cv_report.grid
    assert grid.shape == (2, 5)
    np.testing.assert_allclose(cv_report.class_averages, grid.mean(axis=0))
    assert cv_report.grand_average == pytest.approx(grid.mean())


def test_cv_reproducible_and_parallel_safe(cv_report, small_set):
    cfg = TrainConfig(epochs=15, learning_rate=1e-3, seed=3)
    again = cross_validate(small_set, 2, cfg, SMALL_NET, jobs=2)
    assert [f.final_digest for f in again.folds] == [f.final_digest for f in cv_report.folds]
    assert again.to_csv() == cv_report.to_csv()


def test_cv_csv_layout(cv_report):
    rows = list(csv.reader(io.StringIO(cv_report.to_csv())))
    assert rows[0] == ["fold", "neutrophil", "eosinophil", "basophil", "lymphocyte", "monocyte", "macro", "overall", "n"]
    assert [r[0] for r in rows[1:]] == ["Fold-0", "Fold-1", "Average"]
    assert float(rows[-1][6]) == pytest.approx(cv_report.grand_average, abs=1e-6)
    assert int(rows[-1][-1]) == 50


def test_cv_json_layout(cv_report):
    doc = json.loads(cv_report.to_json())
    assert doc["k"] == 2 and doc["seed"] == 3
    assert len(doc["folds"]) == 2
    fold = doc["folds"][0]
    for key in ("confusion", "per_class_accuracy", "macro_accuracy", "overall_accuracy", "init_digest", "final_loss"):
        assert key in fold
    assert doc["grand_average"] == pytest.approx(cv_report.grand_average)


def test_cv_nan_class_in_fold():
    full = EvalReport.from_predictions([0, 1, 2, 3, 4], [0, 1, 2, 3, 4])
    partial = EvalReport.from_predictions([0, 1, 2, 3], [0, 1, 2, 0])
    report = CvReport([FoldResult(0, full, [], 4, 5, "a", "b"), FoldResult(1, partial, [], 5, 4, "c", "d")])
    np.testing.assert_allclose(report.class_averages, [1.0, 1.0, 1.0, 0.5, 1.0])
    assert "Fold-1" in report.to_csv()
    assert json.loads(report.to_json())["folds"][1]["per_class_accuracy"][4] is None
