import numpy as np
import pytest

from smile_ssl.data import DataConfig, PromptBank, generate_synthetic
from smile_ssl.encoders import Model, ModelConfig
from smile_ssl.errors import ConfigurationError, EmptyInputError
from smile_ssl.evaluation import (AblationResult, Metrics, class_centroids, classify_batch, cross_domain_datasets,
                                  evaluate_fold, fold_metrics_csv, improvement_matrix_csv, run_ablation,
                                  run_cross_domain, run_cross_validation, write_report, zero_shot_classify)
from smile_ssl.train import TrainConfig


def tiny_cfg(**kw):
    return TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3,
                       model=ModelConfig(hidden=8, dim=8, fusion_hidden=4, text_pretrain_steps=20), **kw)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(n_subjects=4, samples_per_subject=6, input_dim=6, seed=2)


def test_metrics_from_confusion():
    m = Metrics.from_predictions([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0], ["a", "b", "c"])
    assert m.accuracy == pytest.approx(4 / 6)
    assert np.allclose(m.precision, [0.5, 2 / 3, 1.0])
    assert np.allclose(m.recall, [0.5, 1.0, 0.5])
    f1 = 2 * m.precision * m.recall / (m.precision + m.recall)
    assert m.macro_f1 == pytest.approx(f1.mean())


def test_metrics_missing_class_has_zero_f1():
    m = Metrics.from_predictions([0, 0], [0, 0], ["a", "b"])
    assert m.f1[1] == 0.0 and m.accuracy == 1.0


def test_zero_shot_picks_most_similar_prompt():
    bank = PromptBank.basic_six()
    model = Model(ModelConfig(input_dim=4, hidden=6, dim=8, fusion_hidden=3, text_pretrain_steps=30), bank, 0)
    views = np.random.default_rng(0).normal(size=(3, 4))
    cls, sims = zero_shot_classify(views, model)
    assert cls == int(np.argmax(sims)) and sims.shape == (6,)
    cents = class_centroids(model, bank)
    assert all(np.isclose(np.linalg.norm(c), 1.0) for c in cents)
    preds, _ = classify_batch(views[None], model, classes=[1, 4])
    assert preds[0] in (1, 4)
    cls_max, sims_max = zero_shot_classify(views, model, use_max=True)
    assert cls_max == int(np.argmax(sims_max))


def test_evaluate_with_predictor_double(ds):
    perfect = evaluate_fold(None, ds, np.arange(len(ds)), predictor=lambda v: ds.class_ids[:len(v)])
    assert perfect.accuracy == 1.0
    with pytest.raises(EmptyInputError):
        evaluate_fold(None, ds, [], predictor=lambda v: v)


def test_evaluate_restricted_classes(ds):
    idx = np.flatnonzero(np.isin(ds.class_ids, [0, 4]))
    m = evaluate_fold(None, ds, idx, classes=[0, 4], predictor=lambda v: np.zeros(len(v), dtype=int))
    assert m.class_names == ["happy", "disgust"] and m.confusion.shape == (2, 2)
    assert m.accuracy == pytest.approx(np.mean(ds.class_ids[idx] == 0))


def test_cross_validation_disjoint_and_reproducible(ds):
    a = run_cross_validation(ds, 2, tiny_cfg())
    b = run_cross_validation(ds, 2, tiny_cfg())
    assert fold_metrics_csv(a) == fold_metrics_csv(b)
    assert not set(a.test_subjects[0]) & set(a.test_subjects[1])
    assert sum(m.n for m in a.folds) == len(ds)


def test_cross_validation_jobs_match_serial(ds):
    serial = run_cross_validation(ds, 2, tiny_cfg(), jobs=1)
    pooled = run_cross_validation(ds, 2, tiny_cfg(), jobs=2)
    assert fold_metrics_csv(serial) == fold_metrics_csv(pooled)


def test_ablation_matrix_antisymmetric(ds, tmp_path):
    res = run_ablation(ds, 2, tiny_cfg())
    assert res.names == ["full", "no_red_min", "no_vl_align", "no_mv_bt"]
    m = res.improvement_matrix()
    assert np.array_equal(m, -m.T) and not np.diag(m).any()
    written = write_report(tmp_path, "t", ablation=res)
    assert {p.name for p in written} >= {"ablation_t.csv", "improvement_matrix_t.csv", "improvement_matrix_t.svg"}
    assert improvement_matrix_csv(res).splitlines()[0] == ",full,no_red_min,no_vl_align,no_mv_bt"
    with pytest.raises(ConfigurationError):
        run_ablation(ds, 2, tiny_cfg(disabled_components=["mv_bt"]))


def test_antisymmetry_for_arbitrary_floats():
    rng = np.random.default_rng(0)
    res = AblationResult({f"v{i}": float(x) for i, x in enumerate(rng.random(6))})
    m = res.improvement_matrix()
    assert np.array_equal(m, -m.T)


def test_cross_domain_two_class_report():
    data = DataConfig(n_subjects=4, samples_per_subject=6, input_dim=6)
    source, target, held = cross_domain_datasets(data, 0.6, 0.45)
    assert source.digest() != target.digest() != held.digest()
    res = run_cross_domain(source, target, [0, 4], tiny_cfg(), held)
    assert res.metrics.class_names == ["happy", "disgust"]
    assert res.metrics.n == int(np.isin(target.class_ids, [0, 4]).sum())
    assert not res.degenerate and res.in_domain is not None
    with pytest.raises(ConfigurationError):
        run_cross_domain(source, target, [9], tiny_cfg())
