import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smile_ssl.data import (BASIC_SIX, AugmentPolicy, DataConfig, PromptBank, augment_pair, generate_synthetic,
                            kfold_subject_split, load_dataset, rank_pool, sample_prompt, save_dataset)
from smile_ssl.errors import ConfigurationError, EmptyInputError, VocabularyError


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(n_subjects=6, samples_per_subject=4, input_dim=8, seed=3)


def test_shapes_and_partition(small):
    assert small.views.shape == (24, 3, 8)
    assert set(small.subject_ids.tolist()) == set(range(6))
    assert small[5].views.shape == (3, 8)


def test_same_seed_bit_identical():
    a = generate_synthetic(n_subjects=4, seed=9)
    b = generate_synthetic(n_subjects=4, seed=9)
    assert np.array_equal(a.views, b.views) and a.digest() == b.digest()
    assert generate_synthetic(n_subjects=4, seed=10).digest() != a.digest()


def test_degenerate_generator_identical_views_per_class():
    ds = generate_synthetic(n_subjects=5, noise_sd=0.0, subject_sd=0.0)
    for c in range(6):
        block = ds.views[ds.class_ids == c]
        assert np.allclose(block, block[0], atol=1e-12)


def test_default_oracle_learnable():
    ds = generate_synthetic(DataConfig())
    assert ds.oracle_accuracy > 0.95


def test_class_prompt_mismatch():
    with pytest.raises(ConfigurationError):
        generate_synthetic(n_classes=5)
    ds = generate_synthetic(n_classes=5, prompt_mode="micro-five", n_subjects=3)
    assert ds.bank.class_names == ["positive", "negative", "surprise", "repression", "others"]


def test_temporal_views_are_rank_pooled():
    ds = generate_synthetic(n_subjects=3, temporal=True, sequence_length=8)
    assert ds.sequences.shape == (30, 8, 16)
    assert np.allclose(np.abs(ds.views).max(axis=2), 1.0)


def test_banks():
    bank = PromptBank.basic_six()
    assert bank.class_names == ["happy", "sad", "surprise", "angry", "disgust", "fear"]
    assert all(len(bank.class_templates(c)) >= 2 for c in range(6))
    assert bank.class_templates(0) == BASIC_SIX["happy"]
    micro = PromptBank.micro_five()
    assert set(micro.class_names) == {"positive", "negative", "surprise", "repression", "others"}
    with pytest.raises(KeyError):
        bank.class_templates(6)
    with pytest.raises(VocabularyError):
        bank.tokenize("an unknown token")


def test_bank_json_roundtrip(tmp_path):
    bank = PromptBank.micro_five()
    bank.save(tmp_path / "bank.json")
    again = PromptBank.load(tmp_path / "bank.json")
    assert again.class_names == bank.class_names and again.vocab == bank.vocab
    raw = json.loads((tmp_path / "bank.json").read_text())
    assert PromptBank.from_json(raw).class_names == bank.class_names


def test_sample_prompt_frequencies():
    bank = PromptBank.basic_six()
    rng = np.random.default_rng(0)
    draws = [sample_prompt(1, bank, rng) for _ in range(10_000)]
    counts = np.unique([str(d) for d in draws], return_counts=True)[1] / 10_000
    assert len(counts) == 3 and np.all((counts >= 0.30) & (counts <= 0.37))
    a = [sample_prompt(2, bank, np.random.default_rng(4)) for _ in range(3)]
    b = [sample_prompt(2, bank, np.random.default_rng(4)) for _ in range(3)]
    assert a == b


def test_single_template_class():
    bank = PromptBank("basic-six", {"happy": ["a happy face", "a happy face"], "sad": ["a sad face", "a sad one"]})
    assert bank.tokenize("a happy face") == sample_prompt(0, bank, np.random.default_rng(1))


def test_rank_pool_examples():
    u = np.array([0.3, -1.7, 2.2])
    ramp = np.arange(1, 4)[:, None] * u
    assert np.allclose(rank_pool(ramp), u / np.abs(u).max(), atol=1e-15)
    assert not rank_pool(np.ones((1, 4))).any()
    with pytest.raises(EmptyInputError):
        rank_pool(np.zeros((0, 3)))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 40), st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6))
def test_rank_pool_constant_is_exact_zero(t, c):
    assert not rank_pool(np.tile(np.asarray(c), (t, 1))).any()


def test_identity_augmentation(small):
    policy = AugmentPolicy(noise_sd=0.0, dropout=0.0, scale_low=1.0, scale_high=1.0)
    a, b = augment_pair(small[0], policy, np.random.default_rng(0))
    assert np.array_equal(a, small[0].views) and np.array_equal(b, small[0].views)


def test_augmentation_reproducible_and_distinct(small):
    a1, b1 = augment_pair(small.views, AugmentPolicy(), np.random.default_rng(5))
    a2, b2 = augment_pair(small.views, AugmentPolicy(), np.random.default_rng(5))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    a3, _ = augment_pair(small.views, AugmentPolicy(), np.random.default_rng(6))
    assert not np.array_equal(a1, a3)


def test_augmented_pairs_more_similar_than_other_samples():
    ds = generate_synthetic(DataConfig())
    a, b = augment_pair(ds.views[:, 0], AugmentPolicy(), np.random.default_rng(0))
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    same = (a * b).sum(axis=1).mean()
    other = (a * np.roll(b, 1, axis=0)).sum(axis=1).mean()
    assert same > other


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        AugmentPolicy(dropout=1.0).validate()
    with pytest.raises(ConfigurationError):
        AugmentPolicy(scale_low=2.0, scale_high=1.0).validate()


@pytest.mark.parametrize("k", [2, 5, 10])
def test_kfold_partition_and_disjoint(k):
    ds = generate_synthetic(DataConfig())
    folds = kfold_subject_split(ds, k, seed=1)
    tests = np.concatenate([te for _, te in folds])
    assert np.array_equal(np.sort(tests), np.arange(len(ds)))
    for tr, te in folds:
        assert not set(ds.subject_ids[tr]) & set(ds.subject_ids[te])
        assert len(tr) + len(te) == len(ds)
    if k == 10:
        assert all(len(np.unique(ds.subject_ids[te])) == 2 for _, te in folds)


def test_kfold_loso_and_errors():
    ids = np.repeat(np.arange(5), 3)
    folds = kfold_subject_split(ids, 5)
    assert all(len(np.unique(ids[te])) == 1 for _, te in folds)
    with pytest.raises(ConfigurationError):
        kfold_subject_split(ids, 6)


def test_dataset_file_roundtrip(tmp_path):
    ds = generate_synthetic(n_subjects=3, temporal=True, sequence_length=4)
    manifest, blob = save_dataset(ds, tmp_path / "toy")
    assert manifest.name == "toy.manifest.json" and blob.name == "toy.f64"
    assert blob.stat().st_size == 8 * (ds.views.size + ds.sequences.size)
    again = load_dataset(manifest)
    assert again.digest() == ds.digest()
    assert again.oracle_accuracy == ds.oracle_accuracy
    assert again.bank.class_names == ds.bank.class_names


def test_external_manifest_ingestion(tmp_path):
    views = np.random.default_rng(0).normal(size=(4, 2, 3))
    (tmp_path / "ext.f64").write_bytes(views.astype("<f8").tobytes())
    (tmp_path / "ext.manifest.json").write_text(json.dumps({
        "n_samples": 4, "view_count": 2, "input_dim": 3,
        "subject_ids": [0, 0, 1, 1], "class_ids": [0, 1, 2, 3], "prompt_mode": "basic-six"}))
    ds = load_dataset(tmp_path / "ext")
    assert np.array_equal(ds.views, views) and ds.bank.n_classes == 6


def test_corrupted_blob_detected(tmp_path):
    ds = generate_synthetic(n_subjects=2)
    manifest, blob = save_dataset(ds, tmp_path / "d")
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(ConfigurationError):
        load_dataset(manifest)
