import json

import pytest

from smile_ssl.cli import COMMANDS, dispatch
from smile_ssl.config import KEY_DOCS, RunConfig, benchmark_config, from_dict, leaf_keys, load_config
from smile_ssl.errors import ConfigurationError

FAST = ["--set", "train.epochs=1", "--set", "eval.k=2", "--set", "data.n_subjects=4",
        "--set", "train.model.text_pretrain_steps=10"]


def test_every_key_documented():
    assert set(leaf_keys()) == set(KEY_DOCS)


def test_bundled_config_file_matches_code():
    from pathlib import Path
    bundled = json.loads((Path(__file__).parents[1] / "configs" / "default.json").read_text())
    assert bundled == benchmark_config().to_dict()


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochz": 3}}))
    with pytest.raises(ConfigurationError, match="train.epochz"):
        load_config(path)
    with pytest.raises(ConfigurationError):
        load_config(None, ["train.nope=1"])
    with pytest.raises(ConfigurationError):
        from_dict(RunConfig, {"data": {"n_subjects": "many"}})


def test_overrides_and_partial_files(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"loss": {"tau": 0.5}}}))
    cfg = load_config(path, ["train.epochs=7", "eval.class_subset=[1,2]", "data.prompt_mode=basic-six"])
    assert cfg.train.loss.tau == 0.5 and cfg.train.epochs == 7 and cfg.eval.class_subset == [1, 2]
    assert cfg.data.input_dim == benchmark_config().data.input_dim


def test_seed_flows_everywhere():
    cfg = benchmark_config().with_seed(42)
    assert cfg.data.seed == 42 and cfg.train.seed == 42


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_exits_zero_and_lists_keys(command, capsys):
    assert dispatch([command, "--help"]) == 0
    out = capsys.readouterr().out
    assert all(key in out for key in leaf_keys())


def test_usage_and_validation_codes(tmp_path, capsys):
    assert dispatch(["nonsense"]) == 2
    assert dispatch(["gen-data", "--bogus"]) == 2
    assert dispatch(["gen-data", "--out", str(tmp_path), "--set", "data.n_classes=5"]) == 3
    assert "error[validation]" in capsys.readouterr().err
    assert dispatch(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 3


def test_divergence_code(tmp_path, monkeypatch, capsys):
    import smile_ssl.train as train_mod
    from smile_ssl.tensor import Tensor
    monkeypatch.setattr(train_mod, "vl_align_loss", lambda *a, **k: Tensor(float("nan")))
    assert dispatch(["train", "--out", str(tmp_path), *FAST]) == 4
    assert "divergence:vl_align" in capsys.readouterr().err


def test_gen_data_twice_same_digest(tmp_path):
    for name in ("a", "b"):
        assert dispatch(["gen-data", "--out", str(tmp_path / name), "--seed", "3"]) == 0
    runs = [json.loads((tmp_path / n / "run.json").read_text()) for n in ("a", "b")]
    assert runs[0]["dataset_digest"] == runs[1]["dataset_digest"]
    assert runs[0]["config"]["data"]["seed"] == 3
    assert 0.0 <= runs[0]["oracle_accuracy"]["dataset"] <= 1.0
    assert (tmp_path / "a" / "dataset.f64").read_bytes() == (tmp_path / "b" / "dataset.f64").read_bytes()


def test_out_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SMILE_SSL_OUT", str(tmp_path / "env"))
    assert dispatch(["gen-data", "--set", "data.n_subjects=2"]) == 0
    assert (tmp_path / "env" / "run.json").exists()


def test_train_then_eval(tmp_path):
    out = tmp_path / "t"
    assert dispatch(["train", "--out", str(out), *FAST]) == 0
    assert (out / "train_metrics.csv").exists() and (out / "model.ckpt.json").exists()
    assert dispatch(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(out / "model"), *FAST]) == 0
    assert (tmp_path / "e" / "report" / "metrics_eval.csv").exists()


def test_cross_val_and_cross_domain(tmp_path):
    assert dispatch(["cross-val", "--out", str(tmp_path / "cv"), *FAST]) == 0
    assert (tmp_path / "cv" / "report" / "metrics_cross_val.csv").exists()
    assert dispatch(["cross-domain", "--out", str(tmp_path / "cd"), *FAST]) == 0
    text = (tmp_path / "cd" / "report" / "metrics_cross_domain.csv").read_text()
    assert "cross_domain,happy" in text and "in_domain,disgust" in text


def test_ablate_and_report(tmp_path):
    out = tmp_path / "ab"
    assert dispatch(["ablate", "--out", str(out), *FAST]) == 0
    report = out / "report"
    for name in ("ablation_ablation.csv", "improvement_matrix_ablation.csv", "improvement_matrix_ablation.svg"):
        assert (report / name).exists()
    (report / "improvement_matrix_ablation.svg").unlink()
    assert dispatch(["report", "--out", str(out)]) == 0
    assert (report / "improvement_matrix_ablation.svg").exists()


def test_gradcheck_seed_7(tmp_path, capsys):
    assert dispatch(["gradcheck", "--seed", "7", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for name in ("mv_bt", "vl_align", "red_min", "joint", "model"):
        assert name in out
