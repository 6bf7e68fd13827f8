import json

import pandas as pd
import pytest

from pair_absa.cli import main
from pair_absa.config import OUTPUT_DIR_ENV
from pair_absa.data import parse_dataset

TINY_CONFIG = """\
hidden_dim = 8
n_heads = 2
n_layers = 1
ffn_inner_dim = 4
word_dim = 4
char_embed_dim = 3
char_out_dim = 4
pair_hidden_dim = 4
pair_dim = 8
directions = bi
dropout = 0.0
batch_size = 4
epochs = 1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def trained(tmp_path, data_dir, config_file):
    out = tmp_path / "run"
    code = main(
        [
            "train",
            "--config", str(config_file),
            "--train", str(data_dir / "train.txt"),
            "--dev", str(data_dir / "dev.txt"),
            "--out", str(out),
            "--max-steps", "2",
        ]
    )
    assert code == 0
    return out


def test_train_writes_manifest_log_metrics_and_checkpoint(trained):
    manifest = json.loads((trained / "train_manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "train"
    assert manifest["config"]["directions"] == "bi"
    assert manifest["config"]["learning_rate"] == 1e-3
    assert manifest["data"]["dev"].endswith("dev.txt")
    log = pd.read_csv(trained / "train_log.csv")
    assert list(log["step"]) == [1, 2]
    metrics = pd.read_csv(trained / "metrics.csv")
    assert list(metrics["mode"]) == ["AE", "OE", "ASTE"]
    assert (trained / "model.npz").exists()


def test_rerun_from_manifest_reproduces_metrics(trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--from-manifest", str(trained / "train_manifest.json"), "--out", str(again)]) == 0
    assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    pd.testing.assert_frame_equal(pd.read_csv(again / "train_log.csv"), pd.read_csv(trained / "train_log.csv"))


def test_eval_is_deterministic(trained, data_dir, tmp_path, capsys):
    args = ["eval", "--model", str(trained / "model.npz"), "--data", str(data_dir / "dev.txt")]
    assert main([*args, "--out", str(tmp_path / "e1")]) == 0
    assert main([*args, "--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "metrics.csv").read_bytes() == (tmp_path / "e2" / "metrics.csv").read_bytes()
    assert "ASTE" in capsys.readouterr().out


def test_eval_from_train_manifest_uses_dev(trained, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "--from-manifest", str(trained / "train_manifest.json"), "--out", str(out)]) == 0
    manifest = json.loads((out / "eval_manifest.json").read_text(encoding="utf-8"))
    assert manifest["data"]["data"].endswith("dev.txt")


def test_eval_of_empty_file_reports_zero_counts(trained, tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("", encoding="utf-8")
    assert main(["eval", "--model", str(trained / "model.npz"), "--data", str(empty), "--out", str(tmp_path / "e")]) == 0
    metrics = pd.read_csv(tmp_path / "e" / "metrics.csv")
    assert (metrics["n_gold"] == 0).all()
    assert (metrics["f1"] == 0.0).all()


def test_eval_with_mismatched_task_exits_1(trained, data_dir, tmp_path, capsys):
    code = main(
        ["eval", "--model", str(trained / "model.npz"), "--data", str(data_dir / "dev.txt"), "--task", "aesc", "--out", str(tmp_path)]
    )
    assert code == 1
    assert "head.diag_pola" in capsys.readouterr().err


def test_predict_writes_dataset_lines(trained, data_dir, tmp_path):
    out = tmp_path / "pred" / "dev.pred.txt"
    assert main(["predict", "--model", str(trained / "model.npz"), "--data", str(data_dir / "dev.txt"), "--out", str(out)]) == 0
    predicted = parse_dataset(out)
    assert [ex.tokens for ex in predicted] == [ex.tokens for ex in parse_dataset(data_dir / "dev.txt")]
    assert (out.parent / "predict_manifest.json").exists()


def test_directions_with_no_pair_encoder_is_a_usage_error(data_dir, tmp_path):
    code = main(["train", "--train", str(data_dir / "train.txt"), "--no-pair-encoder", "--directions", "bi", "--out", str(tmp_path)])
    assert code == 2


def test_invalid_flag_value_is_a_usage_error(data_dir, config_file, tmp_path):
    code = main(["train", "--config", str(config_file), "--train", str(data_dir / "train.txt"), "--layers", "0", "--out", str(tmp_path)])
    assert code == 2


def test_unknown_command_is_a_usage_error():
    assert main(["serve"]) == 2


def test_missing_data_file_exits_1(config_file, tmp_path):
    code = main(["train", "--config", str(config_file), "--train", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert (tmp_path / "o" / "train_manifest.json").exists()


def test_malformed_data_exits_1(config_file, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("a b####[([0], [7], 'POS')]\n", encoding="utf-8")
    assert main(["train", "--config", str(config_file), "--train", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env-out"))
    assert main(["bench", "--n", "2", "--workers", "1"]) == 0
    assert (tmp_path / "env-out" / "bench.csv").exists()


def test_check_gridroundtrip(data_dir, tmp_path, capsys):
    code = main(["check", "--mode", "gridroundtrip", "--data", str(data_dir / "train.txt"), str(data_dir / "dev.txt"), "--out", str(tmp_path)])
    assert code == 0
    table = pd.read_csv(tmp_path / "check_gridroundtrip.csv")
    assert list(table["sentences"]) == [8, 3]
    assert list(table["triplets"]) == [21, 4]
    assert (table["mismatches"] == 0).all()
    assert "PASSED" in capsys.readouterr().out


def test_check_gridroundtrip_needs_data(tmp_path):
    assert main(["check", "--mode", "gridroundtrip", "--out", str(tmp_path)]) == 2


def test_check_mdgru_equivalence(tmp_path):
    code = main(["check", "--mode", "mdgru-equiv", "--seeds", "2", "--invariance-n", "6", "--out", str(tmp_path)])
    assert code == 0


def test_check_gradcheck_sampled(tmp_path, capsys):
    assert main(["check", "--mode", "gradcheck", "--max-per-param", "2", "--out", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out


@pytest.mark.parametrize("n", [1, 6])
def test_bench_single_worker_speedup_is_one(tmp_path, n):
    assert main(["bench", "--n", str(n), "--workers", "1", "--directions", "all", "--out", str(tmp_path)]) == 0
    report = pd.read_csv(tmp_path / "bench.csv")
    assert list(report["mode"]) == ["uni", "bi", "quad"]
    assert (report["speedup"] == 1.0).all()
    assert (report["max_deviation"] == 0.0).all()


def test_bench_with_workers(tmp_path):
    assert main(["bench", "--n", "5", "--workers", "3", "--out", str(tmp_path)]) == 0
    report = pd.read_csv(tmp_path / "bench.csv")
    assert report["max_deviation"].iloc[0] <= 1e-12
    assert report["speedup"].iloc[0] > 0


def test_bench_rejects_empty_grid(tmp_path):
    assert main(["bench", "--n", "0", "--out", str(tmp_path)]) == 2
    assert not (tmp_path / "bench_manifest.json").exists()


def test_bench_rejects_zero_workers_before_writing(tmp_path):
    assert main(["bench", "--n", "2", "--workers", "0", "--out", str(tmp_path)]) == 2
    assert list(tmp_path.iterdir()) == []


def test_unknown_log_level_is_a_usage_error(tmp_path):
    assert main(["bench", "--n", "1", "--workers", "1", "--log-level", "chatty", "--out", str(tmp_path)]) == 2
