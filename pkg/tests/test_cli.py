import json

import numpy as np
import pytest

from kgat import diffcore as dc
from kgat.ckg import read_user_lists
from kgat.cli import main, read_config

TRAIN_FLAGS = ["--max-epochs", "2", "--embed-dim", "8", "--layer-dims", "8,4", "--lr", "0.01",
               "--cf-batch-size", "256", "--kg-batch-size", "256", "--quiet", "true"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root / "data"), "--users", "40", "--items", "30",
                 "--entities", "12", "--seed", "7"]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run") / "run"
    assert main(["train", "--data", str(dataset), "--run", str(run), *TRAIN_FLAGS]) == 0
    return run


def test_prep_drops_user_below_core(tmp_path):
    lines = [" ".join(map(str, [u, *range(10)])) for u in range(11)]
    lines.append("11 " + " ".join(map(str, range(9))))
    raw = tmp_path / "raw.txt"
    raw.write_text("\n".join(lines) + "\n", encoding="utf-8")
    kg = tmp_path / "kg.txt"
    kg.write_text("0 0 20\n3 1 21\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["prep", "--input", str(raw), "--kg", str(kg), "--out", str(out), "--seed", "1"]) == 0
    summary = json.loads((out / "prep_summary.json").read_text())
    assert summary["users"] == 11 and summary["items"] == 10
    assert summary["train"] + summary["val"] + summary["test"] == 110
    train = read_user_lists(out / "train.txt")
    assert len(train) == 11
    assert read_config(out / "prep_config.txt")["core"] == "10"


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "7"]) == 0
    for f in ("train.txt", "test.txt", "kg_final.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_stats_checks_expected_counts(dataset, capsys, tmp_path):
    assert main(["stats", "--data", str(dataset), "--expected-users", "40", "--run", str(tmp_path)]) == 0
    assert "users: 40  ok" in capsys.readouterr().out
    assert json.loads((tmp_path / "stats.json").read_text())["mismatches"] == []
    assert main(["stats", "--data", str(dataset), "--expected-users", "41"]) == 2
    assert main(["stats", "--data", str(dataset), "--preset", "amazon-book"]) == 2


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "stats.cfg"
    cfg.write_text("# expected counts\ndata = %s\nexpected_users = 40\n" % dataset, encoding="utf-8")
    assert main(["stats", "--config", str(cfg)]) == 0
    assert main(["stats", "--config", str(cfg), "--expected-users", "3"]) == 2


def test_invalid_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n", encoding="utf-8")
    assert main(["train", "--data", "x", "--run", "y", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_usage_and_data_exit_codes(tmp_path):
    assert main(["train"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--run", str(tmp_path / "r")]) == 2
    assert main(["train", "--data", str(tmp_path), "--run", str(tmp_path / "r"), "--aggregator", "max"]) == 1


def test_train_outputs(trained):
    log = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert log[0] == {"header": {"aggregator": "bi", "attention_mode": "kg", "use_kge": True,
                                 "variant": "full"}}
    assert [r["epoch"] for r in log[1:]] == [1, 2]
    assert set(log[1]) == {"epoch", "kg_loss", "cf_loss", "recall@20", "ndcg@20", "elapsed_s"}
    store, meta = dc.load_checkpoint(trained / "best.ckpt")
    assert meta["config"]["layer_dims"] == [8, 4]
    assert read_config(trained / "config.txt")["lr"] == "0.01"
    metrics = json.loads((trained / "metrics.json").read_text())
    assert metrics["target"] == "test" and 0.0 <= metrics["recall@20"] <= 1.0


def test_numeric_failure_exit_code(dataset, tmp_path):
    run = tmp_path / "run"
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(dataset), "--run", str(run), *TRAIN_FLAGS, "--lr", "1e200"])
    assert code == 3
    assert (run / "last_good.ckpt").exists()


def test_eval_with_groups(dataset, trained, tmp_path, capsys):
    assert main(["eval", "--data", str(dataset), "--ckpt", str(trained / "best.ckpt"), "--k", "5,10",
                 "--groups", "4", "--run", str(tmp_path)]) == 0
    out = json.loads((tmp_path / "eval_metrics.json").read_text())
    assert {"recall@5", "ndcg@10"} <= set(out["overall"])
    assert len(out["groups"]) == 4


def test_explain_prints_paths(dataset, trained, capsys):
    capsys.readouterr()
    assert main(["explain", "--data", str(dataset), "--ckpt", str(trained / "best.ckpt"),
                 "--user", "0", "--item", "0", "--max-len", "3", "--json", "true"]) == 0
    lines = capsys.readouterr().out.splitlines()
    for line in lines:
        rec = json.loads(line)
        assert rec["nodes"][-1] == 0 and len(rec["relations"]) <= 3
    assert main(["explain", "--data", str(dataset), "--ckpt", str(trained / "best.ckpt"),
                 "--user", "999", "--item", "0"]) == 2


def test_ckpt_inspect(trained, capsys):
    assert main(["ckpt", "inspect", str(trained / "best.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "checkpoint version 1" in out and "entity_embedding" in out
