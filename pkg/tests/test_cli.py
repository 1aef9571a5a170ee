import csv
import json

import pytest

from gram.cli import DEFAULT_SPACE, UsageError, read_space, run, sample_trials


def invoke(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    summary = json.loads(out) if code == 0 else None
    return code, summary, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = out / "synth.cfg"
    cfg.write_text("num_leaves = 60\nbranching = 3,4,5\nnum_patients = 80\n", encoding="utf-8")
    assert run(["gen-synth", "--config", str(cfg), "--seed", "7", "--out", str(out / "data")]) == 0
    return out / "data"


@pytest.fixture(scope="module")
def train_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.cfg"
    path.write_text("m = 6\nr = 5\nl = 4\nmax_epochs = 2\nbatch_size = 20\nglove_epochs = 3\n", encoding="utf-8")
    return path


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_synth_reproducible(tmp_path, capsys):
    for name in "ab":
        code, summary, _ = invoke(capsys, "gen-synth", "--seed", 7, "--patients", 30, "--out", tmp_path / name)
        assert code == 0 and summary["num_patients"] == 30
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_train_glove_end_to_end(tmp_path, capsys, dataset, train_cfg):
    code, summary, _ = invoke(capsys, "train", "--config", train_cfg, "--data", dataset, "--model", "gram",
                              "--init", "glove_augmented", "--seed", 1, "--out", tmp_path)
    assert code == 0 and summary["model"] == "gram" and summary["init"] == "glove_augmented"
    for name in ("model.ckpt", "train_log.csv", "split.json"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "train_log.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "train_loss", "valid_loss", "seconds"]

    code, summary, _ = invoke(capsys, "evaluate", "--checkpoint", tmp_path / "model.ckpt", "--data", dataset,
                              "--k", "5,10", "--out", tmp_path)
    assert code == 0 and set(summary["accuracy_at_k"]) == {"5", "10"}
    report = json.loads((tmp_path / "eval.json").read_text())
    assert {"accuracy_at_k", "bins", "auc", "label_detail"} <= set(report)

    code, summary, _ = invoke(capsys, "export-embeddings", "--checkpoint", tmp_path / "model.ckpt",
                              "--data", dataset, "--out", tmp_path)
    assert code == 0 and summary["rows"] == 60
    first = (tmp_path / "embeddings.tsv").read_text().splitlines()[0].split("\t")
    assert first[1] != "" and len(first) == 2 + 6

    code, summary, _ = invoke(capsys, "export-attention", "--checkpoint", tmp_path / "model.ckpt",
                              "--drop-root", "--out", tmp_path)
    assert code == 0 and summary["leaves"] == 60
    entries = json.loads((tmp_path / "attention.json").read_text())
    assert all("residual" in e for e in entries)


def test_train_twice_identical(tmp_path, capsys, dataset, train_cfg):
    for name in "ab":
        assert invoke(capsys, "train", "--config", train_cfg, "--data", dataset, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
    assert (tmp_path / "a/split.json").read_bytes() == (tmp_path / "b/split.json").read_bytes()


def test_flags_override_config(tmp_path, capsys, dataset, train_cfg):
    code, summary, _ = invoke(capsys, "train", "--config", train_cfg, "--data", dataset, "--model", "rollup_rare",
                              "--threshold", 5, "--task", "binary", "--out", tmp_path)
    assert code == 0 and summary["model"] == "rollup_rare"
    code, summary, _ = invoke(capsys, "evaluate", "--checkpoint", tmp_path / "model.ckpt", "--data", dataset,
                              "--out", tmp_path)
    assert code == 0 and 0.0 <= summary["auc"] <= 1.0


def test_cooc_and_embeddings(tmp_path, capsys, dataset, train_cfg):
    code, summary, _ = invoke(capsys, "build-cooc", "--data", dataset, "--out", tmp_path)
    assert code == 0 and summary["dim"] == 60 + 12 + 3 + 1
    code, summary, _ = invoke(capsys, "init-embeddings", "--config", train_cfg, "--data", dataset,
                              "--init", "glove_leaf_only", "--out", tmp_path)
    assert code == 0 and summary["rows"] == 60


def test_param_count(capsys, dataset, train_cfg):
    code, summary, _ = invoke(capsys, "param-count", "--config", train_cfg, "--data", dataset)
    assert code == 0
    assert abs(summary["matched_rnn_parameters"] - summary["num_parameters"]) < summary["num_parameters"] * 0.05


def test_hpo_search(tmp_path, capsys, dataset, train_cfg):
    space = tmp_path / "space.cfg"
    space.write_text("m = 4, 6\nl2_coeff = 0.01, 0.001\ndropout_rate = 0, 0.2\n", encoding="utf-8")
    code, summary, _ = invoke(capsys, "hpo-search", "--config", train_cfg, "--data", dataset, "--space", space,
                              "--trials", 3, "--out", tmp_path)
    assert code == 0 and summary["trials"] == 3
    with open(tmp_path / "hpo.csv") as fh:
        rows = list(csv.DictReader(fh))
    losses = [float(r["valid_loss"]) for r in rows]
    assert [r["rank"] for r in rows] == ["1", "2", "3"] and losses == sorted(losses)
    assert (tmp_path / "best.cfg").exists()


def test_hpo_space_defaults():
    assert DEFAULT_SPACE == {
        "m": [100, 200, 300, 400, 500],
        "r": [100, 200, 300, 400, 500],
        "l": [100, 200, 300, 400, 500],
        "l2_coeff": [0.1, 0.01, 0.001, 0.0001],
        "dropout_rate": [0.0, 0.2, 0.4, 0.6, 0.8],
    }


def test_hpo_sampling():
    assert sample_trials(DEFAULT_SPACE, 5, 3) == sample_trials(DEFAULT_SPACE, 5, 3)
    one = sample_trials({"m": [7]}, 1, 0)
    assert one == [{"m": 7}]
    with pytest.raises(UsageError):
        sample_trials({}, 1, 0)


def test_empty_space_file(tmp_path):
    (tmp_path / "s.cfg").write_text("# nothing\n", encoding="utf-8")
    with pytest.raises(UsageError, match="empty"):
        read_space(tmp_path / "s.cfg")


def test_unknown_flag_exit_1(capsys):
    code = run(["train", "--bogus"])
    err = capsys.readouterr().err
    assert code == 1 and "usage:" in err


def test_no_subcommand_exit_1(capsys):
    assert run([]) == 1


def test_validation_error_exit_1(tmp_path, capsys, dataset):
    bad = tmp_path / "bad.cfg"
    bad.write_text("m = 0\n", encoding="utf-8")
    code, _, err = invoke(capsys, "train", "--config", bad, "--data", dataset, "--out", tmp_path)
    assert code == 1 and "error" in err
    code, _, _ = invoke(capsys, "evaluate", "--checkpoint", tmp_path / "missing.ckpt", "--data", dataset)
    assert code == 1


def test_internal_error_exit_2(tmp_path, capsys, dataset, monkeypatch):
    import gram.cli as cli

    def boom(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = invoke(capsys, "train", "--data", dataset, "--out", tmp_path)
    assert code == 2 and "boom" in err
