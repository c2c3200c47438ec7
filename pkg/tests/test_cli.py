import json

import pytest

from shapejig.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(["gen-data", "--out", str(out), "--seed", "1", "--set", "n_per_class=3", "--set", "size=24",
                 "--set", "n_cue_conflict=12", "--set", "pool_per_kind=2", "--set", "pool_size=8"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "train.cfg"
    cfg.write_text(f"dataset = {dataset}\nepochs = 2\nbatch_size = 8\nconv_channels = 4,8\nn_perms = 6\n")
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "2"]) == 0
    return out


def test_gen_data_layout(dataset):
    for split in ("train", "val", "target", "cue_conflict"):
        assert (dataset / split / "manifest.txt").is_file()
    assert (dataset / "pool").is_dir()


def test_gen_permset(tmp_path, capsys):
    assert main(["gen-permset", "--out", str(tmp_path), "--set", "grid_n=2", "--set", "n_perms=24"]) == 0
    assert "24 permutations" in capsys.readouterr().out
    assert len((tmp_path / "permset.txt").read_text().splitlines()) == 25
    assert main(["gen-permset", "--out", str(tmp_path), "--set", "grid_n=2", "--set", "n_perms=25"]) == 1


def test_diversify_writes_decision_log(dataset, tmp_path):
    assert main(["diversify", "--out", str(tmp_path), "--set", f"dataset={dataset}", "--set", "rho=1.0",
                 "--set", "limit=5"]) == 0
    lines = (tmp_path / "decisions.txt").read_text().splitlines()
    assert len(lines) == 5 and all(line.split()[1] == "1" for line in lines)


def test_train_outputs(trained):
    assert len((trained / "metrics.csv").read_text().splitlines()) == 3
    assert (trained / "last.ckpt").is_file() and (trained / "config.txt").is_file()


def test_eval_shape_bias_attention(dataset, trained, tmp_path, capsys):
    ckpt = str(trained / "last.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--set", f"dataset={dataset}", "--out", str(tmp_path / "e")]) == 0
    assert len((tmp_path / "e" / "eval.csv").read_text().splitlines()) == 4
    assert main(["shape-bias", "--checkpoint", ckpt, "--set", f"dataset={dataset}", "--out", str(tmp_path / "s")]) == 0
    payload = json.loads((tmp_path / "s" / "shape_bias.json").read_text())
    assert payload["n"] == 12
    assert main(["attention", "--checkpoint", ckpt, "--set", f"dataset={dataset}", "--set", "limit=4",
                 "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a").glob("attention_*.csv"))) == 4
    assert (tmp_path / "a" / "flags.csv").is_file() and (tmp_path / "a" / "mask_contrast.csv").is_file()
    capsys.readouterr()


def test_gradcheck_command(tmp_path):
    args = ["gradcheck", "--out", str(tmp_path), "--set", "image_size=12", "--set", "conv_channels=4,6",
            "--set", "n_perms=5", "--set", "max_entries=0"]
    assert main(args) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert len(rows) == 9 and all(r.endswith(",1") for r in rows[1:])
    assert main(args + ["--set", "tolerance=1e-30"]) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--out", "x", "--bogus"],
    ["no-such-command"],
    ["gen-data"],
    ["gen-data", "--out", "x", "--set", "nonsense_key=1"],
    ["gen-data", "--out", "x", "--set", "novalue"],
    ["eval", "--out", "x", "--checkpoint", "/nonexistent.ckpt"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    capsys.readouterr()


def test_train_without_dataset_exits_1(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert "missing required config key 'dataset'" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_2(dataset, trained, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "last.ckpt").read_bytes()[:-5])
    assert main(["eval", "--checkpoint", str(bad), "--set", f"dataset={dataset}", "--out", str(tmp_path)]) == 2
    assert "checksum" in capsys.readouterr().err


def test_train_is_reproducible(dataset, trained, tmp_path):
    cfg = trained / "train.cfg"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--seed", "2"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
