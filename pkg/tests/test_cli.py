import json
import subprocess
import sys

import pytest

from tsddnet import cli
from tsddnet.train import DivergenceError

from test_experiment import TINY

TINY_FLAGS = [x for k, v in TINY.items() if k not in ("p", "folds") for x in ("--set", f"{k}={v}")]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--out", str(out), "--patients", "10", "--images-per-patient", "2",
                     "--size", "128", "--seed", "2"]) == 0
    return out


def test_help_lists_subcommands():
    r = subprocess.run([sys.executable, "-m", "tsddnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("gen-data", "train", "eval", "sweep-p", "ablate", "visualize"):
        assert sub in r.stdout


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--variant", "X"])
    assert e.value.code == 1
    assert cli.main(["train", "--p", "1.5"]) == 1
    assert cli.main(["train", "--set", "nonsense"]) == 1
    assert cli.main(["sweep-p", "--p-list", "0.2,abc"]) == 1


def test_data_errors_exit_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing")]) == 2
    assert cli.main(["eval", str(tmp_path)]) == 2


def test_divergence_exits_3(monkeypatch, data_dir):
    def boom(*a, **k):
        raise DivergenceError("loss is nan")
    monkeypatch.setattr(cli, "cmd_train", boom)
    assert cli.main(["train", "--data", str(data_dir)]) == 3


def test_train_eval_visualize(data_dir, tmp_path, capsys):
    out = tmp_path / "runs"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--p", "0.5", "--only-folds", "1",
            "--variant", "CS", "--k-candidates", "2", "--iterations", "1", *TINY_FLAGS]
    assert cli.main(args) == 0
    run = capsys.readouterr().out.strip()
    m = json.loads(open(f"{run}/fold1/CS/metrics.json").read())
    assert m["variant"] == "CS" and m["p"] == 0.5 and m["fold"] == 1
    cfg = open(f"{run}/config.txt").read()
    assert "k_candidates = 2" in cfg and "n_outer_iterations = 1" in cfg

    # same config again: refused without --force
    assert cli.main(args) == 1
    assert cli.main([*args, "--force"]) == 0
    capsys.readouterr()

    assert cli.main(["eval", run]) == 0
    image_id = next(iter(m["predictions"]))
    assert cli.main(["visualize", run, image_id, "--out", str(tmp_path / "ov")]) == 0
    assert (tmp_path / "ov" / f"{image_id}.png").is_file()
    assert cli.main(["visualize", run, "P999_99"]) == 2


def test_config_file(data_dir, tmp_path, capsys):
    cfg = tmp_path / "exp.txt"
    cfg.write_text("\n".join(f"{k} = {v}" for k, v in TINY.items()) + "\nn_outer_iterations = 0\ns2_epochs = 0\n")
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 0
    run = capsys.readouterr().out.strip()
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == [run.rsplit("/", 1)[1]]
    assert "n_outer_iterations = 0" in open(f"{run}/config.txt").read()
