import csv
import os

import numpy as np
import pytest

from malleable25d import cli, convops, kvfile
from malleable25d.config import COMMAND_SECTIONS, ConfigError, RunConfig, parse_value

SMALL_SCENE = ["--set", "scene.n_scenes=8", "--set", "scene.height=12", "--set", "scene.width=12",
               "--set", "scene.min_size=3", "--set", "scene.max_size=5", "--set", "scene.test_fraction=0.25"]
TINY_NET = ["--set", "net.channels=3", "--set", "net.dilations=[1, 2]", "--set", "train.iterations=3",
            "--set", "train.batch_size=2", "--set", "train.log_every=1"]


def files_of(root):
    return {os.path.relpath(os.path.join(d, f), root): open(os.path.join(d, f), "rb").read()
            for d, _, fs in os.walk(root) for f in fs}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    assert cli.main(["synth", "--out", str(out), *SMALL_SCENE]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "train"
    code = cli.main(["train", "--out", str(out), "--set", f"data.manifest={dataset / 'manifest.txt'}", *TINY_NET])
    assert code == 0
    return out


# ---------------------------------------------------------------- config layer

def test_parse_value_types():
    assert parse_value("3") == 3 and parse_value("0.5") == 0.5 and parse_value("[1, 2]") == [1, 2]
    assert parse_value("true") is True and parse_value("hello") == "hello"


def test_precedence_and_seed(tmp_path):
    cfg = tmp_path / "c.toml"
    kvfile.write_kv(cfg, {"net.channels": 5, "train.seed": 1})
    rc = RunConfig.build("train", cfg, seed=9, overrides=["net.channels=6"])
    assert rc.values["net.channels"] == 6
    assert rc.values["train.seed"] == 9 and rc.values["net.seed"] == 9


def test_unknown_and_mistyped_keys_named():
    with pytest.raises(ConfigError, match="net.bogus"):
        RunConfig.build("train", overrides=["net.bogus=1"])
    with pytest.raises(ConfigError, match="train.iterations"):
        RunConfig.build("train", overrides=["train.iterations=many"])
    with pytest.raises(ConfigError, match="scene"):
        RunConfig.build("train", overrides=["scene.seed=1"])
    with pytest.raises(ConfigError):
        RunConfig.build("train", overrides=["noequals"])


def test_int_accepted_for_float():
    assert RunConfig.build("train", overrides=["train.base_lr=1"]).values["train.base_lr"] == 1.0


@pytest.mark.parametrize("command", sorted(COMMAND_SECTIONS))
def test_help_lists_every_key(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    rc = RunConfig.build(command)
    for key in rc.values:
        assert f"{key} = " in text


# ---------------------------------------------------------------- exit codes

def test_usage_errors(tmp_path, capsys):
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g"), "--set", "gradcheck.trials=0"]) == 2
    assert cli.main(["budget", "--out", str(tmp_path / "b"), "--set", "budget.nope=1"]) == 2
    assert "budget.nope" in capsys.readouterr().err
    assert not (tmp_path / "b").exists()


def test_missing_config_file_is_io_error(tmp_path):
    assert cli.main(["budget", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "none.toml")]) == 3


def test_train_missing_manifest(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "manifest.txt"
    code = cli.main(["train", "--out", str(tmp_path / "t"), "--set", f"data.manifest={missing}"])
    assert code != 0
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "t").exists()


def test_failure_leaves_no_partial_output(dataset, tmp_path):
    broken = tmp_path / "broken"
    os.makedirs(broken)
    for name, blob in files_of(dataset).items():
        os.makedirs(broken / os.path.dirname(name), exist_ok=True)
        (broken / name).write_bytes(blob)
    os.remove(broken / "labels" / "00007.t4")
    code = cli.main(["train", "--out", str(tmp_path / "t"), "--set", f"data.manifest={broken / 'manifest.txt'}",
                     *TINY_NET])
    assert code == 3
    assert sorted(os.listdir(tmp_path)) == ["broken"]


def test_gradcheck_pass_and_injected_failure(tmp_path, monkeypatch, capsys):
    args = ["gradcheck", "--set", "gradcheck.trials=4"]
    assert cli.main([*args, "--out", str(tmp_path / "ok")]) == 0
    assert "PASS" in capsys.readouterr().out

    real = convops.malleable_backward

    def flipped(grad_y, cache):
        g = real(grad_y, cache)
        g.a = -g.a
        return g

    monkeypatch.setattr(convops, "malleable_backward", flipped)
    assert cli.main([*args, "--out", str(tmp_path / "bad")]) == 1
    out = capsys.readouterr().out
    assert "FAIL op=malleable param=da" in out
    rows = list(csv.DictReader(open(tmp_path / "bad" / "gradcheck.csv")))
    assert {r["param"] for r in rows if r["status"] == "FAIL"} == {"a"}


def test_oracle_command(tmp_path):
    assert cli.main(["oracle", "--out", str(tmp_path / "o"), "--set", "oracle.trials=3"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "oracle.csv")))
    assert [r["op"] for r in rows] == ["standard", "malleable", "depthaware", "hard25d"]


# ---------------------------------------------------------------- outputs

def test_budget_reports_two_k_plus_three(tmp_path):
    assert cli.main(["budget", "--out", str(tmp_path / "b"), "--set", "budget.kernels=3"]) == 0
    rows = {r["kind"]: r for r in csv.DictReader(open(tmp_path / "b" / "budget.csv"))}
    assert rows["malleable"]["params_vs_hard25d"] == "9"
    assert abs(float(rows["malleable"]["flops_rel_vs_hard25d"])) < 1e-3


def test_run_directory_has_config_and_manifest(trained):
    listed = open(trained / "outputs.txt").read().splitlines()
    assert listed[0].startswith("# m25d train exit=0")
    assert "config.toml" in listed and "train_log.csv" in listed and "checkpoint/rfield.toml" in listed
    cfg = kvfile.read_kv(trained / "config.toml")
    assert cfg["train.iterations"] == 3 and cfg["net.dilations"] == [1, 2]


def test_train_reproducible(dataset, trained, tmp_path):
    again = tmp_path / "again"
    cli.main(["train", "--out", str(again), "--set", f"data.manifest={dataset / 'manifest.txt'}", *TINY_NET])
    assert files_of(again) == files_of(trained)


def test_synth_reproducible(dataset, tmp_path):
    cli.main(["synth", "--out", str(tmp_path / "d"), *SMALL_SCENE])
    a, b = files_of(dataset), files_of(tmp_path / "d")
    assert a == b and sum(k.endswith(".t4") for k in a) == 24


def test_ablate_writes_one_log_per_variant(dataset, tmp_path):
    out = tmp_path / "ab"
    code = cli.main(["ablate", "--out", str(out), "--set", f"data.manifest={dataset / 'manifest.txt'}", *TINY_NET,
                     "--set", 'ablate.variants=["a,t,b", "none"]'])
    assert code == 0
    assert (out / "frozen_atb" / "train_log.csv").exists() and (out / "learn_all" / "train_log.csv").exists()
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["learnable"] for r in rows] == ["none", "a,t,b"]
    frozen = kvfile.read_kv(out / "frozen_atb" / "checkpoint" / "rfield.toml")
    assert frozen["block0.a"] == [-2.0, -1.0, 0.0, 1.0, 2.0]


def test_ablate_rejects_bad_variant(dataset, tmp_path):
    code = cli.main(["ablate", "--out", str(tmp_path / "ab"), "--set", f"data.manifest={dataset / 'manifest.txt'}",
                     "--set", 'ablate.variants=["w"]'])
    assert code == 2


def test_analysis_commands(dataset, trained, tmp_path):
    ck, man = trained / "checkpoint", dataset / "manifest.txt"
    assert cli.main(["export-rf", "--out", str(tmp_path / "rf"), "--set", f"rf.checkpoint={ck}"]) == 0
    assert (tmp_path / "rf" / "rf_curves.csv").exists()
    assert cli.main(["assign-hist", "--out", str(tmp_path / "h"), "--set", f"hist.checkpoint={ck}",
                     "--set", f"hist.manifest={man}"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "h" / "assign_hist.csv")))
    assert abs(sum(float(r["raw_ratio"]) for r in rows) - 1) < 1e-12
    assert cli.main(["dump-features", "--out", str(tmp_path / "f"), "--set", f"dump.checkpoint={ck}",
                     "--set", f"dump.manifest={man}", "--set", "dump.sample=2"]) == 0
    assert sorted(os.listdir(tmp_path / "f")) == ["block1_kernel1.t4", "block1_kernel2.t4", "block1_kernel3.t4",
                                                  "block1_output.t4", "config.toml", "outputs.txt"]
    assert cli.main(["dump-features", "--out", str(tmp_path / "g"), "--set", f"dump.checkpoint={ck}",
                     "--set", f"dump.manifest={man}", "--set", "dump.sample=99"]) == 2


def test_analysis_rejects_non_malleable_layer(dataset, tmp_path):
    out = tmp_path / "std"
    cli.main(["train", "--out", str(out), "--set", f"data.manifest={dataset / 'manifest.txt'}", *TINY_NET,
              "--set", "net.kind=standard"])
    code = cli.main(["assign-hist", "--out", str(tmp_path / "h"), "--set", f"hist.checkpoint={out / 'checkpoint'}",
                     "--set", f"hist.manifest={dataset / 'manifest.txt'}"])
    assert code == 2
