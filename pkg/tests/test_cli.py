import json

import pytest

from eriqa import pipeline as P
from eriqa.checkpoint import load_tensors
from eriqa.cli import main

SMALL = ["--set", "forge.n_pristine=10", "--set", "forge.size=32",
         "--set", 'forge.kinds=["gaussian_blur","white_noise"]', "--set", "forge.levels=2"]
QUICK = ["--set", "pretrain.epochs=1", "--set", "pretrain.patch_size=32", "--set", "finetune.epochs=1",
         "--set", "backbone.n_train=64", "--set", "backbone.n_test=32", "--set", "backbone.epochs=1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["forge", "--out", str(out)] + SMALL) == 0
    return out


# -- config ---------------------------------------------------------------------------

def test_override_parsing():
    assert P.parse_override("pretrain.lr=1e-4") == {"pretrain": {"lr": 1e-4}}
    assert P.parse_override("fusion=cosine") == {"fusion": "cosine"}
    assert P.parse_override('forge.kinds=["a"]') == {"forge": {"kinds": ["a"]}}
    with pytest.raises(P.ConfigError):
        P.parse_override("pretrain.lr")


def test_resolve_config_layers(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7, "pretrain": {"epochs": 3}}))
    cfg = P.resolve_config(path, ["pretrain.epochs=5"])
    assert cfg["seed"] == 7 and cfg["pretrain"]["epochs"] == 5 and cfg["pretrain"]["lr"] == 1e-3
    with pytest.raises(P.ConfigError, match="unknown"):
        P.resolve_config(None, ["pretrain.nope=1"])
    with pytest.raises(P.ConfigError, match="object"):
        P.resolve_config(None, ["pretrain=3"])


# -- exit codes --------------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["forge"]) == 2
    capsys.readouterr()
    assert main(["forge", "--out", str(tmp_path / "x"), "--set", "nope=1"]) == 2
    assert "unknown config key 'nope'" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["forge", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 2
    assert main(["forge", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 2
    assert not (tmp_path / "x").exists()


def test_operational_errors_exit_1(tmp_path, corpus, capsys):
    assert main(["eval", "--manifest", str(corpus), "--out", str(tmp_path / "e"),
                 "--checkpoint", str(tmp_path / "absent.uiqa")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("eriqa eval: error:") and "\n" not in err
    assert main(["pretrain", "--manifest", str(tmp_path / "nowhere"), "--out", str(tmp_path / "p")]) == 1
    assert main(["dump-features", "--manifest", str(corpus), "--out", str(tmp_path / "d"), "--stage", "9"]) == 2


def test_split_out_of_range_is_usage(tmp_path, corpus):
    assert main(["pretrain", "--manifest", str(corpus), "--out", str(tmp_path / "p"), "--set", "split=99"]
                + SMALL) == 2


# -- runs -------------------------------------------------------------------------------

def test_run_dir_records_config_build_and_seed(tmp_path, corpus):
    out = tmp_path / "s"
    assert main(["splits", "--manifest", str(corpus), "--out", str(out), "--set", "seed=13"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 13 and cfg == P.resolve_config(None, ["seed=13"])
    run = json.loads((out / "run.json").read_text())
    assert run["seed"] == 13 and run["command"] == "splits"
    assert (out / "build.txt").read_text().startswith("eriqa-")
    plan = json.loads((out / "splits.json").read_text())
    assert len(plan["repeats"]) == 10


def test_forge_is_deterministic(tmp_path, corpus):
    again = tmp_path / "again"
    assert main(["forge", "--out", str(again)] + SMALL) == 0
    assert (again / "manifest.csv").read_bytes() == (corpus / "manifest.csv").read_bytes()
    for img in sorted((corpus / "images").iterdir()):
        assert (again / "images" / img.name).read_bytes() == img.read_bytes()


def test_pipeline_through_cli(tmp_path, corpus):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--manifest", str(corpus), "--out", str(pre), "--set", "fusion=mafe"]
                + SMALL + QUICK) == 0
    assert (pre / "pretrain_mafe.uiqa").exists()
    assert (pre / "pretrain_mafe_history.csv").read_text().startswith("epoch,lr,loss,metric")
    assert (pre / "pretrain_mafe_history.png").read_bytes()[:4] == b"\x89PNG"
    ft = tmp_path / "ft"
    assert main(["finetune", "--manifest", str(corpus), "--out", str(ft),
                 "--checkpoint", str(pre / "pretrain_mafe.uiqa")] + SMALL + QUICK) == 0
    ev = tmp_path / "ev"
    assert main(["eval", "--manifest", str(corpus), "--out", str(ev),
                 "--checkpoint", str(ft / "finetune_mafe.uiqa")] + SMALL) == 0
    report = json.loads((ev / "report.json").read_text())
    assert set(report) == {"datasets", "per_kind", "weighted_average", "generalization"}
    assert (ev / "scores.csv").read_text() == (ft / "scores.csv").read_text()
    assert (ev / "scatter.png").exists()
    # a pre-training checkpoint has no backbone and cannot be scored
    assert main(["eval", "--manifest", str(corpus), "--out", str(tmp_path / "ev2"),
                 "--checkpoint", str(pre / "pretrain_mafe.uiqa")]) == 1
    dump = tmp_path / "dump"
    assert main(["dump-features", "--manifest", str(corpus), "--out", str(dump), "--stage", "1", "--limit", "3",
                 "--checkpoint", str(pre / "pretrain_mafe.uiqa")] + SMALL) == 0
    named = load_tensors(dump / "features_stage1.uiqa")
    assert len(named) == 6 and named[0][1].shape == (32, 16, 16)


def test_ablate_writes_table_and_figure(tmp_path, corpus, capsys):
    out = tmp_path / "ab"
    args = ["ablate", "--manifest", str(corpus), "--out", str(out), "--pretrain-manifest", str(corpus),
            "--set", 'ablate.kinds=["none","cosine"]', "--set", "ablate.repeats=2"] + SMALL + QUICK
    assert main(args) == 0
    csv = (out / "ablation.csv").read_text().splitlines()
    assert csv[0] == "fusion,median_srocc,split_0,split_1"
    assert [r.split(",")[0] for r in csv[1:]] == ["none", "cosine"]
    assert (out / "ablation.md").read_text().startswith("| Fusion |")
    assert (out / "ablation.png").read_bytes()[:4] == b"\x89PNG"
    assert capsys.readouterr().out.splitlines()[0] == csv[0]


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "2", "--only", "relu", "--only", "mafe_fusion",
                 "--out", str(tmp_path / "g")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "name,trials,max_rel_error,passed,seconds"
    assert [line.split(",")[3] for line in lines[1:]] == ["1", "1"]


def test_shorthand_flags_override_config(tmp_path, corpus):
    out = tmp_path / "s"
    assert main(["splits", "--manifest", str(corpus), "--out", str(out), "--ratio", "0.7", "--repeats", "3",
                 "--seed", "4", "--set", "splits.repeats=9"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["splits"] == {"ratio": 0.7, "repeats": 3, "seed": 4} and cfg["seed"] == 4
    plan = json.loads((out / "splits.json").read_text())
    assert len(plan["repeats"]) == 3 and len(plan["repeats"][0]["test"]) == 3
    assert main(["pretrain", "--manifest", str(corpus), "--out", str(tmp_path / "p"), "--fusion", "fancy"]) == 2


def test_rerun_from_run_dir_config(tmp_path, corpus):
    first = tmp_path / "a"
    assert main(["pretrain", "--manifest", str(corpus), "--out", str(first), "--fusion", "bottleneck",
                 "--split", "2"] + SMALL + QUICK) == 0
    again = tmp_path / "b"
    assert main(["pretrain", "--manifest", str(corpus), "--out", str(again),
                 "--config", str(first / "config.json")]) == 0
    for name in ("pretrain_bottleneck.uiqa", "pretrain_bottleneck_history.csv", "config.json"):
        assert (again / name).read_bytes() == (first / name).read_bytes()
