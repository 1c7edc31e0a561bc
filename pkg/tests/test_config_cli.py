import json
import math

import pytest

from mddlab import config as C
from mddlab.cli import main
from mddlab.evaluation import read_curves_csv

TINY = {
    "model": {"input_size": [32, 32], "base_width": 8},
    "pretrain": {"epochs": 1},
    "adapt": {"max_epochs": 1, "batch_size": 4},
    "data": {"n_source": 2, "n_target": 2, "n_eval": 1, "depth": 4},
}


@pytest.fixture()
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv(C.SEED_ENV, raising=False)


# -- config ---------------------------------------------------------------------------

def test_presets():
    desk = C.preset("desk")
    assert desk.model.input_size == (64, 64) and desk.model.depth == 4
    assert desk.seeds == [0, 1, 2, 3, 4] and desk.pretrain.epochs == 8
    assert desk.adapt.grl_constant == 1.4 and desk.adapt.early_stop_threshold == 0.02
    full = C.preset("full")
    assert full.model.input_size == (256, 256) and full.pretrain.epochs == 60
    with pytest.raises(C.ConfigError):
        C.preset("huge")


def test_config_roundtrip(tmp_path):
    cfg = C.load(overrides={"adapt.early_stop_threshold": 0.05, "seed": 3})
    path = C.save(cfg, tmp_path)
    back = C.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.adapt.early_stop_threshold == 0.05 and back.seeds == [3]


def test_seed_env_overrides(monkeypatch, tiny):
    monkeypatch.setenv(C.SEED_ENV, "11")
    assert C.load(tiny, overrides={"seed": 2}).seeds == [11]
    monkeypatch.setenv(C.SEED_ENV, "x")
    with pytest.raises(C.ConfigError):
        C.load(tiny)


def test_for_seed_propagates():
    cfg = C.preset("desk").for_seed(7)
    assert (cfg.seed, cfg.pretrain.seed, cfg.adapt.seed, cfg.data.geometry_seed,
            cfg.data.shift.seed) == (7, 7, 7, 7, 7)


@pytest.mark.parametrize("bad", [{"adapt": {"grl_constant": 0}}, {"seeds": [1, 1]},
                                 {"model": {"depth": 1}}, {"data": {"n_source": 0}},
                                 {"adapt": {"lr_encoder": -1}}])
def test_invalid_configs(bad):
    with pytest.raises(C.ConfigError):
        C.from_dict(bad).validate(check_paths=False)


def test_unknown_key():
    with pytest.raises(C.ConfigError):
        C.from_dict({"adapt": {"xi": 0.1}})


# -- CLI --------------------------------------------------------------------------------

def test_synth_is_deterministic(tmp_path, tiny):
    assert main(["synth", "--config", tiny, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["synth", "--config", tiny, "--out", str(tmp_path / "b"), "--seed", "1"]) == 0
    for split in ("source", "target", "target_test"):
        for f in ("images.bin", "meta.json"):
            assert (tmp_path / "a" / split / f).read_bytes() == (tmp_path / "b" / split / f).read_bytes()
    assert not (tmp_path / "a" / "target" / "labels.bin").exists()


def test_synth_missing_parent(tmp_path, tiny):
    assert main(["synth", "--config", tiny, "--out", str(tmp_path / "no" / "such")]) == 3


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"adapt": {"grl_constant": -1}}))
    assert main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    p.write_text("{not json")
    assert main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_full_cli_flow(tmp_path, tiny, capsys):
    d = tmp_path / "ds"
    assert main(["synth", "--config", tiny, "--out", str(d)]) == 0
    pre = tmp_path / "pre"
    data = ["--source", str(d / "source"), "--target", str(d / "target"),
            "--eval-data", str(d / "target_test")]
    assert main(["pretrain", "--config", tiny, "--out", str(pre), *data]) == 0
    ckpt = pre / "pretrained.ckpt"
    assert ckpt.exists() and (pre / "pretrain_metrics.csv").exists()

    ad = tmp_path / "adapt"
    assert main(["adapt", "--config", tiny, "--out", str(ad), "--checkpoint", str(ckpt),
                 "--xi", "1e9", *data]) == 0
    summary = json.loads((ad / "summary.json").read_text())
    assert summary["stop_reason"] == "max_epochs"
    assert json.loads((ad / "config.json").read_text())["adapt"]["early_stop_threshold"] == 1e9
    header = (ad / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,phase,dice_target,dice_source,loss_c,loss_a_src,stop_flag"
    assert len(read_curves_csv(ad / "curves.csv")) == 2 and (ad / "curves.svg").exists()
    assert (ad / "steps.csv").read_text().count("\n") == 3  # header + 2 steps

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(ckpt), "--checkpoint", str(ad / "adapted.ckpt"),
                 "--dataset", str(d / "target_test"), "--out", str(ev)]) == 0
    report = json.loads((ev / "metrics.json").read_text())
    assert [c["phase"] for c in report["checkpoints"]] == ["pretrained", "adapted"]
    assert all(0 <= c["dice_mean"] <= 1 for c in report["checkpoints"])

    # target split holds no training labels
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(d / "target"),
                 "--out", str(ev)]) == 3

    pl = tmp_path / "plots"
    assert main(["plot", str(ad / "curves.csv"), "--out", str(pl), "--format", "pdf"]) == 0
    assert (pl / "adapt_curves.pdf").read_bytes()[:4] == b"%PDF"

    ab = tmp_path / "abl"
    assert main(["ablate", "--config", tiny, "--out", str(ab), "--checkpoint", str(ckpt),
                 "--freeze", "encoder.0+encoder.1", "--freeze", "decoder.0",
                 "--probe-epochs", "1", *data]) == 0
    rows = (ab / "ablation.csv").read_text().splitlines()
    assert rows[0] == "frozen_layers,1" and len(rows) == 3
    assert (ab / "ablation.svg").exists()
    assert main(["ablate", "--config", tiny, "--out", str(ab), "--checkpoint", str(ckpt),
                 "--freeze", "decoder.9", *data]) == 2
    capsys.readouterr()


def test_incompatible_checkpoint(tmp_path, tiny):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--config", tiny, "--out", str(pre)]) == 0
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "model": {"input_size": [32, 32], "depth": 3}}))
    assert main(["adapt", "--config", str(other), "--out", str(tmp_path / "a"),
                 "--checkpoint", str(pre / "pretrained.ckpt")]) == 2


def test_plot_malformed_csv(tmp_path):
    p = tmp_path / "curves.csv"
    p.write_text("")
    assert main(["plot", str(p), "--out", str(tmp_path)]) == 3


def test_bench_two_seeds(tmp_path, tiny):
    out = tmp_path / "bench"
    cfg = json.loads(open(tiny).read())
    cfg["seeds"] = [0, 1]
    p = tmp_path / "b.json"
    p.write_text(json.dumps(cfg))
    assert main(["bench", "--config", str(p), "--out", str(out)]) == 0
    bench = json.loads((out / "benchmark.json").read_text())
    assert bench["n_runs"] == 2 and {r["seed"] for r in bench["runs"]} == {0, 1}
    recs = read_curves_csv(out / "curves.csv")
    assert {r.run_id for r in recs} == {"seed0", "seed1"}
    assert all(not math.isnan(r.dice_mean) for r in recs)
    assert (out / "seed_1" / "adapted.ckpt").exists()
