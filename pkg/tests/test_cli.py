import os

import numpy as np
import pytest

from kicdpm import cli
from kicdpm.grid import GeoGrid, load_grid, save_grid

TRAIN_SET = ["--set", "T=10", "--set", "epochs=1", "--set", "width=4", "--set", "factor=2",
             "--set", "batch_size=2"]


def run_ok(*argv):
    assert cli.main(list(argv)) == 0


def snapshot(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for f in files:
            p = os.path.join(root, f)
            out[os.path.relpath(p, directory)] = open(p, "rb").read()
    return out


@pytest.fixture
def pipeline(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run_ok("synth", "--out", "data", "--nx", "16", "--factor", "2", "--n-pairs", "3",
           "--rho", "4", "--seed", "1")
    run_ok("train", "--data", "data", "--out", "model", *TRAIN_SET)
    run_ok("sample", "--checkpoint", "model/model.ckpt", "--coarse",
           "data/pair_0000_coarse.grid", "--n-samples", "8", "--seed", "3", "--out", "ens")
    run_ok("eval", "--truth", "data/pair_0000_fine.grid", "--ensemble", "ens",
           "--out", "scores.csv", "--variogram-out", "vario.txt")
    return tmp_path


def test_synth_emits_expected_files(tmp_path):
    run_ok("synth", "--out", str(tmp_path / "d"), "--nx", "32", "--factor", "4", "--n-pairs", "2")
    assert load_grid(tmp_path / "d" / "pair_0001_fine.grid").shape == (32, 32)
    assert load_grid(tmp_path / "d" / "pair_0001_coarse.grid").shape == (8, 8)
    manifest = cli.read_manifest(tmp_path / "d" / "manifest.txt")
    assert manifest["command"] == "synth" and manifest["option.nx"] == "32"


def test_synth_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        run_ok("synth", "--out", str(d), "--nx", "16", "--factor", "4", "--n-pairs", "2",
               "--seed", "7")
    sa, sb = snapshot(a), snapshot(b)
    sa.pop("manifest.txt"), sb.pop("manifest.txt")
    assert sa == sb


def test_end_to_end_pipeline(pipeline):
    members = sorted(f for f in os.listdir("ens") if f.startswith("member_"))
    assert len(members) == 8 and os.path.exists("ens/mean.grid")
    assert load_grid("ens/mean.grid").shape == (16, 16)
    lines = open("scores.csv").read().splitlines()
    assert lines[0] == "metric,value,n_cells"
    assert [l.split(",")[0] for l in lines[1:]] == ["rmse", "mae", "pcc", "crps"]
    assert all(l.endswith(",256") for l in lines[1:])
    log = open("model/train_log.csv").read().splitlines()
    assert log[0] == "epoch,loss,vlb,rv,seconds" and len(log) == 2
    cfg = open("model/train_config.txt").read()
    assert "T = 10" in cfg and "width = 4" in cfg
    assert open("vario.txt").readline().startswith("# lag")
    man = cli.read_manifest("model/manifest.txt")
    assert man["option.train.T"] == "10"
    assert any(k.startswith("input.data/pair_0002_fine.grid") for k in man)


def test_every_stage_replays_byte_identically(pipeline):
    before = snapshot(".")
    for manifest in ("data/manifest.txt", "model/manifest.txt", "ens/manifest.txt",
                     "scores.csv.manifest"):
        run_ok("rerun", manifest)
    after = snapshot(".")
    assert before.keys() == after.keys()
    for name in before:
        if name == os.path.join("model", "train_log.csv"):
            strip = lambda b: [l.rsplit(",", 1)[0] for l in b.decode().splitlines()]
            assert strip(before[name]) == strip(after[name])
        else:
            assert before[name] == after[name], name


def test_rerun_detects_changed_input(pipeline, capsys):
    save_grid(GeoGrid(np.zeros((8, 8))), "data/pair_0000_coarse.grid")
    assert cli.main(["rerun", "ens/manifest.txt"]) == 1
    assert "changed since the manifest" in capsys.readouterr().err


def test_krige_and_bicubic(tmp_path):
    coarse = GeoGrid(np.random.default_rng(0).standard_normal((8, 8)))
    save_grid(coarse, tmp_path / "c.grid")
    for method in ("ukrig", "bicubic", "catmull-rom"):
        out = tmp_path / f"{method}.grid"
        run_ok("krige", str(tmp_path / "c.grid"), "--out", str(out), "--factor", "2",
               "--method", method)
        assert load_grid(out).shape == (16, 16)
        assert cli.read_manifest(str(out) + ".manifest")["option.method"] == method
    run_ok("krige", str(tmp_path / "c.grid"), "--out", str(tmp_path / "f.grid"), "--factor", "3",
           "--nu", "0.5", "--rho", "3", "--sill", "1")
    np.testing.assert_allclose(load_grid(tmp_path / "f.grid").values[1::3, 1::3], coarse.values,
                               atol=1e-6)


def test_config_file_precedence(tmp_path):
    save_grid(GeoGrid(np.random.default_rng(1).standard_normal((8, 8))), tmp_path / "c.grid")
    conf = tmp_path / "k.conf"
    conf.write_text("factor = 3\nmethod = bicubic\n")
    run_ok("krige", str(tmp_path / "c.grid"), "--out", str(tmp_path / "a.grid"),
           "--config", str(conf))
    assert load_grid(tmp_path / "a.grid").shape == (24, 24)
    run_ok("krige", str(tmp_path / "c.grid"), "--out", str(tmp_path / "b.grid"),
           "--config", str(conf), "--factor", "2")
    assert load_grid(tmp_path / "b.grid").shape == (16, 16)
    conf.write_text("colour = red\n")
    assert cli.main(["krige", str(tmp_path / "c.grid"), "--out", str(tmp_path / "x.grid"),
                     "--config", str(conf)]) == 1


def test_variogram_command(tmp_path):
    run_ok("synth", "--out", str(tmp_path / "d"), "--nx", "16", "--factor", "2", "--n-pairs", "2")
    grids = sorted(str(p) for p in (tmp_path / "d").glob("*_fine.grid"))
    run_ok("variogram", *grids, "--out-csv", str(tmp_path / "v.csv"), "--out-model",
           str(tmp_path / "m.txt"), "--nu", "0.5")
    assert open(tmp_path / "v.csv").readline().strip() == "lag,semivariance,pair_count"
    assert open(tmp_path / "m.txt").readline().strip() == "nu=0.5"


def test_eval_identical_constant_grids(tmp_path):
    save_grid(GeoGrid(np.full((4, 4), 2.0)), tmp_path / "t.grid")
    run_ok("eval", "--truth", str(tmp_path / "t.grid"), "--pred", str(tmp_path / "t.grid"),
           "--out", str(tmp_path / "s.csv"))
    rows = dict(l.split(",")[:2] for l in open(tmp_path / "s.csv").read().splitlines()[1:])
    assert rows == {"rmse": "0.0", "mae": "0.0", "pcc": "undefined"}


def test_error_reporting(tmp_path, capsys):
    assert cli.main(["krige", str(tmp_path / "missing.grid"), "--out", "x"]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("kicdpm: error: FileNotFoundError:") and "\n" not in err
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m"),
                     "--set", "bogus=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
