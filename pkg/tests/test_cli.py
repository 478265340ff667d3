import json
import os
import struct

import numpy as np
import pytest

from doccnet import cli
from doccnet.dataset import ShapeDataset, load_dataset, overfit_specs
from doccnet.geometry import is_watertight
from doccnet.meshio import read_cloud, read_mesh, read_pgm, read_queries


def events(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def config_echo(text):
    return next(e for e in events(text) if e.get("event") == "config")["config"]


# --- argument resolution ------------------------------------------------------

def test_extract_defaults():
    command, cfg = cli.parse_args(["extract", "--field", "sphere", "--tau", "0.5", "--out", "m.obj"])
    assert command == "extract"
    assert (cfg["r0"], cfg["steps"], cfg["tau"], cfg["threads"]) == (32, 2, 0.5, 1)


@pytest.mark.parametrize("tau", ["1.5", "0", "1"])
def test_tau_out_of_range_is_usage_error(tau, capsys):
    assert cli.main(["extract", "--field", "sphere", "--tau", tau, "--out", "m.obj"]) == 2
    assert "tau must be in (0,1)" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path, capsys):
    conf = tmp_path / "run.toml"
    conf.write_text('r0 = 8\nsteps = 1\ntau = 0.3\nfield = "box"\n')
    out = tmp_path / "m.obj"
    code = cli.main(["extract", "--config", str(conf), "--tau", "0.6", "--out", str(out)])
    assert code == 0
    echo = config_echo(capsys.readouterr().err)
    assert echo["tau"] == 0.6 and echo["r0"] == 8 and echo["field"] == "box"
    assert is_watertight(read_mesh(out))


def test_config_sections_per_command(tmp_path):
    conf = tmp_path / "run.toml"
    conf.write_text('[extract]\nfield = "torus"\nr0 = 8\n')
    _, cfg = cli.parse_args(["extract", "--config", str(conf), "--out", "x.obj"])
    assert cfg["field"] == "torus" and cfg["r0"] == 8


@pytest.mark.parametrize("body, fragment", [
    ("bogus = 1\n", "unknown config key 'bogus'"),
    ('r0 = "many"\n', "'r0'"),
    ("tau = 2.0\n", "tau must be in (0,1)"),
    ("r0 = [\n", "run.toml"),
])
def test_bad_config_is_usage_error(tmp_path, capsys, body, fragment):
    conf = tmp_path / "run.toml"
    conf.write_text(body)
    assert cli.main(["extract", "--config", str(conf), "--field", "sphere", "--out", "m.obj"]) == 2
    assert fragment in capsys.readouterr().err


@pytest.mark.parametrize("argv, fragment", [
    (["extract", "--field", "sphere"], "--out"),
    (["extract", "--field", "cone", "--out", "m.obj"], "--field"),
    (["extract", "--field", "sphere", "--out", "m.obj", "--r0", "abc"], "--r0"),
    (["extract", "--field", "sphere", "--out", "m.obj", "--wat"], "--wat"),
    (["train", "--stage", "3", "--data", ".", "--out", "c"], "--stage"),
    ([], "command"),
])
def test_usage_errors_name_the_offender(argv, fragment, capsys):
    assert cli.main(argv) == 2
    assert fragment in capsys.readouterr().err


def test_seed_falls_back_to_environment(monkeypatch):
    monkeypatch.setenv("OCFK_SEED", "42")
    _, cfg = cli.parse_args(["mesh2pc", "--in", __file__, "--out", "c.xyz"])
    assert cfg["seed"] == 42
    _, cfg = cli.parse_args(["mesh2pc", "--in", __file__, "--out", "c.xyz", "--seed", "3"])
    assert cfg["seed"] == 3
    monkeypatch.setenv("OCFK_SEED", "x")
    with pytest.raises(cli.UsageError, match="OCFK_SEED"):
        cli.parse_args(["mesh2pc", "--in", __file__, "--out", "c.xyz"])


def test_reconstruct_missing_checkpoint_exits_2(tmp_path, capsys):
    img = tmp_path / "a.pgm"
    img.write_bytes(b"P5\n2 2\n255\n\0\0\0\0")
    code = cli.main(["reconstruct", "--mode", "occnet", "--image", str(img),
                     "--ckpt1", str(tmp_path / "missing.ocfk"), "--out", str(tmp_path / "m.obj")])
    assert code == 2
    assert "missing.ocfk" in capsys.readouterr().err
    assert not (tmp_path / "m.obj").exists()


# --- commands -------------------------------------------------------------------

def test_eval_open_mesh_exits_1_with_edge_count(tmp_path, capsys):
    obj = tmp_path / "open.obj"
    obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\n")
    spec = tmp_path / "gt.json"
    spec.write_text(json.dumps(overfit_specs()[0].to_dict()))
    out = tmp_path / "report.json"
    code = cli.main(["eval", "--pred", str(obj), "--gt", str(spec), "--out", str(out)])
    assert code == 1
    err = capsys.readouterr().err
    assert "NotWatertightError" in err and "4 open edges" in err
    assert not out.exists()


def test_mesh2pc_and_extract(tmp_path):
    mesh = tmp_path / "s.obj"
    assert cli.main(["extract", "--field", "sphere", "--r0", "16", "--steps", "1", "--out", str(mesh)]) == 0
    cloud = tmp_path / "c.xyz"
    assert cli.main(["mesh2pc", "--in", str(mesh), "--n", "300", "--seed", "1", "--out", str(cloud)]) == 0
    pts = read_cloud(cloud).points
    assert pts.shape == (300, 3)
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.4, atol=0.01)


def test_gen_data_layout(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["gen-data", "--kinds", "sphere,torus", "--count", "2", "--queries", "64",
                     "--seed", "5", "--out", str(out)]) == 0
    index = json.loads((out / "spec.json").read_text())
    assert [e["spec"]["kind"] for e in index["samples"]] == ["sphere", "sphere", "torus", "torus"]
    raw = (out / "sample_0000.ocqd").read_bytes()
    assert raw[:4] == b"OCQD" and struct.unpack_from("<IQ", raw, 4) == (1, 64)
    assert len(raw) == 16 + 64 * 32
    assert (out / "sample_0000.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    data = load_dataset(out)
    pts, labels = read_queries(out / "sample_0003.ocqd")
    np.testing.assert_array_equal(data[3].points, pts)
    assert set(np.unique(labels)) <= {0.0, 1.0}
    assert data.clouds().shape == (4, 300, 3)
    np.testing.assert_array_equal(read_pgm(out / "sample_0001.pgm"), data[1].silhouette)
    # same seed, same bytes
    again = tmp_path / "e"
    cli.main(["gen-data", "--kinds", "sphere,torus", "--count", "2", "--queries", "64",
              "--seed", "5", "--out", str(again)])
    for name in os.listdir(out):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_gen_data_cloud_bank_round_trip(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["gen-data", "--overfit", "--queries", "32", "--clouds", "3",
                     "--seed", "2", "--out", str(out)]) == 0
    assert (out / "sample_0004_c02.xyz").exists() and not (out / "sample_0004_c03.xyz").exists()
    banks = load_dataset(out).cloud_banks()
    assert banks.shape == (5, 3, 300, 3)
    fresh = ShapeDataset.from_specs(overfit_specs(), seed=2, queries=32, n_clouds=3)
    np.testing.assert_allclose(banks, fresh.cloud_banks(), rtol=1e-9, atol=1e-12)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen-data -> train 1 -> train 2 on the overfit shapes with small decoders."""
    d = tmp_path_factory.mktemp("run")
    assert cli.main(["gen-data", "--overfit", "--queries", "512", "--out", str(d / "data")]) == 0
    for stage in (1, 2):
        assert cli.main(["train", "--stage", str(stage), "--data", str(d / "data"),
                         "--out", str(d / f"s{stage}.ocfk"), "--steps", "150", "--lr", "3e-3",
                         "--points-per-sample", "256", "--eval-every", "50", "--hidden", "16",
                         "--blocks", "1", "--log", str(d / f"train{stage}.jsonl")]) == 0
    return d


def test_train_log_has_one_record_per_evaluation(workdir):
    recs = events((workdir / "train1.jsonl").read_text())
    assert recs[0]["event"] == "config" and recs[0]["config"]["stage"] == 1
    evals = [r for r in recs if "val_acc" in r]
    assert [r["step"] for r in evals] == [50, 100, 150]
    assert set(evals[0]) == {"step", "train_loss", "val_loss", "val_acc"}


def test_happy_path_pipeline(workdir, capsys):
    d = workdir
    inter = d / "inter"
    code = cli.main(["reconstruct", "--mode", "doccnet", "--image", str(d / "data/sample_0000.pgm"),
                     "--ckpt1", str(d / "s1.ocfk"), "--ckpt2", str(d / "s2.ocfk"), "--r0", "16",
                     "--steps", "1", "--out", str(d / "final.obj"), "--dump-intermediates", str(inter)])
    assert code == 0
    assert read_cloud(inter / "cloud.xyz").points.shape == (300, 3)
    assert is_watertight(read_mesh(inter / "stage1.obj"))
    capsys.readouterr()
    code = cli.main(["eval", "--pred", str(d / "final.obj"), "--gt", str(d / "data/spec.json"),
                     "--gt-index", "0", "--samples", "10000", "--points", "1000",
                     "--out", str(d / "report.json")])
    assert code == 0
    report = json.loads((d / "report.json").read_text())
    assert set(report) == {"iou", "chamfer_l1", "normal_consistency", "n_samples", "seed"}
    assert json.loads(capsys.readouterr().out) == report
    assert 0.0 <= report["iou"] <= 1.0


def test_reconstruct_is_reproducible_from_echoed_config(workdir, tmp_path, capsys):
    d = workdir
    argv = ["reconstruct", "--mode", "occnet", "--image", str(d / "data/sample_0002.pgm"),
            "--ckpt1", str(d / "s1.ocfk"), "--r0", "16", "--steps", "1", "--out", str(tmp_path / "a.obj")]
    assert cli.main(argv) == 0
    echo = config_echo(capsys.readouterr().err)
    echo.update(out=str(tmp_path / "b.obj"), config=None)
    conf = tmp_path / "echo.toml"
    conf.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in echo.items() if v is not None))
    assert cli.main(["reconstruct", "--config", str(conf)]) == 0
    assert (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes()


def test_extract_from_checkpoint_field(workdir, tmp_path):
    d = workdir
    out = tmp_path / "f.obj"
    field = f"checkpoint:{d / 's2.ocfk'}:{d / 'data/sample_0000.xyz'}"
    assert cli.main(["extract", "--field", field, "--r0", "16", "--steps", "1", "--out", str(out)]) == 0
    assert is_watertight(read_mesh(out))


def test_empty_stage1_is_domain_error_without_output(workdir, tmp_path, capsys):
    d = workdir
    blank = tmp_path / "init.ocfk"
    assert cli.main(["train", "--stage", "1", "--data", str(d / "data"), "--out", str(blank),
                     "--steps", "0", "--hidden", "16", "--blocks", "1"]) == 0
    out = tmp_path / "x.obj"
    code = cli.main(["reconstruct", "--image", str(d / "data/sample_0000.pgm"), "--ckpt1", str(blank),
                     "--ckpt2", str(d / "s2.ocfk"), "--r0", "16", "--steps", "1", "--out", str(out)])
    assert code == 1
    assert "stage-1 produced no surface" in capsys.readouterr().err
    assert sorted(os.listdir(tmp_path)) == ["init.ocfk"]


def test_corrupt_checkpoint_is_domain_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ocfk"
    bad.write_bytes(b"NOPE" + bytes(20))
    code = cli.main(["reconstruct", "--mode", "occnet", "--image",
                     str(workdir / "data/sample_0000.pgm"), "--ckpt1", str(bad),
                     "--out", str(tmp_path / "m.obj")])
    assert code == 1
    assert "CheckpointError" in capsys.readouterr().err
