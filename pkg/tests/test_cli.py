import json

import numpy as np
import pytest

from currentglm.cli import config_hash, load_config, run
from currentglm.errors import ConfigError
from currentglm.ordreg import read_dataset, read_model

SMALL_CFG = """[study]
n_subjects = 12
mesh_resolution = 1
model = fixed
r_kernel = 3
r_covariance = 3
r_mixed = 3
truth_r = 3
gap = 250
gaps = 400, 250
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "study.cfg"
    cfg.write_text(SMALL_CFG)
    out = root / "out"
    base = ["--config", str(cfg), "--out", str(out), "--jobs", "1"]
    for cmd in ("gen-corpus", "project", "basis", "features", "fit", "cv", "report"):
        assert run([cmd, *base]) == 0, cmd
    return root, out, base


def test_pipeline_outputs(workspace):
    _, out, _ = workspace
    assert (out / "corpus/manifest.json").is_file()
    assert len(list((out / "corpus/meshes").glob("*.off"))) == 12
    assert len(list((out / "currents").glob("*.cur"))) == 12
    for kind in ("kernel", "covariance", "mixed"):
        assert (out / f"bases/{kind}.npz").is_file()
        d = read_dataset(out / f"features/{kind}.tsv")
        assert d.r == 3
        m = read_model(out / f"models/{kind}.json")
        assert m.functional_coefs.shape == (3,)
        rep = json.loads((out / f"cv/{kind}.json").read_text())
        assert all(f["leakage_ok"] for f in rep["folds"])
    for fig in ("confusion", "spectra", "reconstruction", "delta_sweep"):
        png = out / f"report/figures/{fig}.png"
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = (out / "report/summary.tsv").read_text().splitlines()
    assert rows[0] == "section\tkey\tvalue"
    assert any(r.startswith("agreement\tmixed\t") for r in rows)
    summary = json.loads((out / "report/summary.json").read_text())
    assert [s["gap"] for s in summary["delta_sweep"]] == [400.0, 250.0]


def test_manifest_contents(workspace):
    _, out, _ = workspace
    man = json.loads((out / "manifests/cv.json").read_text())
    assert man["master_seed"] == 20240601
    assert man["config"]["n_subjects"] == 12
    assert set(man["versions"]) >= {"currentglm", "numpy", "scipy", "python"}
    assert "cv/kernel.json" in man["outputs"]


def test_currents_are_reused(workspace):
    _, out, base = workspace
    p = out / "currents/S001.cur"
    before = p.stat().st_mtime_ns
    assert run(["project", *base]) == 0
    assert p.stat().st_mtime_ns == before


def test_cv_rerun_is_byte_identical(workspace):
    _, out, base = workspace
    before = (out / "cv/mixed.json").read_bytes()
    assert run(["cv", *base, "--kind", "mixed"]) == 0
    assert (out / "cv/mixed.json").read_bytes() == before


def test_jobs_do_not_change_results(workspace, tmp_path):
    root, out, _ = workspace
    other = tmp_path / "o2"
    args = ["--config", str(root / "study.cfg"), "--out", str(other)]
    assert run(["gen-corpus", *args]) == 0
    assert run(["cv", *args, "--kind", "covariance", "--jobs", "2"]) == 0
    assert (other / "cv/covariance.json").read_bytes() == (out / "cv/covariance.json").read_bytes()


def test_missing_config(tmp_path, capsys):
    path = tmp_path / "nope.cfg"
    assert run(["cv", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert str(path) in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[study]\nbogus = 1\n")
    assert run(["cv", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "[bogus]" in capsys.readouterr().err


def test_bad_override(tmp_path, capsys):
    assert run(["cv", "--set", "gap=abc", "--out", str(tmp_path)]) == 1
    assert "[gap]" in capsys.readouterr().err


def test_mixed_basis_single_subject(tmp_path, capsys):
    args = ["--set", "n_subjects=1", "--set", "mesh_resolution=1", "--out", str(tmp_path)]
    assert run(["gen-corpus", *args]) == 0
    assert run(["basis", *args, "--kind", "mixed"]) == 2
    assert "sample size n ≥ 2 required" in capsys.readouterr().err


def test_missing_corpus(tmp_path, capsys):
    assert run(["project", "--out", str(tmp_path)]) == 2
    assert "gen-corpus" in capsys.readouterr().err


def test_load_config_types_and_paths(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("[study]\nkinds = kernel, mixed\ncheck_leakage = no\nbandwidth = 300\n"
                   "[paths]\ncorpus = /data/corpus\n")
    c, paths = load_config(cfg, ["r_grid=2,4"])
    assert c.kinds == ("kernel", "mixed") and c.check_leakage is False
    assert c.bandwidth == 300.0 and c.r_grid == (2, 4)
    assert paths == {"corpus": "/data/corpus"}
    with pytest.raises(ConfigError):
        load_config(cfg, ["nokey"])
    assert config_hash(c) == config_hash(load_config(cfg, ["r_grid=2,4", "jobs=7"])[0])


def test_observation_table_matches_truth(workspace):
    _, out, _ = workspace
    truth = json.loads((out / "corpus/truth.json").read_text())
    assert truth["functional_basis"]["kind"] == "kernel"
    assert len(truth["functional_coefs"]) == 3
    lines = (out / "corpus/observations.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["subject", "response", "shirt_size", "sex", "age"]
    y = np.array([int(line.split("\t")[1]) for line in lines[1:]])
    assert set(y) <= {-1, 0, 1}
