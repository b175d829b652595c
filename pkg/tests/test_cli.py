import json
import os

import numpy as np
import pytest

from warpfit.cli import main
from warpfit.pipeline import read_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "syn.cfg").write_text("n_speakers = 3\nn_sentences = 8\nn_readings = 20\n")
    assert main(["simulate", "--config", str(root / "syn.cfg"), "--out", str(root / "data"),
                 "--seed", "4"]) == 0
    (root / "run.cfg").write_text(
        "curves = data/curves.csv\ncovariates = data/covariates.csv\nformula = x\n"
        "n_star = 6\nn_amplitude = 2\nn_phase = 1\nmax_evals = 60\n")
    return root


def test_simulate_writes_corpus(workspace):
    for name in ("curves.csv", "covariates.csv", "truth.json"):
        assert (workspace / "data" / name).exists()
    header, rows = read_csv(workspace / "data" / "covariates.csv")
    assert header == ["id", "speaker", "sentence", "class", "x"] and len(rows) == 24


def test_stage_commands_share_the_cache(workspace, capsys):
    cfg, out = str(workspace / "run.cfg"), str(workspace / "art")
    assert main(["smooth", "--config", cfg, "--out", out]) == 0
    assert main(["register", "--config", cfg, "--out", out, "--method", "pairwise"]) == 0
    assert "cached ['smooth']" in capsys.readouterr().out
    assert main(["transform", "--config", cfg, "--out", out]) == 0
    assert main(["decompose", "--config", cfg, "--out", out, "--process", "amplitude"]) == 0
    text = capsys.readouterr().out
    assert "amplitude: 2 component(s) selected" in text and "phase:" not in text
    assert main(["fit", "--config", cfg, "--out", out]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["components"] == ["wFPC1", "wFPC2", "sFPC1", "duration"]
    assert main(["run", "--config", cfg, "--out", out]) == 0
    assert "ran ['reconstruct']" in capsys.readouterr().out
    assert (workspace / "art" / "reconstruction.csv").exists()


def test_reconstruct_selected_ids(workspace):
    cfg, out = str(workspace / "run.cfg"), str(workspace / "sel")
    assert main(["reconstruct", "--config", cfg, "--out", out, "--ids", "c00000,c00003",
                 "--effects", "speaker"]) == 0
    _, rows = read_csv(os.path.join(out, "reconstruction_selected.csv"))
    assert {r[0] for r in rows} == {"c00000", "c00003"}
    assert main(["reconstruct", "--config", cfg, "--out", out, "--ids", "zzz"]) == 1


def test_fit_formula_file_and_options(workspace):
    (workspace / "formula.txt").write_text("1\n")
    out = str(workspace / "fit1")
    assert main(["fit", "--config", str(workspace / "run.cfg"), "--out", out, "--formula",
                 str(workspace / "formula.txt"), "--scalar-residual", "--max-evals", "30",
                 "--seed", "2"]) == 0
    with open(os.path.join(out, "model.json")) as fh:
        model = json.load(fh)
    assert model["fixed_names"] == ["Intercept"] and model["scalar_residual"] is True
    with open(os.path.join(out, "manifest.json")) as fh:
        assert json.load(fh)["config"]["seed"] == 2


def test_decompose_thresholds(workspace, capsys):
    out = str(workspace / "jnd")
    (workspace / "jnd.cfg").write_text(
        "curves = data/curves.csv\ncovariates = data/covariates.csv\nn_star = 6\n")
    assert main(["decompose", "--config", str(workspace / "jnd.cfg"), "--out", out,
                 "--jnd-amp", "1e9", "--jnd-phase", "1e9", "--metric", "rms"]) == 0
    text = capsys.readouterr().out
    assert "amplitude: 1 component(s)" in text and "phase: 1 component(s)" in text


def test_transform_vectors(tmp_path):
    src = tmp_path / "warps.csv"
    src.write_text("id,h0,h1,h2,h3\nw1,0,0.5,0.75,1\n")
    out = tmp_path / "clr.csv"
    assert main(["transform", "clr", "--input", str(src), "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["id", "s1", "s2", "s3"]
    s = np.array([float(v) for v in rows[0][1:]])
    np.testing.assert_allclose(s, [2 / 3 * np.log(2), -np.log(2) / 3, -np.log(2) / 3], rtol=1e-12)
    back = tmp_path / "h.csv"
    assert main(["transform", "clr-inverse", "--input", str(out), "--out", str(back)]) == 0
    _, rows = read_csv(back)
    np.testing.assert_allclose([float(v) for v in rows[0][1:]], [0, 0.5, 0.75, 1], atol=1e-15)


def test_bad_config_reports_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("curves = x.csv\ngrid_sise = 16\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "grid_sise" in capsys.readouterr().err
