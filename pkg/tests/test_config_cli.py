import json

import numpy as np
import pytest

from specvol import cli, io
from specvol.config import PipelineConfig, config_dict, load_config, parse_config
from specvol.errors import ConfigError

TINY = """
[dataset]
kind = spin
n = 16
n_images = 120
noise_ratio = 1
seed = 3
pixel_size_A = 3.0

[lowres]
size = 8
q = 2

[graph]
k = 8

[specvols]
r = 3
r_values = 2,3

[eval]
n_fsc = 16
reconstruct = 0,5,5
"""


def test_defaults_and_roundtrip():
    cfg = parse_config(TINY)
    assert cfg.dataset.n == 16 and cfg.dataset.pixel_size_A == 3.0
    assert cfg.specvols.solve_for == (2, 3)
    assert cfg.eval.reconstruct == (0, 5, 5)
    assert cfg.graph.kind == "sym-knn" and cfg.graph.sigma_w is None
    d = config_dict(cfg)
    json.dumps(d)
    assert PipelineConfig().specvols.solve_for == (9,)
    g = parse_config("[graph]\nkind = gaussian\nsigma_w = 0.5\nalpha = 1\n").graph
    assert (g.sigma_w, g.alpha) == (0.5, 1.0)


@pytest.mark.parametrize("text", [
    "[dataset]\nbogus = 1\n",
    "[mystery]\na = 1\n",
    "[dataset]\nn = twelve\n",
    "[specvols]\nr = 3\nr_values = 2,4\n",
    "[graph]\nkind = gaussian\n",
    "[graph]\nkind = gaussian\nsigma_w = 1\nalpha = -0.5\n",
    "[lowres]\nsize = 7\n",
    "[dataset]\nnoise_ratio = -1\n",
    "[specvols]\ndiagonal = maybe\n",
    "not an ini file",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[dataset]\nbogus = 1\n")
    assert cli.run(["pipeline", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.run(["pipeline", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    # later stage before earlier ones: missing artifacts
    good = tmp_path / "good.cfg"
    good.write_text(TINY)
    assert cli.run(["embed", "--config", str(good), "--out", str(tmp_path / "e")]) == cli.EXIT_IO
    assert (tmp_path / "e" / "FAILED").exists()
    assert "error" in capsys.readouterr().err


def test_stages_one_by_one_match_pipeline(tmp_path, capsys):
    cfgfile = tmp_path / "tiny.cfg"
    cfgfile.write_text(TINY)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["pipeline", "--config", str(cfgfile), "--out", str(a), "--deterministic"]) == 0
    assert cli.run(["simulate", "--config", str(cfgfile), "--out", str(b), "--deterministic"]) == 0
    assert "sigma2=" in capsys.readouterr().out
    # later stages read the saved configuration
    for stage in ("lowres", "embed", "reconstruct-spectral", "eval"):
        assert cli.run([stage, "--out", str(b), "--deterministic"]) == 0, stage
    for rel in ("lowres/betas.csv", "basis/basis.csv", "spectral/r03/alpha_002.svol",
                "eval/fsc_r02.csv", "eval/summary.json", "recon/x_00005.svol"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert not (a / "timing.json").exists()
    assert sorted(p.name for p in (a / "recon").iterdir()) == ["x_00000.svol", "x_00005.svol"]

    assert cli.run(["reconstruct", "7", "--r", "2", "--out", str(b)]) == 0
    assert capsys.readouterr().out.strip().endswith("x_00007.svol")
    assert io.read_svol(b / "recon" / "x_00007.svol").shape == (16, 16, 16)
    assert cli.run(["reconstruct", "9999", "--out", str(b)]) == cli.EXIT_OTHER
    assert cli.run(["reconstruct", "0", "--r", "5", "--out", str(b)]) == cli.EXIT_IO

    summary = io.read_json(a / "eval" / "summary.json")
    assert set(summary["band_mean_quarter"]) == {"2", "3"}
    cg = io.read_json(a / "spectral" / "cg.json")
    assert all(v["converged"] for v in cg.values())


def test_timing_written_without_deterministic(tmp_path):
    cfgfile = tmp_path / "tiny.cfg"
    cfgfile.write_text(TINY)
    assert cli.run(["pipeline", "--config", str(cfgfile), "--out", str(tmp_path / "t"), "--threads", "1"]) == 0
    timing = io.read_json(tmp_path / "t" / "timing.json")
    assert {"simulate", "mu", "Sigma", "V_q", "beta", "phi", "K", "b", "alpha"} <= set(timing)
    assert all(np.isfinite(v) and v >= 0 for v in timing.values())


def test_seed_override(tmp_path):
    cfgfile = tmp_path / "tiny.cfg"
    cfgfile.write_text(TINY.replace("n_images = 120", "n_images = 4"))
    cli.run(["simulate", "--config", str(cfgfile), "--out", str(tmp_path / "s1")])
    cli.run(["simulate", "--config", str(cfgfile), "--out", str(tmp_path / "s2"), "--seed", "99"])
    m1 = io.read_json(tmp_path / "s1" / "dataset" / "manifest.json")
    m2 = io.read_json(tmp_path / "s2" / "dataset" / "manifest.json")
    assert m1["config"]["seed"] == 3 and m2["config"]["seed"] == 99
    assert m1["crc32"] != m2["crc32"]
