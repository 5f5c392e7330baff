import csv
import json
import warnings

import numpy as np
import pytest

from jumplab import estimate as est
from jumplab import grid as gr
from jumplab.cli import EXIT_CONFIG, EXIT_OK, EXIT_REFUSAL, main
from jumplab.experiments import Context
from jumplab.fields import Potential
from jumplab.scenario import from_dict

SMALL = """
name = "{name}"
potential = "{q}"
n_paths = {n}
n_paths_fine = {nf}
mesh_cells = 5
mesh_pair = [5, 10]
probe_points = [[0.0, 0.0, 0.0], [0.1, 0.1, 0.0]]
experiments = {exps}
seed = 3
"""


def write(tmp_path, name="s", q="zero", n=300, nf=1200, exps='["gauge"]', extra=""):
    p = tmp_path / f"{name}.toml"
    p.write_text(SMALL.format(name=name, q=q, n=n, nf=nf, exps=exps) + extra)
    return p


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_zero_potential_gauge_csv(tmp_path):
    f = write(tmp_path)
    assert main(["run", str(f), "--out", str(tmp_path / "o")]) == EXIT_OK
    r = rows(tmp_path / "o" / "s" / "gauge.csv")
    assert len(r) == 2
    assert all(float(x["mc"]) == 1.0 and float(x["grid"]) == 1.0 for x in r)
    doc = json.loads((tmp_path / "o" / "s" / "summary.json").read_text())
    assert doc["exit_status"] == 0 and doc["seed"] == 3


def test_brownian_exit_time_summary(tmp_path):
    text = """
name = "bm"
preset = "brownian-diagnostic"
radius = 1.0
paper_mode = false
n_paths = 20000
probe_points = [[0.0, 0.0, 0.0]]
experiments = ["exit-time"]
"""
    f = tmp_path / "bm.toml"
    f.write_text(text)
    assert main(["run", str(f), "--out", str(tmp_path)]) == EXIT_OK
    s = json.loads((tmp_path / "bm" / "summary.json").read_text())
    t = s["experiments"]["exit-time"]["tables"]["exit-time"]
    assert abs(t["value_at_center"] - 1 / 3) <= 3 * t["stderr_at_center"] + 0.005
    # same file with paper mode forced is refused without --diagnostic-ok
    assert main(["run", str(f), "--out", str(tmp_path), "--paper-mode"]) == EXIT_CONFIG


def test_run_is_reproducible(tmp_path):
    f = write(tmp_path, q="const:-0.5", exps='["dirichlet", "gauge", "exit-time"]')
    main(["run", str(f), "--out", str(tmp_path / "a")])
    main(["run", str(f), "--out", str(tmp_path / "b"), "--workers", "3"])
    for name in ("dirichlet.csv", "gauge.csv", "exit-time.csv", "summary.json"):
        assert (tmp_path / "a" / "s" / name).read_bytes() == (tmp_path / "b" / "s" / name).read_bytes()
    main(["run", str(f), "--out", str(tmp_path / "c"), "--seed", "4"])
    assert (tmp_path / "a" / "s" / "gauge.csv").read_bytes() != (tmp_path / "c" / "s" / "gauge.csv").read_bytes()


def test_refusal_status(tmp_path, capsys):
    f = write(tmp_path, name="r", q="const:200.0", extra="expect_refusal = true\n")
    assert main(["run", str(f), "--out", str(tmp_path)]) == EXIT_OK
    r = rows(tmp_path / "r" / "gauge.csv")
    assert all(x["grid"] == "NotGaugeable" for x in r)
    g = write(tmp_path, name="r2", q="const:200.0")
    assert main(["run", str(g), "--out", str(tmp_path)]) == EXIT_REFUSAL


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "x"\nwidth = 3\n')
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert "width: unknown key" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["run", str(bad), "--workers", "0"])


def test_green_export_and_report(tmp_path, capsys, monkeypatch):
    f = write(tmp_path, name="g")
    monkeypatch.setenv("JUMPLAB_OUT", str(tmp_path / "env"))
    assert main(["green", str(f), "--text"]) == EXIT_OK
    M, coords, hdr = gr.load_matrix(tmp_path / "env" / "g" / "green.bin")
    assert M.shape[0] == coords.shape[0] and hdr["h"] == 0.1
    assert np.array_equal(gr.load_triplets(tmp_path / "env" / "g" / "green.txt"), M)
    main(["run", str(f)])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "env")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gauge" in out and "status 0" in out
    assert main(["report", str(tmp_path / "nothing")]) == EXIT_CONFIG


def test_zero_potential_harnack_matches_q_free():
    sc = from_dict({"mesh_cells": 5, "mesh_pair": [5, 10], "n_paths": 500, "seed": 2})
    ctx = Context(sc)
    gm = ctx.grid()
    a = gr.harnack_grid(gm, Potential.zero(), ctx.f)
    u = gr.dirichlet_grid(gm, ctx.f)
    v = u[a.cells]
    assert a.ratio == float(v.max() / v.min())
    p = np.zeros(3)
    b = ctx.batch("t", p, potentials=[Potential.zero()])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = est.solve_schrodinger(p, ctx.f, Potential.zero(), ctx.domain, ctx.model, ctx.cfg, batch=b)
    d = est.solve_dirichlet(p, ctx.f, ctx.domain, ctx.model, ctx.cfg, batch=b)
    assert (s.value, s.stderr) == (d.value, d.stderr)


def test_smoke_verify_structural_pass(tmp_path):
    f = write(tmp_path, name="v", q="const:-0.5", n=200, nf=800)
    main(["verify", str(f), "--out", str(tmp_path)])
    s = json.loads((tmp_path / "v" / "verify" / "summary.json").read_text())
    for k in ("green_symmetry", "conservation", "levy_exit_identity", "density_adjacent",
              "density_extrapolated"):
        assert s["verdicts"][f"structural:{k}"] == "PASS"
    for name in ("structural.csv", "stability.csv", "harnack-agreement.csv", "gauge-bounds.csv",
                 "metadata.json"):
        assert (tmp_path / "v" / "verify" / name).exists()
