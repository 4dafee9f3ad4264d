import json
import warnings

import numpy as np
import pytest
import yaml

from graphlimit.cli import main
from graphlimit.harness import (EXIT_CONFIG, EXIT_OK, ConfigError, ExperimentConfig, fit_loglog, plot, read_csv,
                                run, write_csv)


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.mark.parametrize("doc, msg", [
    ({"experiment": "marginals", "eps": []}, "empty"),
    ({"experiment": "marginals", "eps": [0.01, 0.1]}, "decreasing"),
    ({"experiment": "marginals", "eps": [0.1, -0.1]}, "positive"),
    ({"experiment": "nope", "eps": [0.1]}, "unknown experiment"),
    ({"experiment": "bvp", "colour": 1}, "unknown config keys"),
    ({"experiment": "bvp", "params": {"speed": 1}}, "unknown params"),
    ({"experiment": "marginals", "eps": [0.1], "sim": {"dt_factor": 0.2}}, "dt"),
])
def test_config_validation(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_mapping(doc)


def test_empty_ladder_exits_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"experiment": "compare", "eps": []})
    out = tmp_path / "out"
    assert run(cfg, out) == EXIT_CONFIG
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "config" and err["exit_code"] == EXIT_CONFIG
    assert main(["run", str(cfg), "--out", str(out)]) == EXIT_CONFIG
    assert run(tmp_path / "missing.yaml", out) == EXIT_CONFIG


def test_coefficients_run(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"experiment": "coefficients", "params": {"n": 256}})
    out = tmp_path / "coef"
    assert run(cfg, out) == EXIT_OK
    doc = json.loads((out / "coefficients.json").read_text())
    assert doc["p"][0] == pytest.approx(2 * np.pi, rel=1e-6)
    assert doc["vol_E"] == pytest.approx(3 * np.pi, rel=1e-6)
    assert doc["fbar_O"] == pytest.approx(2 / 9, rel=1e-6)
    edge = doc["edges"][0]
    h = np.array(edge["h"])
    assert np.allclose(edge["abar"], 2 * h + 1, rtol=1e-6, atol=1e-9)
    checks = json.loads((out / "checks.json").read_text())
    assert checks["passed"] and h.size == 257
    man = json.loads((out / "manifest.json").read_text())
    assert {"config", "seed", "versions", "wall_clock_s"} <= set(man)
    header, rows = read_csv(out / "coefficients.csv")
    assert header == ["k", "h", "M", "abar", "fbar"] and len(rows) == 257
    assert (out / "coefficients.csv").read_bytes().count(b"\r\n") == 258


def test_bvp_run(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"experiment": "bvp", "params": {"n": 256, "fd_n": 256}})
    assert run(cfg, tmp_path / "bvp") == EXIT_OK
    assert "PASS gluing" in (tmp_path / "bvp" / "summary.txt").read_text()


def test_small_simulation_run_is_byte_reproducible(tmp_path, capsys):
    doc = {"experiment": "marginals", "eps": [0.1, 0.05], "sim": {"T": 0.2, "n_paths": 300, "seed": 7,
                                                                 "block_size": 64},
           "params": {"n_cells": 64}, "output": {"plots": False}}
    cfg = write_config(tmp_path / "c.yaml", doc)
    run(cfg, tmp_path / "a", workers=1)
    run(cfg, tmp_path / "b", workers=2)
    for name in ("marginals.csv", "marginal_bins.csv", "checks.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header, rows = read_csv(tmp_path / "a" / "marginals.csv")
    assert header[-2:] == ["seed", "rng"] and all(r["seed"] == "7" for r in rows)


def test_fit_loglog():
    x = np.array([1e-2, 3e-3, 1e-3])
    s, c = fit_loglog(x, 2 * x**0.75)
    assert s == pytest.approx(0.75) and c == pytest.approx(np.log(2))
    assert np.isnan(fit_loglog([1.0], [1.0])[0])


def test_plot_with_fit(tmp_path):
    x = np.array([1e-2, 3e-3, 1e-3])
    write_csv(tmp_path / "t.csv", ["eps", "mean"], list(zip(x, 5 * x**0.8)))
    spec = {"x": "eps", "y": "mean", "logx": True, "logy": True, "fit": True}
    out, slope = plot(tmp_path / "t.csv", spec)
    assert slope == pytest.approx(0.8)
    svg = out.read_text()
    assert svg.startswith("<?xml") and "fit slope 0.800" in svg
    out2, _ = plot(tmp_path / "t.csv", dict(spec, out=str(tmp_path / "t2.svg")))
    assert out.read_bytes() == out2.read_bytes()


def test_plot_single_row_warns(tmp_path):
    write_csv(tmp_path / "one.csv", ["eps", "mean"], [(0.1, 0.5)])
    with pytest.warns(UserWarning, match="single"):
        _, slope = plot(tmp_path / "one.csv", {"x": "eps", "y": "mean", "fit": True})
    assert slope is None


def test_plot_errors(tmp_path):
    write_csv(tmp_path / "t.csv", ["eps", "mean"], [(0.1, 0.5), (0.01, 0.2)])
    with pytest.raises(KeyError):
        plot(tmp_path / "t.csv", {"x": "eps", "y": "median"})
    with pytest.raises(FileNotFoundError):
        plot(tmp_path / "none.csv", {"x": "eps", "y": "mean"})


def test_plot_cli(tmp_path, capsys):
    write_csv(tmp_path / "t.csv", ["eps", "mean"], [(0.1, 0.5), (0.01, 0.2)])
    spec = tmp_path / "spec.yaml"
    spec.write_text("x: eps\ny: mean\nlogx: true\nlogy: true\nfit: true\n")
    assert main(["plot", str(tmp_path / "t.csv"), "--spec", str(spec), "--out", str(tmp_path / "p.svg")]) == 0
    assert (tmp_path / "p.svg").is_file()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["plot", str(tmp_path / "none.csv"), "--spec", str(spec)]) != 0
