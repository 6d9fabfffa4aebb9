import csv
import json

import numpy as np
import pytest

from fraclame import cli
from fraclame.config import ConfigError, RunConfig, field_from_spec, shipped_config


def test_defaults_merge_and_hash():
    a = RunConfig.from_dict({"grid": {"N": 16}})
    b = RunConfig.from_dict({})
    assert a.raw == b.raw and a.hash == b.hash
    c = RunConfig.from_dict({"s": 0.6})
    assert c.raw["grid"]["L"] == 1.0 and c.hash != b.hash
    assert b.with_seed(7).seed == 7 and b.with_seed(7).hash != b.hash
    assert b.with_seed(None) is b


@pytest.mark.parametrize("bad", [{"gird": {}}, {"s": 1.2}, {"grid": {"N": 15}},
                                 {"regions": {"omega": {"center": [0, 0, 0]}}},
                                 {"parameters": {"p1": {"lambda0": 0.5, "mu0": -1.0, "lambda": [1.0], "mu": [1.0]}}}])
def test_rejects_malformed_configs(bad):
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.from_dict(bad).lame("p1", np.ones((16,) * 3, bool))


def test_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")
    with pytest.raises(ConfigError):
        shipped_config("no-such-config")


def test_field_specs(cfg):
    g = cfg.grid()
    om = np.ones(g.shape, bool)
    f = field_from_spec([1.5, {"type": "bump", "center": [0, 0, 0], "radius": 0.3, "amplitude": 2.0}], g, om)
    assert f[8, 8, 8] == pytest.approx(1.5 + 2.0 * np.exp(-1.0))
    assert f[0, 0, 0] == 1.5
    aff = field_from_spec({"type": "affine", "gradient": [1, 0, 0], "offset": 0.0}, g, om)
    assert aff.min() == 0.0 and aff.max() == pytest.approx(g.axis[-1])
    with pytest.raises(ConfigError):
        field_from_spec({"type": "spline"}, g, om)
    with pytest.raises(ConfigError):
        field_from_spec([{"value": 1}], g, om)


@pytest.mark.parametrize("name", ["default", "planted_bump", "planted_constants", "nonlinear_planted",
                                  "nonlinear_constants", "obstacle"])
def test_shipped_configs_load(name):
    cfg = RunConfig.load(shipped_config(name))
    part = cfg.partition()
    p = cfg.lame("p2", part.omega)
    assert np.all(p.lambda_field[~part.omega] == 0)


def test_cli_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grid": {"N": 7}}))
    assert cli.run(["forward", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "config_error" and report["exit_code"] == 2
    assert cli.run(["forward", "--config", "shipped:default", "--out", str(tmp_path / "o"),
                    "--threads", "0"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit):
        cli.run(["frobnicate", "--config", "shipped:default", "--out", str(tmp_path)])


def test_cli_forward_and_dtn(tmp_path):
    assert cli.run(["forward", "--config", "shipped:default", "--out", str(tmp_path / "f")]) == 0
    rep = json.loads((tmp_path / "f" / "report.json").read_text())
    assert rep["status"] == "ok" and rep["result"]["energy"] > 0
    assert cli.run(["dtn", "--config", "shipped:default", "--out", str(tmp_path / "d")]) == 0
    with open(tmp_path / "d" / "gaps.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == cli.CSV_COLUMNS
    assert len(rows) > 1 and all(float(r[2]) == 0.0 for r in rows[1:])
    for name in ("moments", "constants", "timings"):
        assert (tmp_path / "d" / (name + (".json" if name == "timings" else ".csv"))).exists()


def test_cli_seed_is_recorded(tmp_path):
    assert cli.run(["forward", "--config", "shipped:default", "--out", str(tmp_path), "--seed", "42"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["seed"] == 42
    assert cli.run(["forward", "--config", "shipped:default", "--out", str(tmp_path), "--seed", "-1"]) == 2
