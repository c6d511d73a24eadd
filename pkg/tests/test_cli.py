import json
import math

import numpy as np
import pytest

from coagfrag.cli import (
    ConfigError,
    build_generator,
    build_kernel_pair,
    fmt,
    main,
    parse_boxes,
    parse_config,
    run_scenario,
)


def write_cfg(tmp_path, text, name="scenario.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


MINIMAL_SIMULATE = """
scenario = simulate
seed = 7
ensemble = 4
horizon = 0.25
snapshots_per_unit_time = 8
kernel.coag.family = constant
init.kind = gamma_pp
init.theta = 1.0
init.b = 1.0
"""


class TestParsing:
    def test_minimal_simulate_parses_with_defaults(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_SIMULATE))
        assert cfg.scenario == "simulate"
        assert cfg.get_int("seed") == 7
        assert cfg.get_float("tol.nsigma") == 3.0  # default materialized
        resolved = cfg.resolved()
        assert resolved["schema"] == 1
        assert "tol.quad_abs" in resolved

    def test_parse_error_lists_line_numbers(self, tmp_path):
        bad = "scenario = simulate\nthis has no equals\nseed = 1\nseed = 2\n"
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(write_cfg(tmp_path, bad))
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(write_cfg(tmp_path, "scenario = simulate\nseed=1\nseed=2\n"))

    def test_non_integrable_frag_rejected(self, tmp_path):
        text = MINIMAL_SIMULATE + (
            "kernel.frag.family = product_power\n"
            "kernel.frag.a = -1.0\nkernel.frag.b = 1.0\nkernel.frag.c = 2.0\n"
        )
        with pytest.raises(ConfigError, match="integrability condition"):
            parse_config(write_cfg(tmp_path, text))

    def test_meanfield_requires_moment_declared_measure(self, tmp_path):
        text = """
scenario = meanfield
kernel.coag.family = constant
meanfield.boxes = 0.5:1.0
meanfield.N_values = 10
"""
        with pytest.raises(ConfigError, match="moment condition"):
            parse_config(write_cfg(tmp_path, text))

    def test_mismatched_reversibility_pair_rejected(self, tmp_path):
        text = """
scenario = reversibility
kernel.coag.family = constant
generator.form = balanced
generator.theta = 1.0
init.kind = pd
init.theta = 1.0
"""
        with pytest.raises(ConfigError, match="reversible for initial laws"):
            parse_config(write_cfg(tmp_path, text))

    def test_unknown_scenario(self, tmp_path):
        with pytest.raises(ConfigError, match="scenario must be one of"):
            parse_config(write_cfg(tmp_path, "scenario = frobnicate\n"))

    def test_parse_boxes(self):
        assert parse_boxes("0.5:1.5") == [((0.5, 1.5),)]
        assert parse_boxes("0.5:1.5,0.2:0.8; 1:2") == [
            ((0.5, 1.5), (0.2, 0.8)),
            ((1.0, 2.0),),
        ]


class TestDeterminism:
    def test_same_config_same_checksums(self, tmp_path):
        cfgfile = write_cfg(tmp_path, MINIMAL_SIMULATE)
        man1 = run_scenario(parse_config(cfgfile), tmp_path / "out1")
        man2 = run_scenario(parse_config(cfgfile), tmp_path / "out2")
        assert man1["outputs"] == man2["outputs"]
        assert man1["status"] == "pass"

    def test_threads_do_not_change_outputs(self, tmp_path):
        cfgfile = write_cfg(tmp_path, MINIMAL_SIMULATE)
        cfg1 = parse_config(cfgfile)
        cfg2 = parse_config(cfgfile)
        cfg2.raw["threads"] = 2
        man1 = run_scenario(cfg1, tmp_path / "o1")
        man2 = run_scenario(cfg2, tmp_path / "o2")
        assert man1["outputs"] == man2["outputs"]


class TestScenarios:
    def test_correlate_pd_analytic(self, tmp_path):
        text = """
scenario = correlate
seed = 11
ensemble = 4000
horizon = 0
correlate.time = 0
correlate.k = 1
correlate.edges = 0.3,0.5,0.7
kernel.coag.family = constant
init.kind = pd
init.theta = 1.0
"""
        man = run_scenario(parse_config(write_cfg(tmp_path, text)), tmp_path / "out")
        assert man["status"] == "pass"
        lines = (tmp_path / "out" / "correlation.csv").read_text().splitlines()
        assert lines[0] == "cell_0,value,stderr,analytic,within"
        assert len(lines) == 3

    def test_hierarchy_rows_schema(self, tmp_path):
        text = """
scenario = hierarchy
seed = 13
ensemble = 300
horizon = 0.25
snapshots_per_unit_time = 32
kernel.coag.family = constant
generator.form = full
init.kind = gamma_pp
init.theta = 2.0
init.b = 1.0
hierarchy.boxes = 0.5:1.5; 0.4:0.9,0.6:1.2
hierarchy.times = 0.125,0.25
"""
        man = run_scenario(parse_config(write_cfg(tmp_path, text)), tmp_path / "out")
        rows = (tmp_path / "out" / "hierarchy.csv").read_text().splitlines()
        # one row per (box, t) pair: 2 boxes x 2 times + header
        assert len(rows) == 5
        assert rows[0].startswith("k,box,time,lhs,lhs_se,I1,I2,I3,I4,I5,I6")
        assert man["status"] == "pass"

    def test_reversibility_pass_and_fail(self, tmp_path):
        ok_text = """
scenario = reversibility
seed = 17
ensemble = 800
kernel.coag.family = constant
generator.form = simplex_weighted
generator.theta = 1.0
init.kind = pd
init.theta = 1.0
reversibility.times = 0.0,0.5
"""
        man = run_scenario(parse_config(write_cfg(tmp_path, ok_text)), tmp_path / "ok")
        assert man["status"] == "pass"

        drift_text = ok_text.replace("init.theta = 1.0", "init.theta = 4.0").replace(
            "generator.theta = 1.0\n", "generator.theta = 1.0\ninit.force = 1\n"
        )
        # theta mismatch is rejected at config time; to observe a drifting
        # run we bypass validation by matching thetas but starting far from
        # stationarity via a tilted law with tiny threshold
        drift_text = """
scenario = reversibility
seed = 19
ensemble = 800
kernel.coag.family = constant
generator.form = simplex_weighted
generator.theta = 1.0
generator.phi.threshold = 0.2
init.kind = tilted_pd
init.theta = 1.0
init.s = 0.2
reversibility.times = 0.0,1.0
"""
        man2 = run_scenario(
            parse_config(write_cfg(tmp_path, drift_text, "d.cfg")), tmp_path / "d"
        )
        assert man2["status"] == "pass"  # matched tilted pair is stationary

        mismatch = drift_text.replace("init.s = 0.2", "init.s = 0.2\n")
        cfg = parse_config(write_cfg(tmp_path, mismatch, "m.cfg"))
        cfg.raw["generator.phi.threshold"] = 0.9  # bypass config-time match
        cfg.raw["init.s"] = 0.2
        man3 = run_scenario(cfg, tmp_path / "m")
        assert man3["status"] == "fail"

    def test_moments_and_export_round_trip(self, tmp_path):
        text = """
scenario = moments
moments.n_max = 3
moments.N = 4
init.c0.kind = uniform
init.c0.lo = 0.2
init.c0.hi = 1.0
init.c0.total = 2.0
"""
        man = run_scenario(parse_config(write_cfg(tmp_path, text)), tmp_path / "out")
        assert man["status"] == "pass"
        rows = (tmp_path / "out" / "moments.csv").read_text().splitlines()[1:]
        vals = [float(r.split(",")[2]) for r in rows]
        # round trip at 17 significant digits is exact
        assert [float(fmt(v)) for v in vals] == vals

    def test_manifest_records_tolerances_and_seed(self, tmp_path):
        cfgfile = write_cfg(tmp_path, MINIMAL_SIMULATE)
        man = run_scenario(parse_config(cfgfile), tmp_path / "out")
        assert man["seed"] == 7
        assert "tol.nsigma" in man["config"]
        assert "tol.quad_abs" in man["config"]
        blob = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert blob["status"] == "pass"
        assert set(blob["outputs"]) == {"snapshots.csv", "summary.json", "events.jsonl"}
        # JSONL event-log lines parse independently
        for line in (tmp_path / "out" / "events.jsonl").read_text().splitlines():
            rec = json.loads(line)
            assert rec["kind"] in ("coag", "frag")


class TestMain:
    def test_exit_codes(self, tmp_path, capsys):
        cfgfile = write_cfg(tmp_path, MINIMAL_SIMULATE)
        rc = main(
            ["simulate", "--config", str(cfgfile), "--out", str(tmp_path / "o")]
        )
        assert rc == 0
        rc = main(
            ["correlate", "--config", str(cfgfile), "--out", str(tmp_path / "o2")]
        )
        assert rc == 2  # command/scenario mismatch
        bad = write_cfg(tmp_path, "scenario = simulate\nkernel.coag.family = nope\n", "b.cfg")
        rc = main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o3")])
        assert rc == 2

    def test_seed_override_changes_outputs(self, tmp_path):
        cfgfile = write_cfg(tmp_path, MINIMAL_SIMULATE)
        main(["simulate", "--config", str(cfgfile), "--out", str(tmp_path / "a")])
        main(
            [
                "simulate",
                "--config",
                str(cfgfile),
                "--seed",
                "123",
                "--out",
                str(tmp_path / "b"),
            ]
        )
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["outputs"]["snapshots.csv"] != mb["outputs"]["snapshots.csv"]
