"""Config handling, grid expansion, artifacts, and exit codes."""
import csv
import json
import logging
import math
import os

import numpy as np
import pytest

import mpgps_sim.cli as cli
import mpgps_sim.engine as engine_mod
from mpgps_sim import scheduling
from mpgps_sim.scheduling import ScheduleDecision


def write_cfg(tmp_path, name="scenario.json", **sections):
    path = tmp_path / name
    path.write_text(json.dumps(sections))
    return str(path)


def tiny_sections(**overrides):
    sections = {
        "system": {"K": 2, "N": 8, "L": 64, "r": 2, "seed": 5},
        "traffic": {"rate_bps": 4000.0},
        "run": {"horizon_symbols": 8000, "error_free": True},
    }
    for key, val in overrides.items():
        sections.setdefault(key, {}).update(val)
    return sections


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestAxisParsing:
    def test_range(self):
        assert cli.parse_axis_values("1:6") == [1, 2, 3, 4, 5, 6]

    def test_range_with_step(self):
        assert cli.parse_axis_values("1:6:2") == [1, 3, 5]

    def test_comma_list(self):
        assert cli.parse_axis_values("2,4,6") == [2, 4, 6]

    def test_float_axis(self):
        assert cli.parse_axis_values("-6,-3,0", integer=False) == [-6.0, -3.0, 0.0]

    @pytest.mark.parametrize("bad", ["6:1", "1:2:0", "a,b", "::", "1:"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(cli.ConfigError):
            cli.parse_axis_values(bad)


class TestConfigLoading:
    def test_schema_rejects_unknown_keys(self, tmp_path):
        path = write_cfg(tmp_path, plotting={"dpi": 300})
        with pytest.raises(cli.ConfigError):
            cli.load_config(path)

    def test_schema_rejects_bad_types(self, tmp_path):
        sections = tiny_sections()
        sections["system"]["K"] = 0
        path = write_cfg(tmp_path, **sections)
        with pytest.raises(cli.ConfigError):
            cli.load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            cli.load_config(str(tmp_path / "nope.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(cli.ConfigError):
            cli.load_config(str(path))

    def test_good_config_loads(self, tmp_path):
        path = write_cfg(tmp_path, **tiny_sections())
        cfg = cli.load_config(path)
        assert cfg["system"]["K"] == 2


def parse_args(argv):
    return cli.make_parser().parse_args(argv)


class TestPrecedence:
    def test_env_seed_beats_config(self, tmp_path, monkeypatch):
        path = write_cfg(tmp_path, **tiny_sections())
        monkeypatch.setenv("MPGPS_SIM_SEED", "9")
        scn = cli.build_scenario(cli.load_config(path), parse_args(["run", path]))
        assert scn.system["seed"] == 9

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        path = write_cfg(tmp_path, **tiny_sections())
        monkeypatch.setenv("MPGPS_SIM_SEED", "9")
        scn = cli.build_scenario(cli.load_config(path),
                                 parse_args(["run", path, "--seed", "3"]))
        assert scn.system["seed"] == 3

    def test_env_out_dir(self, tmp_path, monkeypatch):
        path = write_cfg(tmp_path, **tiny_sections())
        monkeypatch.setenv("MPGPS_SIM_OUT", str(tmp_path / "envout"))
        scn = cli.build_scenario(cli.load_config(path), parse_args(["run", path]))
        assert scn.out == str(tmp_path / "envout")

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        path = write_cfg(tmp_path, **tiny_sections())
        monkeypatch.setenv("MPGPS_SIM_SEED", "not-a-number")
        with pytest.raises(cli.ConfigError):
            cli.build_scenario(cli.load_config(path), parse_args(["run", path]))

    def test_deadline_inf_token(self, tmp_path):
        sections = tiny_sections()
        sections["system"]["deadline"] = "inf"
        path = write_cfg(tmp_path, **sections)
        scn = cli.build_scenario(cli.load_config(path), parse_args(["run", path]))
        assert scn.system["deadline"] == math.inf


class TestGridExpansion:
    def scenario(self, tmp_path, **sections):
        path = write_cfg(tmp_path, **sections)
        return cli.build_scenario(cli.load_config(path), parse_args(["run", path]))

    def test_single_server_mode_keeps_one_point(self, tmp_path):
        scn = self.scenario(tmp_path, **tiny_sections(
            sweep={"modes": ["pgps", "mpgps"], "M": [1, 2]}))
        points = cli.grid_points(scn)
        labels = [(p.mode, p.overrides.get("M")) for p in points]
        assert labels == [("pgps", 1), ("mpgps", 1), ("mpgps", 2)]

    def test_window_axis_only_applies_to_opportunistic(self, tmp_path, caplog):
        scn = self.scenario(tmp_path, **tiny_sections(
            sweep={"modes": ["mpgps", "ompgps"], "M": [2], "U": [2, 4]}))
        with caplog.at_level(logging.INFO, logger="mpgps_sim.cli"):
            points = cli.grid_points(scn)
        got = [(p.mode, p.overrides.get("U")) for p in points]
        assert got == [("mpgps", None), ("ompgps", 2), ("ompgps", 4)]
        assert "skip" in caplog.text

    def test_invalid_pairs_skipped_with_reason(self, tmp_path, caplog):
        scn = self.scenario(tmp_path, **tiny_sections(
            sweep={"modes": ["ompgps"], "M": [2], "U": [1, 4]}))
        with caplog.at_level(logging.INFO, logger="mpgps_sim.cli"):
            points = cli.grid_points(scn)
        assert [(p.overrides["M"], p.overrides["U"]) for p in points] == [(2, 4)]
        assert "skip" in caplog.text

    def test_adaptive_mode_sweeps_the_ceiling(self, tmp_path):
        scn = self.scenario(tmp_path, **tiny_sections(
            sweep={"modes": ["ampgps"], "M": [1, 2]}))
        points = cli.grid_points(scn)
        assert [p.overrides for p in points] == [{"M_max": 1}, {"M_max": 2}]

    def test_all_points_invalid_is_an_error(self, tmp_path):
        scn = self.scenario(tmp_path, **tiny_sections(
            sweep={"modes": ["ompgps"], "M": [4], "U": [1, 2]}))
        with pytest.raises(cli.ConfigError):
            cli.grid_points(scn)


class TestRunCommand:
    def test_minimal_run_writes_artifacts(self, tmp_path, capsys):
        path = write_cfg(tmp_path, **tiny_sections())
        out = tmp_path / "results"
        assert cli.main(["run", path, "--out", str(out)]) == 0
        rows = read_rows(out / "runs.csv")
        assert len(rows) == 1
        assert list(rows[0]) == cli.RUN_HEADER
        assert len(rows[0]["config_hash"]) == 64
        agg = read_rows(out / "aggregate.csv")
        assert agg[0]["n"] == "1"
        assert "wrote 1 run rows" in capsys.readouterr().out

    def test_replications_share_a_point(self, tmp_path):
        path = write_cfg(tmp_path, **tiny_sections(run={"replications": 3}))
        out = tmp_path / "r"
        assert cli.main(["run", path, "--out", str(out)]) == 0
        rows = read_rows(out / "runs.csv")
        assert len(rows) == 3
        assert {r["seed"] for r in rows} == {"5", "6", "7"}
        agg = read_rows(out / "aggregate.csv")
        assert len(agg) == 1 and agg[0]["n"] == "3"

    def test_worker_pool_merges_deterministically(self, tmp_path):
        path = write_cfg(tmp_path, **tiny_sections(run={"replications": 2}))
        solo, pooled = tmp_path / "solo", tmp_path / "pooled"
        assert cli.main(["run", path, "--out", str(solo)]) == 0
        assert cli.main(["run", path, "--out", str(pooled),
                         "--workers", "2"]) == 0
        assert (solo / "runs.csv").read_bytes() == (pooled / "runs.csv").read_bytes()

    def test_events_file_for_single_point(self, tmp_path):
        path = write_cfg(tmp_path, **tiny_sections(run={"collect_events": True}))
        out = tmp_path / "ev"
        assert cli.main(["run", path, "--out", str(out)]) == 0
        rows = read_rows(out / "events.csv")
        assert rows
        assert {"arrive", "deliver"} <= {r["event"] for r in rows}

    def test_saturated_traffic_needs_max_frames(self, tmp_path):
        sections = tiny_sections()
        sections["traffic"]["infinite_backlog"] = True
        path = write_cfg(tmp_path, **sections)
        assert cli.main(["run", path, "--out", str(tmp_path / "x")]) == 1

    def test_schema_error_exit_code(self, tmp_path, capsys):
        sections = tiny_sections()
        sections["system"]["K"] = -3
        path = write_cfg(tmp_path, **sections)
        assert cli.main(["run", path]) == 1
        assert "config error" in capsys.readouterr().err

    def test_engine_crash_exit_code(self, tmp_path, monkeypatch):
        class Boom:
            def __init__(self, *a, **kw):
                pass

            def run(self):
                raise RuntimeError("induced failure")

        monkeypatch.setattr(cli, "Engine", Boom)
        path = write_cfg(tmp_path, **tiny_sections())
        assert cli.main(["run", path, "--out", str(tmp_path / "x")]) == 3


class TestSweepCommand:
    def test_axis_flag_expands_grid(self, tmp_path):
        path = write_cfg(tmp_path, **tiny_sections())
        out = tmp_path / "sweep"
        code = cli.main(["sweep", path, "--out", str(out), "--axis", "M=1:2"])
        assert code == 0
        rows = read_rows(out / "runs.csv")
        assert [r["M"] for r in rows] == ["1", "2"]

    def test_figure_files_are_emitted(self, tmp_path):
        sections = tiny_sections()
        sections["figures"] = ["fig2_power_vs_M.csv", "fig3_delay_vs_M.csv"]
        path = write_cfg(tmp_path, **sections)
        out = tmp_path / "figs"
        code = cli.main(["sweep", path, "--out", str(out), "--axis", "M=1,2"])
        assert code == 0
        power = read_rows(out / "fig2_power_vs_M.csv")
        assert [r["M"] for r in power] == ["1", "2"]
        # gains are relative to the worst grid point, so the minimum is zero
        gains = [float(r["power_gain_db"]) for r in power]
        assert min(gains) == pytest.approx(0.0)
        assert all(g >= -1e-9 for g in gains)
        delays = read_rows(out / "fig3_delay_vs_M.csv")
        assert all(float(r["avg_delay_ms_mean"]) > 0 for r in delays)

    def test_unknown_axis_rejected(self, tmp_path):
        path = write_cfg(tmp_path, **tiny_sections())
        assert cli.main(["sweep", path, "--axis", "Q=1:3"]) == 1

    def test_gnuplot_script(self, tmp_path):
        sections = tiny_sections()
        sections["figures"] = ["fig3_delay_vs_M.csv"]
        sections["run"]["gnuplot"] = True
        path = write_cfg(tmp_path, **sections)
        out = tmp_path / "gp"
        assert cli.main(["sweep", path, "--out", str(out), "--axis", "M=1,2"]) == 0
        script = (out / "plots.gp").read_text()
        assert "fig3_delay_vs_M.csv" in script


class TestCheckBounds:
    def test_clean_run_passes(self, tmp_path, capsys):
        path = write_cfg(tmp_path, **tiny_sections())
        out = tmp_path / "bounds"
        assert cli.main(["check-bounds", path, "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "[pass]" in text and "[FAIL]" not in text
        rows = read_rows(out / "bounds.csv")
        assert {"delay_gap", "service_gap", "backlog_gap"} <= {
            r["check"] for r in rows}
        assert all(r["violations"] == "0" for r in rows
                   if r["applicable"] == "True")

    def test_starving_selector_is_caught(self, tmp_path, monkeypatch, capsys):
        # mutation: always serve the flow whose head stamp is LARGEST, which
        # starves earlier stamps and breaks the delay bound under backlog
        def worst_flow_select(queues, count):
            backed = [q for q in queues if len(q)]
            worst = max(backed, key=lambda q: q.fifo[0].vfinish)
            take = min(count, len(worst))
            g = [0] * len(queues)
            g[worst.flow] = take
            chosen = [worst.fifo[i] for i in range(take)]
            return ScheduleDecision(mode="mpgps", g=tuple(g), chosen=chosen)

        monkeypatch.setattr(engine_mod, "select_mpgps", worst_flow_select)
        sections = {
            "system": {"K": 3, "N": 8, "L": 64, "r": 2, "seed": 5},
            "traffic": {"rate_bps": 20000.0},
            "run": {"horizon_symbols": 30000},
        }
        path = write_cfg(tmp_path, **sections)
        out = tmp_path / "mut"
        assert cli.main(["check-bounds", path, "--out", str(out)]) == 2
        assert "[FAIL]" in capsys.readouterr().out
        rows = read_rows(out / "bounds.csv")
        broken = [r for r in rows if r["check"] == "delay_gap"]
        assert int(broken[0]["violations"]) > 0


class TestAggregation:
    def test_nan_metrics_average_over_finite_values(self):
        rows = [
            {"config_hash": "h", "point": 0, "mode": "mpgps", "M": 1,
             "M_max": 1, "U": 1, "power_budget_db": "", "avg_delay": 2.0,
             "loss_rate": 0.0, "throughput": 1.0, "avg_power": float("nan"),
             "per_bit_power": float("nan"), "eb_n0_db": float("nan"),
             "fairness": float("nan")},
            {"config_hash": "h", "point": 0, "mode": "mpgps", "M": 1,
             "M_max": 1, "U": 1, "power_budget_db": "", "avg_delay": 4.0,
             "loss_rate": 0.0, "throughput": 3.0, "avg_power": 5.0,
             "per_bit_power": float("nan"), "eb_n0_db": float("nan"),
             "fairness": float("nan")},
        ]
        agg = cli.aggregate_rows(rows)[0]
        assert agg["avg_delay_mean"] == pytest.approx(3.0)
        assert agg["avg_power_mean"] == pytest.approx(5.0)
        assert math.isnan(agg["fairness_mean"])
        assert agg["n"] == 2

    def test_float_formatting_round_trips(self):
        assert cli._fmt(0.1) == "0.1"
        assert cli._fmt(np.float64(0.25)) == "0.25"
        assert cli._fmt(None) == ""
        assert cli._fmt(7) == "7"
        assert float(cli._fmt(1 / 3)) == 1 / 3
