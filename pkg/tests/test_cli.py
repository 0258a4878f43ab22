"""Config loading, presets, and the command-line verbs end to end."""

import json
import os

import pytest
import yaml

from diffrelay.cli import (
    CSV_COLUMNS,
    ConfigError,
    cmd_calibrate,
    cmd_sweep,
    complexity_table,
    load_config,
    main,
    read_rows,
    write_rows,
)
from diffrelay.relay import load_epsilon_table


def write_yaml(path, doc):
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh)
    return str(path)


def minimal_doc(**overrides):
    doc = {
        "version": 1,
        "constellation": {"kind": "psk", "M": 4},
        "decoder": {"kind": "pl"},
        "grid_db": [10.0, 14.0],
    }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def sweep_outputs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    doc = minimal_doc(seed=3)
    doc["trials"] = {"min_errors": 120, "max_trials": 2_000_000}
    doc["analysis"] = {"closed_form": True, "quadrature": True}
    doc["calibration"] = {"path": str(tmp / "eps.csv"),
                          "grid_db": [10.0, 14.0]}
    doc["output"] = {"dir": str(tmp), "basename": "run"}
    doc["compare"] = [{"a": "psk4_pl", "b": "psk4_pl", "mode": "ratio"}]
    path = write_yaml(tmp / "c.yaml", doc)
    assert main(["calibrate", path]) == 0
    code = main(["sweep", path, "--workers", "4"])
    return tmp, code


@pytest.fixture(scope="module")
def two_curves_csv(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cmp")
    base = {"snr_db": 10.0, "errors": 50, "trials": 1000, "seed": 0,
            "kind": "psk", "M": 4, "N_relays": 1}
    rows = []
    for decoder, scale in (("pl", 1.0), ("ml", 0.5)):
        for db, ser in ((10.0, 2e-2), (14.0, 4e-3)):
            rows.append(dict(base, source="mc", decoder=decoder, snr_db=db,
                             ser=ser * scale, ci_low=ser * scale * 0.8,
                             ci_high=ser * scale * 1.2))
    path = tmp / "curves.csv"
    write_rows(str(path), rows)
    return str(path)


class TestConfigValidation:
    def test_version_required(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"grid_db": [1.0]})
        with pytest.raises(ConfigError, match="version must be 1"):
            load_config(path)

    @pytest.mark.parametrize(
        "mutate, where",
        [
            (lambda d: d.update(bogus=1), "config has"),
            (lambda d: d["constellation"].update(extra=1), "config.constellation"),
            (lambda d: d["decoder"].update(extra=1), "config.decoder"),
            (lambda d: d.update(trials={"min_errors": 5, "x": 1}), "config.trials"),
            (lambda d: d.update(analysis={"closed_form": True, "x": 1}),
             "config.analysis"),
            (lambda d: d.update(output={"dir": ".", "x": 1}), "config.output"),
            (lambda d: d.update(calibration={"path": "t.csv", "x": 1}),
             "config.calibration"),
        ],
    )
    def test_unknown_keys_rejected_with_path(self, tmp_path, mutate, where):
        doc = minimal_doc()
        mutate(doc)
        path = write_yaml(tmp_path / "c.yaml", doc)
        with pytest.raises(ConfigError, match=where):
            load_config(path)

    def test_empty_grid_rejected(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", minimal_doc(grid_db=[]))
        with pytest.raises(ConfigError, match="grid_db must not be empty"):
            load_config(path)

    def test_empty_grid_via_main_writes_nothing(self, tmp_path):
        doc = minimal_doc(grid_db=[])
        doc["output"] = {"dir": str(tmp_path), "basename": "out"}
        path = write_yaml(tmp_path / "c.yaml", doc)
        assert main(["sweep", path]) == 2
        assert not (tmp_path / "out.csv").exists()
        assert not (tmp_path / "out.json").exists()

    def test_grid_range_expands_inclusively(self, tmp_path):
        doc = minimal_doc(grid_db={"start": 0, "stop": 36, "step": 3})
        cfg = load_config(write_yaml(tmp_path / "c.yaml", doc))
        grid = cfg.jobs[0].plan.snr_grid_db
        assert len(grid) == 13
        assert grid[0] == 0.0 and grid[-1] == 36.0 and grid[4] == 12.0

    def test_missing_required_sections(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"version": 1, "grid_db": [1.0]})
        with pytest.raises(ConfigError, match="constellation is required"):
            load_config(path)

    def test_bad_constellation_values(self, tmp_path):
        doc = minimal_doc(constellation={"kind": "pam", "M": 4})
        with pytest.raises(ConfigError, match="kind must be 'psk' or 'qam'"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_plan_validation_surfaces_as_config_error(self, tmp_path):
        doc = minimal_doc(n_relays=-1)
        with pytest.raises(ConfigError, match="n_relays"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_preset_rejects_conflicting_keys(self, tmp_path):
        doc = {"version": 1, "preset": "fig6",
               "decoder": {"kind": "pl"}}
        with pytest.raises(ConfigError, match="already defines: decoder"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_unknown_preset(self, tmp_path):
        doc = {"version": 1, "preset": "fig99"}
        with pytest.raises(ConfigError, match="preset must be one of"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_closed_form_needs_single_relay_psk(self, tmp_path):
        doc = minimal_doc(analysis={"closed_form": True}, n_relays=2)
        with pytest.raises(ConfigError, match="one erroneous relay"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))
        doc = minimal_doc(constellation={"kind": "qam", "M": 16},
                          analysis={"quadrature": True})
        with pytest.raises(ConfigError, match="PSK alphabet"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_asymptotic_needs_psk(self, tmp_path):
        doc = minimal_doc(constellation={"kind": "qam", "M": 16},
                          analysis={"asymptotic": True})
        with pytest.raises(ConfigError, match="PSK alphabet"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_compare_must_name_job_labels(self, tmp_path):
        doc = minimal_doc(compare=[{"a": "psk4_pl", "b": "nope"}])
        with pytest.raises(ConfigError, match=r"compare\[0\].b"):
            load_config(write_yaml(tmp_path / "c.yaml", doc))

    def test_seed_and_output_overrides_win(self, tmp_path, monkeypatch):
        doc = minimal_doc(seed=9)
        doc["output"] = {"dir": "from_file"}
        path = write_yaml(tmp_path / "c.yaml", doc)
        cfg = load_config(path, seed=3, output_dir="from_flag")
        assert cfg.seed == 3
        assert cfg.jobs[0].plan.seed == 3
        assert cfg.output_dir == "from_flag"
        monkeypatch.setenv("DIFFRELAY_OUTPUT_DIR", "from_env")
        doc.pop("output")
        path2 = write_yaml(tmp_path / "c2.yaml", doc)
        assert load_config(path2).output_dir == "from_env"
        monkeypatch.delenv("DIFFRELAY_OUTPUT_DIR")
        assert load_config(path2).output_dir == "."

    def test_basename_defaults_to_config_stem(self, tmp_path):
        path = write_yaml(tmp_path / "myrun.yaml", minimal_doc())
        assert load_config(path).basename == "myrun"


class TestPresets:
    def test_fig6_expands_to_three_analysis_jobs(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"version": 1, "preset": "fig6"})
        cfg = load_config(path)
        assert [j.label for j in cfg.jobs] == ["psk4_pl", "psk16_pl", "psk32_pl"]
        for job in cfg.jobs:
            assert job.closed_form and job.quadrature and not job.asymptotic
            assert job.plan.decoder.kind == "pl"
            assert len(job.plan.snr_grid_db) == 13
            assert job.plan.n_relays == 1

    def test_fig7_expands_to_multirelay_asymptotic(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"version": 1, "preset": "fig7"})
        cfg = load_config(path)
        assert [(j.label, j.plan.n_relays) for j in cfg.jobs] == [
            ("psk4_pl_n2", 2), ("psk4_pl_n3", 3)]
        for job in cfg.jobs:
            assert job.asymptotic and not job.closed_form
            assert job.plan.spec.M == 4
            assert job.plan.tying == "all_equal"

    def test_fig4_psk_pairs_and_comparisons(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"version": 1, "preset": "fig4_psk"})
        cfg = load_config(path)
        assert len(cfg.jobs) == 6
        assert {j.plan.spec.M for j in cfg.jobs} == {4, 16, 32}
        assert cfg.compare == (
            ("psk4_pl", "psk4_ml", "horizontal_db"),
            ("psk16_pl", "psk16_ml", "horizontal_db"),
            ("psk32_pl", "psk32_ml", "horizontal_db"),
        )

    def test_fig4_qam_includes_genie_reference(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"version": 1, "preset": "fig4_qam"})
        cfg = load_config(path)
        kinds = {j.plan.decoder.kind for j in cfg.jobs}
        assert kinds == {"ml", "pl", "genie_reference"}
        assert {j.plan.spec.M for j in cfg.jobs} == {8, 16, 32, 64}

    def test_fig5_pairs_pl_with_naive(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"version": 1, "preset": "fig5"})
        cfg = load_config(path)
        assert [j.label for j in cfg.jobs] == ["psk8_pl", "psk8_naive_eps0"]
        assert cfg.compare == (("psk8_pl", "psk8_naive_eps0", "horizontal_db"),)

    def test_preset_overrides_apply_to_every_job(self, tmp_path):
        doc = {"version": 1, "preset": "fig6", "grid_db": [6.0, 9.0],
               "seed": 7, "frame_len": 32,
               "trials": {"min_errors": 50, "max_trials": 10000}}
        cfg = load_config(write_yaml(tmp_path / "c.yaml", doc))
        for job in cfg.jobs:
            assert job.plan.snr_grid_db == (6.0, 9.0)
            assert job.plan.seed == 7
            assert job.plan.frame_len == 32
            assert job.plan.trials.min_errors == 50


class TestCalibrateCommand:
    def test_thirteen_rows_and_determinism(self, tmp_path):
        doc = minimal_doc()
        doc["calibration"] = {
            "path": str(tmp_path / "eps.csv"),
            "grid_db": {"start": 0, "stop": 36, "step": 3},
        }
        path = write_yaml(tmp_path / "c.yaml", doc)
        assert main(["calibrate", path]) == 0
        table = load_epsilon_table(str(tmp_path / "eps.csv"))
        assert len(table) == 13
        assert all(key[0] == "psk" and key[1] == 4 for key in table)
        first = (tmp_path / "eps.csv").read_bytes()
        assert main(["calibrate", path]) == 0
        assert (tmp_path / "eps.csv").read_bytes() == first

    def test_high_snr_epsilon_halves_per_3db(self, tmp_path):
        doc = minimal_doc()
        doc["calibration"] = {
            "path": str(tmp_path / "eps.csv"),
            "grid_db": [30.0, 33.0],
        }
        assert cmd_calibrate(load_config(write_yaml(tmp_path / "c.yaml", doc))) == 0
        table = load_epsilon_table(str(tmp_path / "eps.csv"))
        ratio = table[("psk", 4, 30.0)].value / table[("psk", 4, 33.0)].value
        assert 2.0 * 0.7 < ratio < 2.0 * 1.3

    def test_monte_carlo_budget_violation_exits_nonzero(self, tmp_path):
        doc = minimal_doc()
        doc["calibration"] = {
            "path": str(tmp_path / "eps.csv"),
            "grid_db": [10.0],
            "method": "monte_carlo",
            "trials": 2000,
            "target_std_err": 1e-6,
        }
        cfg = load_config(write_yaml(tmp_path / "c.yaml", doc))
        with pytest.warns(UserWarning, match="calibration budget too small"):
            assert cmd_calibrate(cfg) == 1
        est = load_epsilon_table(str(tmp_path / "eps.csv"))[("psk", 4, 10.0)]
        assert est.std_err > 1e-6
        assert est.trials >= 2000

    def test_requires_calibration_section(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", minimal_doc())
        assert main(["calibrate", path]) == 2


class TestSweepCommand:
    def test_exit_zero_and_files_exist(self, sweep_outputs):
        tmp, code = sweep_outputs
        assert code == 0
        assert (tmp / "run.csv").exists() and (tmp / "run.json").exists()

    def test_csv_schema_and_sources(self, sweep_outputs):
        tmp, _ = sweep_outputs
        with open(tmp / "run.csv") as fh:
            header = fh.readline().strip()
        assert header == ",".join(CSV_COLUMNS)
        rows = read_rows(str(tmp / "run.csv"))
        by_source = {}
        for row in rows:
            by_source.setdefault(row["source"], []).append(row)
        assert sorted(by_source) == ["closed_form", "mc", "quadrature"]
        assert [r["snr_db"] for r in by_source["mc"]] == [10.0, 14.0]
        for row in by_source["closed_form"] + by_source["quadrature"]:
            assert row["errors"] == 0 and row["trials"] == 0
            assert row["ci_low"] == row["ser"] == row["ci_high"]
            assert row["decoder"] == "pl"
        for row in by_source["mc"]:
            assert row["ci_low"] < row["ser"] < row["ci_high"]
            assert row["errors"] >= 120
            assert row["seed"] == 3

    def test_analysis_tracks_simulation(self, sweep_outputs):
        tmp, _ = sweep_outputs
        rows = read_rows(str(tmp / "run.csv"))
        mc = {r["snr_db"]: r for r in rows if r["source"] == "mc"}
        for source in ("closed_form", "quadrature"):
            for row in (r for r in rows if r["source"] == source):
                assert 0.7 < row["ser"] / mc[row["snr_db"]]["ser"] < 1.6

    def test_csv_round_trips_byte_identically(self, sweep_outputs, tmp_path):
        tmp, _ = sweep_outputs
        rows = read_rows(str(tmp / "run.csv"))
        copy = tmp_path / "copy.csv"
        write_rows(str(copy), rows)
        assert copy.read_bytes() == (tmp / "run.csv").read_bytes()

    def test_json_summary_contents(self, sweep_outputs):
        tmp, _ = sweep_outputs
        summary = json.loads((tmp / "run.json").read_text())
        assert summary["all_points_ok"] is True
        (curve,) = summary["curves"]
        assert curve["label"] == "psk4_pl"
        assert curve["points_ok"] == 2
        assert curve["failures"] == []
        assert "error" in curve["slope_fit"]
        (comp,) = summary["comparisons"]
        assert comp["mode"] == "ratio"
        assert [r["value"] for r in comp["rows"]] == [1.0, 1.0]

    def test_missing_calibration_fails_points(self, tmp_path):
        doc = minimal_doc(seed=3)
        doc["trials"] = {"min_errors": 40, "max_trials": 100_000}
        doc["analysis"] = {"quadrature": True}
        doc["output"] = {"dir": str(tmp_path), "basename": "run"}
        path = write_yaml(tmp_path / "c.yaml", doc)
        assert main(["sweep", path]) == 1
        summary = json.loads((tmp_path / "run.json").read_text())
        assert summary["all_points_ok"] is False
        reasons = [f["reason"] for f in summary["curves"][0]["failures"]]
        assert any("quadrature" in r and "calibrate" in r for r in reasons)
        rows = read_rows(str(tmp_path / "run.csv"))
        assert all(r["source"] == "mc" for r in rows)

    def test_asymptotic_rows_for_multirelay(self, tmp_path):
        doc = {
            "version": 1,
            "constellation": {"kind": "psk", "M": 4},
            "decoder": {"kind": "pl"},
            "grid_db": [18.0, 21.0],
            "n_relays": 2,
            "sr_eps": "vanishing",
            "tying": "sr_infinite",
            "trials": {"min_errors": 60, "max_trials": 400_000},
            "analysis": {"asymptotic": True},
            "output": {"dir": str(tmp_path), "basename": "asym"},
        }
        path = write_yaml(tmp_path / "c.yaml", doc)
        assert main(["sweep", path, "--workers", "4"]) == 0
        rows = read_rows(str(tmp_path / "asym.csv"))
        asym = {r["snr_db"]: r["ser"] for r in rows if r["source"] == "asymptotic"}
        assert set(asym) == {18.0, 21.0}
        # three-branch diversity: 3 dB of SNR is about 0.9 decades of SER
        assert 6.0 < asym[18.0] / asym[21.0] < 9.0
        mc = {r["snr_db"]: r for r in rows if r["source"] == "mc"}
        assert mc[18.0]["ser"] > asym[18.0]


class TestComplexityCommand:
    def test_table_matches_direct_counts(self):
        rows = complexity_table((2, 16, 32))
        by_m = {row["M"]: row for row in rows}
        assert by_m[2]["ml_measured"] == 100
        assert by_m[2]["pl_measured"] == 33
        assert by_m[16]["ml_measured"] == 4160
        assert by_m[16]["pl_measured"] == 495
        assert by_m[32]["ml_measured"] == 16000
        assert by_m[32]["pl_measured"] == 1023
        assert all(row["ml_equal"] and row["pl_equal"] for row in rows)

    def test_ml_over_pl_ratio_grows_with_m(self):
        rows = complexity_table((2, 4, 8, 16, 32, 64))
        ratios = [row["ml_measured"] / row["pl_measured"] for row in rows]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))

    def test_exit_zero_and_optional_csv(self, tmp_path, capsys):
        out = tmp_path / "ops.csv"
        assert main(["complexity", "--sizes", "2", "8", "--output", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("M,ml_measured,ml_formula")
        captured = capsys.readouterr().out
        assert "ml_measured" in captured


class TestCompareCommand:
    def test_ratio_between_selected_curves(self, two_curves_csv, capsys):
        code = main(["compare", two_curves_csv, two_curves_csv,
                     "--select-a", "decoder=pl", "--select-b", "decoder=ml"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["mode"] == "ratio"
        assert [round(r["value"], 12) for r in payload["rows"]] == [2.0, 2.0]

    def test_ambiguous_selection_is_an_error(self, two_curves_csv, capsys):
        assert main(["compare", two_curves_csv, two_curves_csv]) == 2
        assert "ambiguous" in capsys.readouterr().err

    def test_bad_selector_key(self, two_curves_csv, capsys):
        code = main(["compare", two_curves_csv, two_curves_csv,
                     "--select-a", "color=red", "--select-b", "decoder=ml"])
        assert code == 2
        assert "cannot select on" in capsys.readouterr().err

    def test_wrong_columns_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert main(["compare", str(bad), str(bad)]) == 2
        assert "expected columns" in capsys.readouterr().err
