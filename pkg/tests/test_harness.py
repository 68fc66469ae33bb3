import json
import re

import numpy as np
import pytest

from unlearnlab.harness import (ConfigError, StaleCacheError, load_config, parse_config,
                                render_report, run_experiment, run_stage)
from unlearnlab.harness.cli import main
from unlearnlab.harness.report import ReportWarning
from unlearnlab.net import load_checkpoint

MINI = """
name = "mini"
seeds = [0]

[dataset]
kind = "blobs"
classes = 4
per_class = 80
dim = 6
noise = 0.6
seed = 3
radius = 4.0

[split]
mode = "classwise"
forget_classes = [1]

[model]
widths = [16, 16, 8]

[pretrain]
epochs = 5
learning_rate = 0.05

[metrics]
probe_fraction = 0.25

[mi]
epochs = 3
replications = 1
tail_epochs = 1

[[methods]]
name = "FT"
params = { epochs = 2 }
"""

EXTRA_METHODS = """
[[methods]]
name = "HD"

[[methods]]
name = "RL"
params = { epochs = 2 }
"""


def write_config(tmp_path, text=MINI, name="mini.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    cfg = write_config(root)
    return cfg, run_experiment(cfg, out=root / "run")


@pytest.fixture(scope="module")
def multi(tmp_path_factory):
    root = tmp_path_factory.mktemp("multi")
    cfg = write_config(root, MINI.replace("seeds = [0]", "seeds = [0, 1]") + EXTRA_METHODS)
    return run_experiment(cfg, out=root / "run")


def table_rows(md):
    return [line.split("|")[1].strip() for line in md.splitlines()[2:] if line.startswith("|")]


class TestRunExperiment:
    def test_counting_contract(self, mini):
        report = json.loads((mini[1] / "report.json").read_text())
        assert sorted(r["model"] for r in report["rows"]) == ["FT", "Original", "Retrain"]

    def test_rerun_is_bit_identical(self, mini):
        cfg, out = mini
        before = {p: (out / p).read_bytes() for p in ("report.json", "report.csv", "report.md")}
        run_experiment(cfg, out=out)
        assert {p: (out / p).read_bytes() for p in before} == before

    def test_fresh_run_matches_except_runtime(self, mini, tmp_path):
        cfg, out = mini
        again = run_experiment(cfg, out=tmp_path / "again")
        strip = lambda rows: [{k: v for k, v in r.items() if k != "RTE"} for r in rows]
        a = json.loads((out / "report.json").read_text())
        b = json.loads((again / "report.json").read_text())
        assert strip(a["rows"]) == strip(b["rows"])
        assert a["provenance"] == b["provenance"]

    def test_rows_trace_to_checkpoints(self, mini):
        report = json.loads((mini[1] / "report.json").read_text())
        for row in report["rows"]:
            load_checkpoint(mini[1] / row["checkpoint"])
            assert (mini[1] / "mi_curves" / f"{row['model']}_s{row['seed']}.csv").exists()

    def test_retrain_reference_identities(self, multi):
        report = json.loads((multi / "report.json").read_text())
        for row in report["rows"]:
            if row["model"] == "Retrain":
                assert row["IDI"] == 0.0 and row["JSD"] == 0.0 and row["ID"] == 0.0

    def test_std_over_configured_seeds(self, multi):
        report = json.loads((multi / "report.json").read_text())
        for agg in report["aggregate"]:
            vals = [r["UA"] for r in report["rows"] if r["model"] == agg["model"]]
            assert agg["n_seeds"] == 2
            assert agg["std"]["UA"] == pytest.approx(np.std(vals, ddof=1), abs=1e-12)

    def test_stale_cache_refused(self, tmp_path):
        out = tmp_path / "run"
        run_stage(load_config(write_config(tmp_path)).with_overrides(out=str(out)), "pretrain")
        changed = load_config(write_config(tmp_path, MINI.replace("epochs = 5", "epochs = 6"),
                                           "changed.toml"))
        with pytest.raises(StaleCacheError):
            run_stage(changed.with_overrides(out=str(out)), "pretrain")

    def test_report_needs_results(self, tmp_path):
        cfg = load_config(write_config(tmp_path)).with_overrides(out=str(tmp_path / "empty"))
        with pytest.raises(FileNotFoundError):
            run_stage(cfg, "report")


class TestConfig:
    def test_schema_error_lists_keys(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"dataset": {"kind": "cubes"}, "split": {"mode": "classwise"},
                          "model": {"widths": [8, 8]}, "pretrain": {}, "methods": [],
                          "colour": "red"})
        assert {"dataset.kind", "methods", "<root>"} & set(info.value.keys)
        assert len(info.value.keys) >= 3

    def test_unknown_method_parameter(self, tmp_path):
        text = MINI.replace("params = { epochs = 2 }", "params = { momentum = 2 }")
        with pytest.raises(ConfigError) as info:
            load_config(write_config(tmp_path, text))
        assert info.value.keys == ["methods.0.params"]

    def test_defaults_and_digest(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.metrics["idi_layers"] == [1, 2]
        assert cfg.digest() == load_config(write_config(tmp_path)).digest()
        assert cfg.with_overrides(seeds=[3]).digest() != cfg.digest()

    def test_bundled_configs(self, desk_config):
        assert desk_config.method_labels() == ["FT", "RL", "NegGrad", "EU-k", "CF-k",
                                               "l1-sparse", "HD", "COLA"]
        assert desk_config.seeds == [0, 1, 2, 3, 4]


class TestRender:
    def test_sorted_by_abs_idi(self, multi):
        report = json.loads((multi / "report.json").read_text())
        mean_idi = {a["model"]: abs(a["mean"]["IDI"]) for a in report["aggregate"]}
        order = table_rows((multi / "report.md").read_text())
        assert order[0] == "Retrain"
        assert [mean_idi[m] for m in order] == sorted(mean_idi[m] for m in order)

    def test_best_is_bolded(self, multi):
        md = (multi / "report.md").read_text()
        assert re.search(r"\*\*[-0-9.]+±[0-9.]+\*\*", md)

    def test_series_shape(self, multi):
        lines = (multi / "mi_curve_series.csv").read_text().splitlines()
        assert lines[0] == "model,layer,mi_mean_nats,mi_std_nats,n_seeds"
        keys = [tuple(line.split(",")[:2]) for line in lines[1:]]
        assert len(keys) == len(set(keys)) == 5 * 3

    def test_partial_render_warns(self, multi, tmp_path):
        report = json.loads((multi / "report.json").read_text())
        for block in report["rows"]:
            block.pop("probe")
        for agg in report["aggregate"]:
            agg["mean"].pop("probe")
            agg["std"].pop("probe")
        (tmp_path / "report.json").write_text(json.dumps(report))
        with pytest.warns(ReportWarning, match="probe"):
            text = render_report(tmp_path)
        assert "probe" not in text and "IDI" in text


class TestCLI:
    def test_success(self, tmp_path, capsys):
        assert main(["all", "--config", str(write_config(tmp_path)),
                     "--out", str(tmp_path / "run")]) == 0
        assert "Retrain" in capsys.readouterr().out

    def test_seed_override(self, tmp_path):
        out = tmp_path / "run"
        assert main(["pretrain", "--config", str(write_config(tmp_path)), "--out", str(out),
                     "--seeds", "4"]) == 0
        assert (out / "checkpoints" / "Original_s4.ckpt").exists()

    def test_config_error(self, tmp_path):
        bad = write_config(tmp_path, MINI.replace('mode = "classwise"', 'mode = "sideways"'))
        assert main(["pretrain", "--config", str(bad)]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["all", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_bad_jobs(self, tmp_path):
        assert main(["all", "--config", str(write_config(tmp_path)), "--jobs", "0"]) == 2

    def test_numerical_abort(self, tmp_path):
        text = MINI.replace('name = "FT"\nparams = { epochs = 2 }',
                            'name = "NegGrad"\nparams = { alpha = 1.0, lr = 50.0 }')
        assert main(["unlearn", "--config", str(write_config(tmp_path, text)),
                     "--out", str(tmp_path / "run")]) == 3

    def test_stale_cache(self, tmp_path):
        out = str(tmp_path / "run")
        assert main(["pretrain", "--config", str(write_config(tmp_path)), "--out", out]) == 0
        changed = write_config(tmp_path, MINI.replace("epochs = 5", "epochs = 6"), "c.toml")
        assert main(["pretrain", "--config", str(changed), "--out", out]) == 4
