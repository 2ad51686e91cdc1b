import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import ttformer
from ttformer.cli import main
from ttformer.files import read_feature_csv, read_traffic_csv, sha256
from ttformer.synth import keyword_grid

SMALL = {"segments": 2, "days": 9, "seed": 4, "accident_rate": 0.5}
TINY_MODEL = {"d_model": 8, "heads": 2, "encoder_layers": 1, "decoder_layers": 1}
TINY_TRAIN = {"epochs": 2, "train_stride": 8, "split": {"train_days": 7, "val_days": 1, "test_days": 1}}


def write(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def run_ok(*argv):
    assert main([str(a) for a in argv]) == 0


def run_fail(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main([str(a) for a in argv])
    assert exc.value.code != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def checksums(d, skip=("run_manifest.json",)):
    return {p.name: sha256(p) for p in sorted(d.iterdir()) if p.name not in skip and p.is_file()}


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    d = tmp_path_factory.mktemp("scn")
    cfg = write(d / "scenario.json", SMALL)
    run_ok("synth", "--config", cfg, "--out", d / "data")
    run_ok("features", "--tweets", d / "data" / "tweets.jsonl", "--segments", d / "data" / "segments.csv",
           "--traffic", d / "data" / "traffic.csv", "--out", d / "data" / "features.csv")
    return d


def test_synth_file_contract_and_row_count(scenario):
    data = scenario / "data"
    for name in ("traffic.csv", "tweets.jsonl", "segments.csv", "manifest.json", "run_manifest.json"):
        assert (data / name).exists()
    lines = (data / "traffic.csv").read_text().splitlines()
    assert lines[0] == "segment_id,bin_start_iso8601,tps,volume,speed"
    assert len(lines) == 2 * 9 * 96 + 1
    run = json.loads((data / "run_manifest.json").read_text())
    assert run["command"] == "synth" and run["seed"] == 4
    assert run["outputs"]["traffic.csv"]["sha256"] == sha256(data / "traffic.csv")


def test_synth_rerun_identical_and_seed_override(scenario, tmp_path, monkeypatch):
    cfg = str(scenario / "scenario.json")
    run_ok("synth", "--config", cfg, "--out", tmp_path / "a")
    assert checksums(tmp_path / "a") == checksums(scenario / "data", skip=("run_manifest.json", "features.csv",
                                                                           "features.explained_variance.csv",
                                                                           "features.run_manifest.json"))
    monkeypatch.setenv("FORECAST_SEED", "9")
    run_ok("synth", "--config", cfg, "--out", tmp_path / "b")
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["config"]["seed"] == 9
    assert sha256(tmp_path / "b" / "traffic.csv") != sha256(tmp_path / "a" / "traffic.csv")


def test_planted_scenario_rows_and_lag_minimum(tmp_path):
    cfg = write(tmp_path / "c.json", {"segments": 5, "days": 90, "seed": 0, "planted_lag_hours": 10})
    o = tmp_path / "o"
    run_ok("synth", "--config", cfg, "--out", o)
    with open(o / "traffic.csv") as fh:
        assert sum(1 for _ in fh) == 5 * 90 * 96 + 1
    run_ok("features", "--tweets", o / "tweets.jsonl", "--segments", o / "segments.csv", "--traffic",
           o / "traffic.csv", "--out", o / "features.csv")
    run_ok("correlate", "--traffic", o / "traffic.csv", "--features", o / "features.csv", "--out", tmp_path / "c")
    rows = list(csv.DictReader(open(tmp_path / "c" / "lag_correlation.csv")))
    r = [float(x["correlation"]) for x in rows]
    assert int(np.argmin(r)) == 10
    assert json.loads((tmp_path / "c" / "ols.json").read_text())["min_lag_hours"] == 10


def test_bad_config_single_error_line(tmp_path, capsys):
    err = run_fail(capsys, "synth", "--config", write(tmp_path / "c.json", {"segments": "ten"}), "--out", tmp_path)
    assert err["error"] == "SchemaError" and "segments" in err["message"]
    err = run_fail(capsys, "synth", "--config", write(tmp_path / "c.json", {"segments": 0}), "--out", tmp_path)
    assert err["error"] == "ScenarioConfigError"
    err = run_fail(capsys, "frobnicate")
    assert err["error"] == "UsageError"


def test_features_counts_equal_manifest(scenario):
    data = scenario / "data"
    feats = read_feature_csv(data / "features.csv")
    manifest = json.loads((data / "manifest.json").read_text())
    for kind, col in (("accident", 1), ("culture", 2)):
        np.testing.assert_array_equal(feats.values[:, :, col], keyword_grid(manifest, kind, 2, 9 * 96))
    assert (data / "features.explained_variance.csv").read_text().startswith("k,cumulative_explained_variance\n")
    header = (data / "features.csv").read_text().splitlines()[0]
    assert header == "segment_id,bin_start_iso8601,term_freq,accident_count,culture_count,tweet_count"


def test_features_rerun_identical(scenario, tmp_path):
    data = scenario / "data"
    run_ok("features", "--tweets", data / "tweets.jsonl", "--segments", data / "segments.csv",
           "--traffic", data / "traffic.csv", "--out", tmp_path / "f.csv")
    assert sha256(tmp_path / "f.csv") == sha256(data / "features.csv")
    shipped = Path(ttformer.__file__).parent / "data"
    run_ok("features", "--tweets", data / "tweets.jsonl", "--segments", data / "segments.csv",
           "--traffic", data / "traffic.csv", "--lexicons", shipped, "--out", tmp_path / "g.csv")
    assert sha256(tmp_path / "g.csv") == sha256(data / "features.csv")


def test_features_empty_and_malformed(scenario, tmp_path, capsys):
    data = scenario / "data"
    (tmp_path / "empty.jsonl").write_text("")
    cfg = write(tmp_path / "f.json", {"start": "2020-05-01T00:00:00Z", "days": 2})
    run_ok("features", "--tweets", tmp_path / "empty.jsonl", "--segments", data / "segments.csv",
           "--config", cfg, "--out", tmp_path / "f.csv")
    g = read_feature_csv(tmp_path / "f.csv")
    assert g.values.shape == (2, 192, 4) and np.all(g.values == 0)
    (tmp_path / "bad.jsonl").write_text('{"ts": 1588291200, "lat": 47.6, "lon": -122.3, "text": "ok"}\n{oops\n')
    err = run_fail(capsys, "features", "--tweets", tmp_path / "bad.jsonl", "--segments", data / "segments.csv",
                   "--config", cfg, "--out", tmp_path / "g.csv")
    assert err["error"] == "TweetFormatError" and "bad.jsonl:2" in err["message"]


def test_correlate_outputs_schema(scenario, tmp_path):
    data = scenario / "data"
    run_ok("correlate", "--traffic", data / "traffic.csv", "--features", data / "features.csv", "--svg",
           "--out", tmp_path)
    ols = json.loads((tmp_path / "ols.json").read_text())
    for name in ("alpha", "beta1", "beta2", "beta3"):
        assert set(ols[name]) >= {"coefficient", "std_error", "p_value"}
    assert "r_squared" in ols
    rows = list(csv.DictReader(open(tmp_path / "lag_correlation.csv")))
    assert [int(r["lag_hours"]) for r in rows] == list(range(25))
    assert (tmp_path / "lag_correlation.svg").read_text().startswith("<svg")


def test_correlate_degenerate_and_misaligned(scenario, tmp_path, capsys):
    data = scenario / "data"
    tr, ids = read_traffic_csv(data / "traffic.csv")
    lines = (data / "traffic.csv").read_text().splitlines()
    const = [lines[0]] + [",".join(l.split(",")[:2] + ["0.5", "100.0", "30.0"]) for l in lines[1:]]
    (tmp_path / "const.csv").write_text("\n".join(const) + "\n")
    flines = (data / "features.csv").read_text().splitlines()
    fconst = [flines[0]] + [",".join(l.split(",")[:2] + ["0.0", "0.0", "0.0", "1.0"]) for l in flines[1:]]
    (tmp_path / "fconst.csv").write_text("\n".join(fconst) + "\n")
    err = run_fail(capsys, "correlate", "--traffic", tmp_path / "const.csv", "--features", tmp_path / "fconst.csv",
                   "--out", tmp_path / "o")
    assert err["error"] == "UndefinedCorrelationError"
    (tmp_path / "short.csv").write_text("\n".join(flines[:-96]) + "\n")
    err = run_fail(capsys, "correlate", "--traffic", data / "traffic.csv", "--features", tmp_path / "short.csv",
                   "--out", tmp_path / "o")
    assert err["error"] == "AlignmentError"


def test_train_evaluate_ablate_round(scenario, tmp_path, capsys):
    data = scenario / "data"
    mc, tc = write(tmp_path / "m.json", TINY_MODEL), write(tmp_path / "t.json", TINY_TRAIN)
    run_ok("train", "--data", data, "--model-config", mc, "--train-config", tc, "--out", tmp_path / "a", "--quiet")
    run_ok("train", "--data", data, "--model-config", mc, "--train-config", tc, "--out", tmp_path / "b", "--quiet")
    assert checksums(tmp_path / "a") == checksums(tmp_path / "b")
    hist = (tmp_path / "a" / "loss_history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_mse,val_mse" and len(hist) == 3
    table = list(csv.DictReader(open(tmp_path / "a" / "metrics_table.csv")))
    assert {r["model"] for r in table} == {"ttformer", "persistence", "seasonal_mean"}

    run_ok("evaluate", "--data", data, "--train-config", tc, "--checkpoint", tmp_path / "a" / "checkpoint.json",
           "--out", tmp_path / "e")
    ev = json.loads((tmp_path / "e" / "metrics.json").read_text())["ttformer"]
    tr = json.loads((tmp_path / "a" / "metrics.json").read_text())["ttformer"]
    assert ev == tr
    run_ok("evaluate", "--data", data, "--train-config", tc, "--model-config", mc, "--oracle",
           "--out", tmp_path / "o")
    oracle = json.loads((tmp_path / "o" / "metrics.json").read_text())["oracle"]["overall"]
    assert oracle == {"mse": 0.0, "mae": 0.0, "mape": 0.0}

    run_ok("ablate", "--data", data, "--model-config", mc, "--train-config", tc, "--out", tmp_path / "ab", "--quiet")
    rows = list(csv.DictReader(open(tmp_path / "ab" / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["full", "drop_culture", "drop_term_frequency", "drop_accident",
                                            "drop_time_encoder"]
    err = run_fail(capsys, "ablate", "--data", data, "--model-config", mc, "--train-config", tc,
                   "--variants", "full,drop_weather", "--out", tmp_path / "ab2")
    assert err["error"] == "ConfigError"


def test_training_divergence_exit(scenario, tmp_path, capsys):
    data = scenario / "data"
    mc = write(tmp_path / "m.json", TINY_MODEL)
    tc = write(tmp_path / "t.json", dict(TINY_TRAIN, learning_rate=1e300))
    err = run_fail(capsys, "train", "--data", data, "--model-config", mc, "--train-config", tc, "--out", tmp_path,
                   "--quiet")
    assert err["error"] == "TrainingFailure" and err["epoch"] >= 1


def test_console_module_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ttformer.cli", "synth", "--config",
                           write(tmp_path / "c.json", {"segments": 0}), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip())["error"] == "ScenarioConfigError"
