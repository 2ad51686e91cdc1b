"""Command-line entry point: ``ttformer {synth,features,correlate,train,evaluate,ablate}``.

Every command validates its JSON config against a fixed schema before doing
any work, writes its outputs plus one ``run_manifest.json`` and exits 0. Any
failure prints exactly one JSON line on stderr, ``{"error": ..., "message": ...}``,
and exits 1 (2 for usage errors). ``FORECAST_SEED`` overrides every config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import AlignmentError, ForecastDataset, SplitSpec, TweetFeatureTensor
from .files import (
    FEATURE_HEADER,
    Grid,
    RunManifest,
    check_aligned,
    fmt,
    iso,
    parse_iso,
    read_feature_csv,
    read_segments_csv,
    read_traffic_csv,
    svg_lines,
    write_grid,
    write_json,
    write_segments_csv,
    write_traffic_csv,
)
from .model import ForecastModel, ModelConfig
from .stats import lag_analysis
from .synth import ScenarioConfig, generate
from .text import extract_features, load_lexicon, read_tweets, write_tweets
from .training import (
    VARIANTS,
    OracleForecaster,
    TrainConfig,
    TrainingFailure,
    ablate,
    ablation_table_csv,
    baseline,
    evaluate,
    metrics_table_csv,
    train,
)


class SchemaError(ValueError):
    pass


# -- config schemas -------------------------------------------------------------
# type tags: int, number, str, bool, list, object; a trailing "?" allows null

SCENARIO_SCHEMA = {
    "segments": "int", "days": "int", "seed": "int", "start": "str", "base_tps": "number",
    "daily_amplitude": "number", "daily_trough_hour": "number", "weekend_factor": "number",
    "weekly_amplitude": "number", "shared_ar": "number", "shared_scale": "number", "shared_fast_ar": "number",
    "shared_fast_scale": "number", "segment_ar": "number",
    "segment_scale": "number", "noise_scale": "number", "tweet_base_rate": "number",
    "tweet_daily_amplitude": "number", "planted_lag_hours": "int", "target_correlation": "number",
    "accident_rate": "number", "culture_rate": "number", "event_duration_steps": "list", "event_drop": "list",
    "event_ramp_steps": "int", "event_burst": "number", "event_lead_steps": "int", "background_fraction": "number",
    "events": "list",
}
FEATURES_SCHEMA = {
    "start": "str", "days": "int", "k": "int", "min_count": "int", "radius_km": "number", "seed": "int",
    "term_mode": "str",
}
CORRELATE_SCHEMA = {"max_lag": "int", "traffic_channel": "str", "tweet_channel": "str", "svg": "bool"}
MODEL_SCHEMA = {
    "segments": "int", "channels": "list", "d_model": "int", "heads": "int", "encoder_layers": "int",
    "decoder_layers": "int", "ff_dim": "int", "input_len": "int", "horizon": "int", "use_calendar": "bool",
    "ln_eps": "number", "seed": "int",
}
TRAIN_SCHEMA = {
    "learning_rate": "number", "batch_size": "int", "epochs": "int", "patience": "int", "seed": "int",
    "beta1": "number", "beta2": "number", "eps": "number", "train_stride": "int", "val_stride": "int",
    "eval_batch": "int", "clip_norm": "number?", "sampling_prob": "number", "sampling_passes": "int",
    "sampling_warmup": "int", "split": "object", "mape_floor": "number", "variants": "list",
}
SPLIT_SCHEMA = {"train_days": "int", "val_days": "int", "test_days": "int"}

_TYPES = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "object": lambda v: isinstance(v, dict),
}


def validate(doc, schema: dict[str, str], name: str) -> dict:
    if not isinstance(doc, dict):
        raise SchemaError(f"{name}: expected a JSON object")
    for key, value in doc.items():
        if key not in schema:
            raise SchemaError(f"{name}: unknown key {key!r}")
        tag = schema[key]
        if tag.endswith("?") and value is None:
            continue
        if not _TYPES[tag.rstrip("?")](value):
            raise SchemaError(f"{name}: key {key!r} must be of type {tag.rstrip('?')}")
    return doc


def load_config(path: str | None, schema: dict, name: str) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{name}: {path} is not valid JSON ({exc})") from exc
    return validate(doc, schema, name)


def seed_override() -> int | None:
    raw = os.environ.get("FORECAST_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise SchemaError(f"FORECAST_SEED must be an integer, got {raw!r}") from exc


def _with_seed(cfg: dict, default: int = 0) -> dict:
    s = seed_override()
    cfg = dict(cfg)
    if s is not None:
        cfg["seed"] = s
    cfg.setdefault("seed", default)
    return cfg


# -- shared loading -------------------------------------------------------------


def _features_grid(tweets_path, segments_path, cfg: dict, lexicons: str | None, traffic=None) -> Grid:
    seg_ids, centers = read_segments_csv(segments_path)
    tweets = read_tweets(tweets_path)
    if traffic is not None:
        start, n_bins = traffic.start_ts, traffic.steps
    elif "start" in cfg and "days" in cfg:
        start, n_bins = parse_iso(cfg["start"]), int(cfg["days"]) * 96
    elif tweets:
        ts = [t.ts for t in tweets]
        start = min(ts) // 86400 * 86400
        n_bins = (max(ts) // 86400 * 86400 + 86400 - start) // 900
    else:
        raise SchemaError("empty tweet file: the grid needs 'start' and 'days' in the features config")
    acc = cul = None
    if lexicons:
        acc = load_lexicon(Path(lexicons) / "accident_keywords.txt")
        cul = load_lexicon(Path(lexicons) / "culture_keywords.txt")
    f = extract_features(tweets, centers, start, n_bins, segment_ids=seg_ids, accident=acc, culture=cul,
                         k=cfg.get("k", 100), min_count=cfg.get("min_count", 3),
                         radius_km=cfg.get("radius_km", 5.0), seed=cfg.get("seed", 0),
                         term_mode=cfg.get("term_mode", "svd"))
    values = np.concatenate([f.values, f.tweet_counts[:, :, None]], axis=-1)
    grid = Grid(seg_ids, start, values, FEATURE_HEADER[2:])
    grid.explained_variance = f.explained_variance  # type: ignore[attr-defined]
    return grid


def load_data_dir(data: str, seed: int = 0):
    """Traffic tensor + tweet feature tensor from a scenario directory."""
    d = Path(data)
    traffic, seg_ids = read_traffic_csv(d / "traffic.csv")
    if (d / "features.csv").exists():
        feats = read_feature_csv(d / "features.csv")
    elif (d / "tweets.jsonl").exists() and (d / "segments.csv").exists():
        feats = _features_grid(d / "tweets.jsonl", d / "segments.csv", {"seed": seed}, None, traffic)
    else:
        raise FileNotFoundError(f"{data}: need features.csv, or tweets.jsonl with segments.csv")
    check_aligned(traffic, seg_ids, feats, "traffic vs features")
    tweets = TweetFeatureTensor(traffic.start_ts, feats.values[:, :, :3].transpose(1, 0, 2).copy())
    return traffic, tweets


def _model_config(doc: dict, segments: int) -> ModelConfig:
    doc = _with_seed(doc)
    if doc.setdefault("segments", segments) != segments:
        raise AlignmentError(f"model config expects {doc['segments']} segments, data has {segments}")
    return ModelConfig.from_dict(doc)


def _train_config(doc: dict) -> tuple[TrainConfig, SplitSpec, float, list[str]]:
    doc = _with_seed(doc)
    split = SplitSpec(**validate(doc.pop("split", {}), SPLIT_SCHEMA, "split"))
    floor = float(doc.pop("mape_floor", 1e-3))
    variants = list(doc.pop("variants", VARIANTS))
    return TrainConfig.from_dict(doc), split, floor, variants


def _log(quiet: bool):
    return None if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


# -- commands -------------------------------------------------------------------


def cmd_synth(args, run: RunManifest) -> None:
    cfg = _with_seed(load_config(args.config, SCENARIO_SCHEMA, "scenario config"))
    run.config, run.seed = cfg, cfg["seed"]
    scenario = generate(ScenarioConfig.from_dict(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"seg{i:03d}" for i in range(scenario.config.segments)]
    write_traffic_csv(out / "traffic.csv", scenario.traffic, ids)
    write_tweets(out / "tweets.jsonl", scenario.tweets)
    write_segments_csv(out / "segments.csv", ids, scenario.segment_centers)
    write_json(out / "manifest.json", dict(scenario.manifest, segment_ids=ids))
    run.outputs = {k: str(out / k) for k in ("traffic.csv", "tweets.jsonl", "segments.csv", "manifest.json")}
    run.record_inputs({"config": args.config or "<defaults>"})


def cmd_features(args, run: RunManifest) -> None:
    cfg = _with_seed(load_config(args.config, FEATURES_SCHEMA, "features config"))
    run.config, run.seed = cfg, cfg["seed"]
    traffic = read_traffic_csv(args.traffic)[0] if args.traffic else None
    grid = _features_grid(args.tweets, args.segments, cfg, args.lexicons, traffic)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grid(out, FEATURE_HEADER, grid.segment_ids, grid.start_ts, grid.values)
    ev_path = out.with_name(out.stem + ".explained_variance.csv")
    curve = grid.explained_variance  # type: ignore[attr-defined]
    with open(ev_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("k,cumulative_explained_variance\n")
        for i, v in enumerate(curve, 1):
            fh.write(f"{i},{fmt(v)}\n")
    run.outputs = {"features": str(out), "explained_variance": str(ev_path)}
    run.record_inputs({"tweets": args.tweets, "segments": args.segments, "lexicons": args.lexicons or "<shipped>"})


def cmd_correlate(args, run: RunManifest) -> None:
    cfg = load_config(args.config, CORRELATE_SCHEMA, "correlate config")
    max_lag = int(cfg.get("max_lag", 24))
    tchan = cfg.get("traffic_channel", "tps")
    wchan = cfg.get("tweet_channel", "tweet_count")
    run.config, run.seed = cfg, None
    traffic, seg_ids = read_traffic_csv(args.traffic)
    feats = read_feature_csv(args.features)
    check_aligned(traffic, seg_ids, feats, "traffic vs features")
    if tchan not in ("tps", "volume", "speed"):
        raise SchemaError(f"traffic_channel must be tps, volume or speed, got {tchan!r}")
    if wchan not in feats.columns:
        raise SchemaError(f"tweet_channel {wchan!r} not in features ({', '.join(feats.columns)})")
    v_raw = traffic.values[:, :, ("tps", "volume", "speed").index(tchan)].mean(axis=1)
    c_raw = feats.values[:, :, feats.columns.index(wchan)].sum(axis=0)
    res = lag_analysis(v_raw, c_raw, traffic.start_ts, max_lag)
    v, c, vd, cd = res.traffic, res.tweets, res.traffic_detrended, res.tweets_detrended
    cc, ols = res.correlation, res.ols

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "detrended.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"hour_start_iso8601,{tchan},{tchan}_detrended,{wchan},{wchan}_detrended\n")
        for i, ts in enumerate(v.timestamps):
            fh.write(f"{iso(ts)},{fmt(v.values[i])},{fmt(vd.values[i])},{fmt(c.values[i])},{fmt(cd.values[i])}\n")
    with open(out / "lag_correlation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("lag_hours,correlation\n")
        for lag, r in enumerate(cc):
            fh.write(f"{lag},{fmt(r)}\n")
    table = ols.as_table()
    table["min_lag_hours"] = res.min_lag
    write_json(out / "ols.json", table)
    run.outputs = {k: str(out / k) for k in ("detrended.csv", "lag_correlation.csv", "ols.json")}
    if args.svg or cfg.get("svg", False):
        hours = np.arange(len(vd.values))
        svg_lines(out / "detrended.svg", {f"{tchan} (detrended)": (hours, vd.values / max(np.std(vd.values), 1e-12)),
                                          f"{wchan} (detrended)": (hours, cd.values / max(np.std(cd.values), 1e-12))},
                  "Detrended series (standardised)", xlabel="hour", ylabel="z-score")
        svg_lines(out / "lag_correlation.svg", {"correlation": (np.arange(len(cc)), cc)},
                  "Cross-correlation by lag", xlabel="lag (hours)", ylabel="Pearson r")
        run.outputs.update({k: str(out / k) for k in ("detrended.svg", "lag_correlation.svg")})
    run.record_inputs({"traffic": args.traffic, "features": args.features})


def _load_training_inputs(args, run: RunManifest):
    mdoc = load_config(args.model_config, MODEL_SCHEMA, "model config")
    tdoc = load_config(args.train_config, TRAIN_SCHEMA, "train config")
    tcfg, split, floor, variants = _train_config(tdoc)
    traffic, tweets = load_data_dir(args.data, tcfg.seed)
    mcfg = _model_config(mdoc, traffic.segments)
    run.config = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "split": vars(split) | {},
                  "mape_floor": floor}
    run.seed = tcfg.seed
    run.record_inputs({"data": args.data, "model_config": args.model_config or "<defaults>",
                       "train_config": args.train_config or "<defaults>"})
    return traffic, tweets, mcfg, tcfg, split, floor, variants


def cmd_train(args, run: RunManifest) -> None:
    traffic, tweets, mcfg, tcfg, split, floor, _ = _load_training_inputs(args, run)
    ds = ForecastDataset.build(traffic, tweets, mcfg.channels, split, mcfg.input_len, mcfg.horizon)
    model = ForecastModel.init(mcfg, ds.norm)
    res = train(model, ds, tcfg, split, log=_log(args.quiet))
    rep, _ = evaluate(model, ds, split, "test", floor, tcfg.eval_batch)
    reports = {"ttformer": rep, "persistence": baseline("persistence", ds, split, "test", floor),
               "seasonal_mean": baseline("seasonal_mean", ds, split, "test", floor)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "checkpoint.json")
    (out / "loss_history.csv").write_text(res.history_csv(), encoding="utf-8")
    write_json(out / "metrics.json", {k: r.to_dict() for k, r in reports.items()})
    (out / "metrics_table.csv").write_text(metrics_table_csv(reports), encoding="utf-8")
    write_json(out / "dataset_manifest.json", ds.manifest({"split": vars(split)}))
    run.outputs = {k: str(out / k) for k in ("checkpoint.json", "loss_history.csv", "metrics.json",
                                             "metrics_table.csv", "dataset_manifest.json")}


def cmd_evaluate(args, run: RunManifest) -> None:
    tdoc = load_config(args.train_config, TRAIN_SCHEMA, "train config")
    tcfg, split, floor, _ = _train_config(tdoc)
    traffic, tweets = load_data_dir(args.data, tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.record_inputs({"data": args.data, "train_config": args.train_config or "<defaults>"})
    if args.oracle:
        mcfg = _model_config(load_config(args.model_config, MODEL_SCHEMA, "model config"), traffic.segments)
        ds = ForecastDataset.build(traffic, tweets, mcfg.channels, split, mcfg.input_len, mcfg.horizon)
        forecaster, name = OracleForecaster(ds.tps, traffic.start_ts), "oracle"
    else:
        if not args.checkpoint:
            raise SchemaError("evaluate needs --checkpoint (or --oracle)")
        model = ForecastModel.load(args.checkpoint)
        if model.config.segments != traffic.segments:
            raise AlignmentError(f"checkpoint expects {model.config.segments} segments, data has {traffic.segments}")
        mcfg = model.config
        ds = ForecastDataset.build(traffic, tweets, mcfg.channels, split, mcfg.input_len, mcfg.horizon,
                                   norm=model.norm)
        forecaster, name = model, "ttformer"
        run.record_inputs({"checkpoint": args.checkpoint})
    run.config = {"model": mcfg.to_dict(), "split": vars(split), "mape_floor": floor, "oracle": bool(args.oracle)}
    run.seed = tcfg.seed
    rep, _ = evaluate(forecaster, ds, split, "test", floor, tcfg.eval_batch)
    write_json(out / "metrics.json", {name: rep.to_dict()})
    (out / "metrics_table.csv").write_text(metrics_table_csv({name: rep}), encoding="utf-8")
    run.outputs = {k: str(out / k) for k in ("metrics.json", "metrics_table.csv")}


def cmd_ablate(args, run: RunManifest) -> None:
    traffic, tweets, mcfg, tcfg, split, floor, variants = _load_training_inputs(args, run)
    if args.variants:
        variants = args.variants.split(",")
    run.config["variants"] = variants
    res = ablate(variants, traffic, tweets, mcfg, tcfg, split, log=_log(args.quiet))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_table_csv(res), encoding="utf-8")
    write_json(out / "ablation_metrics.json", {v: r.test.to_dict() | {"best_epoch": r.train.best_epoch}
                                               for v, r in res.items()})
    run.outputs = {k: str(out / k) for k in ("ablation.csv", "ablation_metrics.json")}


# -- plumbing -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1, **extra) -> None:
    print(json.dumps({"error": kind, "message": message.replace("\n", " ")} | extra, sort_keys=True),
          file=sys.stderr, flush=True)
    sys.exit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ttformer", description="Traffic/tweet fusion forecasting experiments.")
    p.add_argument("--version", action="version", version=f"ttformer {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scenario")
    s.add_argument("--config", help="scenario config JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("features", help="extract per-segment tweet features")
    s.add_argument("--tweets", required=True)
    s.add_argument("--segments", required=True)
    s.add_argument("--lexicons", help="directory with accident_keywords.txt and culture_keywords.txt")
    s.add_argument("--traffic", help="traffic CSV whose time grid the features should follow")
    s.add_argument("--config", help="features config JSON")
    s.add_argument("--out", required=True, help="output feature CSV path")

    s = sub.add_parser("correlate", help="detrend, cross-correlate and regress traffic on tweets")
    s.add_argument("--traffic", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--config", help="correlate config JSON")
    s.add_argument("--svg", action="store_true", help="also write SVG line charts")
    s.add_argument("--out", required=True)

    for name, help_ in (("train", "train a model and report test metrics"),
                        ("evaluate", "evaluate a checkpoint on the test split"),
                        ("ablate", "train one model per ablation variant")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", required=True, help="scenario directory (traffic.csv + features.csv or tweets)")
        s.add_argument("--model-config")
        s.add_argument("--train-config")
        s.add_argument("--out", required=True)
        s.add_argument("--quiet", action="store_true")
        if name == "evaluate":
            s.add_argument("--checkpoint")
            s.add_argument("--oracle", action="store_true", help="harness self-test: perfect-oracle forecaster")
        if name == "ablate":
            s.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    return p


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "correlate": cmd_correlate, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def manifest_path(args) -> Path:
    if args.command == "features":
        out = Path(args.out)
        return out.with_name(out.stem + ".run_manifest.json")
    return Path(args.out) / "run_manifest.json"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    run = RunManifest(args.command, {}, None)
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, run)
        run.wall_clock_seconds = round(time.perf_counter() - t0, 3)
        run.write(manifest_path(args))
    except TrainingFailure as exc:
        _fail("TrainingFailure", str(exc), epoch=exc.epoch)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
