"""Seeded end-to-end experiments on synthetic scenarios.

The scripts in ``scripts/`` and the acceptance suite both go through these
functions, so a number printed by a script is the number the suite checks.
Config documents use the same JSON layout as the CLI.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

from .data import SplitSpec, TweetFeatureTensor
from .model import ModelConfig
from .stats import LagAnalysis, lag_analysis
from .synth import Scenario, ScenarioConfig, generate
from .text import extract_features
from .training import (
    VARIANTS,
    MetricsReport,
    TrainConfig,
    ablate,
    baseline,
    fit_and_evaluate,
)


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def build_inputs(scenario_doc: dict, seed: int) -> tuple[Scenario, TweetFeatureTensor, object]:
    """Generate a scenario and run the tweet pipeline over it (seed overrides the document)."""
    sc = generate(ScenarioConfig.from_dict(dict(scenario_doc, seed=seed)))
    cfg = sc.config
    feats = extract_features(sc.tweets, sc.segment_centers, cfg.start_ts, cfg.steps, seed=seed)
    return sc, TweetFeatureTensor(cfg.start_ts, feats.values.transpose(1, 0, 2).copy()), feats


def split_train_doc(train_doc: dict, seed: int) -> tuple[TrainConfig, SplitSpec, list[str]]:
    doc = dict(train_doc, seed=seed)
    split = SplitSpec(**doc.pop("split"))
    doc.pop("mape_floor", None)
    variants = list(doc.pop("variants", VARIANTS))
    return TrainConfig.from_dict(doc), split, variants


@dataclass
class ForecastRun:
    seed: int
    reports: dict[str, MetricsReport]  # ttformer, persistence, seasonal_mean
    best_epoch: int
    seconds: float

    def mse_at(self, horizon: int = 12) -> dict[str, float]:
        return {k: r.per_horizon[horizon].mse for k, r in self.reports.items()}


def forecast_experiment(scenario_doc: dict, model_doc: dict, train_doc: dict, seed: int, log=None) -> ForecastRun:
    t0 = time.perf_counter()
    sc, tweets, _ = build_inputs(scenario_doc, seed)
    tcfg, split, _ = split_train_doc(train_doc, seed)
    mcfg = ModelConfig.from_dict(dict(model_doc, segments=sc.config.segments, seed=seed))
    res = fit_and_evaluate(sc.traffic, tweets, mcfg, tcfg, split, log)
    reports = {"ttformer": res.test}
    for kind in ("persistence", "seasonal_mean"):
        reports[kind] = baseline(kind, res.dataset, split)
    return ForecastRun(seed, reports, res.train.best_epoch, time.perf_counter() - t0)


def ablation_experiment(scenario_doc: dict, model_doc: dict, train_doc: dict, seed: int,
                        variants=None, log=None) -> dict[str, MetricsReport]:
    sc, tweets, _ = build_inputs(scenario_doc, seed)
    tcfg, split, default_variants = split_train_doc(train_doc, seed)
    mcfg = ModelConfig.from_dict(dict(model_doc, segments=sc.config.segments, seed=seed))
    results = ablate(variants or default_variants, sc.traffic, tweets, mcfg, tcfg, split, log)
    return {v: r.test for v, r in results.items()}


def correlation_experiment(scenario_doc: dict, seed: int, max_lag: int = 24) -> LagAnalysis:
    """Network-mean TPS against the summed per-segment tweet counts."""
    sc, _, feats = build_inputs(scenario_doc, seed)
    return lag_analysis(sc.traffic.values[:, :, 0].mean(axis=1), feats.tweet_counts.sum(axis=0),
                        sc.config.start_ts, max_lag)
