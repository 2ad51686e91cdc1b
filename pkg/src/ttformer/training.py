"""Training loop, evaluation protocol, baselines and the ablation driver.

Metrics are computed on raw unit-interval TPS. Training minimises teacher-forced
MSE over the full output sequence; validation and test use autoregressive
rollout, so every reported number reflects the inference regime.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .data import ALL_CHANNELS, STEP_SECONDS, ForecastDataset, SplitSpec, TrafficTensor, TweetFeatureTensor
from .model import ConfigError, ForecastModel, ModelConfig
from .numerics import ContractError, DiffGraph, backward, make_rng
from .stats import HourlySeries, TrendTable, compute_trend, hour_day

HORIZON_STEPS = (1, 4, 8, 12)
VARIANTS = ("full", "drop_culture", "drop_term_frequency", "drop_accident", "drop_time_encoder")
TARGET_KEYS = ("target",)


class TrainingFailure(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_stride: int = 1  # spacing between training window offsets
    val_stride: int = 1
    eval_batch: int = 256
    clip_norm: float | None = None
    # parallel scheduled sampling: probability that a decoder token (after the first) is replaced by
    # the model's own prediction from a gradient-free pass; 0 keeps pure teacher forcing
    sampling_prob: float = 0.0
    sampling_passes: int = 1
    sampling_warmup: int = 0  # epochs of pure teacher forcing before sampling starts

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be finite and non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")
        if not 0.0 <= self.sampling_prob <= 1.0 or self.sampling_passes < 1 or self.sampling_warmup < 0:
            raise ConfigError("sampling_prob must lie in [0, 1], sampling_passes >= 1, sampling_warmup >= 0")
        if self.train_stride < 1 or self.val_stride < 1 or self.eval_batch < 1:
            raise ConfigError("strides and eval_batch must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train-config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Bias-corrected first/second moment optimizer over a dict of arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- metrics ------------------------------------------------------------------


@dataclass
class Metrics:
    mse: float
    mae: float
    mape: float  # percent


@dataclass
class MetricsReport:
    mse: float
    mae: float
    mape: float
    per_horizon: dict[int, Metrics]
    n_windows: int = 0

    def to_dict(self) -> dict:
        return {
            "overall": {"mse": self.mse, "mae": self.mae, "mape": self.mape},
            "per_horizon": {str(h): asdict(m) | {"minutes": h * STEP_SECONDS // 60}
                            for h, m in sorted(self.per_horizon.items())},
            "n_windows": self.n_windows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table_rows(self, model: str) -> list[dict]:
        rows = [{"model": model, "horizon": f"{h * STEP_SECONDS // 60}min", "mse": m.mse, "mae": m.mae,
                 "mape": m.mape} for h, m in sorted(self.per_horizon.items())]
        rows.append({"model": model, "horizon": "overall", "mse": self.mse, "mae": self.mae, "mape": self.mape})
        return rows


def _metrics(p: np.ndarray, t: np.ndarray, floor: float) -> Metrics:
    err = p - t
    return Metrics(float(np.mean(err * err)), float(np.mean(np.abs(err))),
                   float(100.0 * np.mean(np.abs(err) / np.maximum(np.abs(t), floor))))


def compute_metrics(pred, truth, mape_floor: float = 1e-3) -> MetricsReport:
    """MSE / MAE / MAPE overall and at horizon steps 1, 4, 8 and 12.

    The horizon is the second-to-last axis: ``(horizon, segments)`` or
    ``(windows, horizon, segments)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    if pred.ndim < 2 or pred.size == 0:
        raise ContractError("metrics need a non-empty (..., horizon, segments) array")
    if not mape_floor > 0:
        raise ContractError("mape_floor must be positive")
    overall = _metrics(pred, truth, mape_floor)
    per = {h: _metrics(pred[..., h - 1, :], truth[..., h - 1, :], mape_floor)
           for h in HORIZON_STEPS if h <= pred.shape[-2]}
    n = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return MetricsReport(overall.mse, overall.mae, overall.mape, per, n)


def write_table_csv(path_or_buf, rows: Sequence[dict], fields: Sequence[str]) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", encoding="utf-8", newline="") if own else path_or_buf
    try:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    finally:
        if own:
            fh.close()


def metrics_table_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    write_table_csv(buf, [r for name, rep in reports.items() for r in rep.table_rows(name)],
                    ("model", "horizon", "mse", "mae", "mape"))
    return buf.getvalue()


# -- forecasters --------------------------------------------------------------


class Forecaster(Protocol):
    def predict(self, batch: dict, horizon: int | None = None) -> np.ndarray: ...


def _strip_targets(batch: dict) -> dict:
    """Drop everything observed after the forecast origin: targets and later decoder tokens."""
    out = {k: v for k, v in batch.items() if k not in TARGET_KEYS}
    out["dec_tps"] = out["dec_tps"][..., :1, :]
    return out


@dataclass
class PersistenceForecaster:
    horizon: int = 12

    def predict(self, batch: dict, horizon: int | None = None) -> np.ndarray:
        h = horizon or self.horizon
        last = np.asarray(batch["last_tps"])
        return np.repeat(last[:, None, :], h, axis=1)


@dataclass
class SeasonalMeanForecaster:
    """Per-segment (hour, weekday) mean of the training TPS."""

    tables: list[TrendTable]

    @classmethod
    def fit(cls, tps: np.ndarray, start_ts: int, step: int = STEP_SECONDS) -> "SeasonalMeanForecaster":
        return cls([compute_trend(HourlySeries(start_ts, tps[:, m], step)) for m in range(tps.shape[1])])

    def predict(self, batch: dict, horizon: int | None = None) -> np.ndarray:
        ts = np.asarray(batch["target_ts"])
        if horizon:
            ts = ts[:, :horizon]
        h, d = hour_day(ts)
        out = np.stack([t.means[h, d] for t in self.tables], axis=-1)
        if np.isnan(out).any():
            raise ContractError("seasonal table lacks an (hour, weekday) cell needed for prediction")
        return out


@dataclass
class OracleForecaster:
    """Harness self-test: looks the true future up by timestamp."""

    tps: np.ndarray
    start_ts: int

    def predict(self, batch: dict, horizon: int | None = None) -> np.ndarray:
        ts = np.asarray(batch["target_ts"])
        if horizon:
            ts = ts[:, :horizon]
        return self.tps[(ts - self.start_ts) // STEP_SECONDS]


def forecast_windows(forecaster: Forecaster, dataset: ForecastDataset, offsets: Sequence[int],
                     batch: int = 256) -> np.ndarray:
    """Predictions for every window; targets are removed before the forecaster sees a batch."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.size == 0:
        raise ContractError("no windows to forecast")
    parts = [forecaster.predict(_strip_targets(dataset.batch(offsets[i:i + batch])), dataset.out_len)
             for i in range(0, len(offsets), batch)]
    return np.concatenate(parts, axis=0)


def split_offsets(dataset: ForecastDataset, split: SplitSpec, part: str, stride: int = 1) -> np.ndarray:
    lo, hi = split.ranges()[part]
    return np.array([w.offset for w in dataset.windows(lo, min(hi, len(dataset.fused)), stride)], dtype=np.int64)


def evaluate(forecaster: Forecaster, dataset: ForecastDataset, split: SplitSpec, part: str = "test",
             mape_floor: float = 1e-3, batch: int = 256) -> tuple[MetricsReport, np.ndarray]:
    offsets = split_offsets(dataset, split, part)
    pred = forecast_windows(forecaster, dataset, offsets, batch)
    truth = dataset.batch(offsets)["target"]
    return compute_metrics(pred, truth, mape_floor), pred


def baseline(kind: str, dataset: ForecastDataset, split: SplitSpec, part: str = "test",
             mape_floor: float = 1e-3) -> MetricsReport:
    if kind == "persistence":
        f: Forecaster = PersistenceForecaster(dataset.out_len)
    elif kind == "seasonal_mean":
        lo, hi = split.ranges()["train"]
        f = SeasonalMeanForecaster.fit(dataset.tps[lo:hi], int(dataset.timestamps[lo]))
    else:
        raise ConfigError(f"unknown baseline {kind!r}")
    return evaluate(f, dataset, split, part, mape_floor)[0]


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: ForecastModel
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train_mse, val_mse)
    best_epoch: int = 0

    def history_csv(self) -> str:
        buf = io.StringIO()
        write_table_csv(buf, [{"epoch": e, "train_mse": tr, "val_mse": va} for e, tr, va in self.history],
                        ("epoch", "train_mse", "val_mse"))
        return buf.getvalue()


def _loss_and_grads(model: ForecastModel, batch: dict) -> tuple[float, dict[str, np.ndarray]]:
    g = DiffGraph()
    out = model.teacher_forced(g, batch)
    diff = out - g.constant(batch["target"])
    loss = g.mean(g.square(diff))
    grads = backward(g, loss)
    return float(loss.value), grads


def _sampled_tokens(model: ForecastModel, batch: dict, prob: float, passes: int,
                    rng: np.random.Generator) -> dict:
    """Replace later decoder tokens by the model's own (clamped) forecasts with probability ``prob``."""
    tokens = batch["dec_tps"].copy()
    swap = rng.random(tokens.shape[:-1]) < prob
    swap[..., 0] = False
    for _ in range(passes):
        g = DiffGraph()
        pred = np.clip(model.teacher_forced(g, dict(batch, dec_tps=tokens)).value, 0.0, 1.0)
        own = model.normalize_tps(pred[..., :-1, :])
        tokens = batch["dec_tps"].copy()
        tokens[..., 1:, :] = np.where(swap[..., 1:, None], own, tokens[..., 1:, :])
    return dict(batch, dec_tps=tokens)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
    if total > max_norm:
        for v in grads.values():
            v *= max_norm / total


def validation_mse(model: ForecastModel, dataset: ForecastDataset, offsets: np.ndarray, batch: int) -> float:
    pred = forecast_windows(model, dataset, offsets, batch)
    err = pred - dataset.batch(offsets)["target"]
    return float(np.mean(err * err))


def train(model: ForecastModel, dataset: ForecastDataset, config: TrainConfig,
          split: SplitSpec | None = None, train_offsets=None, val_offsets=None,
          log=None) -> TrainResult:
    """Adam on teacher-forced MSE; keeps the parameters of the best validation epoch."""
    split = split or SplitSpec()
    tr = np.asarray(train_offsets if train_offsets is not None
                    else split_offsets(dataset, split, "train", config.train_stride), dtype=np.int64)
    va = np.asarray(val_offsets if val_offsets is not None
                    else split_offsets(dataset, split, "val", config.val_stride), dtype=np.int64)
    if tr.size == 0 or va.size == 0:
        raise ContractError("train and validation splits must each hold at least one window")
    if model.norm is None:
        model.norm = dataset.norm
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    result = TrainResult(model)
    best = (validation_mse(model, dataset, va, config.eval_batch), 0, {k: v.copy() for k, v in model.params.items()})
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        order = make_rng(config.seed, "shuffle", epoch).permutation(tr)
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            b = dataset.batch(idx)
            if config.sampling_prob > 0 and epoch > config.sampling_warmup:
                b = _sampled_tokens(model, b, config.sampling_prob, config.sampling_passes,
                                    make_rng(config.seed, "sampling", epoch, i))
            loss, grads = _loss_and_grads(model, b)
            if not math.isfinite(loss):
                raise TrainingFailure(epoch, "loss is not finite")
            if config.clip_norm:
                _clip(grads, config.clip_norm)
            opt.step(model.params, grads)
            total += loss * len(idx)
        train_mse = total / len(order)
        val = validation_mse(model, dataset, va, config.eval_batch)
        if not (math.isfinite(train_mse) and math.isfinite(val)):
            raise TrainingFailure(epoch, "validation loss is not finite")
        result.history.append((epoch, train_mse, val))
        if log:
            log(f"epoch {epoch:3d}  train_mse {train_mse:.6g}  val_mse {val:.6g}")
        if val < best[0]:
            best = (val, epoch, {k: v.copy() for k, v in model.params.items()})
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.params = best[2]
    result.best_epoch = best[1]
    model.meta = dict(model.meta, best_epoch=best[1], best_val_mse=best[0])
    return result


# -- ablation -----------------------------------------------------------------


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if variant == "full":
        return replace(base, channels=tuple(base.channels))
    if variant == "drop_time_encoder":
        return replace(base, use_calendar=False)
    dropped = {"drop_culture": "culture", "drop_term_frequency": "term_frequency", "drop_accident": "accident"}[variant]
    if dropped not in base.channels:
        raise ConfigError(f"variant {variant} needs channel {dropped!r} in the base configuration")
    return replace(base, channels=tuple(c for c in base.channels if c != dropped))


@dataclass
class ExperimentResult:
    model: ForecastModel
    train: TrainResult
    test: MetricsReport
    dataset: ForecastDataset


def fit_and_evaluate(traffic: TrafficTensor, tweets: TweetFeatureTensor, model_cfg: ModelConfig,
                     train_cfg: TrainConfig, split: SplitSpec, log=None) -> ExperimentResult:
    ds = ForecastDataset.build(traffic, tweets, model_cfg.channels, split, model_cfg.input_len, model_cfg.horizon)
    model = ForecastModel.init(model_cfg, ds.norm)
    tr = train(model, ds, train_cfg, split, log=log)
    rep, _ = evaluate(model, ds, split, "test", batch=train_cfg.eval_batch)
    return ExperimentResult(model, tr, rep, ds)


def ablate(variants: Sequence[str], traffic: TrafficTensor, tweets: TweetFeatureTensor, model_cfg: ModelConfig,
           train_cfg: TrainConfig, split: SplitSpec, log=None) -> dict[str, ExperimentResult]:
    """Train one model per variant from the same seed; results keyed by variant name."""
    if set(ALL_CHANNELS) - set(model_cfg.channels):
        raise ConfigError("ablation needs a base configuration holding every channel")
    cfgs = {v: variant_config(model_cfg, v) for v in variants}
    out = {}
    for v, cfg in cfgs.items():
        if log:
            log(f"variant {v}: {cfg.features} channels, calendar={cfg.use_calendar}")
        out[v] = fit_and_evaluate(traffic, tweets, cfg, train_cfg, split, log)
    return out


def ablation_table_csv(results: dict[str, ExperimentResult]) -> str:
    buf = io.StringIO()
    write_table_csv(buf, [{"variant": v, "features": r.model.config.features,
                           "calendar": int(r.model.config.use_calendar), "mse": r.test.mse, "mae": r.test.mae,
                           "mape": r.test.mape} for v, r in results.items()],
                    ("variant", "features", "calendar", "mse", "mae", "mape"))
    return buf.getvalue()
