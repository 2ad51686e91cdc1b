"""Traffic/tweet tensors, fusion layout, time features and sliding windows."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import ContractError, ShapeError

STEP_SECONDS = 900
STEPS_PER_DAY = 96
TRAFFIC_CHANNELS = ("tps", "volume", "speed")
TWEET_CHANNELS = ("term_frequency", "accident", "culture")
ALL_CHANNELS = TRAFFIC_CHANNELS + TWEET_CHANNELS
TIME_FEATURES = ("minute", "hour", "dayofweek", "day", "dayofyear", "month", "weekofyear")
TIME_DENOMS = np.array([59.0, 23.0, 6.0, 31.0, 366.0, 12.0, 53.0])


class AlignmentError(ValueError):
    pass


@dataclass
class TrafficTensor:
    start_ts: int
    values: np.ndarray  # (steps, segments, 3): tps, volume, speed
    segment_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ShapeError(f"traffic tensor must be (steps, segments, 3), got {self.values.shape}")
        if not self.segment_ids:
            self.segment_ids = list(range(self.values.shape[1]))
        tps = self.values[:, :, 0]
        if np.any(tps < 0) or np.any(tps > 1):
            raise ValueError("TPS must lie in [0, 1]")
        if np.any(self.values[:, :, 1:] < 0):
            raise ValueError("volume and speed must be non-negative")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def segments(self) -> int:
        return self.values.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_ts + STEP_SECONDS * np.arange(self.steps, dtype=np.int64)


@dataclass
class TweetFeatureTensor:
    start_ts: int
    values: np.ndarray  # (steps, segments, 3): term_frequency, accident, culture

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ShapeError(f"tweet tensor must be (steps, segments, 3), got {self.values.shape}")
        if np.any(self.values[:, :, 1:] < 0):
            raise ValueError("tweet counts must be non-negative")


@dataclass(frozen=True)
class FusedLayout:
    """Channel-major layout: all segments of channel 0, then channel 1, ..."""

    channels: tuple[str, ...]
    segments: int

    @property
    def width(self) -> int:
        return len(self.channels) * self.segments

    def index(self, segment: int, channel: str) -> int:
        return self.channels.index(channel) * self.segments + segment

    def block(self, channel: str) -> slice:
        c = self.channels.index(channel)
        return slice(c * self.segments, (c + 1) * self.segments)

    def manifest(self) -> list[tuple[int, str]]:
        return [(m, ch) for ch in self.channels for m in range(self.segments)]


def _stack(traffic: np.ndarray, tweets: np.ndarray, channels: Sequence[str]) -> np.ndarray:
    full = np.concatenate([traffic, tweets], axis=-1)  # (..., M, 6)
    cols = [ALL_CHANNELS.index(c) for c in channels]
    picked = full[..., cols]  # (..., M, F)
    return np.swapaxes(picked, -1, -2).reshape(*picked.shape[:-2], -1)


def fuse(x_step, c_step, channels: Sequence[str] = ALL_CHANNELS) -> np.ndarray:
    """Concatenate per-segment traffic (M, 3) and tweet (M, 3) channels into one vector."""
    x_step, c_step = np.asarray(x_step, dtype=np.float64), np.asarray(c_step, dtype=np.float64)
    if x_step.shape != c_step.shape or x_step.shape[-1] != 3:
        raise AlignmentError(f"traffic {x_step.shape} and tweet {c_step.shape} steps do not align")
    return _stack(x_step, c_step, channels)


def unfuse(vec, layout: FusedLayout) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`fuse`; channels absent from the layout come back as zeros."""
    vec = np.asarray(vec, dtype=np.float64)
    per = vec.reshape(*vec.shape[:-1], len(layout.channels), layout.segments)
    full = np.zeros((*vec.shape[:-1], layout.segments, len(ALL_CHANNELS)))
    for i, ch in enumerate(layout.channels):
        full[..., ALL_CHANNELS.index(ch)] = per[..., i, :]
    return full[..., :3], full[..., 3:]


def fuse_sequence(traffic: TrafficTensor, tweets: TweetFeatureTensor,
                  channels: Sequence[str] = ALL_CHANNELS) -> tuple[np.ndarray, FusedLayout]:
    if traffic.values.shape != tweets.values.shape or traffic.start_ts != tweets.start_ts:
        raise AlignmentError(
            f"traffic grid {traffic.values.shape}@{traffic.start_ts} vs tweets {tweets.values.shape}@{tweets.start_ts}")
    return _stack(traffic.values, tweets.values, channels), FusedLayout(tuple(channels), traffic.segments)


def sinusoidal_encoding(seq_len: int, d_tau: int) -> np.ndarray:
    if d_tau < 2 or d_tau % 2:
        raise ContractError("encoding width must be an even integer >= 2")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    k = np.arange(d_tau)
    expo = np.where(k % 2 == 0, k, k - 1) / d_tau
    angle = pos / np.power(10000.0, expo)[None, :]
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


@lru_cache(maxsize=4096)
def _day_fields(day_index: int) -> tuple[int, int, int, int, int]:
    d = dt.date(1970, 1, 1) + dt.timedelta(days=day_index)
    return d.weekday(), d.day, d.timetuple().tm_yday, d.month, d.isocalendar()[1]


def calendar_features(ts) -> np.ndarray:
    """Seven calendar fields scaled into [0, 1]; vectorised over an array of UTC seconds."""
    ts = np.asarray(ts, dtype=np.int64)
    flat = ts.reshape(-1)
    days = flat // 86400
    sec = flat % 86400
    out = np.empty((flat.size, 7))
    out[:, 0] = (sec % 3600) // 60
    out[:, 1] = sec // 3600
    for i, day in enumerate(days):
        out[i, 2:] = _day_fields(int(day))
    out /= TIME_DENOMS
    return out.reshape(*ts.shape, 7)


def encode_input(embedded, tau, timefeat, w) -> np.ndarray:
    """W (x_emb ⊕ tau ⊕ T) for a single step or a sequence of steps."""
    embedded, tau, timefeat, w = (np.asarray(a, dtype=np.float64) for a in (embedded, tau, timefeat, w))
    cat = np.concatenate([embedded, tau, timefeat], axis=-1)
    if w.ndim != 2 or w.shape[1] != cat.shape[-1]:
        raise ContractError(f"projection of shape {w.shape} cannot map a {cat.shape[-1]}-wide input")
    return cat @ w.T


# -- windows ------------------------------------------------------------------


@dataclass
class WindowedSample:
    offset: int
    in_len: int
    out_len: int

    @property
    def input_index(self) -> range:
        return range(self.offset, self.offset + self.in_len)

    @property
    def target_index(self) -> range:
        return range(self.offset + self.in_len, self.offset + self.in_len + self.out_len)


def make_windows(n_steps: int, in_len: int = 12, out_len: int = 12, stride: int = 1,
                 lo: int = 0, hi: int | None = None) -> list[WindowedSample]:
    """Windows whose input and target both lie inside ``[lo, hi)``."""
    hi = n_steps if hi is None else hi
    span = hi - lo
    if span < in_len + out_len:
        raise ContractError(f"{span} steps cannot hold a {in_len}+{out_len} window")
    return [WindowedSample(o, in_len, out_len) for o in range(lo, hi - in_len - out_len + 1, stride)]


@dataclass(frozen=True)
class SplitSpec:
    train_days: int = 60
    val_days: int = 15
    test_days: int = 15

    def ranges(self, steps_per_day: int = STEPS_PER_DAY) -> dict[str, tuple[int, int]]:
        a = self.train_days * steps_per_day
        b = a + self.val_days * steps_per_day
        c = b + self.test_days * steps_per_day
        return {"train": (0, a), "val": (a, b), "test": (b, c)}


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class ForecastDataset:
    """Fused series plus everything needed to cut model batches from it."""

    fused: np.ndarray  # (N, M*F) raw
    tps: np.ndarray  # (N, M) raw
    timestamps: np.ndarray
    layout: FusedLayout
    norm: Normalizer
    in_len: int = 12
    out_len: int = 12
    calendar: np.ndarray = field(init=False)
    fused_norm: np.ndarray = field(init=False)
    tps_norm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.calendar = calendar_features(self.timestamps)
        self.fused_norm = self.norm.apply(self.fused)
        blk = self.layout.block("tps")
        self.tps_norm = (self.tps - self.norm.mean[blk]) / self.norm.std[blk]

    @classmethod
    def build(cls, traffic: TrafficTensor, tweets: TweetFeatureTensor, channels: Sequence[str] = ALL_CHANNELS,
              split: SplitSpec | None = None, in_len: int = 12, out_len: int = 12,
              norm: Normalizer | None = None) -> "ForecastDataset":
        fused, layout = fuse_sequence(traffic, tweets, channels)
        if norm is None:
            lo, hi = (split or SplitSpec()).ranges()["train"]
            norm = Normalizer.fit(fused[lo:min(hi, len(fused))])
        return cls(fused, traffic.values[:, :, 0].copy(), traffic.timestamps, layout, norm, in_len, out_len)

    @property
    def segments(self) -> int:
        return self.layout.segments

    def windows(self, lo: int = 0, hi: int | None = None, stride: int = 1) -> list[WindowedSample]:
        return make_windows(len(self.fused), self.in_len, self.out_len, stride, lo, hi)

    def batch(self, offsets) -> dict[str, np.ndarray]:
        """Model inputs for windows starting at ``offsets``.

        Decoder token j carries the TPS observed at step T-1+j (T = first
        target step) and that step's calendar features.
        """
        offsets = np.asarray(offsets, dtype=np.int64)
        enc = offsets[:, None] + np.arange(self.in_len)[None, :]
        tgt = offsets[:, None] + self.in_len + np.arange(self.out_len)[None, :]
        dec = tgt - 1
        return {
            "enc_x": self.fused_norm[enc],
            "enc_cal": self.calendar[enc],
            "dec_tps": self.tps_norm[dec],
            "dec_cal": self.calendar[dec],
            "target": self.tps[tgt],
            "last_tps": self.tps[enc[:, -1]],
            "target_ts": self.timestamps[tgt],
        }

    def normalize_tps(self, tps: np.ndarray) -> np.ndarray:
        blk = self.layout.block("tps")
        return (tps - self.norm.mean[blk]) / self.norm.std[blk]

    def manifest(self, extra: dict | None = None) -> dict:
        out = {
            "layout": {"channels": list(self.layout.channels), "segments": self.layout.segments,
                       "order": "channel-major"},
            "normalization": {"mean": self.norm.mean.tolist(), "std": self.norm.std.tolist()},
            "windows": {"in_len": self.in_len, "out_len": self.out_len, "step_seconds": STEP_SECONDS},
        }
        out.update(extra or {})
        return out


def save_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def normalizer_from_manifest(manifest: dict) -> Normalizer:
    n = manifest["normalization"]
    return Normalizer(np.asarray(n["mean"], dtype=np.float64), np.asarray(n["std"], dtype=np.float64))
