"""Synthetic traffic/tweet scenarios with planted, recoverable structure.

TPS per segment is

    clip(base - daily sinusoidal dip - weekly term + shared AR(1) pair + segment AR(1) + noise - event drops, 0, 1)

Tweets arrive as a Poisson process per (segment, 15-minute bin). Their rate is
scaled by exp(-gain * z(t + lag)), where z is the standardised shared component
(a slow and a fast AR(1) process; the fast one sharpens the correlation peak), so tweet volume now anticipates TPS ``lag`` hours later. The gain is
calibrated against the generated TPS so that the lagged correlation of the
detrended hourly series lands on ``target_correlation``. Event windows inject
tweets carrying lexicon keywords; ordinary tweets are built from a neutral
vocabulary that shares no token with either lexicon, so keyword counts are
exact.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize

from .data import STEP_SECONDS, STEPS_PER_DAY, TrafficTensor
from .numerics import make_rng
from .stats import compute_trend, detrend, to_hourly, HourlySeries
from .text import TweetRecord, default_lexicon, km_offset, tokenize

DEFAULT_START = "2020-05-01T00:00:00+00:00"
CENTER_LAT, CENTER_LON = 47.61, -122.33
SEGMENT_SPACING_KM = 12.0
TWEET_SPREAD_KM = 3.0


class ScenarioConfigError(ValueError):
    pass


# shortest scenario whose own realization is used to calibrate the tweet gain
CALIBRATION_DAYS = 28


@dataclass
class EventSpec:
    kind: str  # "accident" or "culture"
    segment: int
    start_ts: int
    duration_s: int
    tps_drop: float
    burst: float = 2.0  # extra keyword tweets per bin, as a multiple of the per-bin base rate
    lead_s: int = 0  # the TPS drop starts this long after the keyword tweets

    def steps(self, start_ts: int) -> range:
        """Bins carrying the event's keyword tweets."""
        first = (self.start_ts - start_ts) // STEP_SECONDS
        return range(first, first + max(1, self.duration_s // STEP_SECONDS))

    def drop_steps(self, start_ts: int) -> range:
        """Bins whose TPS the event lowers."""
        k = self.steps(start_ts)
        lead = self.lead_s // STEP_SECONDS
        return range(k.start + lead, k.stop + lead)


@dataclass
class ScenarioConfig:
    segments: int = 10
    days: int = 90
    seed: int = 0
    start: str = DEFAULT_START
    base_tps: float = 0.85
    daily_amplitude: float = 0.25
    daily_trough_hour: float = 14.0  # hour of the deepest daily dip
    weekend_factor: float = 0.4
    weekly_amplitude: float = 0.03
    shared_ar: float = 0.985
    shared_scale: float = 0.04
    shared_fast_ar: float = 0.8
    shared_fast_scale: float = 0.02
    segment_ar: float = 0.95
    segment_scale: float = 0.03
    noise_scale: float = 0.01
    tweet_base_rate: float = 4.0  # tweets / hour / segment
    tweet_daily_amplitude: float = 0.5
    planted_lag_hours: int = 10
    target_correlation: float = -0.3
    accident_rate: float = 0.0  # random accidents per segment-day
    culture_rate: float = 0.0
    event_duration_steps: tuple[int, int] = (6, 12)
    event_drop: tuple[float, float] = (0.15, 0.3)
    event_ramp_steps: int = 4
    event_burst: float = 2.0
    event_lead_steps: int = 0
    background_fraction: float = 0.02
    events: list[EventSpec] = field(default_factory=list)

    def __post_init__(self):
        self.events = [e if isinstance(e, EventSpec) else EventSpec(**e) for e in self.events]
        self.event_duration_steps = tuple(self.event_duration_steps)
        self.event_drop = tuple(self.event_drop)
        if self.segments < 1 or self.days < 2:
            raise ScenarioConfigError("need at least one segment and two days")
        if not -1.0 < self.target_correlation < 1.0:
            raise ScenarioConfigError("target_correlation must lie strictly inside (-1, 1)")
        if not (0 <= self.shared_ar < 1 and 0 <= self.segment_ar < 1 and 0 <= self.shared_fast_ar < 1):
            raise ScenarioConfigError("AR coefficients must lie in [0, 1)")

    @property
    def start_ts(self) -> int:
        return int(dt.datetime.fromisoformat(self.start).timestamp())

    @property
    def steps(self) -> int:
        return self.days * STEPS_PER_DAY

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ScenarioConfigError(f"unknown scenario keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Scenario:
    config: ScenarioConfig
    traffic: TrafficTensor
    tweets: list[TweetRecord]
    segment_centers: list[tuple[float, float]]
    manifest: dict


def neutral_vocabulary(size: int = 400) -> list[str]:
    """Pronounceable filler words sharing no token with the shipped lexicons."""
    banned = {t for kind in ("accident", "culture") for seq in default_lexicon(kind).terms for t in seq}
    rng = make_rng(0, "neutral_vocabulary")
    cons, vows = "bdfgklmnprstvz", "aeiou"
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n = int(rng.integers(2, 4))
        w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(n))
        if w not in seen and w not in banned:
            seen.add(w)
            words.append(w)
    return words


def _keyword_pool(kind: str) -> list[str]:
    other = "culture" if kind == "accident" else "accident"
    other_tokens = {t for seq in default_lexicon(other).terms for t in seq}
    raw = {
        "accident": [t for t in (" ".join(s) for s in default_lexicon("accident").terms)],
        "culture": ["blm", "#BlackLivesMatter", "Ahmaud Arbery", "Breonna Taylor", "George Floyd", "Jacob Blake",
                    "#AllLivesMatter", "protest", "privilege", "#Seattlepd", "Durkan", "#durkanresign",
                    "Anderson", "@mayorjenny capitol", "capitol", "hard"],
    }[kind]
    return [t for t in raw if tokenize(t) and not set(tokenize(t)) & other_tokens]


def segment_centers(n: int) -> list[tuple[float, float]]:
    cols = math.ceil(math.sqrt(n))
    out = []
    for i in range(n):
        r, c = divmod(i, cols)
        out.append(km_offset(CENTER_LAT, CENTER_LON, SEGMENT_SPACING_KM * (r - cols / 2),
                             SEGMENT_SPACING_KM * (c - cols / 2)))
    return [(round(a, 6), round(b, 6)) for a, b in out]


def _seasonal(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    ts = cfg.start_ts + STEP_SECONDS * np.arange(cfg.steps)
    hour = (ts % 86400) / 3600.0
    dow = (ts // 86400 + 3) % 7
    dip = 0.5 + 0.5 * np.cos(2 * np.pi * (hour - cfg.daily_trough_hour) / 24.0)
    dip = dip * np.where(dow >= 5, cfg.weekend_factor, 1.0)
    weekly = cfg.weekly_amplitude * np.cos(2 * np.pi * dow / 7.0)
    amp = cfg.daily_amplitude * (0.7 + 0.6 * rng.random(cfg.segments))
    return cfg.base_tps - dip[:, None] * amp[None, :] - weekly[:, None]


def _ar1(rng, n: int, cols: int, phi: float, scale: float) -> np.ndarray:
    shocks = rng.standard_normal((n, cols)) * scale * math.sqrt(1 - phi * phi)
    out = np.empty((n, cols))
    out[0] = rng.standard_normal(cols) * scale
    for t in range(1, n):
        out[t] = phi * out[t - 1] + shocks[t]
    return out


def _random_events(cfg: ScenarioConfig, rng: np.random.Generator, seasonal: np.ndarray) -> list[EventSpec]:
    events = []
    placed = np.zeros_like(seasonal)
    for kind, rate in (("accident", cfg.accident_rate), ("culture", cfg.culture_rate)):
        n = int(rng.poisson(rate * cfg.segments * cfg.days)) if rate > 0 else 0
        for _ in range(n):
            seg = int(rng.integers(cfg.segments))
            dur = int(rng.integers(cfg.event_duration_steps[0], cfg.event_duration_steps[1] + 1))
            lead = cfg.event_lead_steps
            first = int(rng.integers(0, cfg.steps - dur - lead))
            drop = float(rng.uniform(*cfg.event_drop))
            span = slice(first + lead, first + lead + dur)
            floor = float((seasonal[span, seg] - placed[span, seg]).min())
            drop = round(min(drop, floor - 0.02), 6)
            if drop <= 0:
                continue
            placed[span, seg] += drop * np.minimum(1.0, (np.arange(dur) + 1) / max(1, cfg.event_ramp_steps))
            events.append(EventSpec(kind, seg, cfg.start_ts + first * STEP_SECONDS, dur * STEP_SECONDS,
                                    drop, cfg.event_burst, lead * STEP_SECONDS))
    events.sort(key=lambda e: (e.start_ts, e.segment, e.kind))
    return events


def _event_drops(cfg: ScenarioConfig, events: list[EventSpec], seasonal: np.ndarray) -> np.ndarray:
    drops = np.zeros_like(seasonal)
    for e in events:
        steps = e.drop_steps(cfg.start_ts)
        tweets = e.steps(cfg.start_ts)
        if e.kind not in ("accident", "culture"):
            raise ScenarioConfigError(f"unknown event kind {e.kind!r}")
        if not 0 <= e.segment < cfg.segments:
            raise ScenarioConfigError(f"event segment {e.segment} out of range")
        if tweets.start < 0 or steps.stop > cfg.steps or e.lead_s < 0:
            raise ScenarioConfigError("event window falls outside the scenario span")
        if not 0 < e.tps_drop < 1:
            raise ScenarioConfigError("tps_drop must lie in (0, 1)")
        ramp = np.minimum(1.0, (np.arange(len(steps)) + 1) / max(1, cfg.event_ramp_steps))
        drops[steps.start:steps.stop, e.segment] += e.tps_drop * ramp
    if np.any(seasonal - drops < 0):
        raise ScenarioConfigError("an event drives TPS below zero before clamping")
    return drops


def _tweet_profile(cfg: ScenarioConfig) -> np.ndarray:
    ts = cfg.start_ts + STEP_SECONDS * np.arange(cfg.steps)
    hour = (ts % 86400) / 3600.0
    return 1.0 + cfg.tweet_daily_amplitude * np.sin(2 * np.pi * (hour - 9.0) / 24.0)


def _calibrate_gain(cfg: ScenarioConfig, tps: np.ndarray, z_future: np.ndarray, event_extra: np.ndarray) -> float:
    """Gain whose expected lagged correlation of detrended hourly series hits the target."""
    target = cfg.target_correlation
    if target == 0:
        return 0.0
    start = cfg.start_ts
    def resid(h):
        return detrend(h, compute_trend(h)).values

    v = resid(to_hourly(tps.mean(axis=1), start))
    lag = cfg.planted_lag_hours
    r = cfg.tweet_base_rate / 4.0
    profile = _tweet_profile(cfg)[:, None]
    extra = event_extra.sum(axis=1)

    def expected_corr(g: float) -> float:
        rate = cfg.segments * (r * profile * np.exp(-g * z_future - 0.5 * g * g))[:, 0] + extra
        hourly = to_hourly(rate, start)
        # to_hourly averages the four bins; hourly counts are four times that
        mean_count = 4.0 * hourly.values.mean()
        lam = 4.0 * resid(hourly)
        n = len(v)
        a, b = v[lag:], lam[: n - lag]
        cov = np.mean((a - a.mean()) * (b - b.mean()))
        return cov / math.sqrt(a.var() * (mean_count + b.var()))

    sign = 1.0 if target < 0 else -1.0  # positive gain lowers tweet volume ahead of high TPS
    f = lambda g: expected_corr(sign * g) - target
    # the plug-in correlation rises and then saturates in |g|; take the first crossing
    grid = np.concatenate([[0.0], np.geomspace(0.01, 20.0, 60)])
    vals = np.array([f(g) for g in grid])
    ok = np.isfinite(vals)
    grid, vals = grid[ok], vals[ok]
    cross = np.flatnonzero(np.sign(vals[1:]) != np.sign(vals[0])) if ok[0] else np.array([], dtype=int)
    if cross.size == 0:
        corr = vals + target
        best = (corr.min() if target < 0 else corr.max()) if corr.size else float("nan")
        raise ScenarioConfigError(f"target correlation {target} is not reachable with this tweet volume "
                                  f"(strongest reachable about {best:.3f})")
    i = int(cross[0])
    return sign * optimize.brentq(f, grid[i], grid[i + 1], xtol=1e-10)


def _text(rng, vocab: list[str], zipf: np.ndarray, keywords: list[str] | None) -> str:
    words = list(rng.choice(vocab, size=int(rng.integers(4, 11)), p=zipf))
    if keywords:
        for kw in rng.choice(keywords, size=int(rng.integers(1, 3)), replace=False):
            words.insert(int(rng.integers(0, len(words) + 1)), str(kw))
    return " ".join(words)


def generate(cfg: ScenarioConfig) -> Scenario:
    rng_tps = make_rng(cfg.seed, "tps")
    seasonal = _seasonal(cfg, rng_tps)
    events = list(cfg.events) + _random_events(cfg, make_rng(cfg.seed, "events"), seasonal)
    drops = _event_drops(cfg, events, seasonal)

    lag_steps = cfg.planted_lag_hours * 4
    shared = _ar1(rng_tps, cfg.steps + lag_steps, 1, cfg.shared_ar, cfg.shared_scale)[:, 0]
    shared = shared + _ar1(make_rng(cfg.seed, "tps_fast"), cfg.steps + lag_steps, 1, cfg.shared_fast_ar,
                           cfg.shared_fast_scale)[:, 0]
    shared_sd = math.hypot(cfg.shared_scale, cfg.shared_fast_scale)
    seg_ar = _ar1(rng_tps, cfg.steps, cfg.segments, cfg.segment_ar, cfg.segment_scale)
    noise = rng_tps.standard_normal((cfg.steps, cfg.segments)) * cfg.noise_scale
    tps = np.clip(seasonal + shared[: cfg.steps, None] + seg_ar + noise - drops, 0.0, 1.0)

    seg_rng = make_rng(cfg.seed, "segments")
    vmax = 55.0 + 15.0 * seg_rng.random(cfg.segments)
    capacity = 300.0 + 200.0 * seg_rng.random(cfg.segments)
    speed = vmax * tps
    volume = capacity * (0.3 + 0.9 * (1.0 - tps))
    traffic = TrafficTensor(cfg.start_ts, np.stack([tps, volume, speed], axis=-1))

    # keyword tweets: at least one per event bin so every event is visible in its counts
    rng_tw = make_rng(cfg.seed, "tweets")
    r = cfg.tweet_base_rate / 4.0
    keyword_tweets = {"accident": np.zeros((cfg.steps, cfg.segments), dtype=np.int64),
                      "culture": np.zeros((cfg.steps, cfg.segments), dtype=np.int64)}
    for e in events:
        for s in e.steps(cfg.start_ts):
            keyword_tweets[e.kind][s, e.segment] += 1 + int(rng_tw.poisson(e.burst * r))
    extra_mean = np.zeros((cfg.steps, cfg.segments))
    for e in events:
        for s in e.steps(cfg.start_ts):
            extra_mean[s, e.segment] += 1 + e.burst * r

    z_future = (shared[lag_steps:] / shared_sd)[:, None] if shared_sd > 0 else np.zeros((cfg.steps, 1))
    if shared_sd == 0:
        gain = 0.0
    elif cfg.days < CALIBRATION_DAYS:
        # too short for a stable estimate: borrow the gain of a longer run with the same settings
        ref = replace(cfg, days=CALIBRATION_DAYS, events=[])
        gain = generate(ref).manifest["tweet_gain"]
    else:
        gain = _calibrate_gain(cfg, tps, z_future, extra_mean)
    rate = r * _tweet_profile(cfg)[:, None] * np.exp(-gain * z_future - 0.5 * gain * gain)
    base_counts = rng_tw.poisson(np.broadcast_to(rate, (cfg.steps, cfg.segments)))

    vocab = neutral_vocabulary()
    zipf = 1.0 / np.arange(1, len(vocab) + 1) ** 1.05
    zipf /= zipf.sum()
    pools = {k: _keyword_pool(k) for k in ("accident", "culture")}
    centers = segment_centers(cfg.segments)
    tweets: list[TweetRecord] = []

    def place(seg: int) -> tuple[float, float]:
        rad = TWEET_SPREAD_KM * math.sqrt(rng_tw.random())
        ang = 2 * math.pi * rng_tw.random()
        lat, lon = km_offset(*centers[seg], rad * math.cos(ang), rad * math.sin(ang))
        return round(lat, 6), round(lon, 6)

    for s in range(cfg.steps):
        t0 = cfg.start_ts + s * STEP_SECONDS
        for m in range(cfg.segments):
            kinds = ([None] * int(base_counts[s, m]) + ["accident"] * int(keyword_tweets["accident"][s, m])
                     + ["culture"] * int(keyword_tweets["culture"][s, m]))
            for kind in kinds:
                lat, lon = place(m)
                ts = t0 + int(rng_tw.integers(0, STEP_SECONDS))
                tweets.append(TweetRecord(ts, lat, lon, _text(rng_tw, vocab, zipf, pools[kind] if kind else None)))
    n_background = int(cfg.background_fraction * len(tweets))
    for _ in range(n_background):
        lat, lon = km_offset(CENTER_LAT, CENTER_LON, 150.0 + 50.0 * rng_tw.random(), 0.0)
        ts = cfg.start_ts + int(rng_tw.integers(0, cfg.steps * STEP_SECONDS))
        tweets.append(TweetRecord(ts, round(lat, 6), round(lon, 6), _text(rng_tw, vocab, zipf, None)))
    tweets.sort(key=lambda t: (t.ts, t.lat, t.lon, t.text))

    manifest = {
        "config": cfg.to_dict(),
        "start_ts": cfg.start_ts,
        "steps": cfg.steps,
        "segment_centers": [list(c) for c in centers],
        "tweet_gain": gain,
        "planted_lag_hours": cfg.planted_lag_hours,
        "target_correlation": cfg.target_correlation,
        "events": [asdict(e) for e in events],
        "keyword_counts": {
            kind: [[int(m), int(s), int(c[s, m])] for s, m in zip(*np.nonzero(c))]
            for kind, c in keyword_tweets.items()
        },
        "n_tweets": len(tweets),
        "n_background_tweets": n_background,
    }
    return Scenario(cfg, traffic, tweets, centers, manifest)


def keyword_grid(manifest: dict, kind: str, segments: int, steps: int) -> np.ndarray:
    """(segments, steps) planted keyword-tweet counts recorded in a manifest."""
    out = np.zeros((segments, steps), dtype=np.int64)
    for m, s, c in manifest["keyword_counts"][kind]:
        out[m, s] = c
    return out


def network_series(traffic: TrafficTensor) -> HourlySeries:
    """Hourly network-mean TPS."""
    return to_hourly(traffic.values[:, :, 0].mean(axis=1), traffic.start_ts)
