from dataclasses import replace

import numpy as np
import pytest

from ttformer.stats import compute_trend, detrend
from ttformer.synth import (
    CALIBRATION_DAYS,
    EventSpec,
    ScenarioConfig,
    ScenarioConfigError,
    _keyword_pool,
    generate,
    keyword_grid,
    network_series,
    neutral_vocabulary,
)
from ttformer.text import default_lexicon, extract_features, tokenize


def small(**kw):
    base = dict(segments=3, days=4, seed=1)
    base.update(kw)
    return ScenarioConfig(**base)


def test_degenerate_scenario_is_constant():
    cfg = small(daily_amplitude=0.0, weekly_amplitude=0.0, noise_scale=0.0, shared_scale=0.0, shared_fast_scale=0.0, segment_scale=0.0,
                days=14)
    sc = generate(cfg)
    tps = sc.traffic.values[:, :, 0]
    assert np.all(tps == tps[0, 0])
    s = network_series(sc.traffic)
    tr = compute_trend(s)
    assert np.all(tr.means == tps[0, 0])
    assert np.all(detrend(s, tr).values == 0.0)


def test_invariants_ranges_and_monotone_maps():
    sc = generate(small(accident_rate=0.5, culture_rate=0.3))
    v = sc.traffic.values
    assert np.all((v[..., 0] >= 0) & (v[..., 0] <= 1))
    for m in range(v.shape[1]):
        order = np.argsort(v[:, m, 0])
        assert np.all(np.diff(v[order, m, 2]) >= 0)  # speed rises with TPS
        assert np.all(np.diff(v[order, m, 1]) <= 0)  # volume falls with TPS
    start, end = sc.config.start_ts, sc.config.start_ts + sc.config.steps * 900
    assert all(start <= t.ts < end for t in sc.tweets)


def test_determinism_bitwise():
    a, b = generate(small(accident_rate=0.3)), generate(small(accident_rate=0.3))
    assert a.traffic.values.tobytes() == b.traffic.values.tobytes()
    assert [t.to_json() for t in a.tweets] == [t.to_json() for t in b.tweets]
    assert a.manifest == b.manifest
    c = generate(small(accident_rate=0.3, seed=2))
    assert c.traffic.values.tobytes() != a.traffic.values.tobytes()


def test_neutral_vocabulary_avoids_lexicons():
    banned = {t for k in ("accident", "culture") for seq in default_lexicon(k).terms for t in seq}
    vocab = neutral_vocabulary()
    assert len(set(vocab)) == len(vocab)
    assert not set(vocab) & banned


def test_keyword_pools_are_lexicon_terms_and_exclusive():
    acc, cul = default_lexicon("accident"), default_lexicon("culture")
    for kw in _keyword_pool("accident"):
        assert acc.matches(tokenize(kw)) and not cul.matches(tokenize(kw))
    for kw in _keyword_pool("culture"):
        assert cul.matches(tokenize(kw)) and not acc.matches(tokenize(kw))


def test_single_accident_event_recovered_exactly():
    cfg = small(days=3)
    ev = EventSpec("accident", 1, cfg.start_ts + 96 * 900, 8 * 900, 0.2, burst=2.0)
    cfg = small(days=3, events=[ev])
    sc = generate(cfg)
    feats = extract_features(sc.tweets, sc.segment_centers, cfg.start_ts, cfg.steps, term_mode="counts")
    counts = feats.channel("accident_count")
    want = keyword_grid(sc.manifest, "accident", cfg.segments, cfg.steps)
    np.testing.assert_array_equal(counts, want)
    assert np.all(counts[1, 96:104] > 0)
    mask = np.ones_like(counts, dtype=bool)
    mask[1, 96:104] = False
    assert np.all(counts[mask] == 0)
    assert np.all(feats.channel("culture_count") == 0)


def test_random_events_recovered_exactly():
    sc = generate(small(accident_rate=0.6, culture_rate=0.6))
    cfg = sc.config
    feats = extract_features(sc.tweets, sc.segment_centers, cfg.start_ts, cfg.steps, term_mode="counts")
    for kind, ch in (("accident", "accident_count"), ("culture", "culture_count")):
        np.testing.assert_array_equal(feats.channel(ch), keyword_grid(sc.manifest, kind, cfg.segments, cfg.steps))
    assert len(sc.manifest["events"]) > 0


def test_event_drop_lowers_tps():
    cfg = small(days=3, noise_scale=0.0, shared_scale=0.0, shared_fast_scale=0.0, segment_scale=0.0)
    base = generate(cfg).traffic.values[:, 0, 0]
    ev = EventSpec("accident", 0, cfg.start_ts + 40 * 900, 8 * 900, 0.2)
    hit = generate(small(days=3, noise_scale=0.0, shared_scale=0.0, shared_fast_scale=0.0, segment_scale=0.0, events=[ev]))
    diff = base - hit.traffic.values[:, 0, 0]
    np.testing.assert_allclose(diff[40:48], 0.2 * np.minimum(1, np.arange(1, 9) / 4), atol=1e-12)
    assert np.all(diff[:40] == 0) and np.all(diff[48:] == 0)


def test_infeasible_or_invalid_events_rejected():
    cfg = small()
    with pytest.raises(ScenarioConfigError):
        generate(small(events=[EventSpec("accident", 0, cfg.start_ts, 3600, 0.99)]))
    with pytest.raises(ScenarioConfigError):
        generate(small(events=[EventSpec("accident", 0, cfg.start_ts - 900, 3600, 0.1)]))
    with pytest.raises(ScenarioConfigError):
        generate(small(events=[EventSpec("flood", 0, cfg.start_ts, 3600, 0.1)]))
    with pytest.raises(ScenarioConfigError):
        ScenarioConfig(segments=0)
    with pytest.raises(ScenarioConfigError):
        ScenarioConfig(target_correlation=-1.0)
    with pytest.raises(ScenarioConfigError):
        ScenarioConfig.from_dict({"segmnets": 3})


def test_config_round_trip():
    cfg = small(events=[EventSpec("culture", 2, small().start_ts, 1800, 0.1)])
    again = ScenarioConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_unreachable_correlation_rejected():
    with pytest.raises(ScenarioConfigError, match="not reachable"):
        generate(small(tweet_base_rate=0.05, target_correlation=-0.9))


def test_short_scenario_borrows_calibrated_gain():
    cfg = small(days=2)
    ref = generate(replace(cfg, days=CALIBRATION_DAYS))
    assert ref.manifest["tweet_gain"] > 0
    assert generate(cfg).manifest["tweet_gain"] == ref.manifest["tweet_gain"]
