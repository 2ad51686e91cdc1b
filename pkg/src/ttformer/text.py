"""Tweet text features: token counts, randomized truncated SVD, keyword counts.

Every tweet is first placed on a (segment, 15-minute bin) cell; the three
per-cell channels are then

* ``term_frequency``: sum of the tweet's rank-k SVD coordinates, summed over
  the tweets in the cell,
* ``accident_count`` / ``culture_count``: number of tweets containing at least
  one lexicon entry.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .numerics import ContractError, make_rng

BIN_SECONDS = 900
EARTH_RADIUS_KM = 6371.0
SMALL_SVD_DIM = 64
FEATURE_CHANNELS = ("term_frequency", "accident_count", "culture_count")

_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_MENTION = re.compile(r"@\w+")
_WORD = re.compile(r"[^\W_]+")


class EmptyCorpusError(ValueError):
    pass


class TweetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TweetRecord:
    ts: int
    lat: float
    lon: float
    text: str

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinates out of range: ({self.lat}, {self.lon})")

    def to_json(self) -> str:
        return json.dumps({"ts": self.ts, "lat": self.lat, "lon": self.lon, "text": self.text}, ensure_ascii=False)


def tokenize(text: str) -> list[str]:
    text = _MENTION.sub(" ", _URL.sub(" ", text))
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class KeywordLexicon:
    kind: str
    terms: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError(f"{self.kind} lexicon is empty")

    @classmethod
    def from_terms(cls, kind: str, terms: Iterable[str]) -> "KeywordLexicon":
        seqs = []
        for term in terms:
            toks = tuple(tokenize(term))
            if toks and toks not in seqs:
                seqs.append(toks)
        return cls(kind, tuple(seqs))

    def matches(self, tokens: Sequence[str]) -> bool:
        vocab = set(tokens)
        for seq in self.terms:
            if seq[0] not in vocab:
                continue
            if len(seq) == 1:
                return True
            n = len(seq)
            for i in range(len(tokens) - n + 1):
                if tuple(tokens[i:i + n]) == seq:
                    return True
        return False


def load_lexicon(path: str | Path, kind: str | None = None) -> KeywordLexicon:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    terms = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    return KeywordLexicon.from_terms(kind or path.stem.split("_")[0], terms)


def default_lexicon(kind: str) -> KeywordLexicon:
    name = {"accident": "accident_keywords.txt", "culture": "culture_keywords.txt"}[kind]
    text = resources.files("ttformer").joinpath("data", name).read_text(encoding="utf-8")
    terms = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return KeywordLexicon.from_terms(kind, terms)


# -- document-term matrix ---------------------------------------------------


@dataclass
class DocumentTermMatrix:
    vocabulary: list[str]
    counts: sp.csr_matrix
    min_count: int

    @property
    def docs(self) -> int:
        return self.counts.shape[0]


def build_doc_term_matrix(docs: Sequence, min_count: int = 3) -> DocumentTermMatrix:
    """Count matrix over documents (records, raw strings or token lists).

    Vocabulary is sorted and restricted to terms whose corpus total reaches
    ``min_count``.
    """
    if min_count < 1:
        raise ContractError("min_count must be >= 1")
    if len(docs) == 0:
        raise EmptyCorpusError("cannot build a document-term matrix from an empty corpus")
    token_lists = [_tokens_of(d) for d in docs]
    totals = Counter()
    for toks in token_lists:
        totals.update(toks)
    vocab = sorted(t for t, c in totals.items() if c >= min_count)
    index = {t: i for i, t in enumerate(vocab)}
    rows, cols, vals = [], [], []
    for r, toks in enumerate(token_lists):
        for t, c in Counter(toks).items():
            j = index.get(t)
            if j is not None:
                rows.append(r)
                cols.append(j)
                vals.append(c)
    counts = sp.csr_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(len(docs), len(vocab)))
    return DocumentTermMatrix(vocab, counts, min_count)


def _tokens_of(doc) -> list[str]:
    if isinstance(doc, TweetRecord):
        return tokenize(doc.text)
    if isinstance(doc, str):
        return tokenize(doc)
    return list(doc)


# -- truncated SVD ----------------------------------------------------------


@dataclass
class SvdFactors:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    total_variance: float
    explained_variance_ratio: np.ndarray = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=np.float64)
        self.singular_values = s
        self.explained_variance_ratio = s**2 / self.total_variance if self.total_variance > 0 else np.zeros_like(s)

    @property
    def k(self) -> int:
        return len(self.singular_values)

    def projections(self) -> np.ndarray:
        """Per-document coordinates in the rank-k space (U * s)."""
        return self.left * self.singular_values


def truncated_svd(m, k: int, rng: int | np.random.Generator = 0, oversample: int = 10,
                  power_iters: int = 2) -> SvdFactors:
    """Randomized range finder followed by an exact SVD of the small projection.

    Explained variance is measured against the squared Frobenius norm of the
    input, which equals the total variance when the columns are centred.
    """
    a = m.counts if isinstance(m, DocumentTermMatrix) else m
    if not sp.issparse(a):
        a = np.asarray(a, dtype=np.float64)
    n_rows, n_cols = a.shape
    if not 1 <= k <= min(n_rows, n_cols):
        raise ContractError(f"k={k} outside [1, {min(n_rows, n_cols)}]")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "truncated_svd")
    width = min(k + oversample, n_rows, n_cols)
    if min(n_rows, n_cols) <= SMALL_SVD_DIM:
        # the sketch would not save work here; span everything so the result is exact
        width = min(n_rows, n_cols)

    omega = rng.standard_normal((n_cols, width))
    q, _ = np.linalg.qr(a @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
    b = np.asarray((a.T @ q).T)
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub[:, :k]
    s, vt = s[:k], vt[:k]

    # deterministic sign: largest-magnitude entry of each right vector positive
    signs = np.sign(vt[np.arange(k), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    u, vt = u * signs, vt * signs[:, None]

    total = float(a.multiply(a).sum()) if sp.issparse(a) else float(np.sum(a * a))
    return SvdFactors(u, s, vt, total)


def explained_variance_curve(f: SvdFactors) -> np.ndarray:
    return np.minimum(np.cumsum(f.explained_variance_ratio), 1.0)


def rank_for_ratio(curve: np.ndarray, target: float) -> int | None:
    """Smallest k (1-based) whose cumulative explained ratio reaches ``target``."""
    hit = np.nonzero(np.asarray(curve) >= target)[0]
    return int(hit[0]) + 1 if hit.size else None


# -- spatial / temporal assignment -------------------------------------------


def haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def assign_to_segment(t: TweetRecord, segment_centers: Sequence[tuple[float, float]],
                      radius_km: float = 5.0) -> int | None:
    """Index of the nearest centre within ``radius_km``; ties go to the lowest index."""
    if radius_km <= 0:
        raise ContractError("radius_km must be positive")
    centers = np.asarray(segment_centers, dtype=np.float64).reshape(-1, 2)
    d = haversine_km(t.lat, t.lon, centers[:, 0], centers[:, 1])
    best = int(np.argmin(d))
    return best if d[best] <= radius_km else None


def assign_all(tweets: Sequence[TweetRecord], segment_centers, radius_km: float = 5.0) -> np.ndarray:
    """Vectorised :func:`assign_to_segment`; -1 marks unassigned tweets."""
    if not tweets:
        return np.zeros(0, dtype=np.int64)
    centers = np.asarray(segment_centers, dtype=np.float64).reshape(-1, 2)
    lat = np.array([t.lat for t in tweets])[:, None]
    lon = np.array([t.lon for t in tweets])[:, None]
    d = haversine_km(lat, lon, centers[None, :, 0], centers[None, :, 1])
    best = np.argmin(d, axis=1)
    ok = d[np.arange(len(tweets)), best] <= radius_km
    return np.where(ok, best, -1)


def bin_index(ts, start_ts: int) -> np.ndarray:
    return (np.asarray(ts, dtype=np.int64) - int(start_ts)) // BIN_SECONDS


# -- per-cell signals --------------------------------------------------------


def term_frequency_signal(f, cells: np.ndarray, n_segments: int, n_bins: int) -> np.ndarray:
    """Per-(segment, bin) sum of per-document score.

    ``f`` is either :class:`SvdFactors` (score = sum of the document's k
    coordinates) or a precomputed per-document score vector. ``cells`` is an
    ``(n_docs, 2)`` array of (segment, bin), with -1 rows ignored.
    """
    scores = f.projections().sum(axis=1) if isinstance(f, SvdFactors) else np.asarray(f, dtype=np.float64)
    out = np.zeros((n_segments, n_bins))
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    keep = (cells[:, 0] >= 0) & (cells[:, 1] >= 0) & (cells[:, 1] < n_bins)
    np.add.at(out, (cells[keep, 0], cells[keep, 1]), scores[keep])
    return out


def keyword_count(docs: Sequence, lexicon: KeywordLexicon, cells: np.ndarray, n_segments: int,
                  n_bins: int) -> np.ndarray:
    out = np.zeros((n_segments, n_bins), dtype=np.int64)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    for doc, (seg, b) in zip(docs, cells):
        if seg < 0 or not 0 <= b < n_bins:
            continue
        if lexicon.matches(_tokens_of(doc)):
            out[seg, b] += 1
    return out


@dataclass
class SegmentFeatureSeries:
    """Tweet feature channels on a (segment, 15-minute bin) grid."""

    segment_ids: list
    start_ts: int
    values: np.ndarray  # (n_segments, n_bins, 3) in FEATURE_CHANNELS order
    explained_variance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tweet_counts: np.ndarray | None = None  # (n_segments, n_bins) tweets assigned to each cell

    def __post_init__(self):
        if self.tweet_counts is None:
            self.tweet_counts = np.zeros(self.values.shape[:2])

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, :, FEATURE_CHANNELS.index(name)]


def extract_features(tweets: Sequence[TweetRecord], segment_centers, start_ts: int, n_bins: int, *,
                     segment_ids=None, accident: KeywordLexicon | None = None,
                     culture: KeywordLexicon | None = None, k: int = 100, min_count: int = 3,
                     radius_km: float = 5.0, seed: int = 0, term_mode: str = "svd",
                     site_to_segment: dict[int, int] | None = None) -> SegmentFeatureSeries:
    """Full tweet pipeline onto the segment/bin grid.

    ``site_to_segment`` optionally remaps the index of the nearest centre
    (a tweet collection site) onto a traffic segment index. ``term_mode``
    ``"counts"`` replaces SVD coordinates by the raw in-vocabulary token count.
    """
    accident = accident or default_lexicon("accident")
    culture = culture or default_lexicon("culture")
    n_seg = len(segment_centers) if site_to_segment is None else 1 + max(site_to_segment.values())
    segment_ids = list(range(n_seg)) if segment_ids is None else list(segment_ids)
    values = np.zeros((n_seg, n_bins, 3))
    curve = np.zeros(0)
    if not tweets:
        return SegmentFeatureSeries(segment_ids, start_ts, values, curve)

    seg = assign_all(tweets, segment_centers, radius_km)
    if site_to_segment is not None:
        seg = np.array([site_to_segment.get(int(s), -1) if s >= 0 else -1 for s in seg])
    bins = bin_index([t.ts for t in tweets], start_ts)
    inside = (seg >= 0) & (bins >= 0) & (bins < n_bins)
    cells = np.stack([np.where(inside, seg, -1), np.where(inside, bins, -1)], axis=1)
    counts = np.zeros((n_seg, n_bins))
    np.add.at(counts, (seg[inside], bins[inside]), 1.0)

    tokens = [tokenize(t.text) for t in tweets]
    dtm = build_doc_term_matrix(tokens, min_count=min_count)
    if term_mode == "svd":
        rank = min(k, dtm.docs, len(dtm.vocabulary))
        if rank >= 1:
            factors = truncated_svd(dtm, rank, rng=make_rng(seed, "tweet_svd"))
            values[:, :, 0] = term_frequency_signal(factors, cells, n_seg, n_bins)
            curve = explained_variance_curve(factors)
    elif term_mode == "counts":
        values[:, :, 0] = term_frequency_signal(np.asarray(dtm.counts.sum(axis=1)).ravel(), cells, n_seg, n_bins)
    else:
        raise ValueError(f"unknown term_mode {term_mode!r}")
    values[:, :, 1] = keyword_count(tokens, accident, cells, n_seg, n_bins)
    values[:, :, 2] = keyword_count(tokens, culture, cells, n_seg, n_bins)
    return SegmentFeatureSeries(segment_ids, start_ts, values, curve, counts)


def read_tweets(path: str | Path) -> list[TweetRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(TweetRecord(int(obj["ts"]), float(obj["lat"]), float(obj["lon"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TweetFormatError(f"{path}:{lineno}: malformed tweet record ({exc})") from exc
    return out


def write_tweets(path: str | Path, tweets: Iterable[TweetRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tweets:
            fh.write(t.to_json() + "\n")


def km_offset(lat: float, lon: float, north_km: float, east_km: float) -> tuple[float, float]:
    """Approximate point displaced by a small north/east offset."""
    dlat = math.degrees(north_km / EARTH_RADIUS_KM)
    dlon = math.degrees(east_km / (EARTH_RADIUS_KM * math.cos(math.radians(lat))))
    return lat + dlat, lon + dlon
