"""Time-encoded encoder/decoder attention model for multi-step TPS forecasting.

Layout of one forward pass (post-norm blocks, ReLU feed-forward):

    encoder: embed(fused inputs) -> W [emb | sinusoid | calendar] -> N x (self-attn, ff)
    decoder: embed(tps token) -> same time projection -> N x (masked self-attn, cross-attn, ff)
    head:    affine d_model -> segments

Decoder token j holds the TPS at step T-1+j, so output j is the forecast for
step T+j. Training feeds observed TPS (teacher forcing); inference feeds the
model's own clamped forecasts back in.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import ALL_CHANNELS, FusedLayout, Normalizer, sinusoidal_encoding
from .numerics import ContractError, DiffGraph, Node, ShapeError, causal_mask, make_rng

CHECKPOINT_FORMAT = "ttformer-checkpoint/1"
N_TIME = 7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    segments: int
    channels: tuple[str, ...] = ALL_CHANNELS
    d_model: int = 64
    heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 0  # 0 means 4 * d_model
    input_len: int = 12
    horizon: int = 12
    use_calendar: bool = True
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal encoding")
        if "tps" not in self.channels:
            raise ConfigError("the tps channel is required")
        unknown = set(self.channels) - set(ALL_CHANNELS)
        if unknown:
            raise ConfigError(f"unknown channels {sorted(unknown)}")
        if min(self.segments, self.encoder_layers, self.decoder_layers, self.input_len, self.horizon) < 1:
            raise ConfigError("sizes must be positive")

    @property
    def ff(self) -> int:
        return self.ff_dim or 4 * self.d_model

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def features(self) -> int:
        return len(self.channels)

    @property
    def input_width(self) -> int:
        return self.segments * self.features

    @property
    def time_width(self) -> int:
        return 2 * self.d_model + (N_TIME if self.use_calendar else 0)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels)
        return out


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.{w}": (d, d) for w in ("wq", "wk", "wv", "wo")}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ff_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, ff), f"{prefix}.b1": (ff,), f"{prefix}.w2": (ff, d), f"{prefix}.b2": (d,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d_model, cfg.segments
    shapes: dict[str, tuple[int, ...]] = {f"embed.{ch}": (m, d) for ch in cfg.channels}
    shapes["embed.bias"] = (d,)
    shapes["time_proj"] = (d, cfg.time_width)
    for i in range(cfg.encoder_layers):
        shapes.update(_attn_shapes(f"enc{i}.attn", d))
        shapes.update(_ln_shapes(f"enc{i}.ln1", d))
        shapes.update(_ff_shapes(f"enc{i}.ff", d, cfg.ff))
        shapes.update(_ln_shapes(f"enc{i}.ln2", d))
    for i in range(cfg.decoder_layers):
        shapes.update(_attn_shapes(f"dec{i}.self", d))
        shapes.update(_ln_shapes(f"dec{i}.ln1", d))
        shapes.update(_attn_shapes(f"dec{i}.cross", d))
        shapes.update(_ln_shapes(f"dec{i}.ln2", d))
        shapes.update(_ff_shapes(f"dec{i}.ff", d, cfg.ff))
        shapes.update(_ln_shapes(f"dec{i}.ln3", d))
    shapes["head.w"] = (d, m)
    shapes["head.b"] = (m,)
    return shapes


def expected_param_count(cfg: ModelConfig) -> int:
    d, m, f, ff = cfg.d_model, cfg.segments, cfg.features, cfg.ff
    attn, ln, ffn = 4 * d * d, 2 * d, 2 * d * ff + ff + d
    return (m * f * d + d + d * cfg.time_width
            + cfg.encoder_layers * (attn + ffn + 2 * ln)
            + cfg.decoder_layers * (2 * attn + ffn + 3 * ln)
            + d * m + m)


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict) -> int:
    if name == "time_proj":
        return shape[1]
    if len(shape) == 2:
        return shape[0]
    # biases share the bound of the weight they follow; the embedding bias
    # follows the tps block so it does not depend on which channels exist
    partner = {"embed.bias": "embed.tps", "head.b": "head.w"}.get(name) or name[:-2] + "w" + name[-1]
    return shapes[partner][0]


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) weights; unit gain / zero shift for layer norms.

    Each tensor draws from its own stream keyed by name, so adding or removing
    a channel leaves every other tensor unchanged.
    """
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g") and ".ln" in name:
            params[name] = np.ones(shape)
        elif name.endswith(".b") and ".ln" in name:
            params[name] = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / _fan_in(name, shape, shapes))
            params[name] = make_rng(cfg.seed, "init", name).uniform(-bound, bound, size=shape)
    return params


# -- graph building blocks ----------------------------------------------------


def attention(g: DiffGraph, q: Node, k: Node, v: Node, mask=None, trace: list | None = None) -> Node:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes Q{q.shape} K{k.shape} V{v.shape} are inconsistent")
    scores = (q @ k.T) * (1.0 / math.sqrt(q.shape[-1]))
    weights = g.softmax(scores, mask)
    if trace is not None:
        trace.append(weights.value)
    return weights @ v


def _split_heads(x: Node, heads: int) -> Node:
    *lead, length, d = x.shape
    return x.reshape(*lead, length, heads, d // heads).transpose(*range(len(lead)), len(lead) + 1, len(lead),
                                                                 len(lead) + 2)


def _merge_heads(x: Node) -> Node:
    *lead, heads, length, dk = x.shape
    nl = len(lead)
    return x.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, length, heads * dk)


def multi_head_node(g: DiffGraph, xq: Node, xkv: Node, P: dict, prefix: str, heads: int, mask=None,
                    trace: list | None = None) -> Node:
    q = _split_heads(xq @ P[f"{prefix}.wq"], heads)
    k = _split_heads(xkv @ P[f"{prefix}.wk"], heads)
    v = _split_heads(xkv @ P[f"{prefix}.wv"], heads)
    return _merge_heads(attention(g, q, k, v, mask, trace)) @ P[f"{prefix}.wo"]


def _feed_forward(x: Node, P: dict, prefix: str) -> Node:
    h = (x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"]).relu()
    return h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def _norm(g: DiffGraph, x: Node, P: dict, prefix: str, eps: float) -> Node:
    return g.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"], eps)


# -- plain-array entry points -------------------------------------------------


def scaled_dot_attention(q, k, v, mask=None) -> np.ndarray:
    g = DiffGraph()
    return attention(g, g.constant(q), g.constant(k), g.constant(v), mask).value


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def head(self, i: int, heads: int):
        dk = self.wq.shape[1] // heads
        cols = slice(i * dk, (i + 1) * dk)
        return self.wq[:, cols], self.wk[:, cols], self.wv[:, cols]


def multi_head(x_q, x_kv, params: AttentionParams, heads: int, mask=None) -> np.ndarray:
    d = np.shape(x_q)[-1]
    if d % heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={heads}")
    g = DiffGraph()
    P = {f"mha.{k}": g.constant(v) for k, v in asdict(params).items()}
    return multi_head_node(g, g.constant(x_q), g.constant(x_kv), P, "mha", heads, mask).value


# -- the model ------------------------------------------------------------------


@dataclass
class ForecastModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    norm: Normalizer | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, norm: Normalizer | None = None) -> "ForecastModel":
        return cls(config, init_params(config), norm)

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def layout(self) -> FusedLayout:
        return FusedLayout(self.config.channels, self.config.segments)

    # graph construction

    def bind(self, g: DiffGraph) -> dict[str, Node]:
        return {name: g.param(value, name) for name, value in self.params.items()}

    def _time_encode(self, g: DiffGraph, P: dict, emb: Node, cal: np.ndarray) -> Node:
        cfg = self.config
        lead, length = emb.shape[:-2], emb.shape[-2]
        tau = np.broadcast_to(sinusoidal_encoding(length, cfg.d_model), (*lead, length, cfg.d_model))
        parts = [emb, g.constant(tau)]
        if cfg.use_calendar:
            parts.append(g.constant(cal))
        return g.concat(parts, axis=-1) @ P["time_proj"].T

    def _embed_inputs(self, g: DiffGraph, P: dict, x: Node) -> Node:
        m = self.config.segments
        out = P["embed.bias"]
        for ci, ch in enumerate(self.config.channels):
            out = out + x[..., ci * m:(ci + 1) * m] @ P[f"embed.{ch}"]
        return out

    def encode_graph(self, g: DiffGraph, P: dict, enc_x: np.ndarray, enc_cal: np.ndarray,
                     trace: list | None = None) -> Node:
        cfg = self.config
        if enc_x.shape[-2] != cfg.input_len or enc_x.shape[-1] != cfg.input_width:
            raise ContractError(f"encoder input {enc_x.shape} does not match ({cfg.input_len}, {cfg.input_width})")
        h = self._time_encode(g, P, self._embed_inputs(g, P, g.constant(enc_x)), enc_cal)
        for i in range(cfg.encoder_layers):
            h = _norm(g, h + multi_head_node(g, h, h, P, f"enc{i}.attn", cfg.heads, None, trace), P, f"enc{i}.ln1",
                      cfg.ln_eps)
            h = _norm(g, h + _feed_forward(h, P, f"enc{i}.ff"), P, f"enc{i}.ln2", cfg.ln_eps)
        return h

    def decode_graph(self, g: DiffGraph, P: dict, memory: Node, dec_tps: np.ndarray, dec_cal: np.ndarray,
                     trace: list | None = None) -> Node:
        """Decoder over a token prefix of any length <= horizon; returns (..., length, segments)."""
        cfg = self.config
        length = dec_tps.shape[-2]
        if length < 1:
            raise ContractError("decoder prefix must hold at least one token")
        emb = g.constant(dec_tps) @ P["embed.tps"] + P["embed.bias"]
        h = self._time_encode(g, P, emb, dec_cal)
        mask = causal_mask(length)
        for i in range(cfg.decoder_layers):
            h = _norm(g, h + multi_head_node(g, h, h, P, f"dec{i}.self", cfg.heads, mask, trace), P, f"dec{i}.ln1",
                      cfg.ln_eps)
            h = _norm(g, h + multi_head_node(g, h, memory, P, f"dec{i}.cross", cfg.heads, None, trace), P,
                      f"dec{i}.ln2", cfg.ln_eps)
            h = _norm(g, h + _feed_forward(h, P, f"dec{i}.ff"), P, f"dec{i}.ln3", cfg.ln_eps)
        return h @ P["head.w"] + P["head.b"]

    def teacher_forced(self, g: DiffGraph, batch: dict, P: dict | None = None) -> Node:
        P = P if P is not None else self.bind(g)
        memory = self.encode_graph(g, P, batch["enc_x"], batch["enc_cal"])
        return self.decode_graph(g, P, memory, batch["dec_tps"], batch["dec_cal"])

    # inference

    def encoder_forward(self, enc_x, enc_cal, trace: list | None = None) -> np.ndarray:
        g = DiffGraph()
        return self.encode_graph(g, self.bind(g), np.asarray(enc_x, dtype=np.float64), enc_cal, trace).value

    def decoder_outputs(self, memory, dec_tps, dec_cal, trace: list | None = None) -> np.ndarray:
        g = DiffGraph()
        return self.decode_graph(g, self.bind(g), g.constant(memory), np.asarray(dec_tps, dtype=np.float64),
                                 dec_cal, trace).value

    def decoder_step(self, memory, prefix_tps, prefix_cal) -> np.ndarray:
        """Forecast for the step after the last prefix token (normalised TPS tokens in, raw TPS out)."""
        prefix_tps = np.asarray(prefix_tps, dtype=np.float64)
        if prefix_tps.shape[-2] < 1:
            raise ContractError("decoder prefix must hold at least one token")
        return self.decoder_outputs(memory, prefix_tps, prefix_cal)[..., -1, :]

    def normalize_tps(self, tps: np.ndarray) -> np.ndarray:
        if self.norm is None:
            return tps
        blk = self.layout.block("tps")
        return (tps - self.norm.mean[blk]) / self.norm.std[blk]

    def rollout(self, batch: dict, horizon: int | None = None) -> np.ndarray:
        """Autoregressive forecast; only the first decoder token is taken from observations."""
        horizon = horizon or self.config.horizon
        memory = self.encoder_forward(batch["enc_x"], batch["enc_cal"])
        tokens = batch["dec_tps"][..., :1, :]
        cal = batch["dec_cal"]
        preds = []
        for j in range(horizon):
            step = np.clip(self.decoder_step(memory, tokens, cal[..., : j + 1, :]), 0.0, 1.0)
            preds.append(step)
            if j + 1 < horizon:
                tokens = np.concatenate([tokens, self.normalize_tps(step)[..., None, :]], axis=-2)
        return np.stack(preds, axis=-2)

    def predict(self, batch: dict, horizon: int | None = None) -> np.ndarray:
        """Clamped forecasts of shape (..., horizon, segments)."""
        enc_x = np.asarray(batch["enc_x"])
        if enc_x.shape[-1] != self.config.input_width:
            raise ShapeError(f"window width {enc_x.shape[-1]} does not match model input {self.config.input_width}")
        return self.rollout(batch, horizon)

    # persistence

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "byte_order": "little",
            "config": self.config.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.astype("<f8").ravel().tolist()}
                       for k, v in self.params.items()},
            "normalization": None if self.norm is None else {"mean": self.norm.mean.tolist(),
                                                            "std": self.norm.std.tolist()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        cfg = ModelConfig.from_dict(d["config"])
        params = {k: np.asarray(v["data"], dtype="<f8").reshape(v["shape"]).astype(np.float64)
                  for k, v in d["params"].items()}
        expected = param_shapes(cfg)
        if {k: tuple(v.shape) for k, v in params.items()} != expected:
            raise ValueError("checkpoint parameters do not match its configuration")
        n = d.get("normalization")
        norm = None if n is None else Normalizer(np.asarray(n["mean"]), np.asarray(n["std"]))
        return cls(cfg, params, norm, d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ForecastModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
