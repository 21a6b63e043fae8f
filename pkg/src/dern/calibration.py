"""Routing statistics over a calibration set and expert importance scores."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .model import MoeModel, route
from .storage import write_json


@dataclass(frozen=True)
class CalibrationSet:
    tokens: np.ndarray  # (m, d) float32
    source: str = ""

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.float32, copy=True)
        if t.ndim != 2 or t.shape[0] == 0:
            raise ConfigError("calibration set must be a non-empty (m, d) array")
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


@dataclass
class LayerStats:
    score_accum: np.ndarray  # float64, length N
    hit_count: np.ndarray  # int64, length N
    token_count: int


@dataclass
class RoutingStats:
    layers: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "token_count": ls.token_count,
                    "score_accum": ls.score_accum,
                    "hit_count": ls.hit_count,
                    "scores": ls.score_accum / ls.token_count if ls.token_count else None,
                }
                for ls in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RoutingStats":
        try:
            layers = [
                LayerStats(
                    np.asarray(l["score_accum"], dtype=np.float64),
                    np.asarray(l["hit_count"], dtype=np.int64),
                    int(l["token_count"]),
                )
                for l in doc["layers"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed stats document: {exc}") from None
        return cls(layers)


def synth_calibration(d: int, m: int, seed: int) -> CalibrationSet:
    """m i.i.d. standard-normal feature vectors from a seeded generator."""
    if m < 1:
        raise ConfigError("m must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, d)).astype(np.float32)
    return CalibrationSet(x, source=f"synthetic:d={d},m={m},seed={seed}")


def collect_stats(model: MoeModel, calib: CalibrationSet) -> RoutingStats:
    """Single streaming pass. Each token spreads unit mass over its active experts."""
    if len(calib) == 0:
        raise ConfigError("empty calibration set")
    if model.layers and calib.d != model.d:
        raise DimensionError(f"calibration dim {calib.d} != model dim {model.d}")
    out = []
    for layer in model.layers:
        acc = np.zeros(layer.n_experts, dtype=np.float64)
        hits = np.zeros(layer.n_experts, dtype=np.int64)
        for x in calib.tokens:
            idx, w = route(layer, x)
            total = sum(w)
            for i, wi in zip(idx, w):
                acc[i] += wi / total
                hits[i] += 1
        out.append(LayerStats(acc, hits, len(calib)))
    return RoutingStats(out)


def importance_scores(stats: RoutingStats) -> list[np.ndarray]:
    scores = []
    for ls in stats.layers:
        if ls.token_count <= 0:
            raise ConfigError("importance scores need at least one token")
        scores.append(ls.score_accum / ls.token_count)
    return scores


def select_retained(scores, k_retain: int) -> tuple[list[int], list[int]]:
    """Top-k_retain experts by score (ties to the lower id); both lists ascending."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if not 1 <= k_retain <= n:
        raise ConfigError(f"k_retain={k_retain} outside [1, {n}]")
    order = np.argsort(-s, kind="stable")
    retained = sorted(int(i) for i in order[:k_retain])
    pruned = sorted(int(i) for i in order[k_retain:])
    return retained, pruned


def save_stats(stats: RoutingStats, path) -> None:
    write_json(stats.to_dict(), path)


def load_stats(path) -> RoutingStats:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read stats file {path}: {exc}") from None
    return RoutingStats.from_dict(doc)


@dataclass
class ImportanceReport:
    scores: list  # per layer, length-N arrays
    retained: list  # per layer, ascending ids
    pruned: list


def importance_report(stats: RoutingStats, k_retain) -> ImportanceReport:
    """``k_retain`` is a global int or a per-layer sequence."""
    scores = importance_scores(stats)
    ks = [k_retain] * len(scores) if np.isscalar(k_retain) else list(k_retain)
    if len(ks) != len(scores):
        raise ConfigError(f"{len(ks)} retain counts for {len(scores)} layers")
    retained, pruned = [], []
    for s, k in zip(scores, ks):
        r, p = select_retained(s, int(k))
        retained.append(r)
        pruned.append(p)
    return ImportanceReport(scores, retained, pruned)
