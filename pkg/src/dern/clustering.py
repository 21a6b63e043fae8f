"""Spherical weighted k-means over segment vectors and expert reconstruction.

Each retained expert's segment set (its own neurons plus reassigned ones) is
clustered in the masked vector space. Members of a cluster are rescaled to
the cluster's mean norm before the weighted average, so the centroid
direction is the weight-averaged unit direction of its members. A
reconstructed neuron is the unit centroid times that mean norm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateClusterError, DernError, DimensionError
from .linalg import F32, F64, ZERO_NORM
from .model import ExpertWeights, MoeLayer
from .segments import (
    DEFAULT_MASK,
    ComponentMask,
    ReassignmentResult,
    decompose,
    transfer_router_mass,
    vectorize_all,
)

INIT_METHODS = ("gate_based", "random", "equidistant")


@dataclass(frozen=True)
class ClusterConfig:
    k: int | None = None  # None: derive from ratio and the expert's original h
    ratio: float = 1.0
    max_iters: int = 50
    tol: float = 1e-6
    init: str = "gate_based"
    use_weights: bool = True
    mask: ComponentMask = DEFAULT_MASK
    seed: int = 0

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if not self.ratio > 0:
            raise ConfigError("ratio must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")
        if self.init not in INIT_METHODS:
            raise ConfigError(f"init must be one of {INIT_METHODS}, got {self.init!r}")

    def target_k(self, h: int) -> int:
        if self.k is not None:
            return self.k
        # guard against ratio*h landing a hair above an integer
        return max(1, math.ceil(self.ratio * h - 1e-9))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["mask"] = str(self.mask)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterConfig":
        doc = dict(doc)
        if isinstance(doc.get("mask"), str):
            doc["mask"] = ComponentMask.parse(doc["mask"])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cluster config keys {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ClusterState:
    assignment: np.ndarray  # segment index -> cluster id
    centroids: np.ndarray  # (k, D) unit rows
    mean_norms: np.ndarray  # (k,)
    objective_trace: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def iterations(self) -> int:
        return len(self.objective_trace)

    def member_counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


class _Geometry:
    """Masked vectors, their norms and unit directions, plus clustering weights."""

    def __init__(self, segments, config: ClusterConfig):
        self.segments = list(segments)
        if not self.segments:
            raise DimensionError("no segments to cluster")
        self.vecs = vectorize_all(self.segments, config.mask).astype(F64)
        self.norms = np.sqrt(np.einsum("ij,ij->i", self.vecs, self.vecs))
        self.nonzero = self.norms >= ZERO_NORM
        self.units = np.zeros_like(self.vecs)
        self.units[self.nonzero] = self.vecs[self.nonzero] / self.norms[self.nonzero, None]
        if config.use_weights:
            self.weights = np.array([s.weight for s in self.segments], dtype=F64)
        else:
            self.weights = np.ones(len(self.segments), dtype=F64)

    def __len__(self):
        return len(self.segments)


def _normalized_weights(w: np.ndarray) -> np.ndarray:
    # equal (or all-zero) weights collapse to exactly 1/n so the weighted and
    # unweighted paths agree bit for bit
    n = len(w)
    total = w.sum()
    if total <= 0 or np.all(w == w[0]):
        return np.full(n, 1.0 / n)
    return w / total


def _cos_to_centroids(geo: _Geometry, centroids: np.ndarray) -> np.ndarray:
    return np.clip(geo.units @ centroids.T, -1.0, 1.0)


def _objective(geo: _Geometry, assignment: np.ndarray, centroids: np.ndarray) -> float:
    cos = _cos_to_centroids(geo, centroids)[np.arange(len(geo)), assignment]
    return float(np.sum(geo.weights * (1.0 - cos)))


def objective(segments, state: ClusterState, config: ClusterConfig) -> float:
    """Sum over segments of w_i * (1 - cos(v_i, c_assigned)); w_i = 1 when weighting is off."""
    geo = _Geometry(segments, config)
    if len(state.assignment) != len(geo):
        raise DimensionError("assignment length does not match segment count")
    return _objective(geo, np.asarray(state.assignment), np.asarray(state.centroids, dtype=F64))


def _seed_indices(
    geo: _Geometry, config: ClusterConfig, k: int, n_internal: int | None = None
) -> list[int]:
    if k > len(geo):
        raise DimensionError(f"k={k} exceeds {len(geo)} segments")
    candidates = np.flatnonzero(geo.nonzero)
    if len(candidates) < k:
        raise DegenerateClusterError(
            f"only {len(candidates)} non-zero segment vectors for k={k} clusters"
        )
    if config.init == "gate_based":
        bound = np.array([np.max(np.abs(s.gate_row)) for s in geo.segments])
        order = np.argsort(-bound, kind="stable")
        if n_internal is not None:
            # the expert's own neurons are distinct; reassigned ones may be near copies of them
            order = np.concatenate([order[order < n_internal], order[order >= n_internal]])
        return [int(i) for i in order if geo.nonzero[i]][:k]
    if config.init == "random":
        rng = np.random.default_rng(config.seed)
        return [int(i) for i in rng.choice(candidates, size=k, replace=False)]
    # equidistant: spread picks evenly over the ranking by cosine to the mean direction
    mean_dir = geo.weights @ geo.units
    if np.linalg.norm(mean_dir) < ZERO_NORM:
        mean_dir = geo.units.sum(axis=0)
    cos = geo.units[candidates] @ mean_dir
    ranked = candidates[np.argsort(-cos, kind="stable")]
    n = len(ranked)
    if k == 1:
        return [int(ranked[(n - 1) // 2])]
    pos = [(2 * i * (n - 1) + (k - 1)) // (2 * (k - 1)) for i in range(k)]
    return [int(ranked[p]) for p in pos]


def init_seeds(
    segments, config: ClusterConfig, k: int | None = None, n_internal: int | None = None
) -> list[int]:
    """Indices of the segments chosen as initial centroids.

    With ``n_internal`` set, the first ``n_internal`` segments (the expert's
    own neurons) are ranked ahead of the rest under gate-based seeding.
    """
    geo = _Geometry(segments, config)
    k = k if k is not None else config.target_k(len(geo))
    return _seed_indices(geo, config, k, n_internal)


def init_centroids(
    segments, config: ClusterConfig, k: int | None = None, n_internal: int | None = None
) -> np.ndarray:
    geo = _Geometry(segments, config)
    k = k if k is not None else config.target_k(len(geo))
    return geo.units[_seed_indices(geo, config, k, n_internal)].copy()


def _assign(geo: _Geometry, centroids: np.ndarray) -> np.ndarray:
    return np.argmax(_cos_to_centroids(geo, centroids), axis=1)


def _repair_empty(geo: _Geometry, assignment: np.ndarray, centroids: np.ndarray) -> None:
    """Reseed empty clusters from the worst-fitting member of the largest cluster (in place)."""
    k = centroids.shape[0]
    for j in range(k):
        if np.any(assignment == j):
            continue
        counts = np.bincount(assignment[geo.nonzero], minlength=k)
        donor = int(np.argmax(counts))
        if counts[donor] < 2:
            return
        members = np.flatnonzero((assignment == donor) & geo.nonzero)
        cos = geo.units[members] @ centroids[donor]
        pick = int(members[np.argmin(cos)])
        assignment[pick] = j
        centroids[j] = geo.units[pick]


def _update(geo: _Geometry, assignment: np.ndarray, centroids: np.ndarray):
    k = centroids.shape[0]
    new = centroids.copy()
    rbar = np.zeros(k, dtype=F64)
    for j in range(k):
        members = np.flatnonzero((assignment == j) & geo.nonzero)
        if len(members) == 0:
            continue
        rbar[j] = geo.norms[members].mean()
        equalized = geo.units[members] * rbar[j]
        s = _normalized_weights(geo.weights[members]) @ equalized
        ns = np.linalg.norm(s)
        if ns >= ZERO_NORM:
            new[j] = s / ns
    return new, rbar


def run_kmeans(
    segments, config: ClusterConfig, k: int | None = None, n_internal: int | None = None
) -> ClusterState:
    """Lloyd iterations until the objective improves by less than ``config.tol``."""
    geo = _Geometry(segments, config)
    k = k if k is not None else config.target_k(len(geo))
    centroids = geo.units[_seed_indices(geo, config, k, n_internal)].copy()

    prev = _objective(geo, _assign(geo, centroids), centroids)
    trace: list[float] = []
    for _ in range(config.max_iters):
        assignment = _assign(geo, centroids)
        _repair_empty(geo, assignment, centroids)
        centroids, rbar = _update(geo, assignment, centroids)
        obj = _objective(geo, assignment, centroids)
        trace.append(obj)
        if prev - obj < config.tol:
            break
        prev = obj
    return ClusterState(assignment, centroids, rbar, trace)


def reconstruct_expert(segments, state: ClusterState, config: ClusterConfig) -> ExpertWeights:
    """One neuron per cluster: masked parts from r_bar * centroid, the rest from raw weighted means."""
    geo = _Geometry(segments, config)
    d = geo.segments[0].d
    raw = [
        np.stack([s.gate_row for s in geo.segments]).astype(F64),
        np.stack([s.up_row for s in geo.segments]).astype(F64),
        np.stack([s.down_col for s in geo.segments]).astype(F64),
    ]
    k = state.k
    parts = [np.zeros((k, d), dtype=F64) for _ in range(3)]
    for j in range(k):
        members = np.flatnonzero(state.assignment == j)
        scaled = state.centroids[j] * state.mean_norms[j]
        wt = _normalized_weights(geo.weights[members]) if len(members) else None
        offset = 0
        for comp, used in enumerate(config.mask.flags):
            if used:
                parts[comp][j] = scaled[offset : offset + d]
                offset += d
            elif wt is not None:
                parts[comp][j] = wt @ raw[comp][members]
    gate, up, down = parts
    return ExpertWeights(gate.astype(F32), up.astype(F32), down.T.astype(F32))


def compress_layer(
    layer: MoeLayer,
    retained,
    reassignment: ReassignmentResult,
    config: ClusterConfig,
    scores=None,
    diagnostics: list | None = None,
) -> MoeLayer:
    """Cluster every retained expert's own plus reassigned segments and rebuild the layer.

    ``scores`` gives the per-expert importance used as segment weight
    (uniform when omitted). When ``diagnostics`` is a list, ``(expert_id,
    ClusterState)`` pairs are appended to it.
    """
    retained = sorted(retained)
    if scores is None:
        scores = np.ones(layer.n_experts)
    pruned_sizes = {
        o: layer.experts[o].h for o in range(layer.n_experts) if o not in set(retained)
    }
    experts = []
    for r in retained:
        e = layer.experts[r]
        segs = decompose(e, float(scores[r]), r) + list(reassignment.ext_segments.get(r, []))
        k = config.target_k(e.h)
        try:
            state = run_kmeans(segs, config, k, n_internal=e.h)
        except DernError as exc:
            raise type(exc)(f"expert {r}: {exc}") from exc
        experts.append(reconstruct_expert(segs, state, config))
        if diagnostics is not None:
            diagnostics.append((r, state))
    router = transfer_router_mass(reassignment, layer.router, pruned_sizes)
    return MoeLayer(experts, router, min(layer.top_k, len(retained)))
