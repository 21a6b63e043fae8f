"""Neuron-level segments: decomposition, pooling, reassignment, router transfer.

A segment is the triplet (row i of W_gate, row i of W_up, column i of W_down);
an expert's output is the sum of its segments' contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .linalg import F32, F64, cosine, cosine_matrix, silu
from .model import ExpertWeights


@dataclass(frozen=True)
class ComponentMask:
    use_gate: bool = False
    use_up: bool = True
    use_down: bool = True

    def __post_init__(self):
        if not (self.use_gate or self.use_up or self.use_down):
            raise ConfigError("component mask must enable at least one component")

    @classmethod
    def parse(cls, text: str) -> "ComponentMask":
        parts = {p.strip() for p in text.split(",") if p.strip()}
        unknown = parts - {"gate", "up", "down"}
        if unknown:
            raise ConfigError(f"unknown mask components {sorted(unknown)}")
        return cls("gate" in parts, "up" in parts, "down" in parts)

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.use_gate, self.use_up, self.use_down)

    def __str__(self) -> str:
        return ",".join(n for n, f in zip(("gate", "up", "down"), self.flags) if f)


FULL_MASK = ComponentMask(True, True, True)
DEFAULT_MASK = ComponentMask(False, True, True)


@dataclass(frozen=True)
class Segment:
    gate_row: np.ndarray
    up_row: np.ndarray
    down_col: np.ndarray
    weight: float = 1.0
    source_expert: int = -1
    source_index: int = -1

    def __post_init__(self):
        d = len(self.gate_row)
        if len(self.up_row) != d or len(self.down_col) != d:
            raise DimensionError("segment components must share length d")
        if self.weight < 0:
            raise ConfigError("segment weight must be >= 0")

    @property
    def d(self) -> int:
        return len(self.gate_row)


def decompose(e: ExpertWeights, weight: float = 1.0, source_id: int = -1) -> list[Segment]:
    return [
        Segment(
            e.w_gate[i].copy(),
            e.w_up[i].copy(),
            e.w_down[:, i].copy(),
            float(weight),
            int(source_id),
            i,
        )
        for i in range(e.h)
    ]


def assemble(segments) -> ExpertWeights:
    """Inverse of :func:`decompose` (neuron order = list order)."""
    segments = list(segments)
    if not segments:
        raise DimensionError("cannot assemble an expert from zero segments")
    return ExpertWeights(
        np.stack([s.gate_row for s in segments]),
        np.stack([s.up_row for s in segments]),
        np.stack([s.down_col for s in segments], axis=1),
    )


def segment_sum(segments, x) -> np.ndarray:
    """Expert output as the explicit per-neuron sum."""
    x = np.asarray(x, dtype=F64)
    out = np.zeros(len(x), dtype=F64)
    for s in segments:
        g = float(np.dot(s.gate_row.astype(F64), x))
        u = float(np.dot(s.up_row.astype(F64), x))
        out += s.down_col.astype(F64) * (silu(g) * u)
    return out


def vectorize(s: Segment, mask: ComponentMask = DEFAULT_MASK) -> np.ndarray:
    parts = [p for p, f in zip((s.gate_row, s.up_row, s.down_col), mask.flags) if f]
    return np.concatenate(parts).astype(F32)


def vectorize_all(segments, mask: ComponentMask = DEFAULT_MASK) -> np.ndarray:
    segments = list(segments)
    if not segments:
        return np.zeros((0, 0), dtype=F32)
    return np.stack([vectorize(s, mask) for s in segments])


def sim_to_expert(s: Segment, target_segments, mask: ComponentMask = DEFAULT_MASK) -> float:
    """Max cosine between ``s`` and any target segment."""
    target_segments = list(target_segments)
    if not target_segments:
        raise DimensionError("target segment set is empty")
    v = vectorize(s, mask)
    return max(cosine(v, vectorize(t, mask)) for t in target_segments)


@dataclass
class Assignment:
    source_expert: int
    source_index: int
    target_expert: int  # -1 when rejected
    best_similarity: float


@dataclass
class ReassignmentResult:
    ext_segments: dict  # retained id -> list[Segment]
    assignments: list  # one Assignment per pool segment, pool order
    retained_ratio: float
    router_delta: dict = field(default_factory=dict)  # filled by transfer_router_mass

    @property
    def n_assigned(self) -> int:
        return sum(a.target_expert >= 0 for a in self.assignments)


def build_pool(experts, pruned, weights) -> list[Segment]:
    """Decompose every pruned expert; segments carry their source expert's score."""
    pool = []
    for o in sorted(pruned):
        pool.extend(decompose(experts[o], float(weights[o]), o))
    return pool


def reassign(pool, retained: dict, alpha: float, mask: ComponentMask = DEFAULT_MASK) -> ReassignmentResult:
    """Send each pool segment to its most similar retained expert if similarity > alpha.

    Targets are the retained experts' original segments; assignments made in
    this pass never change them, so the result does not depend on pool order.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha={alpha} outside [0, 1]")
    if not retained:
        raise ConfigError("no retained experts")
    ids = sorted(retained)
    if any(len(retained[r]) == 0 for r in ids):
        raise ConfigError("every retained expert needs at least one segment")
    pool = list(pool)
    ext = {r: [] for r in ids}
    if not pool:
        return ReassignmentResult(ext, [], 0.0)

    pv = vectorize_all(pool, mask)
    best = np.full(len(pool), -np.inf)
    target = np.full(len(pool), -1, dtype=np.int64)
    for r in ids:
        sim = cosine_matrix(pv, vectorize_all(retained[r], mask)).max(axis=1)
        better = sim > best  # strict: ties keep the lower id
        best[better] = sim[better]
        target[better] = r

    assignments = []
    for s, b, t in zip(pool, best, target):
        ok = b > alpha
        if ok:
            ext[int(t)].append(s)
        assignments.append(Assignment(s.source_expert, s.source_index, int(t) if ok else -1, float(b)))
    n_ok = sum(a.target_expert >= 0 for a in assignments)
    return ReassignmentResult(ext, assignments, n_ok / len(pool))


def router_deltas(result: ReassignmentResult, router, pruned_sizes: dict) -> dict:
    """Per receiving expert, the float64 sum of row_o / n_o over its assigned segments."""
    router = np.asarray(router)
    deltas = {r: np.zeros(router.shape[1], dtype=F64) for r in result.ext_segments}
    for a in result.assignments:
        if a.target_expert < 0:
            continue
        o = a.source_expert
        if o not in pruned_sizes or not 0 <= o < router.shape[0]:
            raise ConfigError(f"unknown pruned expert id {o}")
        if a.target_expert not in deltas:
            raise ConfigError(f"unknown retained expert id {a.target_expert}")
        deltas[a.target_expert] += router[o].astype(F64) / pruned_sizes[o]
    return deltas


def transfer_router_mass(result: ReassignmentResult, router, pruned_sizes: dict) -> np.ndarray:
    """Add the transferred mass to receiving rows, then keep retained rows only (ascending id)."""
    router = np.asarray(router, dtype=F32)
    ids = sorted(result.ext_segments)
    if any(not 0 <= r < router.shape[0] for r in ids):
        raise ConfigError("retained expert id outside router")
    deltas = router_deltas(result, router, pruned_sizes)
    result.router_delta = deltas
    return np.stack([(router[r].astype(F64) + deltas[r]).astype(F32) for r in ids])
