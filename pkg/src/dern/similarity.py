"""Expert-level and neuron-level similarity diagnostics for one layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .linalg import cosine_matrix
from .model import MoeModel
from .segments import FULL_MASK, decompose, vectorize_all


@dataclass
class SimReport:
    expert_level: np.ndarray  # (N, N)
    neuron_level: list  # neuron_level[i][j]: length h_i vector of best matches in expert j


def similarity_report(model: MoeModel, layer_index: int) -> SimReport:
    if not 0 <= layer_index < len(model.layers):
        raise ConfigError(f"layer index {layer_index} outside [0, {len(model.layers)})")
    experts = model.layers[layer_index].experts
    flat = [e.flatten() for e in experts]
    if len({f.shape for f in flat}) == 1:
        expert_level = cosine_matrix(np.stack(flat), np.stack(flat))
    else:
        # reconstructed experts may differ in h; pairs of unequal size have no flat cosine
        n = len(flat)
        expert_level = np.full((n, n), np.nan)
        for i in range(n):
            for j in range(n):
                if flat[i].shape == flat[j].shape:
                    expert_level[i, j] = cosine_matrix(flat[i][None], flat[j][None])[0, 0]
    vecs = [vectorize_all(decompose(e), FULL_MASK) for e in experts]
    neuron_level = [[cosine_matrix(vi, vj).max(axis=1) for vj in vecs] for vi in vecs]
    return SimReport(expert_level, neuron_level)
