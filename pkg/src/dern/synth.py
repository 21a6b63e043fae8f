"""Seeded synthetic SMoE models with controllable expert redundancy."""

from __future__ import annotations

import re

import numpy as np

from .errors import ConfigError
from .model import ExpertWeights, MoeLayer, MoeModel


def parse_groups(spec: str, n_experts: int) -> list[list[int]]:
    """Parse e.g. ``"0-3/4-7"`` or ``"0,1;2,3"``; ``"none"`` means all singletons.

    Groups are separated by ``/`` or ``;``, members by ``,``, and ``a-b`` is
    an inclusive range.
    """
    spec = spec.strip()
    if spec.lower() in ("", "none", "singletons"):
        return [[i] for i in range(n_experts)]
    groups = []
    for chunk in re.split(r"[/;]", spec):
        members = []
        for item in chunk.split(","):
            item = item.strip()
            if not item:
                continue
            m = re.fullmatch(r"(\d+)-(\d+)", item)
            try:
                if m:
                    lo, hi = int(m.group(1)), int(m.group(2))
                    members.extend(range(lo, hi + 1))
                else:
                    members.append(int(item))
            except ValueError:
                raise ConfigError(f"bad group item {item!r}") from None
        if members:
            groups.append(members)
    check_partition(groups, n_experts)
    return groups


def check_partition(groups, n_experts: int) -> None:
    flat = [i for g in groups for i in g]
    if sorted(flat) != list(range(n_experts)):
        raise ConfigError(f"groups {groups} do not partition 0..{n_experts - 1}")


def gen_synthetic_model(
    d: int,
    h: int,
    n_experts: int,
    top_k: int,
    n_layers: int = 1,
    groups=None,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> MoeModel:
    """Experts in one group share a base draw plus independent Gaussian noise.

    Gate/up entries are drawn with std 1/sqrt(d) and down entries with std
    1/sqrt(h); ``noise_sigma`` is relative to those scales. Router rows are
    i.i.d. with std 1/sqrt(d).
    """
    if min(d, h, n_experts, n_layers) < 1:
        raise ConfigError("d, h, n_experts and n_layers must be >= 1")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    if groups is None:
        groups = [[i] for i in range(n_experts)]
    check_partition(groups, n_experts)

    rng = np.random.default_rng(seed)
    sd_in, sd_out = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
    layers = []
    for _ in range(n_layers):
        experts = [None] * n_experts
        for g in groups:
            base_g = rng.standard_normal((h, d))
            base_u = rng.standard_normal((h, d))
            base_d = rng.standard_normal((d, h))
            for i in g:
                experts[i] = ExpertWeights(
                    (sd_in * (base_g + noise_sigma * rng.standard_normal((h, d)))).astype(np.float32),
                    (sd_in * (base_u + noise_sigma * rng.standard_normal((h, d)))).astype(np.float32),
                    (sd_out * (base_d + noise_sigma * rng.standard_normal((d, h)))).astype(np.float32),
                )
        router = (sd_in * rng.standard_normal((n_experts, d))).astype(np.float32)
        layers.append(MoeLayer(experts, router, top_k))
    meta = {
        "name": "synthetic",
        "version": "1",
        "generator": f"d={d},h={h},N={n_experts},top_k={top_k},layers={n_layers},"
        f"noise={noise_sigma!r},seed={seed}",
    }
    return MoeModel(layers, meta)
