"""End-to-end compression: DERN and the two reference baselines, plus evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    CalibrationSet,
    ImportanceReport,
    RoutingStats,
    collect_stats,
    importance_report,
    synth_calibration,
)
from .clustering import ClusterConfig, compress_layer
from .errors import ConfigError, DernError, NumericalError
from .linalg import F64, cosine_matrix
from .model import ExpertWeights, MoeLayer, MoeModel, layer_forward, model_forward, param_count
from .segments import build_pool, decompose, reassign
from .storage import load_calibration, load_model, save_model

log = logging.getLogger(__name__)

BASELINES = ("dern", "prune_only", "expert_average")
DEFAULT_ALPHA = 0.4


def calibration_seed(seed: int) -> int:
    return 2 * seed


def probe_seed(seed: int) -> int:
    return 2 * seed + 1


@dataclass
class CompressionResult:
    model: MoeModel
    importance: ImportanceReport
    retained_ratio: list  # per layer; None for baselines without segment transfer
    assignments: list = field(default_factory=list)  # per layer, list[Assignment]
    clusters: list = field(default_factory=list)  # per layer, list[(expert_id, ClusterState)]


def _in_layer(li: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DernError as exc:
        raise type(exc)(f"layer {li}: {exc}") from exc


def _prune_layer(layer: MoeLayer, retained) -> MoeLayer:
    return MoeLayer(
        [layer.experts[r] for r in retained],
        layer.router[list(retained)],
        min(layer.top_k, len(retained)),
    )


def _average_layer(layer: MoeLayer, retained, pruned, scores) -> MoeLayer:
    flat = np.stack([e.flatten() for e in layer.experts]).astype(F64)
    if pruned:
        sim = cosine_matrix(flat[pruned], flat[retained])
        target = [retained[int(j)] for j in np.argmax(sim, axis=1)]
    else:
        target = []
    groups = {r: [r] for r in retained}
    for o, r in zip(pruned, target):
        groups[r].append(o)

    experts, rows = [], []
    for r in retained:
        g = groups[r]
        shape = layer.experts[r].w_gate.shape
        if any(layer.experts[i].w_gate.shape != shape for i in g):
            raise ConfigError(f"cannot average experts of different sizes in group {g}")
        w = np.array([scores[i] for i in g], dtype=F64)
        w = w / w.sum() if w.sum() > 0 else np.full(len(g), 1.0 / len(g))
        mats = [
            sum(wi * getattr(layer.experts[i], name).astype(F64) for wi, i in zip(w, g))
            for name in ("w_gate", "w_up", "w_down")
        ]
        experts.append(ExpertWeights(*(m.astype(np.float32) for m in mats)))
        rows.append(layer.router[g].astype(F64).sum(axis=0))
    return MoeLayer(experts, np.stack(rows).astype(np.float32), min(layer.top_k, len(retained)))


def compress(
    model: MoeModel,
    stats: RoutingStats,
    k_retain,
    baseline: str = "dern",
    alpha: float = DEFAULT_ALPHA,
    cluster: ClusterConfig | None = None,
) -> CompressionResult:
    """Prune to ``k_retain`` experts per layer and apply ``baseline``'s recovery step."""
    if baseline not in BASELINES:
        raise ConfigError(f"baseline must be one of {BASELINES}, got {baseline!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha={alpha} outside [0, 1]")
    if len(stats.layers) != len(model.layers):
        raise ConfigError(f"stats cover {len(stats.layers)} layers, model has {len(model.layers)}")
    cluster = cluster or ClusterConfig()
    imp = importance_report(stats, k_retain)

    layers, ratios, assigns, clusters = [], [], [], []
    for li, layer in enumerate(model.layers):
        retained, pruned, scores = imp.retained[li], imp.pruned[li], imp.scores[li]
        if len(scores) != layer.n_experts:
            raise ConfigError(f"layer {li}: stats have {len(scores)} experts, layer has {layer.n_experts}")
        if baseline == "prune_only":
            layers.append(_prune_layer(layer, retained))
            ratios.append(None)
        elif baseline == "expert_average":
            layers.append(_in_layer(li, _average_layer, layer, retained, pruned, scores))
            ratios.append(None)
        else:
            pool = build_pool(layer.experts, pruned, scores)
            targets = {r: decompose(layer.experts[r], float(scores[r]), r) for r in retained}
            result = _in_layer(li, reassign, pool, targets, alpha, cluster.mask)
            diag: list = []
            layers.append(
                _in_layer(li, compress_layer, layer, retained, result, cluster, scores, diag)
            )
            ratios.append(result.retained_ratio)
            assigns.append(result.assignments)
            clusters.append(diag)
            log.info("layer %d: retained %s, segment ratio %.4f", li, retained, result.retained_ratio)

    meta = dict(model.meta)
    meta["compression"] = baseline
    out = MoeModel(layers, meta)
    for layer in out.layers:
        for e in layer.experts:
            for a in (e.w_gate, e.w_up, e.w_down):
                if not np.all(np.isfinite(a)):
                    raise NumericalError("compressed weights contain NaN or Inf")
    return CompressionResult(out, imp, ratios, assigns, clusters)


@dataclass
class EvalReport:
    layer_mse: list
    layer_cosine: list
    model_mse: float
    model_cosine: float
    params_before: int
    params_after: int
    retained_ratio: list = field(default_factory=list)
    seconds: float = 0.0
    n_probes: int = 0

    def to_dict(self) -> dict:
        return {
            "layer_mse": self.layer_mse,
            "layer_cosine": self.layer_cosine,
            "model_mse": self.model_mse,
            "model_cosine": self.model_cosine,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "retained_ratio": self.retained_ratio,
            "seconds": self.seconds,
            "n_probes": self.n_probes,
        }


def _mean_cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([cosine_matrix(x[None], y[None])[0, 0] for x, y in zip(a, b)]))


def evaluate(original: MoeModel, compressed: MoeModel, probes: np.ndarray) -> EvalReport:
    """Output deviation of ``compressed`` from ``original`` on probe inputs.

    Layer metrics feed the same probes to each layer in isolation; model
    metrics run the full residual stack.
    """
    t0 = time.perf_counter()
    if len(original.layers) != len(compressed.layers):
        raise ConfigError("models have different layer counts")
    probes = np.asarray(probes, dtype=np.float32)
    layer_mse, layer_cos = [], []
    for lo, lc in zip(original.layers, compressed.layers):
        a = np.stack([layer_forward(lo, x) for x in probes]).astype(F64)
        b = np.stack([layer_forward(lc, x) for x in probes]).astype(F64)
        layer_mse.append(float(np.mean((a - b) ** 2)))
        layer_cos.append(_mean_cos(a, b))
    a = np.stack([model_forward(original, x) for x in probes]).astype(F64)
    b = np.stack([model_forward(compressed, x) for x in probes]).astype(F64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericalError("NaN/Inf in model outputs")
    return EvalReport(
        layer_mse,
        layer_cos,
        float(np.mean((a - b) ** 2)),
        _mean_cos(a, b),
        param_count(original),
        param_count(compressed),
        n_probes=len(probes),
        seconds=time.perf_counter() - t0,
    )


@dataclass
class PipelineConfig:
    model_path: str
    k_retain: object  # int or per-layer list
    calib_path: str | None = None
    synth_tokens: int = 512
    alpha: float = DEFAULT_ALPHA
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    baseline: str = "dern"
    output_path: str | None = None
    seed: int = 0
    probes: int = 256

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha={self.alpha} outside [0, 1]")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")


def _calibration_for(config: PipelineConfig, model: MoeModel) -> CalibrationSet:
    if config.calib_path:
        return CalibrationSet(load_calibration(config.calib_path), source=str(config.calib_path))
    return synth_calibration(model.d, config.synth_tokens, calibration_seed(config.seed))


def run_pipeline(config: PipelineConfig, model: MoeModel | None = None):
    t0 = time.perf_counter()
    model = model if model is not None else load_model(config.model_path)
    stats = collect_stats(model, _calibration_for(config, model))
    result = compress(model, stats, config.k_retain, config.baseline, config.alpha, config.cluster)
    if config.output_path:
        save_model(result.model, config.output_path)
    probes = synth_calibration(model.d, config.probes, probe_seed(config.seed)).tokens
    report = evaluate(model, result.model, probes)
    report.retained_ratio = result.retained_ratio
    report.seconds = time.perf_counter() - t0
    return result.model, report


def run_dern(config: PipelineConfig, model: MoeModel | None = None):
    if config.baseline != "dern":
        raise ConfigError("run_dern needs baseline='dern'")
    return run_pipeline(config, model)


def run_prune_only(config: PipelineConfig, model: MoeModel | None = None):
    config = PipelineConfig(**{**config.__dict__, "baseline": "prune_only"})
    return run_pipeline(config, model)


def run_expert_average(config: PipelineConfig, model: MoeModel | None = None):
    config = PipelineConfig(**{**config.__dict__, "baseline": "expert_average"})
    return run_pipeline(config, model)
