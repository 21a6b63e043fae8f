"""GLU-expert sparse MoE layers: data model and forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError
from .linalg import F32, F64, as_mat, as_vec, matvec, silu


def _frozen(a) -> np.ndarray:
    a = np.array(as_mat(a), dtype=F32, copy=True)
    if not np.all(np.isfinite(a)):
        raise NumericalError("weights contain NaN or Inf")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ExpertWeights:
    """One GLU expert: gate and up are (h, d), down is (d, h)."""

    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        g, u, dn = _frozen(self.w_gate), _frozen(self.w_up), _frozen(self.w_down)
        h, d = g.shape
        if h < 1 or d < 1:
            raise DimensionError("expert needs h >= 1 and d >= 1")
        if u.shape != (h, d) or dn.shape != (d, h):
            raise DimensionError(
                f"inconsistent expert shapes gate={g.shape} up={u.shape} down={dn.shape}"
            )
        object.__setattr__(self, "w_gate", g)
        object.__setattr__(self, "w_up", u)
        object.__setattr__(self, "w_down", dn)

    @property
    def d(self) -> int:
        return self.w_gate.shape[1]

    @property
    def h(self) -> int:
        return self.w_gate.shape[0]

    def n_params(self) -> int:
        return 3 * self.h * self.d

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w_gate.ravel(), self.w_up.ravel(), self.w_down.ravel()])


@dataclass(frozen=True)
class MoeLayer:
    """N experts, an (N, d) router matrix and the number of experts per token."""

    experts: tuple
    router: np.ndarray
    top_k: int

    def __post_init__(self):
        experts = tuple(self.experts)
        router = _frozen(self.router)
        if not experts:
            raise DimensionError("layer needs at least one expert")
        d = experts[0].d
        if any(e.d != d for e in experts):
            raise DimensionError("all experts in a layer must share d")
        if router.shape != (len(experts), d):
            raise DimensionError(
                f"router shape {router.shape} does not match {len(experts)} experts of dim {d}"
            )
        if not 1 <= self.top_k <= len(experts):
            raise DimensionError(f"top_k={self.top_k} outside [1, {len(experts)}]")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "router", router)
        object.__setattr__(self, "top_k", int(self.top_k))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.experts[0].d


@dataclass(frozen=True)
class MoeModel:
    layers: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        if layers and any(l.d != layers[0].d for l in layers):
            raise DimensionError("all layers must share the input dimension")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in dict(self.meta).items()})

    @property
    def d(self) -> int:
        if not self.layers:
            raise DimensionError("model has no layers")
        return self.layers[0].d


def _check_input(x, d: int) -> np.ndarray:
    x = as_vec(x)
    if x.shape[0] != d:
        raise DimensionError(f"input has length {x.shape[0]}, expected {d}")
    return x


def expert_forward(e: ExpertWeights, x) -> np.ndarray:
    """W_down (silu(W_gate x) * (W_up x))."""
    x = _check_input(x, e.d)
    g = matvec(e.w_gate, x).astype(F64)
    u = matvec(e.w_up, x).astype(F64)
    return matvec(e.w_down, (silu(g) * u).astype(F32))


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=F64)
    ez = np.exp(z - np.max(z))
    return ez / ez.sum()


def route(layer: MoeLayer, x) -> tuple[list[int], list[float]]:
    """Softmax over all N router logits, then keep the top_k.

    Returned weights are the raw softmax values (not renormalized). Ties go
    to the lower expert index.
    """
    x = _check_input(x, layer.d)
    probs = softmax(matvec(layer.router, x))
    order = np.argsort(-probs, kind="stable")[: layer.top_k]
    return [int(i) for i in order], [float(probs[i]) for i in order]


def layer_forward(layer: MoeLayer, x) -> np.ndarray:
    x = _check_input(x, layer.d)
    idx, w = route(layer, x)
    total = sum(w)
    out = np.zeros(layer.d, dtype=F64)
    for i, wi in zip(idx, w):
        out += (wi / total) * expert_forward(layer.experts[i], x).astype(F64)
    return out.astype(F32)


def model_forward(model: MoeModel, x) -> np.ndarray:
    """Residual stack: x <- x + layer(x) for each layer in order."""
    hcur = _check_input(x, model.d).astype(F64)
    for layer in model.layers:
        hcur = hcur + layer_forward(layer, hcur.astype(F32)).astype(F64)
    return hcur.astype(F32)


def param_count(m: MoeModel) -> int:
    total = 0
    for layer in m.layers:
        total += layer.router.size
        total += sum(e.n_params() for e in layer.experts)
    return total


def expert_param_count(m: MoeModel) -> int:
    return sum(e.n_params() for layer in m.layers for e in layer.experts)
