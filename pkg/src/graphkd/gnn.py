"""Message-passing layers (GCN, GIN, GraphSage), pooling and model assembly."""

from __future__ import annotations

import json
import os
import weakref
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Batch

ARCHS = ("GCN", "GIN", "GraphSage", "MLP")
CHECKPOINT_FORMAT = "graphkd-model"
CHECKPOINT_VERSION = 1


class GraphStructure:
    """Edge index lists plus the normalization constants the layers need."""

    def __init__(self, edges: np.ndarray, num_nodes: int):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.num_nodes = num_nodes
        self.src = edges[:, 0].copy()
        self.dst = edges[:, 1].copy()
        self.in_degree = np.bincount(self.dst, minlength=num_nodes).astype(np.float64)
        # symmetric normalization of A + I
        deg = self.in_degree + 1.0
        loop = np.arange(num_nodes)
        self.gcn_src = np.concatenate([self.src, loop])
        self.gcn_dst = np.concatenate([self.dst, loop])
        self.gcn_coef = 1.0 / np.sqrt(deg[self.gcn_src] * deg[self.gcn_dst])

    @classmethod
    def empty(cls, num_nodes: int) -> GraphStructure:
        return cls(np.zeros((0, 2), dtype=np.int64), num_nodes)


_structure_cache: "weakref.WeakKeyDictionary[Batch, GraphStructure]" = weakref.WeakKeyDictionary()


def structure_of(batch: Batch) -> GraphStructure:
    s = _structure_cache.get(batch)
    if s is None:
        s = GraphStructure(batch.edges, batch.num_nodes)
        _structure_cache[batch] = s
    return s


def gcn_propagate(x: Tensor, s: GraphStructure) -> Tensor:
    return ad.propagate(x, s.gcn_src, s.gcn_dst, s.gcn_coef, s.num_nodes)


def gcn_layer(x: Tensor, s: GraphStructure, w: Tensor) -> Tensor:
    """Symmetric-normalized graph convolution ``D^-1/2 (A + I) D^-1/2 X W``."""
    if w.shape[0] < w.shape[1]:
        return ad.matmul(gcn_propagate(x, s), w)
    return gcn_propagate(ad.matmul(x, w), s)


def neighbor_sum(x: Tensor, s: GraphStructure) -> Tensor:
    return ad.propagate(x, s.src, s.dst, np.ones(len(s.src)), s.num_nodes)


def gin_layer(x: Tensor, s: GraphStructure, mlp: list[tuple[Tensor, Tensor]], eps: Tensor) -> Tensor:
    """``mlp((1 + eps) * x_i + sum_j x_j)`` with messages flowing src -> dst."""
    one_plus_eps = ad.add(eps, Tensor([[1.0]]))
    h = ad.add(ad.scalar_mul(x, one_plus_eps), neighbor_sum(x, s))
    for k, (w, b) in enumerate(mlp):
        h = ad.add(ad.matmul(h, w), b)
        if k < len(mlp) - 1:
            h = ad.relu(h)
    return h


def sage_layer(x: Tensor, s: GraphStructure, w: Tensor) -> Tensor:
    """``concat(x_i, mean_j x_j) W``; isolated nodes get a zero neighbor mean."""
    inv = np.where(s.in_degree > 0, 1.0 / np.maximum(s.in_degree, 1.0), 0.0)
    mean = ad.scale_rows(neighbor_sum(x, s), inv)
    return ad.matmul(ad.concat_cols([x, mean]), w)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.elementwise_mul(x, Tensor(mask))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    in_dim: int
    num_layers: int
    hidden: int
    num_classes: int
    task: str = "node"
    pool: str | None = None
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.num_layers < 1 or self.hidden < 1 or self.in_dim < 1 or self.num_classes < 1:
            raise ValueError("num_layers, hidden, in_dim and num_classes must be >= 1")
        if self.task not in ("node", "graph"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "graph" and self.pool not in ("mean", "sum"):
            raise ValueError("graph task needs pool in {'mean', 'sum'}")
        if self.task == "node" and self.pool is not None:
            raise ValueError("pool is only valid for graph tasks")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(**d)


class Model:
    """A backbone of message-passing layers followed by a linear classifier."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor] | None = None):
        self.spec = spec
        self.params: dict[str, Tensor] = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, 0x6E6E]))
        sp = self.spec
        params: dict[str, Tensor] = {}
        d = sp.in_dim
        for layer in range(sp.num_layers):
            h = sp.hidden
            pre = f"layer{layer}"
            if sp.arch in ("GCN", "MLP"):
                params[f"{pre}.W"] = Tensor(glorot(rng, d, h), requires_grad=True)
            elif sp.arch == "GraphSage":
                params[f"{pre}.W"] = Tensor(glorot(rng, 2 * d, h), requires_grad=True)
            else:
                params[f"{pre}.eps"] = Tensor([[0.0]], requires_grad=True)
                params[f"{pre}.mlp0.W"] = Tensor(glorot(rng, d, h), requires_grad=True)
                params[f"{pre}.mlp0.b"] = Tensor(np.zeros((1, h)), requires_grad=True)
                params[f"{pre}.mlp1.W"] = Tensor(glorot(rng, h, h), requires_grad=True)
            params[f"{pre}.b"] = Tensor(np.zeros((1, h)), requires_grad=True)
            d = h
        params["classifier.W"] = Tensor(glorot(rng, d, sp.num_classes), requires_grad=True)
        params["classifier.b"] = Tensor(np.zeros((1, sp.num_classes)), requires_grad=True)
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def frozen(self) -> Model:
        """Copy whose parameters never record gradients."""
        return Model(self.spec, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def copy(self) -> Model:
        return Model(self.spec, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = state[k].copy()

    def _layer(self, layer: int, h: Tensor, s: GraphStructure) -> Tensor:
        p = self.params
        pre = f"layer{layer}"
        arch = self.spec.arch
        if arch == "GCN":
            out = gcn_layer(h, s, p[f"{pre}.W"])
        elif arch == "MLP":
            out = ad.matmul(h, p[f"{pre}.W"])
        elif arch == "GraphSage":
            out = sage_layer(h, s, p[f"{pre}.W"])
        else:
            mlp = [(p[f"{pre}.mlp0.W"], p[f"{pre}.mlp0.b"]), (p[f"{pre}.mlp1.W"], Tensor(np.zeros((1, self.spec.hidden))))]
            out = gin_layer(h, s, mlp, p[f"{pre}.eps"])
        return ad.add(out, p[f"{pre}.b"])

    def __call__(self, batch: Batch, train_mode: bool = False, rng: np.random.Generator | None = None):
        return forward(self, batch, train_mode, rng)


def forward(model: Model, batch: Batch, train_mode: bool = False, rng: np.random.Generator | None = None):
    """Return ``(F, Z)``: penultimate node embeddings and logits.

    Node tasks give one logit row per node; graph tasks pool ``F`` per member
    graph first.  Dropout is applied to hidden features only when
    ``train_mode`` is set, and ``F`` itself is returned before dropout.
    """
    sp = model.spec
    if batch.x.shape[1] != sp.in_dim:
        raise ValueError(f"batch feature width {batch.x.shape[1]} does not match model input width {sp.in_dim}")
    if batch.label_kind != sp.task:
        raise ValueError(f"{batch.label_kind}-labelled batch given to a {sp.task}-task model")
    use_dropout = train_mode and sp.dropout > 0
    if use_dropout and rng is None:
        raise ValueError("train_mode with dropout needs an rng")
    s = structure_of(batch)
    h = Tensor(batch.x)
    for layer in range(sp.num_layers):
        if layer > 0 and use_dropout:
            h = dropout(h, sp.dropout, rng)
        h = ad.relu(model._layer(layer, h, s))
    feats = h
    if use_dropout:
        h = dropout(h, sp.dropout, rng)
    if sp.task == "graph":
        h = pool(h, batch, sp.pool)
    logits = ad.add(ad.matmul(h, model.params["classifier.W"]), model.params["classifier.b"])
    return feats, logits


def pool(h: Tensor, batch: Batch, how: str) -> Tensor:
    if how == "mean":
        return ad.segment_mean(h, batch.node_to_graph, batch.num_graphs)
    if how == "sum":
        return ad.scatter_sum(h, batch.node_to_graph, batch.num_graphs)
    raise ValueError(f"unknown pool {how!r}")


def count_params(model) -> int:
    """Total number of scalar parameters."""
    params = model.parameters() if hasattr(model, "parameters") else list(model)
    return int(sum(p.data.size for p in params))


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_model(model: Model, path: str | os.PathLike) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in model.params.items()},
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_model(path: str | os.PathLike, expect: ModelSpec | None = None) -> Model:
    with open(path) as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a model checkpoint ({exc})") from None
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    spec = ModelSpec.from_dict(blob["spec"])
    if expect is not None and spec != expect:
        raise CheckpointError(f"{path}: checkpoint spec {spec} does not match expected {expect}")
    model = Model(spec)
    stored = blob["params"]
    if set(stored) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match spec")
    for name, t in model.params.items():
        shape = tuple(stored[name]["shape"])
        if shape != t.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {shape}, spec needs {t.shape}")
        t.data = np.asarray(stored[name]["data"], dtype=np.float64).reshape(shape)
    return model
