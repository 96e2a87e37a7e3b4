"""Registry of finite-difference gradient checks over ops, layers and losses.

Every entry builds a small random instance from an rng and returns
``(f, params)`` suitable for :func:`graphkd.autodiff.grad_check`.  Entries
are named ``<family>/<variant>``; families are ``op``, ``layer`` and one per
loss.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distill import (
    CONTRAST_LEVELS,
    ContrastGroups,
    Kernel,
    ProjectionHead,
    at_loss,
    crd_loss,
    cross_entropy,
    fitnet_loss,
    gcrd_loss,
    gsp_loss,
    kd_loss,
    lsp_loss,
)
from .gnn import GraphStructure, Model, ModelSpec, dropout, gcn_layer, gin_layer, pool, sage_layer
from .graph import Graph, make_batch

TOLERANCE = 1e-4
EPS = 1e-5
LOSS_KERNELS = ("euclidean", "linear", "polynomial", "rbf")

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
REGISTRY: dict[str, Builder] = {}


def register(name: str):
    def deco(fn: Builder) -> Builder:
        if name in REGISTRY:
            raise ValueError(f"duplicate gradcheck entry {name!r}")
        REGISTRY[name] = fn
        return fn

    return deco


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _random_edges(rng, n: int, p: float = 0.4) -> np.ndarray:
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < p]
    if not pairs:
        pairs = [(0, 1), (1, 0)]
    return np.array(pairs, dtype=np.int64)


def _op(name: str, make):
    """Register ``op/<name>``; ``make(rng)`` returns ``(g, params)`` with ``g`` tensor-valued."""

    @register(f"op/{name}")
    def build(rng):
        g, params = make(rng)
        w = Tensor(rng.standard_normal(g().shape))
        return (lambda: ad.reduce_sum(ad.elementwise_mul(g(), w))), params

    return build


# ---------------------------------------------------------------- ops


def _late(op: str):
    # resolved at call time so a sabotaged op is picked up
    return lambda *args: getattr(ad, op)(*args)


def _binary(fn, shape_b=None):
    def make(rng):
        a = _param(rng, 4, 3)
        b = _param(rng, *(shape_b or (4, 3)))
        return (lambda: fn(a, b)), [a, b]

    return make


def _unary(fn, positive=False, shape=(4, 3)):
    def make(rng):
        data = rng.standard_normal(shape)
        if positive:
            data = np.abs(data) + 0.5
        a = Tensor(data, requires_grad=True)
        return (lambda: fn(a)), [a]

    return make


def _away_from_zero(fn):
    def make(rng):
        data = rng.standard_normal((4, 3))
        data = np.where(np.abs(data) < 0.05, 0.1, data)
        a = Tensor(data, requires_grad=True)
        return (lambda: fn(a)), [a]

    return make


_op("matmul", _binary(_late("matmul"), (3, 2)))
_op("add", _binary(_late("add")))
_op("add_row_bias", _binary(_late("add"), (1, 3)))
_op("sub", _binary(_late("sub")))
_op("sub_row_bias", _binary(_late("sub"), (1, 3)))
_op("elementwise_mul", _binary(_late("elementwise_mul")))
_op("scalar_mul", _binary(_late("scalar_mul"), (1, 1)))
_op("mse", _binary(_late("mse")))
_op("mul_scalar", _unary(lambda a: ad.mul_scalar(a, -1.7)))
_op("scale_rows", _unary(lambda a: ad.scale_rows(a, np.array([0.5, -1.0, 2.0, 0.0]))))
_op("transpose", _unary(_late("transpose")))
_op("relu", _away_from_zero(_late("relu")))
_op("exp", _unary(_late("exp")))
_op("log", _unary(_late("log"), positive=True))
_op("power", _unary(lambda a: ad.power(a, 3)))
_op("log_sigmoid", _unary(lambda a: ad.log_sigmoid(ad.mul_scalar(a, 5.0))))
_op("row_softmax", _unary(_late("row_softmax")))
_op("row_log_softmax", _unary(_late("row_log_softmax")))
_op("row_l2_normalize", _unary(_late("row_l2_normalize")))
_op("row_sum", _unary(_late("row_sum")))
_op("row_mean", _unary(_late("row_mean")))
_op("reduce_sum", _unary(_late("reduce_sum")))
_op("reduce_mean", _unary(_late("reduce_mean")))
_op("take", _unary(lambda a: ad.take(a, np.array([2, 0, 1, 2]))))
_op("gather_rows", _unary(lambda a: ad.gather_rows(a, np.array([3, 0, 0, 2, 1]))))
_op("scatter_sum", _unary(lambda a: ad.scatter_sum(a, np.array([1, 0, 1, 2]), 3)))
_op("segment_mean", _unary(lambda a: ad.segment_mean(a, np.array([0, 0, 1, 1]), 2)))
_op(
    "propagate",
    _unary(lambda a: ad.propagate(a, np.array([0, 1, 2, 3, 3]), np.array([1, 2, 0, 0, 1]), np.array([0.5, 1.0, -2.0, 1.5, 0.3]), 4)),
)


def _make_concat(rng):
    a, b = _param(rng, 4, 2), _param(rng, 4, 3)
    return (lambda: ad.concat_cols([a, b])), [a, b]


def _make_batch_norm(rng):
    x = _param(rng, 6, 3)
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal((1, 3)), requires_grad=True)
    beta = _param(rng, 1, 3, scale=0.1)
    return (lambda: ad.batch_norm_rows(x, gamma, beta)), [x, gamma, beta]


_op("concat_cols", _make_concat)
_op("batch_norm_rows", _make_batch_norm)


# ---------------------------------------------------------------- layers


def _layer_instance(rng, n=6, d=3):
    s = GraphStructure(_random_edges(rng, n), n)
    return s, _param(rng, n, d)


def _layer(name: str):
    def deco(make):
        @register(f"layer/{name}")
        def build(rng):
            g, params = make(rng)
            w = Tensor(rng.standard_normal(g().shape))
            return (lambda: ad.reduce_sum(ad.elementwise_mul(g(), w))), params

        return build

    return deco


@_layer("gcn")
def _gcn(rng):
    s, x = _layer_instance(rng)
    # a narrowing and a widening weight exercise both multiplication orders
    w1, w2 = _param(rng, 3, 2), _param(rng, 3, 5)
    return (lambda: ad.concat_cols([gcn_layer(x, s, w1), gcn_layer(x, s, w2)])), [x, w1, w2]


@_layer("gin")
def _gin(rng):
    s, x = _layer_instance(rng)
    eps = Tensor([[0.1 * rng.standard_normal()]], requires_grad=True)
    w0, b0, w1 = _param(rng, 3, 4), _param(rng, 1, 4, scale=0.1), _param(rng, 4, 4)
    # keep hidden pre-activations away from the relu kink
    b0.data += 0.5
    return (lambda: gin_layer(x, s, [(w0, b0), (w1, Tensor(np.zeros((1, 4))))], eps)), [x, eps, w0, b0, w1]


@_layer("sage")
def _sage(rng):
    n = 6
    edges = _random_edges(rng, n, 0.3)
    # node 0 keeps no in-edges so the isolated-node branch is covered
    edges = edges[edges[:, 1] != 0]
    s = GraphStructure(edges, n)
    x = _param(rng, n, 3)
    w = _param(rng, 6, 4)
    return (lambda: sage_layer(x, s, w)), [x, w]


@_layer("pool-mean")
def _pool_mean(rng):
    x = _param(rng, 7, 3)
    b = _tiny_batch(rng, [3, 4], 3)
    return (lambda: pool(x, b, "mean")), [x]


@_layer("pool-sum")
def _pool_sum(rng):
    x = _param(rng, 7, 3)
    b = _tiny_batch(rng, [3, 4], 3)
    return (lambda: pool(x, b, "sum")), [x]


@_layer("dropout")
def _dropout(rng):
    x = _param(rng, 5, 3)
    seed = int(rng.integers(1 << 30))
    # a fresh generator per call replays the same mask
    return (lambda: dropout(x, 0.3, np.random.default_rng(seed))), [x]


def _tiny_batch(rng, sizes, d, task="graph"):
    graphs = []
    for k, n in enumerate(sizes):
        e = _random_edges(rng, n, 0.5)
        e = np.unique(np.concatenate([e, e[:, ::-1]]), axis=0)
        x = rng.standard_normal((n, d))
        if task == "graph":
            graphs.append(Graph(n, e, x, graph_label=k % 2, id=f"g{k}", num_classes=2))
        else:
            graphs.append(Graph(n, e, x, node_labels=rng.integers(0, 3, n), id=f"g{k}", num_classes=3))
    return make_batch(graphs)


def _model_entry(arch: str, task: str):
    @_layer(f"model-{arch.lower()}-{task}")
    def build(rng):
        pool_kind = "mean" if task == "graph" else None
        b = _tiny_batch(rng, [4, 5] if task == "graph" else [7], 3, task)
        spec = ModelSpec(arch, 3, 2, 4, 2 if task == "graph" else 3, task=task, pool=pool_kind, seed=int(rng.integers(1 << 30)))
        model = Model(spec)
        for p in model.parameters():
            # small positive biases keep relu inputs clear of zero
            if p.shape[0] == 1 and p.shape[1] > 1:
                p.data += 0.3
        return (lambda: model(b)[1]), model.parameters()

    return build


for _arch in ("GCN", "GIN", "GraphSage", "MLP"):
    _model_entry(_arch, "node")
_model_entry("GCN", "graph")


def _head_entry(kind: str):
    @_layer(f"head-{kind}")
    def build(rng):
        s, x = _layer_instance(rng)
        head = _head(kind, 3, 4, rng)
        return (lambda: head(x, s, True)), [x, *head.parameters()]

    return build


def _head(kind, d_in, d_out, rng):
    head = ProjectionHead(kind, d_in, d_out, np.random.default_rng(rng.integers(1 << 30)))
    if "b" in head.params:
        head.params["b"].data = 0.1 * rng.standard_normal(head.params["b"].shape)
    if "beta" in head.params:
        head.params["beta"].data = 0.5 + 0.1 * rng.standard_normal(head.params["beta"].shape)
    return head


for _kind in ("linear", "mlp", "gcn"):
    _head_entry(_kind)


# ---------------------------------------------------------------- losses


@register("kd")
def _kd(rng):
    z_s, z_t = _param(rng, 6, 4, scale=2.0), _param(rng, 6, 4, scale=2.0)
    return (lambda: kd_loss(z_s, z_t, 4.0)), [z_s]


@register("cross_entropy")
def _ce(rng):
    z = _param(rng, 6, 4, scale=2.0)
    y = rng.integers(0, 4, 6)
    return (lambda: cross_entropy(z, y)), [z]


@register("fitnet")
def _fitnet(rng):
    s, f_s = _layer_instance(rng, d=3)
    f_t = _param(rng, 6, 5)
    hs, ht = _head("linear", 3, 4, rng), _head("linear", 5, 4, rng)
    return (lambda: fitnet_loss(f_s, f_t, hs, ht, s)), [f_s, *hs.parameters(), *ht.parameters()]


@register("at")
def _at(rng):
    f_s, f_t = _param(rng, 6, 3), _param(rng, 6, 5)
    return (lambda: at_loss(f_s, f_t)), [f_s]


def _lsp_entry(kind: str):
    @register(f"lsp/{kind}")
    def build(rng):
        n = 8
        edges = _random_edges(rng, n, 0.45)
        f_s, f_t = _param(rng, n, 3, scale=0.6), _param(rng, n, 5, scale=0.6)
        kernel = Kernel(kind, normalize=kind == "rbf")
        return (lambda: lsp_loss(f_s, f_t, edges, kernel)), [f_s]

    return build


def _gsp_entry(kind: str, metric: str):
    @register(f"gsp/{metric}/{kind}")
    def build(rng):
        f_s, f_t = _param(rng, 7, 3, scale=0.6), _param(rng, 7, 5, scale=0.6)
        kernel = Kernel(kind, normalize=kind == "rbf")
        return (lambda: gsp_loss(f_s, f_t, kernel, metric)), [f_s]

    return build


for _k in LOSS_KERNELS:
    _lsp_entry(_k)
    for _m in ("mse", "kl"):
        _gsp_entry(_k, _m)


def _contrast_instance(rng, kind: str, level: str):
    sizes = [3, 4, 3, 4]
    n = sum(sizes)
    node_to_graph = np.repeat(np.arange(len(sizes)), sizes)
    edges = []
    start = 0
    for size in sizes:
        e = _random_edges(rng, size, 0.6) + start
        edges.append(e)
        start += size
    s = GraphStructure(np.concatenate(edges), n)
    d_s, d_t = (4, 4) if kind == "identity" else (3, 5)
    f_s, f_t = _param(rng, n, d_s), _param(rng, n, d_t)
    hs, ht = _head(kind, d_s, 4, rng), _head(kind, d_t, 4, rng)
    groups = ContrastGroups(node_to_graph, len(sizes))
    params = [f_s, *hs.parameters(), *ht.parameters()]
    return f_s, f_t, hs, ht, s, groups, params


def _contrast_entry(loss, name: str, kind: str, level: str):
    @register(f"{name}/{kind}/{level}")
    def build(rng):
        f_s, f_t, hs, ht, s, groups, params = _contrast_instance(rng, kind, level)
        return (lambda: loss(f_s, f_t, hs, ht, 0.5, s, level, groups, True)), params

    return build


for _level in CONTRAST_LEVELS:
    for _kind in ("mlp", "gcn", "identity"):
        _contrast_entry(gcrd_loss, "gcrd", _kind, _level)
    _contrast_entry(crd_loss, "crd", "linear", _level)


LOSS_FAMILIES = ("kd", "cross_entropy", "fitnet", "at", "lsp", "gsp", "crd", "gcrd")


# ---------------------------------------------------------------- running


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int
    seconds: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        detail = f"  ({self.error})" if self.error else ""
        return f"{self.name:<32} max_rel_err={self.max_rel_error:.3e}  n={self.instances}  {status}{detail}"


def family(name: str) -> str:
    return name.split("/", 1)[0]


def select(loss: str | None = None) -> list[str]:
    """Entry names for ``loss`` (a family or exact entry), or all entries."""
    if loss is None:
        return list(REGISTRY)
    names = [k for k in REGISTRY if k == loss or family(k) == loss or k.startswith(loss + "/")]
    if not names:
        raise KeyError(f"no gradcheck entries for {loss!r}; families: {sorted({family(k) for k in REGISTRY})}")
    return names


def check(name: str, instances: int = 10, seed: int = 0, eps: float = EPS) -> CheckResult:
    t0 = time.perf_counter()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, _stable_hash(name)]).spawn(instances)]
    worst = 0.0
    try:
        for rng in rngs:
            f, params = REGISTRY[name](rng)
            worst = max(worst, ad.grad_check(f, params, eps=eps))
    except Exception as exc:  # report, don't abort the suite
        return CheckResult(name, float("inf"), instances, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, worst, instances, time.perf_counter() - t0)


def _stable_hash(name: str) -> int:
    return int.from_bytes(name.encode()[:16].ljust(16, b"\0"), "little") % (1 << 63)


def run(names: list[str], instances: int = 10, seed: int = 0) -> list[CheckResult]:
    return [check(n, instances, seed) for n in names]


def merge(label: str, results: list[CheckResult]) -> CheckResult:
    """Collapse several results into one line, keeping the worst error."""
    worst = max(results, key=lambda r: (r.error is not None, r.max_rel_error))
    error = None if worst.error is None else f"{worst.name}: {worst.error}"
    return CheckResult(label, worst.max_rel_error, sum(r.instances for r in results), sum(r.seconds for r in results), error)


# ---------------------------------------------------------------- negative control


@contextlib.contextmanager
def sabotaged(op: str, factor: float = 1.5) -> Iterator[None]:
    """Temporarily scale the backward rule of ``autodiff.<op>`` by ``factor``.

    The forward value is untouched, so only gradient checks can notice.
    """
    original = getattr(ad, op, None)
    if original is None or not callable(original):
        raise KeyError(f"autodiff has no op {op!r}")

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        rule = out._backward
        if rule is not None:
            out._backward = lambda g: [None if x is None else factor * x for x in rule(g)]
        return out

    setattr(ad, op, broken)
    try:
        yield
    finally:
        setattr(ad, op, original)
