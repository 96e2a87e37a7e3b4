"""Distillation objectives for GNN students.

Logit KD, FitNet, attention transfer, local/global structure preservation
(LSP/GSP), CRD and graph contrastive distillation (G-CRD), together with the
similarity kernels, projection heads and the weighted training objective.

All losses take autodiff tensors and average over nodes (or rows) rather
than summing, so the auxiliary weight does not depend on batch size.
Teacher-side features and logits are detached inside each loss; teacher
projection heads keep their gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gnn import GraphStructure, gcn_layer, glorot

KERNELS = ("euclidean", "linear", "polynomial", "rbf", "cosine")
AUX_METHODS = ("fitnet", "at", "lsp", "gsp", "crd", "gcrd")
HEAD_KINDS = ("identity", "linear", "mlp", "gcn")
CONTRAST_LEVELS = ("node", "node-samplewise", "global")
# large negative logit used to exclude candidates without producing infinities
_MASK = -1e30


@dataclass(frozen=True)
class Kernel:
    kind: str = "rbf"
    c: float = 1.0
    deg: int = 2
    sigma: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if self.sigma <= 0:
            raise ValueError("rbf bandwidth sigma must be positive")
        if int(self.deg) != self.deg or self.deg < 1:
            raise ValueError("polynomial degree must be a positive integer")

    @property
    def normalizes(self) -> bool:
        return self.normalize or self.kind == "cosine"


def _prepare(f: Tensor, kernel: Kernel) -> Tensor:
    return ad.row_l2_normalize(f) if kernel.normalizes else f


def _from_gram_and_sqdist(gram, sqdist, kernel: Kernel, ones) -> Tensor:
    kind = kernel.kind
    if kind in ("linear", "cosine"):
        return gram()
    if kind == "polynomial":
        return ad.power(ad.add(gram(), Tensor(np.full(ones, kernel.c))), kernel.deg)
    d = sqdist()
    if kind == "euclidean":
        return d
    return ad.exp(ad.mul_scalar(d, -1.0 / (2.0 * kernel.sigma)))


def kernel_pairwise(f: Tensor, kernel: Kernel) -> Tensor:
    """All pairwise kernel values ``K(f_i, f_j)`` as an ``n x n`` tensor."""
    f = _prepare(f, kernel)
    n = f.shape[0]
    gram_cache = []

    def gram():
        if not gram_cache:
            gram_cache.append(ad.matmul(f, ad.transpose(f)))
        return gram_cache[0]

    def sqdist():
        sq = ad.row_sum(ad.elementwise_mul(f, f))
        ones_row = Tensor(np.ones((1, n)))
        outer = ad.add(ad.matmul(sq, ones_row), ad.matmul(ad.transpose(ones_row), ad.transpose(sq)))
        return ad.sub(outer, ad.mul_scalar(gram(), 2.0))

    return _from_gram_and_sqdist(gram, sqdist, kernel, (n, n))


def kernel_edges(f: Tensor, src: np.ndarray, dst: np.ndarray, kernel: Kernel) -> Tensor:
    """Kernel value for every listed pair, as an ``(E, 1)`` column."""
    f = _prepare(f, kernel)
    a, b = ad.gather_rows(f, src), ad.gather_rows(f, dst)

    def gram():
        return ad.row_sum(ad.elementwise_mul(a, b))

    def sqdist():
        diff = ad.sub(a, b)
        return ad.row_sum(ad.elementwise_mul(diff, diff))

    return _from_gram_and_sqdist(gram, sqdist, kernel, (len(src), 1))


# ---------------------------------------------------------------- projection heads


class ProjectionHead:
    """Map features into the shared space used by FitNet/CRD/G-CRD.

    ``linear`` is a bare affine map; ``mlp`` adds batch norm and relu; ``gcn``
    swaps the affine map for one graph convolution, which keeps the parameter
    count identical to ``mlp``.
    """

    def __init__(self, kind: str, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown projection head {kind!r}; expected one of {HEAD_KINDS}")
        self.kind = kind
        self.in_dim = in_dim
        self.out_dim = in_dim if kind == "identity" else out_dim
        self.params: dict[str, Tensor] = {}
        self.bn: ad.BatchNormState | None = None
        if kind == "identity":
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = Tensor(glorot(rng, in_dim, out_dim), requires_grad=True)
        self.params["b"] = Tensor(np.zeros((1, out_dim)), requires_grad=True)
        if kind in ("mlp", "gcn"):
            self.params["gamma"] = Tensor(np.ones((1, out_dim)), requires_grad=True)
            self.params["beta"] = Tensor(np.zeros((1, out_dim)), requires_grad=True)
            self.bn = ad.BatchNormState(out_dim)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, f: Tensor, structure: GraphStructure | None = None, training: bool = True) -> Tensor:
        return project(self, f, structure, training)


def project(head: ProjectionHead, f: Tensor, structure: GraphStructure | None = None, training: bool = True) -> Tensor:
    if head.kind == "identity":
        return f
    p = head.params
    if head.kind == "gcn":
        s = structure if structure is not None else GraphStructure.empty(f.shape[0])
        h = ad.add(gcn_layer(f, s, p["W"]), p["b"])
    else:
        h = ad.add(ad.matmul(f, p["W"]), p["b"])
    if head.kind == "linear":
        return h
    h = ad.batch_norm_rows(h, p["gamma"], p["beta"], eps=1e-5, state=head.bn, training=training)
    return ad.relu(h)


# ---------------------------------------------------------------- logit KD


def kd_loss(z_s: Tensor, z_t: Tensor, tau1: float) -> Tensor:
    """Mean over rows of ``KL(softmax(z_t / tau1) || softmax(z_s / tau1))``."""
    if tau1 <= 0:
        raise ValueError("KD temperature must be positive")
    if z_s.shape != z_t.shape:
        raise ad.ShapeError(f"kd_loss: logit shapes differ {z_s.shape} vs {z_t.shape}")
    log_pt = ad.row_log_softmax(ad.mul_scalar(z_t.detach(), 1.0 / tau1))
    log_ps = ad.row_log_softmax(ad.mul_scalar(z_s, 1.0 / tau1))
    pt = Tensor(np.exp(log_pt.data))
    kl = ad.row_sum(ad.elementwise_mul(pt, ad.sub(log_pt, log_ps)))
    return ad.reduce_mean(kl)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return ad.mul_scalar(ad.reduce_mean(ad.take(ad.row_log_softmax(logits), labels)), -1.0)


# ---------------------------------------------------------------- feature mimicking


def fitnet_loss(
    f_s: Tensor,
    f_t: Tensor,
    head_s: ProjectionHead,
    head_t: ProjectionHead,
    structure: GraphStructure | None = None,
    training: bool = True,
) -> Tensor:
    """Mean squared distance between l2-normalized projections of each node."""
    u = ad.row_l2_normalize(head_s(f_s, structure, training))
    v = ad.row_l2_normalize(head_t(f_t.detach(), structure, training))
    diff = ad.sub(u, v)
    return ad.mul_scalar(ad.reduce_sum(ad.elementwise_mul(diff, diff)), 1.0 / f_s.shape[0])


def attention_map(f: Tensor) -> Tensor:
    """Squared row norms, l2-normalized over the node axis, as a ``(1, n)`` row."""
    return ad.row_l2_normalize(ad.transpose(ad.row_sum(ad.elementwise_mul(f, f))))


def at_loss(f_s: Tensor, f_t: Tensor) -> Tensor:
    if f_s.shape[0] != f_t.shape[0]:
        raise ad.ShapeError("at_loss: node counts differ")
    diff = ad.sub(attention_map(f_s), attention_map(f_t.detach()))
    return ad.reduce_sum(ad.elementwise_mul(diff, diff))


# ---------------------------------------------------------------- structure preservation


def _segment_log_softmax(v: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, seg, v.data[:, 0])
    shifted = ad.sub(v, Tensor(seg_max[seg].reshape(-1, 1)))
    denom = ad.scatter_sum(ad.exp(shifted), seg, num_segments)
    return ad.sub(shifted, ad.log(ad.gather_rows(denom, seg)))


def _kl_rows(log_p: Tensor, log_q: Tensor) -> Tensor:
    """Entrywise ``p * (log p - log q)``; summing gives KL(p || q)."""
    return ad.elementwise_mul(ad.exp(log_p), ad.sub(log_p, log_q))


def lsp_loss(
    f_s: Tensor,
    f_t: Tensor,
    edges: np.ndarray,
    kernel: Kernel,
    reverse: bool = False,
) -> Tensor:
    """Match per-node softmax distributions of kernel values over out-edges.

    The divergence is ``KL(student || teacher)``; ``reverse=True`` swaps the
    arguments.  Averaged over nodes with at least two out-neighbors, since a
    one-element softmax is identically 1.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = f_s.shape[0]
    if len(edges) == 0:
        warnings.warn("lsp_loss: empty edge set, returning 0", RuntimeWarning, stacklevel=2)
        return Tensor([[0.0]])
    src, dst = edges[:, 0], edges[:, 1]
    out_deg = np.bincount(src, minlength=n)
    eligible = int(np.sum(out_deg >= 2))
    if eligible == 0:
        return ad.mul_scalar(ad.reduce_sum(kernel_edges(f_s, src, dst, kernel)), 0.0)
    log_ps = _segment_log_softmax(kernel_edges(f_s, src, dst, kernel), src, n)
    log_pt = _segment_log_softmax(kernel_edges(f_t.detach(), src, dst, kernel), src, n)
    terms = _kl_rows(log_pt, log_ps) if reverse else _kl_rows(log_ps, log_pt)
    return ad.mul_scalar(ad.reduce_sum(terms), 1.0 / eligible)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gsp_loss(
    f_s: Tensor,
    f_t: Tensor,
    kernel: Kernel,
    metric: str = "mse",
    cap: int = 512,
    seed=0,
    reverse: bool = False,
) -> Tensor:
    """Match the full pairwise kernel matrices of student and teacher.

    Graphs larger than ``cap`` nodes are reduced to a uniform random subset.
    ``mse`` averages squared entry differences; ``kl`` row-softmaxes both
    matrices and averages the row KL divergences (student first unless
    ``reverse``).
    """
    if cap < 2:
        raise ValueError("gsp cap must be at least 2")
    if metric not in ("mse", "kl"):
        raise ValueError(f"unknown gsp metric {metric!r}")
    n = f_s.shape[0]
    f_t = f_t.detach()
    if n > cap:
        idx = np.sort(_rng(seed).choice(n, size=cap, replace=False))
        f_s, f_t = ad.gather_rows(f_s, idx), ad.gather_rows(f_t, idx)
        n = cap
    k_s, k_t = kernel_pairwise(f_s, kernel), kernel_pairwise(f_t, kernel)
    if metric == "mse":
        return ad.mse(k_s, k_t)
    log_ps, log_pt = ad.row_log_softmax(k_s), ad.row_log_softmax(k_t)
    terms = _kl_rows(log_pt, log_ps) if reverse else _kl_rows(log_ps, log_pt)
    return ad.mul_scalar(ad.reduce_sum(terms), 1.0 / n)


# ---------------------------------------------------------------- contrastive


@dataclass
class ContrastGroups:
    """Mini-batch membership used to restrict or pool contrastive candidates."""

    node_to_graph: np.ndarray
    num_graphs: int


def _contrast_views(
    f_s: Tensor,
    f_t: Tensor,
    head_s: ProjectionHead,
    head_t: ProjectionHead,
    structure: GraphStructure | None,
    level: str,
    groups: ContrastGroups | None,
    training: bool,
):
    if level not in CONTRAST_LEVELS:
        raise ValueError(f"unknown contrast level {level!r}")
    f_t = f_t.detach()
    mask = None
    if level == "global":
        if groups is None:
            raise ValueError("global contrast needs graph membership")
        f_s = ad.segment_mean(f_s, groups.node_to_graph, groups.num_graphs)
        f_t = ad.segment_mean(f_t, groups.node_to_graph, groups.num_graphs)
        structure = GraphStructure.empty(groups.num_graphs)
    elif level == "node-samplewise":
        if groups is None:
            raise ValueError("node-samplewise contrast needs graph membership")
        g = np.asarray(groups.node_to_graph)
        mask = g[:, None] == g[None, :]
    n = f_s.shape[0]
    if n < 2:
        raise ValueError(f"contrastive loss needs at least 2 items to contrast, got {n}")
    u = ad.row_l2_normalize(head_s(f_s, structure, training))
    v = ad.row_l2_normalize(head_t(f_t, structure, training))
    return ad.matmul(u, ad.transpose(v)), mask


def contrastive_similarity(
    f_s: Tensor,
    f_t: Tensor,
    head_s: ProjectionHead,
    head_t: ProjectionHead,
    structure: GraphStructure | None = None,
    training: bool = False,
) -> np.ndarray:
    """Cosine similarity matrix between projected student and teacher rows."""
    sim, _ = _contrast_views(f_s, f_t, head_s, head_t, structure, "node", None, training)
    return sim.data


def gcrd_loss(
    f_s: Tensor,
    f_t: Tensor,
    head_s: ProjectionHead,
    head_t: ProjectionHead,
    tau2: float,
    structure: GraphStructure | None = None,
    contrast_level: str = "node",
    groups: ContrastGroups | None = None,
    training: bool = True,
) -> Tensor:
    """InfoNCE over in-batch teacher rows: student row ``i`` must pick teacher row ``i``."""
    if tau2 <= 0:
        raise ValueError("contrastive temperature must be positive")
    sim, mask = _contrast_views(f_s, f_t, head_s, head_t, structure, contrast_level, groups, training)
    logits = ad.mul_scalar(sim, 1.0 / tau2)
    if mask is not None:
        logits = ad.add(logits, Tensor(np.where(mask, 0.0, _MASK)))
    n = logits.shape[0]
    return ad.mul_scalar(ad.reduce_mean(ad.take(ad.row_log_softmax(logits), np.arange(n))), -1.0)


def crd_loss(
    f_s: Tensor,
    f_t: Tensor,
    head_s: ProjectionHead,
    head_t: ProjectionHead,
    tau2: float,
    structure: GraphStructure | None = None,
    contrast_level: str = "node",
    groups: ContrastGroups | None = None,
    training: bool = True,
) -> Tensor:
    """Binary critic loss with ``h = sigmoid(cos / tau2)`` and in-batch negatives.

    Each row scores ``log h(i, i)`` plus the average of ``log(1 - h(i, j))``
    over its negatives.
    """
    if tau2 <= 0:
        raise ValueError("contrastive temperature must be positive")
    sim, mask = _contrast_views(f_s, f_t, head_s, head_t, structure, contrast_level, groups, training)
    n = sim.shape[0]
    scaled = ad.mul_scalar(sim, 1.0 / tau2)
    pos = ad.take(ad.log_sigmoid(scaled), np.arange(n))
    neg_mask = ~np.eye(n, dtype=bool) if mask is None else mask & ~np.eye(n, dtype=bool)
    counts = neg_mask.sum(axis=1)
    weights = np.where(neg_mask, 1.0 / np.maximum(counts, 1)[:, None], 0.0)
    neg = ad.row_sum(ad.elementwise_mul(ad.log_sigmoid(ad.mul_scalar(scaled, -1.0)), Tensor(weights)))
    return ad.mul_scalar(ad.reduce_mean(ad.add(pos, neg)), -1.0)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class DistillSpec:
    method: str = "supervised"
    alpha: float = 0.0
    beta: float = 0.0
    tau1: float = 4.0
    tau2: float = 0.075
    kernel: Kernel = field(default_factory=lambda: Kernel("rbf", sigma=1.0, normalize=True))
    gsp_metric: str = "mse"
    gsp_cap: int = 512
    head: str | None = None
    proj_dim: int | None = None
    contrast_level: str = "node"
    lsp_kl_reverse: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            object.__setattr__(self, "kernel", Kernel(**self.kernel))
        parts = self.method.split("+")
        if self.method == "supervised":
            pass
        elif not parts or any(p not in ("kd",) + AUX_METHODS for p in parts) or len(set(parts)) != len(parts):
            raise ValueError(f"unknown distillation method {self.method!r}")
        elif sum(p in AUX_METHODS for p in parts) > 1:
            raise ValueError(f"at most one auxiliary loss per method, got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("temperatures must be positive")
        if self.gsp_metric not in ("mse", "kl"):
            raise ValueError(f"unknown gsp_metric {self.gsp_metric!r}")
        if self.gsp_cap < 2:
            raise ValueError("gsp_cap must be at least 2")
        if self.head is not None and self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.contrast_level not in CONTRAST_LEVELS:
            raise ValueError(f"unknown contrast_level {self.contrast_level!r}")

    @property
    def uses_kd(self) -> bool:
        return "kd" in self.method.split("+")

    @property
    def aux(self) -> str | None:
        for p in self.method.split("+"):
            if p in AUX_METHODS:
                return p
        return None

    @property
    def head_kind(self) -> str:
        if self.head is not None:
            return self.head
        return {"fitnet": "linear", "crd": "linear", "gcrd": "gcn"}.get(self.aux or "", "identity")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> DistillSpec:
        return replace(self, **changes)


def combined_loss(spec: DistillSpec, sup, kd=0.0, aux=0.0):
    """``(1 - alpha) * sup + alpha * tau1^2 * kd + beta * aux``.

    The KD term (and with it ``alpha``) only applies when the method includes
    ``kd``; the auxiliary term only when it names an auxiliary loss.
    """
    alpha = spec.alpha if spec.uses_kd else 0.0
    beta = spec.beta if spec.aux is not None else 0.0
    if not isinstance(sup, Tensor):
        out = (1.0 - alpha) * sup
        if alpha:
            out += alpha * spec.tau1**2 * kd
        if beta:
            out += beta * aux
        return out
    total = ad.mul_scalar(sup, 1.0 - alpha) if alpha else sup
    if alpha:
        total = ad.add(total, ad.mul_scalar(kd, alpha * spec.tau1**2))
    if beta:
        total = ad.add(total, ad.mul_scalar(aux, beta))
    return total


class DistillObjective:
    """Projection heads plus the auxiliary loss selected by a :class:`DistillSpec`."""

    def __init__(self, spec: DistillSpec, student_dim: int, teacher_dim: int, seed: int = 0):
        self.spec = spec
        aux = spec.aux
        self.head_s: ProjectionHead | None = None
        self.head_t: ProjectionHead | None = None
        if aux in ("fitnet", "crd", "gcrd"):
            kind = spec.head_kind
            if kind == "identity" and student_dim != teacher_dim:
                raise ValueError("identity heads need equal student and teacher widths")
            d = spec.proj_dim or student_dim
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
            self.head_s = ProjectionHead(kind, student_dim, d, rng)
            self.head_t = ProjectionHead(kind, teacher_dim, d, rng)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for h in (self.head_s, self.head_t):
            if h is not None:
                out.extend(h.parameters())
        return out

    def state(self) -> list[np.ndarray]:
        out = [p.data.copy() for p in self.parameters()]
        for h in (self.head_s, self.head_t):
            if h is not None and h.bn is not None:
                out += [h.bn.mean.copy(), h.bn.var.copy()]
        return out

    def load_state(self, state: list[np.ndarray]) -> None:
        it = iter(state)
        for p in self.parameters():
            p.data = next(it).copy()
        for h in (self.head_s, self.head_t):
            if h is not None and h.bn is not None:
                h.bn.mean, h.bn.var = next(it).copy(), next(it).copy()

    def aux_loss(
        self,
        f_s: Tensor,
        f_t: Tensor,
        structure: GraphStructure,
        edges: np.ndarray,
        groups: ContrastGroups,
        rng: np.random.Generator,
        training: bool = True,
    ) -> Tensor:
        sp = self.spec
        aux = sp.aux
        if aux == "fitnet":
            return fitnet_loss(f_s, f_t, self.head_s, self.head_t, structure, training)
        if aux == "at":
            return at_loss(f_s, f_t)
        if aux == "lsp":
            return lsp_loss(f_s, f_t, edges, sp.kernel, reverse=sp.lsp_kl_reverse)
        if aux == "gsp":
            return gsp_loss(f_s, f_t, sp.kernel, sp.gsp_metric, sp.gsp_cap, rng, reverse=sp.lsp_kl_reverse)
        if aux == "crd":
            return crd_loss(f_s, f_t, self.head_s, self.head_t, sp.tau2, structure, sp.contrast_level, groups, training)
        if aux == "gcrd":
            return gcrd_loss(f_s, f_t, self.head_s, self.head_t, sp.tau2, structure, sp.contrast_level, groups, training)
        raise ValueError(f"method {sp.method!r} has no auxiliary loss")
