"""Optimizers, supervised and distillation training loops, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .distill import ContrastGroups, DistillObjective, DistillSpec, combined_loss, cross_entropy, kd_loss
from .gnn import Model, ModelSpec, forward, structure_of
from .graph import Batch, Graph, Split, SplitSpec, make_batch, split_indices

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- optimizers


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "adam"
    lr: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


class Optimizer:
    def __init__(self, params: Sequence[Tensor], spec: OptimSpec):
        self.params = list(params)
        self.spec = spec
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sp = self.spec
        self.t += 1
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + sp.weight_decay * p.data if sp.weight_decay else p.grad
            if sp.kind == "sgd":
                p.data = p.data - sp.lr * g
                continue
            self.m[k] = sp.beta1 * self.m[k] + (1 - sp.beta1) * g
            self.v[k] = sp.beta2 * self.v[k] + (1 - sp.beta2) * g * g
            m_hat = self.m[k] / (1 - sp.beta1**self.t)
            v_hat = self.v[k] / (1 - sp.beta2**self.t)
            p.data = p.data - sp.lr * m_hat / (np.sqrt(v_hat) + sp.eps)


# ---------------------------------------------------------------- data


@dataclass(eq=False)
class Dataset:
    """Graphs plus a train/valid/test split.

    Node tasks split the nodes of the merged batch; graph tasks split the
    graphs themselves.
    """

    graphs: list[Graph]
    split: Split
    task: str
    num_classes: int
    in_dim: int
    full: Batch = field(repr=False)
    _split_batches: dict = field(default_factory=dict, repr=False)

    def batch_of(self, idx) -> Batch:
        return make_batch([self.graphs[i] for i in idx])

    def split_batch(self, name: str) -> Batch:
        if name not in self._split_batches:
            self._split_batches[name] = self.batch_of(self.split[name])
        return self._split_batches[name]

    def labels(self, batch: Batch) -> np.ndarray:
        return batch.node_labels if self.task == "node" else batch.graph_labels.astype(np.int64)


def prepare_dataset(graphs: Sequence[Graph], split: SplitSpec) -> Dataset:
    graphs = list(graphs)
    full = make_batch(graphs)
    task = full.label_kind
    if task == "node":
        key = np.bincount(full.edges[:, 1], minlength=full.num_nodes) if len(full.edges) else np.zeros(full.num_nodes)
        parts = split_indices(full.num_nodes, split, key)
        labels = full.node_labels
    else:
        if any(not float(g.graph_label).is_integer() for g in graphs):
            raise ValueError("graph-level regression labels are not supported for training")
        parts = split_indices(len(graphs), split, np.array([g.n for g in graphs]))
        labels = full.graph_labels.astype(np.int64)
    num_classes = max(full.num_classes, int(labels.max()) + 1)
    return Dataset(graphs, parts, task, num_classes, full.x.shape[1], full)


# ---------------------------------------------------------------- metrics


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve from the rank-sum statistic; ties get average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def metric_name(data: Dataset) -> str:
    return "roc_auc" if data.task == "graph" and data.num_classes == 2 else "accuracy"


def score(data: Dataset, logits: np.ndarray, labels: np.ndarray) -> float:
    if metric_name(data) == "roc_auc":
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return roc_auc(p[:, 1], labels)
    return accuracy(logits, labels)


def _split_view(data: Dataset, split: str) -> tuple[Batch, np.ndarray | None]:
    """Batch to run and, for node tasks, the node rows to score."""
    if data.task == "node":
        return data.full, data.split[split]
    return data.split_batch(split), None


def evaluate(model: Model, data: Dataset, split: str = "test", logits: np.ndarray | None = None) -> dict:
    """Task metric and cross-entropy on one split.

    For node tasks ``logits`` may carry a precomputed full-graph forward.
    """
    batch, rows = _split_view(data, split)
    if logits is None or rows is None:
        _, z = forward(model, batch, train_mode=False)
        logits = z.data
    labels = data.labels(batch)
    if rows is not None:
        logits, labels = logits[rows], labels[rows]
    loss = float(cross_entropy(Tensor(logits), labels).item())
    return {"metric": score(data, logits, labels), "metric_name": metric_name(data), "loss": loss}


# ---------------------------------------------------------------- training loops


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_valid(self) -> float:
        return self.epochs[self.best_epoch]["valid_metric"]

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


@dataclass
class _Streams:
    shuffle: np.random.Generator
    init_seed: int
    dropout: np.random.Generator
    subsample: np.random.Generator
    heads_seed: int


def _streams(seed: int) -> _Streams:
    shuffle, init, drop, sub, heads = np.random.SeedSequence(seed).spawn(5)
    return _Streams(
        shuffle=np.random.default_rng(shuffle),
        init_seed=int(init.generate_state(1)[0]),
        dropout=np.random.default_rng(drop),
        subsample=np.random.default_rng(sub),
        heads_seed=int(heads.generate_state(1)[0]),
    )


class _TeacherCache:
    """Frozen-teacher outputs; node tasks reuse one full-graph forward."""

    def __init__(self, teacher: Model):
        self.teacher = teacher
        self._full = None

    def __call__(self, batch: Batch, full: bool):
        if full:
            if self._full is None:
                self._full = forward(self.teacher, batch, train_mode=False)
            return self._full
        return forward(self.teacher, batch, train_mode=False)


def _fit(
    student_spec: ModelSpec,
    data: Dataset,
    optim: OptimSpec,
    epochs: int,
    patience: int,
    seed: int,
    batch_size: int = 32,
    teacher: Model | None = None,
    dspec: DistillSpec | None = None,
):
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if patience < 0:
        raise ValueError("patience must be >= 0")
    st = _streams(seed)
    student = Model(replace(student_spec, seed=st.init_seed))
    dspec = dspec or DistillSpec()
    objective = None
    teacher_out = None
    if dspec.method != "supervised":
        if teacher is None:
            raise ValueError(f"method {dspec.method!r} needs a teacher")
        if teacher.spec.task != student_spec.task:
            raise ValueError("teacher and student must solve the same task")
        teacher_out = _TeacherCache(teacher.frozen())
        objective = DistillObjective(dspec, student_spec.hidden, teacher.spec.hidden, st.heads_seed)
    params = student.parameters() + (objective.parameters() if objective else [])
    opt = Optimizer(params, optim)
    history = History()
    best_state = None
    best_heads = None
    for epoch in range(epochs):
        if data.task == "node":
            batches = [(data.full, data.split.train, True)]
        else:
            order = st.shuffle.permutation(data.split.train)
            batches = [(data.batch_of(order[k : k + batch_size]), None, False) for k in range(0, len(order), batch_size)]
        losses = []
        for batch, rows, full in batches:
            opt.zero_grad()
            feats, logits = forward(student, batch, train_mode=True, rng=st.dropout)
            labels = data.labels(batch)
            sup_logits = logits if rows is None else ad.gather_rows(logits, rows)
            sup = cross_entropy(sup_logits, labels if rows is None else labels[rows])
            kd = aux = None
            if objective is not None:
                t_feats, t_logits = teacher_out(batch, full)
                if dspec.uses_kd:
                    kd = kd_loss(logits, t_logits, dspec.tau1)
                if dspec.aux is not None:
                    groups = ContrastGroups(batch.node_to_graph, batch.num_graphs)
                    aux = objective.aux_loss(feats, t_feats, structure_of(batch), batch.edges, groups, st.subsample)
            loss = combined_loss(dspec, sup, kd, aux)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            losses.append(value)
        full_logits = forward(student, data.full)[1].data if data.task == "node" else None
        train_eval = evaluate(student, data, "train", full_logits)
        valid_eval = evaluate(student, data, "valid", full_logits)
        history.epochs.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "train_metric": train_eval["metric"],
                "valid_loss": valid_eval["loss"],
                "valid_metric": valid_eval["metric"],
            }
        )
        if history.best_epoch < 0 or valid_eval["metric"] > history.best_valid:
            history.best_epoch = epoch
            best_state = student.state()
            if objective is not None:
                best_heads = objective.state()
        if epoch - history.best_epoch >= patience:
            break
    opt.zero_grad()
    student.load_state(best_state)
    if objective is not None:
        objective.load_state(best_heads)
    return student, history, objective


def train_supervised(
    spec: ModelSpec,
    data: Dataset,
    optim: OptimSpec,
    epochs: int,
    patience: int,
    seed: int,
    batch_size: int = 32,
) -> tuple[Model, History]:
    """Cross-entropy training with early stopping on the validation metric."""
    model, history, _ = _fit(spec, data, optim, epochs, patience, seed, batch_size)
    return model, history


def distill(
    teacher: Model,
    student_spec: ModelSpec,
    dspec: DistillSpec,
    data: Dataset,
    optim: OptimSpec,
    epochs: int,
    patience: int,
    seed: int,
    batch_size: int = 32,
    return_objective: bool = False,
):
    """Train a student against a frozen teacher with the weighted distillation objective.

    The teacher's own parameters are never touched; projection heads on both
    sides are optimized together with the student.
    """
    if teacher.spec.in_dim != student_spec.in_dim:
        raise ValueError("teacher and student must consume the same features")
    model, history, objective = _fit(student_spec, data, optim, epochs, patience, seed, batch_size, teacher, dspec)
    if return_objective:
        return model, history, objective
    return model, history


def retrieval_accuracy(
    student: Model,
    teacher: Model,
    objective: DistillObjective,
    data: Dataset,
    split: str = "valid",
) -> float:
    """Fraction of nodes whose most similar projected teacher row is their own.

    Heads run in evaluation mode on the full batch; candidates are the nodes
    of the split.
    """
    batch, rows = _split_view(data, split)
    f_s, _ = forward(student, batch)
    f_t, _ = forward(teacher, batch)
    s = structure_of(batch)
    u = ad.row_l2_normalize(objective.head_s(f_s, s, training=False)).data
    v = ad.row_l2_normalize(objective.head_t(f_t, s, training=False)).data
    if rows is not None:
        u, v = u[rows], v[rows]
    sim = u @ v.T
    return float(np.mean(np.argmax(sim, axis=1) == np.arange(len(sim))))
