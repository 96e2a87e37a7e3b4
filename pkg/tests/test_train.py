import math

import numpy as np
import pytest

from graphkd import train as train_mod
from graphkd.autodiff import Tensor
from graphkd.distill import DistillSpec
from graphkd.gnn import ModelSpec
from graphkd.graph import Graph, SplitSpec, synth_molgraphs, synth_sbm
from graphkd.train import (
    OptimSpec,
    Optimizer,
    TrainingDiverged,
    accuracy,
    distill,
    evaluate,
    prepare_dataset,
    retrieval_accuracy,
    roc_auc,
    train_supervised,
)


@pytest.fixture(scope="module")
def sbm():
    g = synth_sbm(3, 40, 0.2, 0.01, 6, 0.8, seed=3)
    return prepare_dataset([g], SplitSpec(0.3, 0.3, 0.4, seed=0))


@pytest.fixture(scope="module")
def teacher(sbm):
    spec = ModelSpec("GCN", sbm.in_dim, 2, 32, sbm.num_classes)
    model, _ = train_supervised(spec, sbm, OptimSpec(lr=1e-2), epochs=60, patience=20, seed=0)
    return model


def student_spec(data, arch="GCN"):
    return ModelSpec(arch, data.in_dim, 2, 8, data.num_classes)


# ---------------------------------------------------------------- metrics


def test_auc_hand_case():
    assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75)


def test_auc_constant_and_perfect():
    labels = np.array([0, 1] * 10)
    assert roc_auc(np.full(20, 0.3), labels) == pytest.approx(0.5)
    assert roc_auc(labels * 2.0 - 1.0, labels) == 1.0
    with pytest.raises(ValueError, match="both classes"):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_count(rng):
    s = rng.integers(0, 5, size=40).astype(float)
    y = rng.integers(0, 2, size=40)
    pos, neg = s[y == 1], s[y == 0]
    want = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
    assert roc_auc(s, y) == pytest.approx(want, abs=1e-12)


def test_accuracy_perfect():
    assert accuracy(np.eye(3), np.arange(3)) == 1.0


# ---------------------------------------------------------------- optimizers


def naive_adam(x0, grad, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t in range(1, steps + 1):
        g = grad(x)
        for k in range(len(x)):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            mh = m[k] / (1 - b1**t)
            vh = v[k] / (1 - b2**t)
            x[k] -= lr * mh / (math.sqrt(vh) + eps)
    return x


def test_adam_matches_naive_on_quadratic(rng):
    a = rng.uniform(0.5, 3.0, size=5)
    c = rng.standard_normal(5)
    x0 = rng.standard_normal(5)
    grad = lambda x: [2 * a[k] * (x[k] - c[k]) for k in range(5)]  # noqa: E731
    p = Tensor(x0.reshape(1, -1).copy(), requires_grad=True)
    opt = Optimizer([p], OptimSpec("adam", lr=0.05))
    for _ in range(100):
        opt.zero_grad()
        p.grad = np.array([grad(p.data[0])])
        opt.step()
    np.testing.assert_allclose(p.data[0], naive_adam(x0, grad, 100, 0.05), rtol=0, atol=1e-12)


def test_sgd_and_weight_decay():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Optimizer([p], OptimSpec("sgd", lr=0.1, weight_decay=0.5))
    p.grad = np.array([1.0, 1.0])
    opt.step()
    np.testing.assert_allclose(p.data[0], [1.0 - 0.1 * 1.5, -2.0 - 0.1 * 0.0])


def test_optim_spec_validation():
    with pytest.raises(ValueError):
        OptimSpec(lr=0)
    with pytest.raises(ValueError):
        OptimSpec(kind="rmsprop")


# ---------------------------------------------------------------- training


def test_separable_mlp_reaches_full_train_accuracy():
    r = np.random.default_rng(0)
    n = 200
    y = np.repeat([0, 1], n // 2)
    x = r.standard_normal((n, 4))
    x[:, 0] += np.where(y == 1, 3.0, -3.0)
    x[:, 0] = np.where(y == 1, np.abs(x[:, 0]) + 0.1, -np.abs(x[:, 0]) - 0.1)
    data = prepare_dataset([Graph(n=n, edges=np.zeros((0, 2)), x=x, node_labels=y, num_classes=2)], SplitSpec(0.6, 0.2, 0.2))
    model, hist = train_supervised(ModelSpec("MLP", 4, 2, 16, 2), data, OptimSpec(lr=1e-2), epochs=200, patience=200, seed=0)
    assert max(hist.column("train_metric")) >= 0.99
    assert evaluate(model, data, "train")["metric"] >= 0.99


def test_patience_zero_returns_first_epoch(sbm):
    spec = student_spec(sbm)
    model, hist = train_supervised(spec, sbm, OptimSpec(), epochs=50, patience=0, seed=4)
    assert len(hist.epochs) == 1 and hist.best_epoch == 0
    # the returned weights are those after one optimizer step
    again, _ = train_supervised(spec, sbm, OptimSpec(), epochs=1, patience=5, seed=4)
    assert all(np.array_equal(model.state()[k], again.state()[k]) for k in model.params)


def test_determinism(sbm):
    spec = ModelSpec("GCN", sbm.in_dim, 2, 8, sbm.num_classes, dropout=0.3)
    a, ha = train_supervised(spec, sbm, OptimSpec(), epochs=20, patience=20, seed=9)
    b, hb = train_supervised(spec, sbm, OptimSpec(), epochs=20, patience=20, seed=9)
    assert ha.epochs == hb.epochs
    assert all(np.array_equal(a.state()[k], b.state()[k]) for k in a.params)
    c, _ = train_supervised(spec, sbm, OptimSpec(), epochs=20, patience=20, seed=10)
    assert not all(np.array_equal(a.state()[k], c.state()[k]) for k in a.params)


def test_best_checkpoint_matches_history_max(sbm):
    model, hist = train_supervised(student_spec(sbm), sbm, OptimSpec(), epochs=40, patience=10, seed=1)
    valid = hist.column("valid_metric")
    assert hist.best_valid == max(valid)
    assert evaluate(model, sbm, "valid")["metric"] == max(valid)
    assert len(valid) - 1 - hist.best_epoch <= 10


def test_supervised_method_matches_train_supervised(sbm, teacher):
    spec = student_spec(sbm)
    a, ha = train_supervised(spec, sbm, OptimSpec(), epochs=15, patience=15, seed=2)
    b, hb = distill(teacher, spec, DistillSpec("supervised"), sbm, OptimSpec(), epochs=15, patience=15, seed=2)
    assert ha.epochs == hb.epochs
    assert all(np.array_equal(a.state()[k], b.state()[k]) for k in a.params)


@pytest.mark.parametrize("method", ["kd", "fitnet", "lsp", "gsp", "gcrd", "kd+gcrd"])
def test_teacher_is_untouched(sbm, teacher, method):
    before = teacher.state()
    distill(teacher, student_spec(sbm), DistillSpec(method, beta=0.5), sbm, OptimSpec(), epochs=3, patience=3, seed=0)
    assert all(np.array_equal(before[k], v.data) for k, v in teacher.params.items())
    assert all(v.grad is None for v in teacher.params.values())


def test_kd_only_student_beats_chance(sbm, teacher):
    assert evaluate(teacher, sbm, "valid")["metric"] > 1 / 3
    model, hist = distill(teacher, student_spec(sbm), DistillSpec("kd", alpha=1.0, tau1=2.0), sbm, OptimSpec(), epochs=60, patience=30, seed=0)
    assert hist.best_valid > 1 / 3 + 0.2


def test_gcrd_training_improves_retrieval(sbm, teacher):
    spec = ModelSpec("GCN", sbm.in_dim, 2, 16, sbm.num_classes)
    dspec = DistillSpec("gcrd", beta=0.05, tau2=0.075)

    def retrieval(epochs, seed):
        m, _, obj = distill(teacher, spec, dspec, sbm, OptimSpec(), epochs, epochs, seed, return_objective=True)
        return retrieval_accuracy(m, teacher, obj, sbm, "valid")

    untrained = np.mean([retrieval(1, s) for s in range(3)])
    trained = np.mean([retrieval(150, s) for s in range(3)])
    assert trained > 2 * untrained


def test_distill_errors(sbm, teacher):
    with pytest.raises(ValueError, match="same features"):
        distill(teacher, ModelSpec("GCN", sbm.in_dim + 1, 2, 8, 3), DistillSpec("kd"), sbm, OptimSpec(), 2, 1, 0)
    with pytest.raises(ValueError, match="epochs"):
        train_supervised(student_spec(sbm), sbm, OptimSpec(), 0, 0, 0)


def test_divergence_names_epoch(sbm, monkeypatch):
    monkeypatch.setattr(train_mod, "cross_entropy", lambda logits, labels: Tensor(np.array(np.nan)))
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_supervised(student_spec(sbm), sbm, OptimSpec(), 5, 5, 0)


def test_graph_task_uses_auc_and_minibatches():
    graphs = synth_molgraphs(60, 8, 14, 2, seed=0)
    data = prepare_dataset(graphs, SplitSpec(0.6, 0.2, 0.2, seed=1))
    assert data.task == "graph"
    spec = ModelSpec("GIN", data.in_dim, 2, 16, 2, task="graph", pool="sum")
    model, hist = train_supervised(spec, data, OptimSpec(lr=1e-2), epochs=5, patience=5, seed=0, batch_size=16)
    ev = evaluate(model, data, "test")
    assert ev["metric_name"] == "roc_auc" and 0.0 <= ev["metric"] <= 1.0


def test_regression_labels_rejected():
    g = Graph(n=2, edges=[(0, 1), (1, 0)], x=np.ones((2, 1)), graph_label=0.5)
    with pytest.raises(ValueError, match="regression"):
        prepare_dataset([g, g, g], SplitSpec())
