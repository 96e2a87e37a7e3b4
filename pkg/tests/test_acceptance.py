"""Acceptance suite: one PASS/FAIL summary line per criterion.

Run alone with ``pytest tests/test_acceptance.py``; the benchmark criteria
take a few minutes on one CPU core.
"""

import time

import numpy as np
import pytest

import oracles
from graphkd import gradcheck as gc
from graphkd.autodiff import Tensor
from graphkd.bench import ablation_table, build_dataset, config_from_dict, method_table, render_table, run_benchmark, summary_csv
from graphkd.distill import Kernel, ProjectionHead, at_loss, contrastive_similarity, fitnet_loss, gsp_loss, kd_loss, lsp_loss
from graphkd.simrep import EmbeddingSet, cka, mantel_global, mantel_local

KERNELS = ("euclidean", "linear", "polynomial", "rbf")
TABLE_METHODS = ["supervised", "kd", "fitnet", "at", "lsp", "gsp", "gcrd", "kd+gcrd"]


@pytest.fixture(scope="module")
def benchmark():
    """The full desk-scale benchmark with default settings: SBM, 10 seeds, all methods."""
    cfg = config_from_dict({})
    t0 = time.perf_counter()
    res = run_benchmark(cfg)
    return cfg, res, time.perf_counter() - t0


def test_criterion_1_gradient_suite(acceptance):
    required = (
        ["kd", "fitnet", "at"]
        + [f"lsp/{k}" for k in KERNELS]
        + [f"gsp/{m}/{k}" for m in ("mse", "kl") for k in KERNELS]
        + [f"gcrd/{h}/{lv}" for h in ("mlp", "gcn", "identity") for lv in ("node", "node-samplewise", "global")]
        + ["layer/gcn", "layer/gin", "layer/sage", "layer/pool-mean", "layer/pool-sum", "layer/head-mlp", "layer/head-gcn"]
    )
    missing = [n for n in required if n not in gc.REGISTRY]
    has_crd = any(n.startswith("crd/") for n in gc.REGISTRY)
    t0 = time.perf_counter()
    results = gc.run(list(gc.REGISTRY), instances=10, seed=0)
    seconds = time.perf_counter() - t0
    failed = [r.name for r in results if not r.ok]
    worst = max(r.max_rel_error for r in results)
    ok = not missing and has_crd and not failed and seconds < 120 and all(r.instances >= 10 for r in results)
    acceptance(1, ok, f"{len(results)} entries, max rel err {worst:.2e} (< 1e-4), {seconds:.1f}s (< 120s), missing={missing}, failed={failed}")
    assert ok


def test_criterion_2_zero_at_alignment(acceptance):
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n, d = int(r.integers(3, 12)), int(r.integers(1, 6))
        f = r.standard_normal((n, d))
        edges = oracles.random_edges(r, n, 0.4)
        head = ProjectionHead("linear", d, 4, r)
        z = r.standard_normal((n, 5))
        vals = [
            lsp_loss(Tensor(f), Tensor(f), edges, Kernel("rbf", normalize=True)).item() if len(edges) else 0.0,
            gsp_loss(Tensor(f), Tensor(f), Kernel(KERNELS[int(r.integers(4))])).item(),
            fitnet_loss(Tensor(f), Tensor(f), head, head).item(),
            at_loss(Tensor(f), Tensor(f)).item(),
            kd_loss(Tensor(z), Tensor(z), float(r.uniform(0.5, 5))).item(),
        ]
        worst = max(worst, max(abs(v) for v in vals))
    ok = worst <= 1e-12
    acceptance(2, ok, f"max |loss| at alignment {worst:.1e} over 100 instances (<= 1e-12)")
    assert ok


def test_criterion_3_oracle_equivalence(acceptance):
    r = np.random.default_rng(3)
    worst_gsp = 0.0
    for n in (3, 17, 50):
        for kind in KERNELS:
            fs, ft = r.standard_normal((n, 4)) * 0.6, r.standard_normal((n, 6)) * 0.6
            got = gsp_loss(Tensor(fs), Tensor(ft), Kernel(kind)).item()
            worst_gsp = max(worst_gsp, abs(got - oracles.gsp(fs, ft, kind, "mse")))
    worst_lsp = 0.0
    for kind in KERNELS:
        for _ in range(3):
            edges = oracles.random_edges(r, 30, 0.15)
            fs, ft = r.standard_normal((30, 4)) * 0.6, r.standard_normal((30, 6)) * 0.6
            got = lsp_loss(Tensor(fs), Tensor(ft), edges, Kernel(kind)).item()
            worst_lsp = max(worst_lsp, abs(got - oracles.lsp(fs, ft, edges, kind)))
    ok = worst_gsp <= 1e-10 and worst_lsp <= 1e-10
    acceptance(3, ok, f"gsp vs double loop {worst_gsp:.1e}, lsp vs per-node loop {worst_lsp:.1e} (<= 1e-10)")
    assert ok


def test_criterion_4a_identity_retrieval(acceptance):
    r = np.random.default_rng(4)
    bad = 0
    for _ in range(100):
        n, d = int(r.integers(2, 40)), int(r.integers(2, 8))
        f = r.standard_normal((n, d))
        ident = ProjectionHead("identity", d, d)
        s = contrastive_similarity(Tensor(f), Tensor(f), ident, ident)
        bad += int(not np.array_equal(s.argmax(axis=1), np.arange(n)))
    acceptance(4, bad == 0, f"identity heads: diagonal argmax on {100 - bad}/100 instances")
    assert bad == 0


def test_criterion_5_similarity_identities(acceptance):
    r = np.random.default_rng(5)
    f = r.standard_normal((200, 12))
    e = EmbeddingSet.from_array(f)
    q, _ = np.linalg.qr(r.standard_normal((12, 12)))
    edges = oracles.random_edges(r, 200, 0.03)
    devs = [
        abs(cka(e, e) - 1),
        abs(mantel_global(e, e) - 1),
        abs(mantel_local(e, e, edges) - 1),
        abs(cka(e, EmbeddingSet.from_array(f @ q)) - 1),
        abs(cka(e, EmbeddingSet.from_array(4.2 * f)) - 1),
    ]
    ok = max(devs) <= 1e-10
    acceptance(5, ok, f"max deviation from 1: {max(devs):.1e} (<= 1e-10)")
    assert ok


def test_criterion_6_benchmark(benchmark, acceptance):
    cfg, res, seconds = benchmark
    teacher = res.summary("teacher")[0]
    sup = res.summary("supervised")[0]
    combo = res.summary("kd+gcrd")[0]
    rows = method_table(res)
    table = render_table(*ablation_table(res))
    print("\n" + table)
    emitted = [r["method"] for r in rows] == ["teacher"] + TABLE_METHODS and all(r["n"] == 10 and "±" in r["cell"] for r in rows)
    gap_ok = teacher - sup >= 0.02
    combo_ok = combo >= sup
    ok = gap_ok and combo_ok and emitted and seconds < 1800
    acceptance(
        6,
        ok,
        f"teacher {100 * teacher:.2f} vs supervised {100 * sup:.2f} (gap {100 * (teacher - sup):.2f} >= 2), "
        f"kd+gcrd {100 * combo:.2f} >= supervised, table emitted={emitted}, {seconds / 60:.1f} min (< 30)",
    )
    assert gap_ok, "teacher/student gap below 2 points"
    assert combo_ok, "kd+gcrd below supervised student"
    assert emitted and seconds < 1800


def test_criterion_4b_benchmark_retrieval(benchmark, acceptance):
    cfg, res, _ = benchmark
    n_valid = len(build_dataset(cfg).split.valid)
    chance = 1.0 / n_valid
    worst = {}
    for method in ("gcrd", "kd+gcrd"):
        v = res.values(method, "valid", "retrieval@1")
        worst[method] = float(v.min()) if v.size == len(cfg.seeds) else float("nan")
    ok = all(w >= 10 * chance for w in worst.values())
    acceptance(4, ok, "trained heads: worst-seed retrieval@1 " + ", ".join(f"{k} {w:.3f}" for k, w in worst.items()) + f" (>= 10/n = {10 * chance:.3f}, n={n_valid})")
    assert ok


def test_criterion_7_ablation_grids(acceptance):
    mol = {"kind": "mol", "mol": {"count": 120, "min_n": 8, "max_n": 20, "num_classes": 2}}
    small = {"epochs": 12, "patience": 6, "seeds": [0], "teacher": {"hidden": 32, "num_layers": 2}, "teacher_optim": {"lr": 1e-2}}
    g = run_benchmark(config_from_dict({**small, "dataset": mol, "split": {"train": 0.6, "valid": 0.2, "test": 0.2}, "ablation": "gcrd"}))
    s = run_benchmark(config_from_dict({**small, "ablation": "gsp"}))
    gh, gb = ablation_table(g)
    sh, sb = ablation_table(s)
    print("\n" + render_table(gh, gb) + "\n" + render_table(sh, sb))
    levels = {row[0] for row in gb}
    shaped = (
        gh == ["Repr.", "Loss", "Proj.", "roc_auc"]
        and len(gb) == 18
        and levels == {"Nodes", "Nodes (s.w.)", "Global"}
        and sh == ["Kernel", "Metric", "accuracy"]
        and len(sb) == 8
    )
    filled = all(row[-1] != "N.A." for row in gb + sb)
    ok = shaped and filled and not g.errors and not s.errors
    acceptance(7, ok, f"contrast grid {len(gb)} rows, kernel grid {len(sb)} rows, all cells filled={filled}")
    assert summary_csv(g).count("\n") == 19 and summary_csv(s).count("\n") == 9
    assert ok


def test_criterion_8_determinism(benchmark, acceptance):
    cfg, res, _ = benchmark
    again = run_benchmark(cfg)
    same = again.to_csv() == res.to_csv()
    acceptance(8, same, f"repeat of the full benchmark: CSV bit-identical={same} ({len(res.rows)} rows)")
    assert same
