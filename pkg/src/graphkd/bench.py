"""Run configuration, multi-seed teacher/student benchmarks and ablation grids."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .distill import CONTRAST_LEVELS, DistillSpec, Kernel
from .gnn import Model, ModelSpec, load_model
from .graph import SplitSpec, load_manifest, synth_molgraphs, synth_sbm
from .train import Dataset, OptimSpec, distill, evaluate, prepare_dataset, retrieval_accuracy, train_supervised

log = logging.getLogger(__name__)

STANDARD_METHODS = ("supervised", "kd", "fitnet", "at", "lsp", "gsp", "gcrd", "kd+gcrd")

# Mean-reduced losses need their own weights; see README for the grids.
DEFAULT_OVERRIDES = {
    "kd": {"alpha": 0.9, "tau1": 4.0},
    "fitnet": {"beta": 1.0},
    "at": {"beta": 10.0},
    "lsp": {"beta": 100.0},
    "gsp": {"beta": 100.0},
    "crd": {"beta": 0.05, "tau2": 0.075},
    "gcrd": {"beta": 0.05, "tau2": 0.075},
    "kd+gcrd": {"alpha": 0.9, "tau1": 4.0, "beta": 0.05, "tau2": 0.075},
}

GRIDS = {
    "alpha": [0.8, 0.9],
    "tau1": [4.0, 5.0],
    "beta_feature": [1.0, 10.0, 100.0],
    "beta_contrastive": [0.01, 0.05],
    "tau2": [0.05, 0.075, 0.1],
}


@dataclass
class RunConfig:
    dataset: dict = field(
        default_factory=lambda: {
            "kind": "sbm",
            "seed": 0,
            "sbm": {"blocks": 5, "nodes_per_block": 120, "p_in": 0.06, "p_out": 0.005, "d_in": 16, "noise": 1.0},
            "mol": {"count": 400, "min_n": 8, "max_n": 30, "num_classes": 2},
            "manifest": None,
        }
    )
    split: dict = field(default_factory=lambda: {"train": 0.1, "valid": 0.2, "test": 0.7, "seed": 0, "mode": "random"})
    teacher: dict = field(default_factory=lambda: {"arch": "GCN", "num_layers": 3, "hidden": 256, "dropout": 0.5, "checkpoint": None})
    student: dict = field(default_factory=lambda: {"arch": "GCN", "num_layers": 2, "hidden": 16, "dropout": 0.5})
    distill: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(STANDARD_METHODS))
    method_overrides: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_OVERRIDES))
    optim: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-2, "weight_decay": 0.0})
    teacher_optim: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-3, "weight_decay": 0.0})
    epochs: int = 300
    patience: int = 50
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: list(range(10)))
    ablation: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.patience >= self.epochs:
            raise ValueError("patience must be smaller than epochs")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.ablation not in (None, "gcrd", "gsp"):
            raise ValueError(f"unknown ablation {self.ablation!r}; expected gcrd or gsp")
        self.split_spec()
        self.optim_spec()
        self.base_distill()

    def split_spec(self) -> SplitSpec:
        return SplitSpec(**self.split)

    def optim_spec(self) -> OptimSpec:
        return OptimSpec(**self.optim)

    def teacher_optim_spec(self) -> OptimSpec:
        return OptimSpec(**self.teacher_optim)

    def base_distill(self) -> DistillSpec:
        d = _greek_aliases(self.distill)
        if "kernel" in d and isinstance(d["kernel"], dict):
            d["kernel"] = Kernel(**d["kernel"])
        return DistillSpec(**d)

    def to_dict(self) -> dict:
        return asdict(self)


_ALIASES = {"α": "alpha", "β": "beta", "τ₁": "tau1", "τ₂": "tau2"}


def _greek_aliases(d: dict) -> dict:
    return {_ALIASES.get(k, k): v for k, v in d.items()}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def config_from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = _merge(RunConfig().to_dict(), d)
    return RunConfig(**merged)


def apply_override(d: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    out = copy.deepcopy(d)
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value
    return out


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    for ov in overrides or []:
        d = apply_override(d, ov)
    return config_from_dict(d)


# ---------------------------------------------------------------- data and models


def build_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    kind = ds.get("kind", "sbm")
    seed = ds.get("seed", 0)
    if kind == "sbm":
        graphs = [synth_sbm(seed=seed, **ds["sbm"])]
    elif kind == "mol":
        graphs = synth_molgraphs(seed=seed, **ds["mol"])
    elif kind == "manifest":
        if not ds.get("manifest"):
            raise ValueError("dataset.kind=manifest needs dataset.manifest")
        graphs = load_manifest(ds["manifest"])
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return prepare_dataset(graphs, cfg.split_spec())


def model_spec(block: dict, data: Dataset) -> ModelSpec:
    b = {k: v for k, v in block.items() if k != "checkpoint"}
    if data.task == "graph":
        b.setdefault("pool", "mean")
    else:
        b.pop("pool", None)
    return ModelSpec(in_dim=data.in_dim, num_classes=data.num_classes, task=data.task, **b)


# ---------------------------------------------------------------- variants


@dataclass(frozen=True)
class Variant:
    label: str
    dspec: DistillSpec
    axes: tuple = ()


def method_variants(cfg: RunConfig) -> list[Variant]:
    base = cfg.base_distill()
    out = []
    for m in cfg.methods:
        over = _greek_aliases(cfg.method_overrides.get(m, {}))
        if isinstance(over.get("kernel"), dict):
            over["kernel"] = Kernel(**over["kernel"])
        out.append(Variant(m, base.with_(method=m, **over)))
    return out


def gcrd_ablation_variants(cfg: RunConfig) -> list[Variant]:
    """Contrast level x loss form x projection head grid."""
    base = cfg.base_distill()
    out = []
    for loss in ("gcrd", "crd"):
        over = _greek_aliases(cfg.method_overrides.get(loss, DEFAULT_OVERRIDES[loss]))
        for level in CONTRAST_LEVELS:
            for head in ("mlp", "gcn", "linear"):
                spec = base.with_(method=loss, contrast_level=level, head=head, **over)
                out.append(Variant(f"{loss}/{level}/{head}", spec, (level, loss, head)))
    return out


def gsp_ablation_variants(cfg: RunConfig) -> list[Variant]:
    """Kernel x metric grid for GSP."""
    base = cfg.base_distill()
    over = _greek_aliases(cfg.method_overrides.get("gsp", DEFAULT_OVERRIDES["gsp"]))
    out = []
    for kind in ("euclidean", "linear", "polynomial", "rbf"):
        for metric in ("mse", "kl"):
            kernel = Kernel(kind, normalize=True)
            spec = base.with_(method="gsp", kernel=kernel, gsp_metric=metric, **over)
            out.append(Variant(f"gsp/{kind}/{metric}", spec, (kind, metric)))
    return out


def variants_for(cfg: RunConfig) -> list[Variant]:
    if cfg.ablation == "gcrd":
        return gcrd_ablation_variants(cfg)
    if cfg.ablation == "gsp":
        return gsp_ablation_variants(cfg)
    return method_variants(cfg)


# ---------------------------------------------------------------- running


def _row(method: str, seed: int, split: str, metric: str, value: float) -> dict:
    return {"method": method, "seed": seed, "split": split, "metric": metric, "value": value}


def applicable(var: Variant, data: Dataset) -> bool:
    """Graph-level and per-sample contrast are meaningless on a single graph; such cells read N.A."""
    if var.dspec.aux in ("gcrd", "crd") and var.dspec.contrast_level != "node":
        return data.task == "graph" and len(data.graphs) > 1
    return True


def run_seed(cfg: RunConfig, seed: int) -> tuple[list[dict], list[dict]]:
    """All runs for one seed; returns ``(rows, errors)``."""
    t0 = time.perf_counter()
    data = build_dataset(cfg)
    rows: list[dict] = []
    errors: list[dict] = []
    teacher = teacher_for(cfg, data, seed)
    t_eval = evaluate(teacher, data, "test")
    metric = t_eval["metric_name"]
    rows.append(_row("teacher", seed, "test", metric, t_eval["metric"]))
    sspec = model_spec(cfg.student, data)
    frozen = teacher.frozen()
    for var in variants_for(cfg):
        if not applicable(var, data):
            continue
        try:
            student, hist, objective = distill(
                frozen, sspec, var.dspec, data, cfg.optim_spec(), cfg.epochs, cfg.patience, seed, cfg.batch_size,
                return_objective=True,
            )
            rows.append(_row(var.label, seed, "valid", metric, hist.best_valid))
            rows.append(_row(var.label, seed, "test", metric, evaluate(student, data, "test")["metric"]))
            if var.dspec.aux in ("gcrd", "crd") and var.dspec.contrast_level != "global":
                rows.append(_row(var.label, seed, "valid", "retrieval@1", retrieval_accuracy(student, frozen, objective, data)))
        except Exception as exc:  # a failed cell must not sink the table
            log.warning("seed %s, %s failed: %s", seed, var.label, exc)
            errors.append({"method": var.label, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            rows.append(_row(var.label, seed, "test", metric, float("nan")))
    log.info("seed %s done in %.1fs", seed, time.perf_counter() - t0)
    return rows, errors


@dataclass
class BenchResult:
    rows: list[dict]
    errors: list[dict]
    variants: list[Variant]
    metric: str
    ablation: str | None = None

    def values(self, method: str, split: str = "test", metric: str | None = None) -> np.ndarray:
        metric = metric or self.metric
        return np.array([r["value"] for r in self.rows if r["method"] == method and r["split"] == split and r["metric"] == metric])

    def summary(self, method: str, split: str = "test", metric: str | None = None) -> tuple[float, float, int]:
        v = self.values(method, split, metric)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan"), 0
        return float(np.mean(v)), float(np.std(v)), int(v.size)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "split", "metric", "value"])
    for r in rows:
        w.writerow([r["method"], r["seed"], r["split"], r["metric"], repr(float(r["value"]))])
    return buf.getvalue()


def run_benchmark(cfg: RunConfig) -> BenchResult:
    """Teacher, supervised student and one student per configured method, for every seed."""
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        outs = [run_seed(cfg, s) for s in cfg.seeds]
    rows = [r for o in outs for r in o[0]]
    errors = [e for o in outs for e in o[1]]
    metric = next(r["metric"] for r in rows if r["method"] == "teacher")
    return BenchResult(rows, errors, variants_for(cfg), metric, cfg.ablation)


# ---------------------------------------------------------------- tables


def _cell(mean: float, std: float, n: int) -> str:
    if n == 0 or math.isnan(mean):
        return "N.A."
    return f"{100 * mean:.2f} ±{100 * std:.2f}"


def method_table(res: BenchResult) -> list[dict]:
    """Mean ± std test metric per method with ↑/↓ markers against KD."""
    kd_mean = res.summary("kd")[0] if any(v.label == "kd" for v in res.variants) else float("nan")
    out = []
    labels = ["teacher"] + [v.label for v in res.variants]
    for label in labels:
        mean, std, n = res.summary(label)
        marker = ""
        if label not in ("teacher", "kd") and not math.isnan(kd_mean) and n:
            marker = "↑" if mean > kd_mean else ("↓" if mean < kd_mean else "=")
        out.append({"method": label, "mean": mean, "std": std, "n": n, "cell": _cell(mean, std, n), "vs_kd": marker})
    return out


def ablation_table(res: BenchResult) -> tuple[list[str], list[list[str]]]:
    if res.ablation == "gcrd":
        header = ["Repr.", "Loss", "Proj.", res.metric]
        names = {"node": "Nodes", "node-samplewise": "Nodes (s.w.)", "global": "Global"}
        body = [[names[v.axes[0]], v.axes[1].upper().replace("GCRD", "G-CRD"), v.axes[2].upper(), _cell(*res.summary(v.label))] for v in res.variants]
    elif res.ablation == "gsp":
        header = ["Kernel", "Metric", res.metric]
        body = [[v.axes[0].capitalize(), "MSE" if v.axes[1] == "mse" else "KL-div.", _cell(*res.summary(v.label))] for v in res.variants]
    else:
        header = ["Method", f"test {res.metric} (%)", "vs KD"]
        body = [[r["method"], r["cell"], r["vs_kd"]] for r in method_table(res)]
    return header, body


def render_table(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = "  ".join("-" * w for w in widths)
    fmt = lambda row: "  ".join(str(x).ljust(w) for x, w in zip(row, widths))  # noqa: E731
    return "\n".join([fmt(header), line] + [fmt(r) for r in body]) + "\n"


def summary_csv(res: BenchResult) -> str:
    header, body = ablation_table(res)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


def write_outputs(res: BenchResult, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "summary": out / "summary.csv"}
    paths["results"].write_text(res.to_csv())
    paths["summary"].write_text(summary_csv(res))
    if res.errors:
        paths["errors"] = out / "errors.csv"
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["method", "seed", "error"], lineterminator="\n")
        w.writeheader()
        w.writerows(res.errors)
        paths["errors"].write_text(buf.getvalue())
    if figures:
        from .plotting import plot_benchmark

        paths["figure"] = plot_benchmark(res, out / "summary.png")
    return paths


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, allow_unicode=True)


def teacher_for(cfg: RunConfig, data: Dataset, seed: int) -> Model:
    if cfg.teacher.get("checkpoint"):
        return load_model(cfg.teacher["checkpoint"])
    spec = model_spec(cfg.teacher, data)
    model, _ = train_supervised(spec, data, cfg.teacher_optim_spec(), cfg.epochs, cfg.patience, seed, cfg.batch_size)
    return model
