"""Command-line entry point: ``graphkd <subcommand> ...``.

Exit codes: 0 on success, 1 when a computation or input file fails, 2 for
command-line usage errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("graphkd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _seed_list(tokens: list[str]) -> list[int]:
    """Accept ``0 1 2`` as well as inclusive ranges such as ``0-9``."""
    seeds = []
    for tok in tokens:
        if "-" in tok.lstrip("-"):
            lo, hi = tok.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(tok))
    return seeds


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--data", metavar="MANIFEST", help="dataset manifest (replaces the configured generator)")
    p.add_argument("--split", nargs=3, type=float, metavar=("TRAIN", "VALID", "TEST"), help="split fractions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphkd", description="Knowledge distillation for GNNs: data, training, benchmarks and analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{gen-data,train-teacher,distill,bench,analyze,gradcheck}")

    g = sub.add_parser("gen-data", help="write a synthetic dataset (graph files + manifest)")
    g.add_argument("kind", choices=("sbm", "mol"))
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blocks", type=int, default=5)
    g.add_argument("--nodes-per-block", type=int, default=120)
    g.add_argument("--p-in", type=float, default=0.06)
    g.add_argument("--p-out", type=float, default=0.005)
    g.add_argument("--d-in", type=int, default=16)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--count", type=int, default=400)
    g.add_argument("--min-n", type=int, default=8)
    g.add_argument("--max-n", type=int, default=30)
    g.add_argument("--classes", type=int, default=2)

    t = sub.add_parser("train-teacher", help="train the configured teacher and save a checkpoint")
    _add_run_flags(t)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path (JSON)")
    t.add_argument("--history", help="write per-epoch history CSV here")
    t.add_argument("--embeddings", help="export validation-node penultimate embeddings here")

    d = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    _add_run_flags(d)
    d.add_argument("--teacher", required=True, help="teacher checkpoint")
    d.add_argument("--method", required=True, help="supervised, kd, fitnet, at, lsp, gsp, crd, gcrd or kd+<aux>")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True, help="student checkpoint path (JSON)")
    d.add_argument("--history", help="write per-epoch history CSV here")
    d.add_argument("--embeddings", help="export validation-node penultimate embeddings here")

    b = sub.add_parser("bench", help="multi-seed teacher/student benchmark or ablation grid")
    _add_run_flags(b)
    b.add_argument("--seed", nargs="+", metavar="SEED", help="run seeds, e.g. '0 1 2' or '0-9' (required)")
    b.add_argument("--ablation", choices=("gcrd", "gsp"), help="run an ablation grid instead of the method table")
    b.add_argument("--workers", type=int, help="parallel seed workers")
    b.add_argument("--out", help="directory for results.csv, summary.csv and summary.png")
    b.add_argument("--no-figures", action="store_true", help="skip the PNG figure")
    b.add_argument("--list-grid", action="store_true", help="print the documented tuning grid and exit")
    b.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")

    a = sub.add_parser("analyze", help="CKA and Mantel similarity of students to a teacher")
    a.add_argument("--teacher", help="teacher checkpoint")
    a.add_argument("--students", nargs="*", default=[], help="student checkpoints")
    a.add_argument("--data", help="dataset manifest for checkpoint mode")
    a.add_argument("--split", nargs=3, type=float, default=(0.1, 0.2, 0.7), metavar=("TRAIN", "VALID", "TEST"))
    a.add_argument("--seed", type=int, default=0, help="split seed")
    a.add_argument("--nodes", choices=("valid", "all"), default="valid", help="which nodes to compare")
    a.add_argument("--embeddings", nargs="*", default=None, metavar="FILE", help="embedding files: reference first, then others")
    a.add_argument("--edges", help="edge list for the local Mantel test (embedding mode)")
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.add_argument("--figure", help="also write a bar chart here")

    c = sub.add_parser("gradcheck", help="finite-difference check of every registered op, layer and loss")
    which = c.add_mutually_exclusive_group(required=True)
    which.add_argument("--all", action="store_true")
    which.add_argument("--loss", help="a loss family (kd, fitnet, at, lsp, gsp, crd, gcrd, ...) or an exact entry")
    which.add_argument("--list", action="store_true", help="list registered entries")
    c.add_argument("--seed", type=int, help="instance seed (required)")
    c.add_argument("--instances", type=int, default=10)
    c.add_argument("--sabotage", metavar="OP", help="negative control: corrupt the backward rule of an autodiff op")
    return parser


# ---------------------------------------------------------------- helpers


def _run_config(args, extra: list[str] | None = None):
    from .bench import load_config

    overrides = list(args.override)
    if args.data:
        overrides += ["dataset.kind=manifest", f"dataset.manifest={Path(args.data).resolve()}"]
    if args.split:
        tr, va, te = args.split
        overrides += [f"split.train={tr}", f"split.valid={va}", f"split.test={te}"]
    return load_config(args.config, overrides + (extra or []))


def _write_history(history, path) -> None:
    keys = list(history.epochs[0]) if history.epochs else ["epoch"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, keys, lineterminator="\n")
    w.writeheader()
    for row in history.epochs:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    Path(path).write_text(buf.getvalue())


def _analysis_nodes(data, which: str):
    """Batch and node subset the similarity metrics are computed on."""
    if data.task == "node":
        nodes = data.split.valid if which == "valid" else None
        return data.full, nodes
    return (data.split_batch("valid") if which == "valid" else data.full), None


def _export_embeddings(model, data, path, source: str) -> None:
    from .simrep import model_embeddings, save_embeddings

    batch, nodes = _analysis_nodes(data, "valid")
    save_embeddings(model_embeddings(model, batch, nodes, source), path)


def _report_stats(graphs) -> str:
    n = np.array([g.n for g in graphs])
    e = np.array([g.num_edges for g in graphs]) / 2.0
    kind = graphs[0].label_kind
    rows = [
        ("graphs", f"{len(graphs)}"),
        ("task", f"{kind}-level, {graphs[0].num_classes} classes"),
        ("nodes (total)", f"{int(n.sum())}"),
        ("nodes / graph", f"{n.mean():.1f}"),
        ("undirected edges / graph", f"{e.mean():.1f}"),
        ("mean degree", f"{2 * e.sum() / n.sum():.2f}"),
        ("feature dim", f"{graphs[0].dim}"),
    ]
    if kind == "node":
        counts = np.bincount(np.concatenate([g.node_labels for g in graphs]), minlength=graphs[0].num_classes)
    else:
        counts = np.bincount([int(g.graph_label) for g in graphs], minlength=graphs[0].num_classes)
    rows.append(("label counts", " ".join(str(int(c)) for c in counts)))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    from .graph import synth_molgraphs, synth_sbm, write_dataset

    if args.kind == "sbm":
        graphs = [synth_sbm(args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.d_in, args.noise, args.seed)]
    else:
        graphs = synth_molgraphs(args.count, args.min_n, args.max_n, args.classes, args.seed)
    manifest = write_dataset(graphs, args.out)
    sys.stdout.write(_report_stats(graphs))
    sys.stdout.write(f"manifest  {manifest}\n")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .bench import build_dataset, model_spec
    from .gnn import count_params, save_model
    from .train import evaluate, train_supervised

    cfg = _run_config(args)
    data = build_dataset(cfg)
    spec = model_spec(cfg.teacher, data)
    model, hist = train_supervised(spec, data, cfg.teacher_optim_spec(), cfg.epochs, cfg.patience, args.seed, cfg.batch_size)
    save_model(model, args.out)
    if args.history:
        _write_history(hist, args.history)
    if args.embeddings:
        _export_embeddings(model, data, args.embeddings, "teacher")
    res = evaluate(model, data, "test")
    print(f"teacher {spec.arch} {spec.num_layers}L x {spec.hidden} ({count_params(model)} params)")
    print(f"best epoch {hist.best_epoch}  valid {res['metric_name']} {hist.best_valid:.4f}  test {res['metric_name']} {res['metric']:.4f}")
    print(f"checkpoint {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    from .bench import build_dataset, method_variants, model_spec
    from .gnn import count_params, load_model, save_model
    from .train import distill, evaluate

    cfg = _run_config(args, [f"methods=[{args.method}]"])
    data = build_dataset(cfg)
    teacher = load_model(args.teacher)
    if teacher.spec.in_dim != data.in_dim:
        raise ValueError(f"{args.teacher}: checkpoint expects {teacher.spec.in_dim} input features, data has {data.in_dim}")
    (variant,) = method_variants(cfg)
    sspec = model_spec(cfg.student, data)
    student, hist = distill(teacher.frozen(), sspec, variant.dspec, data, cfg.optim_spec(), cfg.epochs, cfg.patience, args.seed, cfg.batch_size)
    save_model(student, args.out)
    if args.history:
        _write_history(hist, args.history)
    if args.embeddings:
        _export_embeddings(student, data, args.embeddings, args.method)
    res = evaluate(student, data, "test")
    print(f"student {sspec.arch} {sspec.num_layers}L x {sspec.hidden} ({count_params(student)} params), method {args.method}")
    print(f"best epoch {hist.best_epoch}  valid {res['metric_name']} {hist.best_valid:.4f}  test {res['metric_name']} {res['metric']:.4f}")
    print(f"checkpoint {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import GRIDS, ablation_table, dump_config, render_table, run_benchmark, write_outputs

    if args.list_grid:
        for k, v in GRIDS.items():
            print(f"{k}: {v}")
        return EXIT_OK
    if not args.seed:
        raise UsageError("bench requires --seed (one or more seeds, e.g. --seed 0-9)")
    try:
        seeds = _seed_list(args.seed)
    except ValueError:
        raise UsageError(f"bad --seed value {args.seed!r}") from None
    extra = [f"seeds={seeds}"]
    if args.ablation:
        extra.append(f"ablation={args.ablation}")
    if args.workers:
        extra.append(f"workers={args.workers}")
    cfg = _run_config(args, extra)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    res = run_benchmark(cfg)
    sys.stdout.write(render_table(*ablation_table(res)))
    if args.out:
        paths = write_outputs(res, args.out, figures=not args.no_figures)
        for name, p in paths.items():
            print(f"{name} {p}")
    else:
        sys.stdout.write(res.to_csv())
    for e in res.errors:
        print(f"failed cell: {e['method']} seed {e['seed']}: {e['error']}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .simrep import REPORT_COLUMNS, compare, edges_by_id, load_edge_list, load_embeddings, rows_to_csv, similarity_report

    if args.embeddings is not None:
        if args.teacher or args.students:
            raise UsageError("use either --embeddings or --teacher/--students, not both")
        if not args.embeddings:
            raise UsageError("--embeddings needs at least the reference file")
        if not args.edges:
            raise UsageError("--embeddings mode needs --edges for the local Mantel test")
        ref = load_embeddings(args.embeddings[0], "reference")
        others = [load_embeddings(p, Path(p).stem) for p in args.embeddings[1:]]
        edges = edges_by_id(load_edge_list(args.edges), ref.node_ids)
        rows = compare(ref, others, edges) if others else []
    else:
        if not args.teacher or not args.data:
            raise UsageError("analyze needs --teacher and --data (or --embeddings and --edges)")
        from .gnn import load_model
        from .graph import SplitSpec, load_manifest
        from .train import prepare_dataset

        tr, va, te = args.split
        data = prepare_dataset(load_manifest(args.data), SplitSpec(tr, va, te, seed=args.seed))
        models = []
        for path in [args.teacher, *args.students]:
            m = load_model(path)
            if m.spec.in_dim != data.in_dim:
                raise ValueError(f"{path}: checkpoint expects {m.spec.in_dim} input features, data has {data.in_dim}")
            if m.spec.task != data.task:
                raise ValueError(f"{path}: {m.spec.task}-task checkpoint, data is {data.task}-labelled")
            models.append(m)
        batch, nodes = _analysis_nodes(data, args.nodes)
        names = [Path(p).stem for p in args.students]
        rows = similarity_report(models[0], models[1:], batch, nodes, names) if names else []
    text = rows_to_csv(rows, REPORT_COLUMNS)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.figure and rows:
        from .plotting import plot_similarity

        plot_similarity(rows, args.figure)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    if args.list:
        for name in gc.REGISTRY:
            print(name)
        return EXIT_OK
    if args.seed is None:
        raise UsageError("gradcheck requires --seed")
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    try:
        names = gc.select(None if args.all else args.loss)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    ctx = gc.sabotaged(args.sabotage) if args.sabotage else contextlib.nullcontext()
    with ctx:
        results = gc.run(names, args.instances, args.seed)
    if args.loss and len(results) > 1:
        results = [gc.merge(args.loss, results)]
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    if args.all:
        print(f"{len(results) - len(failed)}/{len(results)} passed (tolerance {gc.TOLERANCE:g}, eps {gc.EPS:g})")
    sys.stdout.flush()
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"graphkd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, ArithmeticError) as exc:
        print(f"graphkd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
