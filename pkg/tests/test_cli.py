import csv

import pytest

from graphkd.cli import _seed_list, main

FAST = ["--override", "epochs=6", "--override", "patience=3", "--override", "teacher.hidden=16", "--override", "student.hidden=8"]


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small SBM data plus a teacher and two students trained through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "sbm", "--out", str(d / "sbm"), "--blocks", "3", "--nodes-per-block", "30", "--p-in", "0.2", "--p-out", "0.01", "--d-in", "6", "--seed", "1"]) == 0
    data = str(d / "sbm" / "manifest.txt")
    assert main(["train-teacher", "--data", data, *FAST, "--seed", "0", "--out", str(d / "teacher.json"), "--history", str(d / "hist.csv"), "--embeddings", str(d / "t.emb")]) == 0
    for method in ("kd", "gcrd"):
        argv = ["distill", "--data", data, *FAST, "--teacher", str(d / "teacher.json"), "--method", method, "--seed", "0", "--out", str(d / f"{method}.json"), "--embeddings", str(d / f"{method}.emb")]
        assert main(argv) == 0
    return d


def test_seed_ranges():
    assert _seed_list(["0-3", "7"]) == [0, 1, 2, 3, 7]


def test_gen_data_sbm(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "sbm", "--out", str(tmp_path), "--seed", "2")
    assert code == 0
    assert (tmp_path / "manifest.txt").read_text().count("\n") == 1
    assert "nodes (total)" in out and "600" in out and "manifest" in out
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    run(capsys, "gen-data", "sbm", "--out", str(tmp_path), "--seed", "2")
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == first


def test_gen_data_mol_count(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "mol", "--out", str(tmp_path), "--count", "100", "--seed", "0")
    assert code == 0
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(manifest) == 100
    assert len(list(tmp_path.iterdir())) == 101
    assert "graph-level" in out


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "grid", "--out", "x"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["bench", "--seed", "0", "--bogus"])
    assert e.value.code == 2
    code, _, err = run(capsys, "bench")
    assert code == 2 and "--seed" in err


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as e:
        main(["bench", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--ablation", "--config", "--override", "--out"):
        assert flag in out


def test_bench_config_and_grid(capsys):
    code, out, _ = run(capsys, "bench", "--seed", "0-2", "--override", "epochs=400", "--dump-config")
    assert code == 0 and "seeds:\n- 0\n- 1\n- 2\n" in out and "epochs: 400" in out
    code, out, _ = run(capsys, "bench", "--list-grid")
    assert code == 0 and "tau1: [4.0, 5.0]" in out


def test_bench_writes_outputs(tmp_path, capsys):
    argv = ["bench", "--seed", "0", "--override", "methods=[supervised, kd]", "--override", "dataset.sbm.nodes_per_block=20", *FAST, "--out", str(tmp_path)]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert out.startswith("Method")
    for name in ("results.csv", "summary.csv", "summary.png"):
        assert (tmp_path / name).exists()
    first = (tmp_path / "results.csv").read_text()
    run(capsys, *argv)
    assert (tmp_path / "results.csv").read_text() == first


def test_bad_config_value_exits_1(capsys):
    code, _, err = run(capsys, "bench", "--seed", "0", "--override", "split.train=0.9")
    assert code == 1 and "sum to 1" in err


def test_training_outputs(workspace):
    rows = list(csv.DictReader(open(workspace / "hist.csv")))
    assert rows and set(rows[0]) == {"epoch", "train_loss", "train_metric", "valid_loss", "valid_metric"}
    assert (workspace / "kd.json").exists() and (workspace / "gcrd.emb").exists()


def test_analyze_teacher_against_itself(workspace, capsys):
    data = str(workspace / "sbm" / "manifest.txt")
    code, out, _ = run(capsys, "analyze", "--teacher", str(workspace / "teacher.json"), "--students", str(workspace / "teacher.json"), str(workspace / "kd.json"), "--data", data)
    assert code == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert [r["student"] for r in rows] == ["teacher", "kd"]
    for key in ("cka", "mantel_global", "mantel_local"):
        assert float(rows[0][key]) == pytest.approx(1.0, abs=1e-10)
        assert float(rows[1][key]) < 1.0


def test_analyze_zero_students_header_only(workspace, capsys):
    code, out, _ = run(capsys, "analyze", "--teacher", str(workspace / "teacher.json"), "--data", str(workspace / "sbm" / "manifest.txt"))
    assert code == 0 and out == "student,cka,mantel_global,mantel_local\n"


def test_analyze_width_mismatch_names_checkpoint(workspace, tmp_path, capsys):
    main(["gen-data", "sbm", "--out", str(tmp_path), "--blocks", "3", "--nodes-per-block", "10", "--p-in", "0.5", "--p-out", "0.05", "--d-in", "4"])
    capsys.readouterr()
    ckpt = str(workspace / "teacher.json")
    code, _, err = run(capsys, "analyze", "--teacher", ckpt, "--data", str(tmp_path / "manifest.txt"))
    assert code == 1 and ckpt in err


def test_analyze_embedding_files(workspace, tmp_path, capsys):
    from graphkd.graph import load_manifest

    (g,) = load_manifest(workspace / "sbm" / "manifest.txt")
    edges = tmp_path / "edges.txt"
    edges.write_text("".join(f"{a} {b}\n" for a, b in g.edges))
    fig = tmp_path / "sim.png"
    out_csv = tmp_path / "sim.csv"
    code, _, _ = run(capsys, "analyze", "--embeddings", str(workspace / "t.emb"), str(workspace / "t.emb"), str(workspace / "gcrd.emb"), "--edges", str(edges), "--out", str(out_csv), "--figure", str(fig))
    assert code == 0 and fig.stat().st_size > 0
    rows = list(csv.DictReader(open(out_csv)))
    assert [r["student"] for r in rows] == ["t", "gcrd"]
    assert float(rows[0]["mantel_local"]) == pytest.approx(1.0, abs=1e-10)
    code, _, _ = run(capsys, "analyze", "--embeddings", str(workspace / "t.emb"))
    assert code == 2


def test_distill_rejects_unknown_method(workspace, capsys):
    code, _, err = run(capsys, "distill", "--data", str(workspace / "sbm" / "manifest.txt"), *FAST, "--teacher", str(workspace / "teacher.json"), "--method", "magic", "--out", str(workspace / "x.json"))
    assert code == 1 and "magic" in err
