import json

import pytest

from sourcebias.cli import main, read_config
from sourcebias.datamodel import ScoredPair, SourceLabel, dump_jsonl, Dataset


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert main(["synth", "--output", str(out), "--seed", "3", "--queries", "30"]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_synth_writes_files(fixture_dir):
    for name in ("train.jsonl", "test.jsonl", "qrels.txt", "run.trec", "temperature.jsonl"):
        assert (fixture_dir / name).stat().st_size > 0


def test_validate(capsys, fixture_dir, tmp_path):
    code, out, _ = run(capsys, "validate", "--input", fixture_dir / "test.jsonl",
                       "--qrels", fixture_dir / "qrels.txt")
    rep = json.loads(out)
    assert code == 0 and rep["errors"] == 0 and rep["dangling_qrels"] == []
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"query_id":"q","doc_id":"d","source":0,"score":1,"perplexity":-1}\n')
    code, out, _ = run(capsys, "validate", "--input", bad)
    assert code == 2 and json.loads(out)["skipped"] == 1


def test_diagnose_recovers_injected_effect(capsys, fixture_dir, tmp_path):
    code, out, _ = run(capsys, "diagnose", "--input", fixture_dir / "train.jsonl",
                       "--csv", tmp_path / "t1.csv", "--model", "toy", "--dataset", "synth")
    rec = json.loads(out)
    assert code == 0
    assert abs(rec["beta2"] + 0.5) <= 3 * rec["se"]["beta2"]
    assert rec["n"] == 256
    row = (tmp_path / "t1.csv").read_text().splitlines()[1]
    assert row.startswith("toy,synth,")


def test_diagnose_single_source(capsys, tmp_path):
    path = tmp_path / "one.jsonl"
    dump_jsonl(Dataset.from_pairs(
        ScoredPair(f"q{i}", f"d{i}", SourceLabel.HUMAN, 0.1 * i, 2.0 + i) for i in range(5)
    ), path)
    code, _, err = run(capsys, "diagnose", "--input", path)
    assert code == 2 and json.loads(err)["error"] == "weak_instrument"


def test_diagnose_empty_file(capsys, tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    code, _, err = run(capsys, "diagnose", "--input", tmp_path / "e.jsonl")
    assert code == 2 and json.loads(err)["error"] == "insufficient_data"


def test_usage_errors(capsys, fixture_dir):
    assert run(capsys)[0] == 1
    assert run(capsys, "diagnose")[0] == 1
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "diagnose", "--input", "/nonexistent.jsonl")[0] == 1
    assert run(capsys, "evaluate", "--input", fixture_dir / "test.jsonl",
               "--runs", fixture_dir / "run.trec", "--metric-k", "0")[0] == 1
    code, _, err = run(capsys, "correct", "--input", fixture_dir / "test.jsonl",
                       "--runs", fixture_dir / "run.trec")
    assert code == 1 and json.loads(err)["error"] == "usage_error"


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == 0
    assert run(capsys, "evaluate", "--help")[0] == 0


def _pipeline(capsys, fixture_dir, out_dir):
    code, diag, _ = run(capsys, "diagnose", "--input", fixture_dir / "train.jsonl",
                        "--output", out_dir / "diag.json", "--seed", "1")
    assert code == 0
    code, _, _ = run(capsys, "correct", "--input", fixture_dir / "test.jsonl",
                     "--runs", fixture_dir / "run.trec", "--diagnosis", out_dir / "diag.json",
                     "--output", out_dir / "cdc.trec")
    assert code == 0
    code, out, _ = run(capsys, "evaluate", "--input", fixture_dir / "test.jsonl",
                       "--qrels", fixture_dir / "qrels.txt",
                       "--runs", fixture_dir / "run.trec", out_dir / "cdc.trec",
                       "--csv", out_dir / "t2.csv")
    assert code == 0
    return out


def test_pipeline_shrinks_bias_and_is_deterministic(capsys, fixture_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    out_a = _pipeline(capsys, fixture_dir, a)
    out_b = _pipeline(capsys, fixture_dir, b)
    assert out_a == out_b
    for name in ("diag.json", "cdc.trec", "t2.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rep = json.loads(out_a)
    assert abs(rep["cdc"]["bias"]) < abs(rep["raw"]["bias"])
    assert rep["shift"] > 0
    assert rep["p_values"]["queries"] == 30


def test_correct_with_beta_flag_matches_scale(capsys, fixture_dir):
    _, one, _ = run(capsys, "correct", "--input", fixture_dir / "test.jsonl",
                    "--runs", fixture_dir / "run.trec", "--beta2", "-0.25", "--beta2-scale", "2")
    _, two, _ = run(capsys, "correct", "--input", fixture_dir / "test.jsonl",
                    "--runs", fixture_dir / "run.trec", "--beta2", "-0.5")
    assert one == two


def test_config_file_with_flag_override(capsys, fixture_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# manifest\ninput = {fixture_dir / 'train.jsonl'}\nbudget = 16\n")
    code, out, _ = run(capsys, "diagnose", "--config", cfg)
    assert code == 0 and json.loads(out)["n"] == 32
    code, out, _ = run(capsys, "diagnose", "--config", cfg, "--budget", "8")
    assert json.loads(out)["n"] == 16
    (tmp_path / "bad.cfg").write_text("nonsense = 1\n")
    assert run(capsys, "diagnose", "--config", tmp_path / "bad.cfg")[0] == 1
    assert read_config(cfg) == {"input": str(fixture_dir / "train.jsonl"), "budget": "16"}


def _write(path, pairs):
    dump_jsonl(Dataset.from_pairs(pairs), path)
    return path


def test_evaluate_extremes(capsys, tmp_path):
    H, G = SourceLabel.HUMAN, SourceLabel.GENERATED
    data = _write(tmp_path / "d.jsonl", [
        ScoredPair("q", "h", H, 2.0, 3.0, relevance=1),
        ScoredPair("q", "g", G, 1.0, 2.0, relevance=0),
    ])
    (tmp_path / "r.trec").write_text("q Q0 h 1 2.0 raw\nq Q0 g 2 1.0 raw\n")
    code, out, _ = run(capsys, "evaluate", "--input", data, "--runs", tmp_path / "r.trec")
    rep = json.loads(out)
    assert code == 0 and rep["performance"] == 100.0 and rep["bias"] == 200.0
    code, out, _ = run(capsys, "evaluate", "--input", data, "--runs", tmp_path / "r.trec", "--raw")
    assert json.loads(out)["bias"] == 2.0


def test_evaluate_mismatch_lists_ids(capsys, tmp_path):
    data = _write(tmp_path / "d.jsonl", [
        ScoredPair("q", "h", SourceLabel.HUMAN, 2.0, 3.0, relevance=1)
    ])
    (tmp_path / "r.trec").write_text("q Q0 h 1 2.0 raw\nzz Q0 h 1 1.0 raw\n")
    code, _, err = run(capsys, "evaluate", "--input", data, "--runs", tmp_path / "r.trec")
    payload = json.loads(err)
    assert code == 2 and payload["error"] == "run_mismatch" and payload["unmatched"] == ["zz"]


def _temps(path, scores_by_temp):
    pairs = []
    for t, rows in scores_by_temp.items():
        for j, (p, r) in enumerate(rows):
            pairs.append(ScoredPair(f"q{j}", f"d{j}-{t}", SourceLabel.GENERATED, r, p,
                                    temperature=t))
    return _write(path, pairs)


def test_temp_corr_fixture(capsys, fixture_dir):
    code, out, _ = run(capsys, "temp-corr", "--input", fixture_dir / "temperature.jsonl")
    assert code == 0 and json.loads(out)["pearson"] < -0.8


def test_temp_corr_edge_cases(capsys, tmp_path):
    two = _temps(tmp_path / "two.jsonl", {0.2: [(2.0, 1.0)], 1.0: [(3.0, 0.5)]})
    code, out, _ = run(capsys, "temp-corr", "--input", two)
    assert code == 0 and json.loads(out)["pearson"] == -1.0
    flat = _temps(tmp_path / "flat.jsonl",
                  {0.2: [(2.0, 1.0)], 0.6: [(2.5, 1.0)], 1.0: [(3.0, 1.0)]})
    code, _, err = run(capsys, "temp-corr", "--input", flat)
    assert code == 2 and json.loads(err)["error"] == "undefined_correlation"
    one = _temps(tmp_path / "one.jsonl", {0.7: [(2.0, 1.0), (2.1, 0.9)]})
    assert run(capsys, "temp-corr", "--input", one)[0] == 2


def test_theory_check_report(capsys, tmp_path):
    code, out, _ = run(capsys, "theory-check", "--trials", "5", "--seed", "2",
                       "--csv", tmp_path / "rows.csv")
    rep = json.loads(out)
    assert code == 0
    assert set(rep) >= {"trials", "pass_rate", "max_identity_err", "max_fd_err", "kl_bound_ok"}
    assert len((tmp_path / "rows.csv").read_text().splitlines()) == 6
    code, out, _ = run(capsys, "theory-check", "--trials", "3", "--break", "collinearity")
    assert json.loads(out)["expected_failures"] == 3
    assert run(capsys, "theory-check", "--N", "9-9", "--D", "4-8")[0] == 1
