"""Command-line front end: ``sourcebias <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or estimation error. Errors are
written to stderr as one JSON object. Reports go to stdout or ``--output``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import synth
from .causal import diagnose, table1_csv
from .cdc import CdcConfig, format_trec_run, read_qrels, read_trec_run, run_cdc, write_qrels
from .datamodel import build_estimation_set, dump_jsonl, ingest_jsonl, validate_jsonl
from .errors import (
    InsufficientDataError,
    RunMismatchError,
    SourceBiasError,
    WeakInstrumentWarning,
)
from .metrics import TABLE2_COLUMNS, compare_results, evaluate_runs, pearson
from .theorylab import CONDITIONS, verify_theorem1

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "budget": 128,
    "top_k_correct": 10,
    "metric_k": 3,
    "beta2_scale": 1.0,
    "raw": False,
    "iv_se": False,
    "tag": "cdc",
    "trials": 100,
    "L": "2-8",
    "D": "4-32",
    "N": "2-8",
    "queries": 50,
    "train_pairs": 200,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one invocation (config file, then flags, then defaults)."""

    command: str
    input: Path | None = None
    qrels: Path | None = None
    runs: tuple[Path, ...] = ()
    output: Path | None = None
    csv: Path | None = None
    seed: int | None = None
    cdc: CdcConfig = CdcConfig()
    k: int = 3
    raw: bool = False
    options: dict[str, Any] = field(default_factory=dict)


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _convert(action: argparse.Action, text: str):
    if action.nargs in ("+", "*"):
        return [action.type(t) if action.type else t for t in text.split()]
    if action.const is True:
        return _parse_bool(text)
    return action.type(text) if action.type else text


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags take precedence")
    p.add_argument("--output", type=Path)
    p.add_argument("--seed", type=int)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="sourcebias", description="Diagnose and correct source bias.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        subs[name] = p
        return p

    flag = dict(action="store_const", const=True)

    p = add("validate", "check a JSONL dataset and report counts")
    p.add_argument("--input", type=Path)
    p.add_argument("--qrels", type=Path)

    p = add("diagnose", "estimate the perplexity effect with 2SLS")
    p.add_argument("--input", type=Path, help="paired training JSONL")
    p.add_argument("--budget", type=int)
    p.add_argument("--iv-se", dest="iv_se", **flag)
    p.add_argument("--csv", type=Path)
    p.add_argument("--model")
    p.add_argument("--dataset")

    p = add("correct", "recalibrate a TREC run")
    p.add_argument("--input", type=Path, help="JSONL with test-document perplexities")
    p.add_argument("--runs", type=Path, nargs="+")
    p.add_argument("--train", type=Path, help="paired training JSONL for diagnosis")
    p.add_argument("--diagnosis", type=Path, help="JSON written by diagnose")
    p.add_argument("--beta2", type=float)
    p.add_argument("--beta2-scale", dest="beta2_scale", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--top-k-correct", dest="top_k_correct", type=int)
    p.add_argument("--tag")

    p = add("evaluate", "NDCG@k and Relative Delta for one or two runs")
    p.add_argument("--input", type=Path, help="JSONL with source labels (and qrels)")
    p.add_argument("--qrels", type=Path)
    p.add_argument("--runs", type=Path, nargs="+")
    p.add_argument("--metric-k", dest="metric_k", type=int)
    p.add_argument("--raw", **flag)
    p.add_argument("--csv", type=Path)
    p.add_argument("--model")
    p.add_argument("--dataset")

    p = add("temp-corr", "correlate per-temperature mean perplexity and score")
    p.add_argument("--input", type=Path)
    p.add_argument("--csv", type=Path)

    p = add("theory-check", "verify the gradient identity on random lab instances")
    p.add_argument("--trials", type=int)
    p.add_argument("--L", dest="L")
    p.add_argument("--D", dest="D")
    p.add_argument("--N", dest="N")
    p.add_argument("--break", dest="break_condition", choices=CONDITIONS)
    p.add_argument("--csv", type=Path)

    p = add("synth", "write a synthetic fixture directory")
    p.add_argument("--queries", type=int)
    p.add_argument("--train-pairs", dest="train_pairs", type=int)
    return parser, subs


def resolve(argv: list[str]) -> RunConfig:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: " + ", ".join(subs))
    actions = {a.dest: a for a in subs[args.command]._actions}
    if args.config:
        for key, text in read_config(args.config).items():
            if key not in actions or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if getattr(args, key) is None:
                setattr(args, key, _convert(actions[key], text))
    values = {}
    for dest in actions:
        if dest in ("help", "config"):
            continue
        v = getattr(args, dest, None)
        values[dest] = DEFAULTS.get(dest) if v is None else v
    return _to_config(args.command, values)


def _to_config(command: str, v: dict[str, Any]) -> RunConfig:
    def pick(key):
        return v[key] if v.get(key) is not None else DEFAULTS[key]

    try:
        cdc = CdcConfig(
            budget=pick("budget"),
            top_k_correct=pick("top_k_correct"),
            beta2_override=v.get("beta2"),
            beta2_scale=pick("beta2_scale"),
            seed=v.get("seed"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    k = pick("metric_k")
    if k < 1:
        raise UsageError(f"--metric-k must be >= 1, got {k}")
    known = {"input", "qrels", "runs", "output", "csv", "seed", "metric_k", "raw",
             "budget", "top_k_correct", "beta2", "beta2_scale"}
    cfg = RunConfig(
        command=command,
        input=v.get("input"),
        qrels=v.get("qrels"),
        runs=tuple(v.get("runs") or ()),
        output=v.get("output"),
        csv=v.get("csv"),
        seed=v.get("seed"),
        cdc=cdc,
        k=k,
        raw=bool(v.get("raw")),
        options={key: val for key, val in v.items() if key not in known},
    )
    for path in (cfg.input, cfg.qrels, *cfg.runs, cfg.options.get("train"),
                 cfg.options.get("diagnosis")):
        if path is not None and not Path(path).exists():
            raise UsageError(f"no such file: {path}")
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        fields = RunConfig.__dataclass_fields__
        value = getattr(cfg, name) if name in fields else cfg.options.get(name)
        if not value:
            raise UsageError(f"--{name.replace('_', '-')} is required for {cfg.command}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(cfg: RunConfig, text: str) -> None:
    if cfg.output is not None:
        Path(cfg.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_validate(cfg: RunConfig) -> int:
    _require(cfg, "input")
    report = validate_jsonl(cfg.input)
    if report["errors"] == 0 and cfg.qrels is not None:
        ds = ingest_jsonl(cfg.input)
        keys = {p.key for p in ds.pairs}
        dangling = sorted(
            [q, d] for q, docs in read_qrels(cfg.qrels).items() for d in docs if (q, d) not in keys
        )
        report["dangling_qrels"] = dangling
    _emit(cfg, _dumps(report))
    return EXIT_OK if report["errors"] == 0 else EXIT_DATA


def cmd_diagnose(cfg: RunConfig) -> int:
    _require(cfg, "input")
    ds = ingest_jsonl(cfg.input)
    samples = build_estimation_set(ds, cfg.cdc.budget, seed=cfg.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakInstrumentWarning)
        est = diagnose(samples, iv_se=bool(cfg.options.get("iv_se")))
    model = cfg.options.get("model") or ""
    dataset = cfg.options.get("dataset") or ""
    record = est.to_record()
    record.update(
        cell=est.table_cell(), available=samples.available, skipped=samples.skipped,
        model=model, dataset=dataset,
    )
    _emit(cfg, _dumps(record))
    if cfg.csv is not None:
        Path(cfg.csv).write_text(table1_csv([(model, dataset, est)]), encoding="utf-8")
    return EXIT_OK


def cmd_correct(cfg: RunConfig) -> int:
    _require(cfg, "input", "runs")
    if len(cfg.runs) != 1:
        raise UsageError("correct takes exactly one run file")
    opts = cfg.options
    sources = [cfg.cdc.beta2_override is not None, bool(opts.get("diagnosis")),
               bool(opts.get("train"))]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --beta2, --diagnosis, --train")
    ds = ingest_jsonl(cfg.input)
    runs = read_trec_run(cfg.runs[0])
    run_cfg, train = cfg.cdc, None
    if opts.get("diagnosis"):
        beta2 = json.loads(Path(opts["diagnosis"]).read_text(encoding="utf-8"))["beta2"]
        run_cfg = replace(cfg.cdc, beta2_override=float(beta2))
    elif opts.get("train"):
        train = ingest_jsonl(opts["train"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakInstrumentWarning)
        corrected, _ = run_cdc(train, runs, ds.perplexities(), run_cfg)
    _emit(cfg, format_trec_run(corrected, opts.get("tag") or DEFAULTS["tag"]))
    return EXIT_OK


def _check_match(runs, qrels, path) -> None:
    missing = sorted(r.query_id for r in runs if r.query_id not in qrels)
    if missing:
        raise RunMismatchError(
            f"{len(missing)} run queries have no qrels in {path}", unmatched=missing
        )


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "input", "runs")
    if len(cfg.runs) > 2:
        raise UsageError("evaluate takes one run or a raw/corrected pair")
    ds = ingest_jsonl(cfg.input)
    qrels = read_qrels(cfg.qrels) if cfg.qrels is not None else ds.qrels_by_query()
    sources = ds.sources()
    all_runs = [sorted(read_trec_run(p), key=lambda r: r.query_id) for p in cfg.runs]
    for runs in all_runs:
        _check_match(runs, qrels, cfg.qrels or cfg.input)
    if len(all_runs) == 2:
        a = {r.query_id for r in all_runs[0]}
        b = {r.query_id for r in all_runs[1]}
        if a != b:
            raise RunMismatchError("run files cover different queries",
                                   unmatched=sorted(a.symmetric_difference(b)))
    results = [evaluate_runs(r, qrels, sources, cfg.k) for r in all_runs]
    scale = 1.0 if cfg.raw else 100.0
    labels = {"model": cfg.options.get("model") or "", "dataset": cfg.options.get("dataset") or ""}
    row = {**labels, "ndcg_raw": results[0].performance * scale,
           "bias_raw": results[0].bias.relative_delta * scale / 100.0,
           "ndcg_cdc": "", "bias_cdc": ""}
    if len(results) == 1:
        report = {**labels, **results[0].to_dict(scale)}
    else:
        raw, cdc = results
        row.update(ndcg_cdc=cdc.performance * scale,
                   bias_cdc=cdc.bias.relative_delta * scale / 100.0)
        report = {
            **labels,
            "k": cfg.k,
            "raw": raw.to_dict(scale),
            "cdc": cdc.to_dict(scale),
            "shift": row["bias_cdc"] - row["bias_raw"],
            "p_values": compare_results(raw, cdc),
        }
    report["scale"] = scale
    _emit(cfg, _dumps(report))
    if cfg.csv is not None:
        Path(cfg.csv).write_text(_csv([row], TABLE2_COLUMNS), encoding="utf-8")
    return EXIT_OK


def temperature_table(ds) -> list[dict]:
    """Per-temperature counts and mean perplexity/score, sorted by temperature."""
    groups: dict[float, list] = defaultdict(list)
    for p in ds.pairs:
        if p.temperature is not None:
            groups[p.temperature].append(p)
    return [
        {
            "temperature": t,
            "n": len(groups[t]),
            "mean_perplexity": float(np.mean([p.perplexity for p in groups[t]])),
            "mean_score": float(np.mean([p.score for p in groups[t]])),
        }
        for t in sorted(groups)
    ]


def cmd_temp_corr(cfg: RunConfig) -> int:
    _require(cfg, "input")
    rows = temperature_table(ingest_jsonl(cfg.input))
    if len(rows) < 2:
        raise InsufficientDataError(
            f"need at least 2 distinct temperatures, found {len(rows)}", temperatures=len(rows)
        )
    r = pearson([x["mean_perplexity"] for x in rows], [x["mean_score"] for x in rows])
    _emit(cfg, _dumps({"temperatures": rows, "pearson": r}))
    if cfg.csv is not None:
        Path(cfg.csv).write_text(
            _csv(rows, ("temperature", "n", "mean_perplexity", "mean_score")), encoding="utf-8"
        )
    return EXIT_OK


def _range(text: str, name: str) -> tuple[int, int]:
    try:
        lo, _, hi = str(text).partition("-")
        lo_i = int(lo)
        hi_i = int(hi) if hi else lo_i
    except ValueError:
        raise UsageError(f"--{name} expects lo-hi, got {text!r}") from None
    if lo_i > hi_i or lo_i < 1:
        raise UsageError(f"--{name} range {text!r} is empty or non-positive")
    return lo_i, hi_i


def cmd_theory_check(cfg: RunConfig) -> int:
    o = cfg.options
    dims = (_range(o["L"], "L"), _range(o["D"], "D"), _range(o["N"], "N"))
    if dims[2][0] > dims[1][1]:
        raise UsageError("N must not exceed D")
    trials = o["trials"]
    if trials < 0:
        raise UsageError("--trials must be >= 0")
    report = verify_theorem1(trials, dims, cfg.seed or 0, break_with=o.get("break_condition"))
    _emit(cfg, _dumps(report.to_dict()))
    if cfg.csv is not None:
        Path(cfg.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "output")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed or 0
    corpus = synth.mixed_corpus(cfg.options["queries"], seed, n_train=cfg.options["train_pairs"])
    files = {
        "train": out / "train.jsonl",
        "test": out / "test.jsonl",
        "qrels": out / "qrels.txt",
        "run": out / "run.trec",
        "temperature": out / "temperature.jsonl",
    }
    dump_jsonl(corpus.train, files["train"])
    dump_jsonl(corpus.test, files["test"])
    write_qrels(corpus.qrels, files["qrels"])
    files["run"].write_text(format_trec_run(corpus.runs, "raw"), encoding="utf-8")
    dump_jsonl(synth.temperature_corpus(seed=seed), files["temperature"])
    sys.stdout.write(_dumps({"seed": seed, "files": {k: str(v) for k, v in files.items()}}))
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "validate": cmd_validate,
    "diagnose": cmd_diagnose,
    "correct": cmd_correct,
    "evaluate": cmd_evaluate,
    "temp-corr": cmd_temp_corr,
    "theory-check": cmd_theory_check,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = resolve(argv)
        return COMMANDS[cfg.command](cfg)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage_error", "message": str(exc)}) + "\n")
        return EXIT_USAGE
    except SourceBiasError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
        return EXIT_DATA
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io_error", "message": str(exc)}) + "\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
