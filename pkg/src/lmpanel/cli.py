"""Command-line front end: fit, select, decode, simulate, freq.

Exit codes: 0 success, 1 usage error, 2 data error, 3 fit failure. Every run
writes run.json with the resolved configuration, library versions, and
sha256 checksums of the artifacts it produced, which is enough to replay the
run bit-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .em import FitOptions, FitResult, fit
from .errors import FitFailureError, LmPanelError, MStepFailureError
from .model import ModelSpec, load_model, save_model
from .panel import (
    IngestConfig,
    category_frequencies,
    load_panel,
    load_schema,
    schema_for_panel,
    write_frequencies_csv,
    write_panel,
    write_schema,
)
from .profiles import (
    average_initial,
    build_profiles,
    prevalence_over_time,
    write_decoded_csv,
    write_prevalence_csv,
    write_profiles_csv,
)
from .selection import select_states, write_report_csv, write_report_json
from .simulate import CovariateGenerator, SimConfig, simulate_panel, write_truth_csv

_USAGE_EXIT = 1
_DATA_EXIT = 2
_FIT_EXIT = 3

_DATA_ERRORS = (LmPanelError, FileNotFoundError, IsADirectoryError, PermissionError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--starts", type=int, default=10, help="number of EM starts")
    p.add_argument("--max-iter", type=int, default=1000, help="EM iteration cap per start")
    p.add_argument("--tol", type=float, default=1e-8, help="relative log-likelihood tolerance")
    p.add_argument("--seed", type=int, default=0, help="base RNG seed")


def _add_ingest_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--allow-missing", action="store_true", help="accept absent responses")
    p.add_argument(
        "--center-cov", action="append", default=[], metavar="NAME",
        help="center this covariate at its sample mean (repeatable)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="lmpanel", description=__doc__)
    parser.add_argument(
        "--threads", type=int, default=None,
        help="worker pool size (default: hardware parallelism)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model and write model.json")
    p.add_argument("--panel", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--k", type=int, required=True)
    p.add_argument(
        "--structure", choices=["logit", "unrestricted"], default="logit",
        help="transition structure (logit is time-homogeneous)",
    )
    p.add_argument("--init-cov", action="append", default=[], metavar="NAME")
    p.add_argument("--trans-cov", action="append", default=[], metavar="NAME")
    p.add_argument("--both-cov", action="append", default=[], metavar="NAME")
    _add_fit_options(p)
    _add_ingest_options(p)

    p = sub.add_parser("select", help="state-count grid; writes selection.csv")
    p.add_argument("--panel", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--k-min", type=int, required=True)
    p.add_argument("--k-max", type=int, required=True)
    _add_fit_options(p)
    _add_ingest_options(p)

    p = sub.add_parser("decode", help="posterior profiles and local decoding")
    p.add_argument("--model", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--allow-missing", action="store_true")

    p = sub.add_parser("simulate", help="draw a synthetic panel from a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--gen", default=None,
        help="JSON file with covariate generators (overrides the model file's)",
    )
    p.add_argument("--out", default=".")

    p = sub.add_parser("freq", help="category frequencies per item and time")
    p.add_argument("--panel", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", default=".")

    return parser


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_json(out_dir: Path, command: str, config: dict, artifacts: list[Path]) -> None:
    doc = {
        "command": command,
        "config": config,
        "versions": {
            "lmpanel": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise _UsageError("--threads must be >= 1")
        return args.threads
    return os.cpu_count() or 1


def _fit_options(args, threads: int) -> FitOptions:
    return FitOptions(
        n_starts=args.starts,
        max_iter=args.max_iter,
        rel_tol=args.tol,
        seed=args.seed,
        n_threads=threads,
    )


def _ingest_config(args) -> IngestConfig:
    return IngestConfig(
        allow_missing=args.allow_missing, center=tuple(args.center_cov)
    )


def _fit_meta(result: FitResult) -> dict:
    return {
        "loglik": result.loglik,
        "g": result.g,
        "aic": result.aic,
        "bic": result.bic,
        "n_iter": result.n_iter,
        "converged": result.converged,
        "start_index": result.start_index,
        "warnings": result.warnings,
        "trace": result.trace,
    }


def _cmd_fit(args, threads: int) -> int:
    out = _out_dir(args)
    schema = load_schema(args.schema)
    panel = load_panel(args.panel, schema, _ingest_config(args))
    init_covs = tuple(args.init_cov) + tuple(args.both_cov)
    trans_covs = tuple(args.trans_cov) + tuple(args.both_cov)
    structure = "unrestricted_time_heterogeneous" if args.structure == "unrestricted" else "logit_time_homogeneous"
    spec = ModelSpec(
        k=args.k,
        transition_structure=structure,
        init_covariates=init_covs,
        trans_covariates=trans_covs,
    )
    options = _fit_options(args, threads)
    log_path = out / "fit_log.jsonl"
    result = fit(spec, schema.items, panel, options, log_path=log_path)
    model_path = out / "model.json"
    save_model(
        model_path, spec, schema, result.params,
        centers=panel.centers, fit_meta=_fit_meta(result),
    )
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    _write_run_json(
        out, "fit",
        {
            "panel": args.panel, "schema": args.schema, "out": str(out),
            "k": args.k, "structure": args.structure,
            "init_cov": list(init_covs), "trans_cov": list(trans_covs),
            "starts": args.starts, "max_iter": args.max_iter, "tol": args.tol,
            "seed": args.seed, "threads": threads,
            "allow_missing": args.allow_missing,
            "center_cov": list(args.center_cov),
            "centers": panel.centers,
        },
        [model_path, log_path],
    )
    print(
        f"fit: k={args.k} loglik={result.loglik:.6f} aic={result.aic:.6f} "
        f"bic={result.bic:.6f} (start {result.start_index}, "
        f"{result.n_iter} iterations, converged={result.converged})"
    )
    return 0


def _cmd_select(args, threads: int) -> int:
    out = _out_dir(args)
    if args.k_min < 1 or args.k_max < args.k_min:
        raise _UsageError("need 1 <= k-min <= k-max")
    schema = load_schema(args.schema)
    panel = load_panel(args.panel, schema, _ingest_config(args))
    options = _fit_options(args, threads)
    report = select_states(schema.items, panel, range(args.k_min, args.k_max + 1), options)
    csv_path = out / "selection.csv"
    json_path = out / "selection.json"
    write_report_csv(report, csv_path)
    write_report_json(report, json_path)
    _write_run_json(
        out, "select",
        {
            "panel": args.panel, "schema": args.schema, "out": str(out),
            "k_min": args.k_min, "k_max": args.k_max,
            "starts": args.starts, "max_iter": args.max_iter, "tol": args.tol,
            "seed": args.seed, "threads": threads,
            "allow_missing": args.allow_missing,
            "center_cov": list(args.center_cov),
        },
        [csv_path, json_path],
    )
    print(f"select: best by BIC = {report.best_by_bic}")
    return 0


def _cmd_decode(args, threads: int) -> int:
    out = _out_dir(args)
    doc = load_model(args.model)
    config = IngestConfig(allow_missing=args.allow_missing, center_offsets=doc.centers)
    panel = load_panel(args.panel, doc.schema, config)
    meta = doc.fit_meta or {}
    result = FitResult(
        params=doc.params,
        spec=doc.spec,
        loglik=meta.get("loglik", math.nan),
        g=meta.get("g", 0),
        aic=meta.get("aic", math.nan),
        bic=meta.get("bic", math.nan),
        n_iter=meta.get("n_iter", 0),
        converged=meta.get("converged", True),
        start_index=meta.get("start_index", -1),
        trace=[],
    )
    profiles = build_profiles(result, doc.spec, panel)
    prevalence = prevalence_over_time(profiles)
    avg_delta = average_initial(result, panel)
    paths = [out / "profiles.csv", out / "decoded.csv", out / "prevalence.csv"]
    write_profiles_csv(profiles, paths[0])
    write_decoded_csv(profiles, paths[1])
    write_prevalence_csv(prevalence, paths[2])
    _write_run_json(
        out, "decode",
        {
            "model": args.model, "panel": args.panel, "out": str(out),
            "allow_missing": args.allow_missing, "threads": threads,
        },
        paths,
    )
    avg = ", ".join(f"{v:.4f}" for v in avg_delta)
    print(f"decode: {len(profiles)} subjects, average initial probabilities ({avg})")
    return 0


def _cmd_simulate(args, threads: int) -> int:
    out = _out_dir(args)
    doc = load_model(args.model)
    if args.gen is not None:
        with open(args.gen, encoding="utf-8") as fh:
            gen_doc = json.load(fh)
        generators = tuple(CovariateGenerator.from_dict(entry) for entry in gen_doc)
    elif doc.covariate_generators is not None:
        generators = tuple(
            CovariateGenerator.from_dict(entry) for entry in doc.covariate_generators
        )
    else:
        generators = ()
    config = SimConfig(
        params=doc.params,
        spec=doc.spec,
        schema=doc.schema.items,
        n_subjects=args.n,
        n_times=args.T,
        generators=generators,
        seed=args.seed,
    )
    panel, truth = simulate_panel(config, n_threads=threads)
    paths = [out / "panel.csv", out / "schema.json", out / "truth.csv"]
    write_panel(panel, paths[0])
    write_schema(schema_for_panel(panel), paths[1])
    write_truth_csv(truth, panel.subject_ids, paths[2])
    _write_run_json(
        out, "simulate",
        {
            "model": args.model, "n": args.n, "T": args.T, "seed": args.seed,
            "gen": args.gen, "out": str(out), "threads": threads,
        },
        paths,
    )
    print(f"simulate: wrote {args.n} subjects x {args.T} times")
    return 0


def _cmd_freq(args, threads: int) -> int:
    out = _out_dir(args)
    schema = load_schema(args.schema)
    panel = load_panel(args.panel, schema, IngestConfig(allow_missing=True))
    freq = category_frequencies(panel)
    path = out / "frequencies.csv"
    write_frequencies_csv(freq, path)
    _write_run_json(
        out, "freq",
        {"panel": args.panel, "schema": args.schema, "out": str(out), "threads": threads},
        [path],
    )
    print(f"freq: wrote {path.name}")
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "select": _cmd_select,
    "decode": _cmd_decode,
    "simulate": _cmd_simulate,
    "freq": _cmd_freq,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _threads(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    try:
        return _COMMANDS[args.command](args, threads)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except (FitFailureError, MStepFailureError) as exc:
        print(f"fit failure: {exc}", file=sys.stderr)
        return _FIT_EXIT
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except json.JSONDecodeError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _DATA_EXIT


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
