"""Information criteria and the two-step model-selection procedure.

Step one scans a grid of state counts with the unrestricted model and picks k
by minimum BIC. Step two runs a greedy forward search over candidate covariate
effects starting from the intercept-only logit model, accepting a candidate
only while it reduces BIC.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .em import FitOptions, fit
from .errors import FitFailureError, MStepFailureError
from .model import ModelSpec, TransitionStructure, count_free_params
from .panel import ItemSchema, LongitudinalPanel

TARGETS = ("initial", "transition", "both")


@dataclass(frozen=True)
class SelectionRow:
    label: str
    k: int
    g: int
    loglik: float
    aic: float
    bic: float
    status: str = "ok"  # "ok" | "failed"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SelectionReport:
    """Fitted rows of a selection grid or forward sweep."""

    rows: list[SelectionRow]
    n_subjects: int

    def _best(self, key) -> str:
        ok_rows = [r for r in self.rows if r.ok]
        if not ok_rows:
            raise FitFailureError("no selection row fitted successfully")
        return min(ok_rows, key=key).label

    @property
    def best_by_bic(self) -> str:
        return self._best(lambda r: (r.bic, r.g, r.k, r.label))

    @property
    def best_by_aic(self) -> str:
        return self._best(lambda r: (r.aic, r.g, r.k, r.label))

    def row(self, label: str) -> SelectionRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def information_criteria(loglik: float, g: int, n: int) -> tuple[float, float]:
    """AIC = -2 loglik + 2 g and BIC = -2 loglik + log(n) g (natural log)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if g < 0:
        raise ValueError("g must be >= 0")
    aic = -2.0 * loglik + 2.0 * g
    bic = -2.0 * loglik + math.log(n) * g
    return aic, bic


def _fit_row(
    label: str,
    spec: ModelSpec,
    schema: ItemSchema,
    panel: LongitudinalPanel,
    options: FitOptions,
) -> SelectionRow:
    g = count_free_params(spec, schema, panel.n_times)
    try:
        result = fit(spec, schema, panel, options)
    except (FitFailureError, MStepFailureError) as exc:
        return SelectionRow(
            label=label, k=spec.k, g=g, loglik=math.nan, aic=math.nan,
            bic=math.nan, status="failed", message=str(exc),
        )
    return SelectionRow(
        label=label, k=spec.k, g=result.g, loglik=result.loglik,
        aic=result.aic, bic=result.bic,
    )


def _fit_rows(jobs, schema, panel, options) -> list[SelectionRow]:
    # Grid rows run in parallel; each row's fit stays single-threaded.
    row_options = replace(options, n_threads=1)
    if options.n_threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=options.n_threads) as pool:
            return list(
                pool.map(
                    lambda job: _fit_row(job[0], job[1], schema, panel, row_options),
                    jobs,
                )
            )
    return [_fit_row(label, spec, schema, panel, row_options) for label, spec in jobs]


def select_states(
    schema: ItemSchema,
    panel: LongitudinalPanel,
    k_range: Iterable[int],
    options: FitOptions | None = None,
) -> SelectionReport:
    """Fit the unrestricted model over a grid of state counts.

    Failed rows are recorded with status "failed" and skipped when picking the
    best model; when AIC and BIC disagree, BIC governs.
    """
    options = options or FitOptions()
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range must be non-empty")
    jobs = [
        (f"unrestricted-k{k}", ModelSpec(k=k, transition_structure=TransitionStructure.UNRESTRICTED))
        for k in ks
    ]
    rows = _fit_rows(jobs, schema, panel, options)
    return SelectionReport(rows=rows, n_subjects=panel.n_subjects)


def _augmented_spec(base: ModelSpec, covariate: str, target: str) -> ModelSpec:
    init = base.init_covariates
    trans = base.trans_covariates
    if target in ("initial", "both") and covariate not in init:
        init = init + (covariate,)
    if target in ("transition", "both") and covariate not in trans:
        trans = trans + (covariate,)
    return ModelSpec(k=base.k, init_covariates=init, trans_covariates=trans)


def stepwise_covariates(
    schema: ItemSchema,
    panel: LongitudinalPanel,
    k: int,
    candidates: Sequence[tuple[str, str]],
    options: FitOptions | None = None,
    max_steps: int | None = None,
) -> SelectionReport:
    """Greedy forward search over covariate effects at a fixed state count.

    Starts from the intercept-only logit model, fits one model per remaining
    (covariate, target) candidate each sweep, and accepts the candidate with
    the largest BIC reduction until none reduces BIC (or ``max_steps`` is
    reached). Returns the full fitted trail; the accepted path is recoverable
    from ``best_by_bic``.
    """
    options = options or FitOptions()
    for name, target in candidates:
        if target not in TARGETS:
            raise ValueError(f"unknown candidate target {target!r}")
        if not panel.has_covariate(name):
            raise ValueError(f"candidate covariate {name!r} absent from the panel")

    base_label = "base"
    base_spec = ModelSpec(k=k)
    rows = _fit_rows([(base_label, base_spec)], schema, panel, options)
    report_rows = list(rows)
    if not rows[0].ok:
        return SelectionReport(rows=report_rows, n_subjects=panel.n_subjects)
    best_bic = rows[0].bic

    remaining = list(candidates)
    steps = 0
    while remaining and (max_steps is None or steps < max_steps):
        jobs = []
        for name, target in remaining:
            label = f"{base_label}+{name}:{target}"
            jobs.append((label, _augmented_spec(base_spec, name, target)))
        sweep = _fit_rows(jobs, schema, panel, options)
        report_rows.extend(sweep)

        winner = None
        for (name, target), row in zip(remaining, sweep):
            if row.ok and row.bic < best_bic and (winner is None or row.bic < winner[2].bic):
                winner = (name, target, row)
        if winner is None:
            break
        name, target, row = winner
        base_spec = _augmented_spec(base_spec, name, target)
        base_label = row.label
        best_bic = row.bic
        remaining = [c for c in remaining if c != (name, target)]
        steps += 1

    return SelectionReport(rows=report_rows, n_subjects=panel.n_subjects)


def write_report_csv(report: SelectionReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "k", "g", "loglik", "aic", "bic", "status"])
        for r in report.rows:
            fmt = lambda v: "" if math.isnan(v) else f"{v:.6f}"
            writer.writerow([r.label, r.k, r.g, fmt(r.loglik), fmt(r.aic), fmt(r.bic), r.status])


def write_report_json(report: SelectionReport, path) -> None:
    doc = {
        "n_subjects": report.n_subjects,
        "rows": [
            {
                "label": r.label, "k": r.k, "g": r.g,
                "loglik": None if math.isnan(r.loglik) else r.loglik,
                "aic": None if math.isnan(r.aic) else r.aic,
                "bic": None if math.isnan(r.bic) else r.bic,
                "status": r.status, "message": r.message,
            }
            for r in report.rows
        ],
    }
    try:
        doc["best_by_bic"] = report.best_by_bic
        doc["best_by_aic"] = report.best_by_aic
    except FitFailureError:
        doc["best_by_bic"] = None
        doc["best_by_aic"] = None
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
