"""Panel data model, long-format CSV ingestion, and the grade-merging preprocessor.

A panel holds multivariate categorical responses on a contiguous 1..T time grid
for n subjects, together with time-fixed and time-varying real covariates.
Panels are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateObservationError,
    InvalidCategoryError,
    InvalidGradeError,
    SchemaMismatchError,
)

MISSING = -1  # sentinel for an absent response code

GENERIC = "generic"
DRUG_SPECIFIC = "drug_specific"

RAW_GRADES = (0, 1, 2, 3, 4)

# Built-in CTCAE-style merges: four severity buckets for generic adverse
# events, presence/absence for drug-specific ones.
_CLASS_MAPS = {
    GENERIC: {0: 0, 1: 1, 2: 2, 3: 3, 4: 3},
    DRUG_SPECIFIC: {0: 0, 1: 1, 2: 1, 3: 1, 4: 1},
}

_RESERVED_COLUMNS = ("subject_id", "time")


def merge_grade(raw_grade: int, item_class: str) -> int:
    """Collapse a raw 0-4 grade into the analysis category for an item class.

    ``generic`` items keep grades 0-2 and pool 3/4 into one severe bucket;
    ``drug_specific`` items record only absence (0) vs presence (any grade >= 1).
    """
    if item_class not in _CLASS_MAPS:
        raise ValueError(f"unknown item class {item_class!r}")
    mapping = _CLASS_MAPS[item_class]
    if raw_grade not in mapping:
        raise InvalidGradeError(f"grade {raw_grade!r} outside the 0-4 raw domain")
    return mapping[raw_grade]


@dataclass(frozen=True)
class ResponseItem:
    """One categorical response item: a name, ordered category labels, and an
    optional merge class marking the CSV column as raw 0-4 grades."""

    name: str
    labels: tuple[str, ...]
    merge_class: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise SchemaMismatchError(f"item {self.name!r} needs >= 2 categories")
        if self.merge_class is not None and self.merge_class not in _CLASS_MAPS:
            raise SchemaMismatchError(
                f"item {self.name!r} has unknown merge class {self.merge_class!r}"
            )

    @property
    def n_categories(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ItemSchema:
    """Ordered collection of response items; category codes run 0..c_j-1."""

    items: tuple[ResponseItem, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        names = [it.name for it in self.items]
        if len(set(names)) != len(names):
            raise SchemaMismatchError("item names must be unique")
        if not self.items:
            raise SchemaMismatchError("schema declares no items")

    @property
    def n_items(self) -> int:
        return len(self.items)

    def names(self) -> tuple[str, ...]:
        return tuple(it.name for it in self.items)

    def category_counts(self) -> tuple[int, ...]:
        return tuple(it.n_categories for it in self.items)


@dataclass(frozen=True)
class CovariateDecl:
    """Declares a covariate column and whether it is time-fixed or time-varying."""

    name: str
    kind: str  # "fixed" | "varying"

    def __post_init__(self):
        if self.kind not in ("fixed", "varying"):
            raise SchemaMismatchError(
                f"covariate {self.name!r} has unknown kind {self.kind!r}"
            )


@dataclass(frozen=True)
class PanelSchema:
    """Full sidecar schema: response items plus covariate declarations."""

    items: ItemSchema
    covariates: tuple[CovariateDecl, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        names = list(self.items.names()) + [c.name for c in self.covariates]
        names += list(_RESERVED_COLUMNS)
        if len(set(names)) != len(names):
            raise SchemaMismatchError(
                "item/covariate names must be unique and must not shadow "
                "'subject_id' or 'time'"
            )

    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)


@dataclass(frozen=True)
class GradeMergeMap:
    """Per-item total maps from raw grade codes to merged category codes."""

    maps: Mapping[str, Mapping[int, int]]

    @classmethod
    def from_item_classes(cls, schema: ItemSchema) -> "GradeMergeMap":
        """Build the map implied by each item's declared merge class."""
        maps = {
            it.name: dict(_CLASS_MAPS[it.merge_class])
            for it in schema.items
            if it.merge_class is not None
        }
        return cls(maps=maps)

    def validate_against(self, schema: ItemSchema) -> None:
        """Check totality on the raw domain and contiguity of the image."""
        by_name = {it.name: it for it in schema.items}
        for name, mapping in self.maps.items():
            if name not in by_name:
                raise SchemaMismatchError(f"merge map names unknown item {name!r}")
            c = by_name[name].n_categories
            image = sorted(set(mapping.values()))
            if image != list(range(c)):
                raise SchemaMismatchError(
                    f"merge map for {name!r} must cover categories 0..{c - 1} "
                    f"contiguously, got image {image}"
                )

    def apply(self, item_name: str, raw: int) -> int:
        mapping = self.maps[item_name]
        if raw not in mapping:
            raise InvalidGradeError(
                f"item {item_name!r}: grade {raw!r} outside the declared raw domain"
            )
        return mapping[raw]


@dataclass(frozen=True)
class IngestConfig:
    """Options controlling CSV ingestion.

    ``center`` lists covariates to shift by their sample mean (recorded in
    ``LongitudinalPanel.centers``); ``center_offsets`` instead applies the
    given offsets verbatim, as needed when re-reading data for a fitted model.
    Centering is never implicit.
    """

    allow_missing: bool = False
    merge_map: GradeMergeMap | None = None
    center: tuple[str, ...] = ()
    center_offsets: Mapping[str, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(self.center))


@dataclass(frozen=True, eq=False)
class LongitudinalPanel:
    """Immutable subjects x time x items panel with covariates.

    responses: (n, T, J) int array, ``MISSING`` marks an absent response.
    fixed: (n, F) float array of time-fixed covariates.
    varying: (n, T, V) float array of time-varying covariates (NaN where a
    whole time point is absent under ``allow_missing``).
    """

    items: ItemSchema
    subject_ids: tuple[str, ...]
    responses: np.ndarray
    fixed_names: tuple[str, ...] = ()
    fixed: np.ndarray | None = None
    varying_names: tuple[str, ...] = ()
    varying: np.ndarray | None = None
    centers: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "fixed_names", tuple(self.fixed_names))
        object.__setattr__(self, "varying_names", tuple(self.varying_names))
        n = len(self.subject_ids)
        resp = np.ascontiguousarray(np.asarray(self.responses, dtype=np.int64))
        if resp.ndim != 3:
            raise SchemaMismatchError("responses must be a (n, T, J) array")
        if n < 1 or resp.shape[0] != n:
            raise SchemaMismatchError("need at least one subject")
        if resp.shape[1] < 1:
            raise SchemaMismatchError("need at least one time point")
        if resp.shape[2] != self.items.n_items:
            raise SchemaMismatchError("responses third axis must match item count")
        T = resp.shape[1]

        fixed = self.fixed
        fixed = np.zeros((n, 0)) if fixed is None else np.asarray(fixed, dtype=float)
        if fixed.shape != (n, len(self.fixed_names)):
            raise SchemaMismatchError("fixed covariate block has wrong shape")
        varying = self.varying
        varying = (
            np.zeros((n, T, 0)) if varying is None else np.asarray(varying, dtype=float)
        )
        if varying.shape != (n, T, len(self.varying_names)):
            raise SchemaMismatchError("varying covariate block has wrong shape")
        if set(self.fixed_names) & set(self.varying_names):
            raise SchemaMismatchError("covariate declared both fixed and varying")

        for j, item in enumerate(self.items.items):
            col = resp[:, :, j]
            present = col[col != MISSING]
            if present.size and (present.min() < 0 or present.max() >= item.n_categories):
                raise InvalidCategoryError(
                    f"item {item.name!r} has codes outside 0..{item.n_categories - 1}"
                )

        for arr in (resp, fixed, varying):
            arr.setflags(write=False)
        object.__setattr__(self, "responses", resp)
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "varying", varying)
        object.__setattr__(self, "centers", dict(self.centers))

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_times(self) -> int:
        return self.responses.shape[1]

    @property
    def n_items(self) -> int:
        return self.items.n_items

    def covariate_kind(self, name: str) -> str:
        if name in self.fixed_names:
            return "fixed"
        if name in self.varying_names:
            return "varying"
        raise SchemaMismatchError(f"panel has no covariate named {name!r}")

    def has_covariate(self, name: str) -> bool:
        return name in self.fixed_names or name in self.varying_names

    def covariate_values(self, names: Sequence[str], t: int) -> np.ndarray:
        """Covariate matrix (n, len(names)) at 0-based time index ``t``.

        Fixed covariates broadcast over time; varying ones are read at ``t``.
        """
        out = np.empty((self.n_subjects, len(names)))
        for pos, name in enumerate(names):
            kind = self.covariate_kind(name)
            if kind == "fixed":
                out[:, pos] = self.fixed[:, self.fixed_names.index(name)]
            else:
                out[:, pos] = self.varying[:, t, self.varying_names.index(name)]
        return out

    def subject(self, i: int) -> "LongitudinalPanel":
        """Single-subject view: a panel holding only subject ``i``."""
        return LongitudinalPanel(
            items=self.items,
            subject_ids=(self.subject_ids[i],),
            responses=self.responses[i : i + 1],
            fixed_names=self.fixed_names,
            fixed=self.fixed[i : i + 1],
            varying_names=self.varying_names,
            varying=self.varying[i : i + 1],
            centers=self.centers,
        )


def schema_for_panel(panel: LongitudinalPanel) -> PanelSchema:
    """Reconstruct a sidecar schema matching a panel's columns.

    Items drop any merge class: an in-memory panel always holds merged codes.
    """
    items = ItemSchema(
        tuple(ResponseItem(it.name, it.labels) for it in panel.items.items)
    )
    covs = tuple(CovariateDecl(n, "fixed") for n in panel.fixed_names) + tuple(
        CovariateDecl(n, "varying") for n in panel.varying_names
    )
    return PanelSchema(items=items, covariates=covs)


def _schema_to_dict(schema: PanelSchema) -> dict:
    return {
        "items": [
            {
                "name": it.name,
                "labels": list(it.labels),
                **({"merge_class": it.merge_class} if it.merge_class else {}),
            }
            for it in schema.items.items
        ],
        "covariates": [
            {"name": c.name, "kind": c.kind} for c in schema.covariates
        ],
    }


def _schema_from_dict(doc: dict) -> PanelSchema:
    try:
        items = ItemSchema(
            tuple(
                ResponseItem(
                    name=entry["name"],
                    labels=tuple(entry["labels"]),
                    merge_class=entry.get("merge_class"),
                )
                for entry in doc["items"]
            )
        )
        covs = tuple(
            CovariateDecl(name=entry["name"], kind=entry["kind"])
            for entry in doc.get("covariates", [])
        )
    except (KeyError, TypeError) as exc:
        raise SchemaMismatchError(f"malformed schema document: {exc}") from exc
    return PanelSchema(items=items, covariates=covs)


def load_schema(path) -> PanelSchema:
    """Read the JSON sidecar schema (items + covariate declarations)."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatchError(f"schema file is not valid JSON: {exc}") from exc
    return _schema_from_dict(doc)


def write_schema(schema: PanelSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_schema_to_dict(schema), fh, indent=2)
        fh.write("\n")


def _parse_time(raw: str) -> int:
    try:
        t = int(raw)
    except (TypeError, ValueError):
        raise SchemaMismatchError(f"non-integer time value {raw!r}") from None
    if t < 1:
        raise SchemaMismatchError(f"time values must be >= 1, got {t}")
    return t


def _parse_code(raw: str, item: ResponseItem) -> int:
    try:
        return int(raw)
    except ValueError:
        raise InvalidCategoryError(
            f"item {item.name!r}: non-integer response {raw!r}"
        ) from None


def load_panel(path, schema: PanelSchema, config: IngestConfig | None = None) -> LongitudinalPanel:
    """Read a long-format CSV panel (one row per subject-time) against a schema.

    Rows of the same subject are collated and times sorted onto the contiguous
    1..T grid; the grade-merge map (explicit via config, or implied by item
    merge classes) is applied per item.
    """
    config = config or IngestConfig()
    items = schema.items.items
    merge = config.merge_map or GradeMergeMap.from_item_classes(schema.items)
    merge.validate_against(schema.items)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaMismatchError("panel CSV has no header row")
        header = list(reader.fieldnames)
        expected = list(_RESERVED_COLUMNS) + list(schema.items.names()) + list(
            schema.covariate_names()
        )
        missing_cols = [c for c in expected if c not in header]
        extra_cols = [c for c in header if c not in expected]
        if missing_cols or extra_cols:
            raise SchemaMismatchError(
                f"CSV columns do not match schema (missing {missing_cols}, "
                f"unexpected {extra_cols})"
            )
        raw_rows = list(reader)

    if not raw_rows:
        raise SchemaMismatchError("panel CSV contains no data rows")

    by_subject: dict[str, dict[int, dict]] = {}
    order: list[str] = []
    for lineno, row in enumerate(raw_rows, start=2):
        if None in row or any(v is None for v in row.values()):
            raise SchemaMismatchError(f"ragged CSV row at line {lineno}")
        sid = row["subject_id"].strip()
        if not sid:
            raise SchemaMismatchError(f"empty subject_id at line {lineno}")
        t = _parse_time(row["time"].strip())
        if sid not in by_subject:
            by_subject[sid] = {}
            order.append(sid)
        if t in by_subject[sid]:
            raise DuplicateObservationError(
                f"duplicate observation for subject {sid!r} at time {t}"
            )
        by_subject[sid][t] = row

    T = max(max(times) for times in by_subject.values())
    n = len(order)
    fixed_names = tuple(c.name for c in schema.covariates if c.kind == "fixed")
    varying_names = tuple(c.name for c in schema.covariates if c.kind == "varying")

    responses = np.full((n, T, len(items)), MISSING, dtype=np.int64)
    fixed = np.full((n, len(fixed_names)), np.nan)
    varying = np.full((n, T, len(varying_names)), np.nan)

    for i, sid in enumerate(order):
        tmap = by_subject[sid]
        for t in range(1, T + 1):
            row = tmap.get(t)
            if row is None:
                if not config.allow_missing:
                    raise SchemaMismatchError(
                        f"subject {sid!r} lacks time {t}; set allow_missing to "
                        "accept gaps in the 1..T grid"
                    )
                continue
            for j, item in enumerate(items):
                cell = row[item.name].strip()
                if cell == "":
                    if not config.allow_missing:
                        raise SchemaMismatchError(
                            f"subject {sid!r}, time {t}: empty response for "
                            f"{item.name!r} without allow_missing"
                        )
                    continue
                code = _parse_code(cell, item)
                if item.name in merge.maps:
                    code = merge.apply(item.name, code)
                if not 0 <= code < item.n_categories:
                    raise InvalidCategoryError(
                        f"subject {sid!r}, time {t}: code {code} outside "
                        f"0..{item.n_categories - 1} for item {item.name!r}"
                    )
                responses[i, t - 1, j] = code
            for pos, name in enumerate(fixed_names):
                cell = row[name].strip()
                if cell == "":
                    raise SchemaMismatchError(
                        f"subject {sid!r}, time {t}: fixed covariate {name!r} empty"
                    )
                try:
                    value = float(cell)
                except ValueError:
                    raise SchemaMismatchError(
                        f"subject {sid!r}: non-numeric covariate {name!r}={cell!r}"
                    ) from None
                prior = fixed[i, pos]
                if not math.isnan(prior) and prior != value:
                    raise SchemaMismatchError(
                        f"subject {sid!r}: fixed covariate {name!r} varies over time"
                    )
                fixed[i, pos] = value
            for pos, name in enumerate(varying_names):
                cell = row[name].strip()
                if cell == "":
                    if not config.allow_missing:
                        raise SchemaMismatchError(
                            f"subject {sid!r}, time {t}: covariate {name!r} empty"
                        )
                    continue
                try:
                    varying[i, t - 1, pos] = float(cell)
                except ValueError:
                    raise SchemaMismatchError(
                        f"subject {sid!r}: non-numeric covariate {name!r}={cell!r}"
                    ) from None

    if np.isnan(fixed).any():
        bad = [fixed_names[p] for p in np.unique(np.nonzero(np.isnan(fixed))[1])]
        raise SchemaMismatchError(f"fixed covariates never observed: {bad}")

    centers: dict[str, float] = {}
    if config.center_offsets is not None:
        for name, offset in config.center_offsets.items():
            _apply_center(fixed, varying, fixed_names, varying_names, name, float(offset))
            centers[name] = float(offset)
    else:
        for name in config.center:
            if name in fixed_names:
                offset = float(np.mean(fixed[:, fixed_names.index(name)]))
            elif name in varying_names:
                col = varying[:, :, varying_names.index(name)]
                offset = float(np.nanmean(col))
            else:
                raise SchemaMismatchError(f"cannot center unknown covariate {name!r}")
            _apply_center(fixed, varying, fixed_names, varying_names, name, offset)
            centers[name] = offset

    return LongitudinalPanel(
        items=schema.items,
        subject_ids=tuple(order),
        responses=responses,
        fixed_names=fixed_names,
        fixed=fixed,
        varying_names=varying_names,
        varying=varying,
        centers=centers,
    )


def _apply_center(fixed, varying, fixed_names, varying_names, name, offset):
    if name in fixed_names:
        fixed[:, fixed_names.index(name)] -= offset
    elif name in varying_names:
        varying[:, :, varying_names.index(name)] -= offset
    else:
        raise SchemaMismatchError(f"cannot center unknown covariate {name!r}")


def _format_float(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_panel(panel: LongitudinalPanel, path) -> None:
    """Write a panel back to the long-format CSV (subject-major, time ascending)."""
    header = (
        list(_RESERVED_COLUMNS)
        + list(panel.items.names())
        + list(panel.fixed_names)
        + list(panel.varying_names)
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, sid in enumerate(panel.subject_ids):
            for t in range(panel.n_times):
                cells = [sid, str(t + 1)]
                for j in range(panel.n_items):
                    code = panel.responses[i, t, j]
                    cells.append("" if code == MISSING else str(int(code)))
                cells.extend(_format_float(v) for v in panel.fixed[i])
                cells.extend(_format_float(v) for v in panel.varying[i, t])
                writer.writerow(cells)


def panels_equal(a: LongitudinalPanel, b: LongitudinalPanel) -> bool:
    """Structural equality on data content (NaN-aware), ignoring center metadata."""
    return (
        a.subject_ids == b.subject_ids
        and a.items.names() == b.items.names()
        and a.items.category_counts() == b.items.category_counts()
        and a.fixed_names == b.fixed_names
        and a.varying_names == b.varying_names
        and np.array_equal(a.responses, b.responses)
        and np.array_equal(a.fixed, b.fixed, equal_nan=True)
        and np.array_equal(a.varying, b.varying, equal_nan=True)
    )


@dataclass(frozen=True)
class CategoryFrequencies:
    """Per item, per time category counts over the non-missing responses."""

    items: ItemSchema
    counts: tuple[np.ndarray, ...]  # item j -> (T, c_j) int array

    @property
    def percents(self) -> tuple[np.ndarray, ...]:
        out = []
        for table in self.counts:
            totals = table.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                pct = np.where(totals > 0, 100.0 * table / totals, 0.0)
            out.append(pct)
        return tuple(out)

    def rows(self) -> Iterable[tuple[str, int, int, str, int, float]]:
        """Flat (item, time, category, label, count, percent) records."""
        pcts = self.percents
        for j, item in enumerate(self.items.items):
            for t in range(self.counts[j].shape[0]):
                for y in range(item.n_categories):
                    yield (
                        item.name,
                        t + 1,
                        y,
                        item.labels[y],
                        int(self.counts[j][t, y]),
                        float(pcts[j][t, y]),
                    )


def category_frequencies(panel: LongitudinalPanel) -> CategoryFrequencies:
    """Count observed categories per (item, time); percentages are per column."""
    tables = []
    for j, item in enumerate(panel.items.items):
        table = np.zeros((panel.n_times, item.n_categories), dtype=np.int64)
        col = panel.responses[:, :, j]
        for t in range(panel.n_times):
            present = col[:, t][col[:, t] != MISSING]
            table[t] = np.bincount(present, minlength=item.n_categories)
        tables.append(table)
    return CategoryFrequencies(items=panel.items, counts=tuple(tables))


def write_frequencies_csv(freq: CategoryFrequencies, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item", "time", "category", "label", "count", "percent"])
        for item, t, y, label, count, pct in freq.rows():
            writer.writerow([item, t, y, label, count, f"{pct:.6f}"])
