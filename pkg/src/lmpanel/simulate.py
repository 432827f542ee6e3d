"""Synthetic panel generation from a fully specified model.

Each subject owns a counter-based random stream keyed by (seed, subject
index), so generation order and thread count never change the output. Within a
subject the draw order is: fixed covariates, varying covariates, the latent
chain, then responses time-major.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ModelMismatchError
from .model import ModelSpec, Parameters, initial_probs, transition_matrix
from .panel import ItemSchema, LongitudinalPanel

_DISTRIBUTIONS = ("constant", "uniform", "normal", "bernoulli")


@dataclass(frozen=True)
class CovariateGenerator:
    """Named sampling rule for one covariate column."""

    name: str
    kind: str  # "fixed" | "varying"
    dist: str  # constant(v) | uniform(a, b) | normal(mu, sigma) | bernoulli(p)
    args: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(float(a) for a in self.args))
        if self.kind not in ("fixed", "varying"):
            raise ModelMismatchError(f"generator {self.name!r}: unknown kind {self.kind!r}")
        if self.dist not in _DISTRIBUTIONS:
            raise ModelMismatchError(f"generator {self.name!r}: unknown dist {self.dist!r}")
        expected = {"constant": 1, "uniform": 2, "normal": 2, "bernoulli": 1}[self.dist]
        if len(self.args) != expected:
            raise ModelMismatchError(
                f"generator {self.name!r}: {self.dist} takes {expected} argument(s)"
            )

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if self.dist == "constant":
            return np.full(size or 1, self.args[0]) if size else np.array([self.args[0]])
        if self.dist == "uniform":
            return rng.uniform(self.args[0], self.args[1], size=size or 1)
        if self.dist == "normal":
            return rng.normal(self.args[0], self.args[1], size=size or 1)
        return (rng.random(size or 1) < self.args[0]).astype(float)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "dist": self.dist, "args": list(self.args)}

    @classmethod
    def from_dict(cls, doc: dict) -> "CovariateGenerator":
        try:
            return cls(
                name=doc["name"], kind=doc["kind"], dist=doc["dist"],
                args=tuple(doc.get("args", ())),
            )
        except KeyError as exc:
            raise ModelMismatchError(f"malformed covariate generator: missing {exc}") from exc


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to draw a synthetic panel."""

    params: Parameters
    spec: ModelSpec
    schema: ItemSchema
    n_subjects: int
    n_times: int
    generators: tuple[CovariateGenerator, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        if self.n_subjects < 1 or self.n_times < 1:
            raise ModelMismatchError("need n_subjects >= 1 and n_times >= 1")
        if self.params.k != self.spec.k:
            raise ModelMismatchError("params and spec disagree on k")
        if self.params.category_counts() != self.schema.category_counts():
            raise ModelMismatchError("params and schema disagree on category counts")
        needed = set(self.spec.init_covariates) | set(self.spec.trans_covariates)
        provided = [g.name for g in self.generators]
        if len(set(provided)) != len(provided):
            raise ModelMismatchError("duplicate covariate generator names")
        if set(provided) != needed:
            raise ModelMismatchError(
                f"generators must cover exactly the covariates the links use "
                f"(need {sorted(needed)}, got {sorted(provided)})"
            )
        if self.spec.is_unrestricted and self.params.tau_raw.shape[0] != self.n_times - 1:
            raise ModelMismatchError("tau_raw does not span n_times - 1 transitions")


def _subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(subject_index)])
    return np.random.Generator(np.random.Philox(key=key))


def _draw_category(rng: np.random.Generator, probs: np.ndarray) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, probs.shape[0] - 1)


def simulate_panel(
    config: SimConfig, n_threads: int = 1
) -> tuple[LongitudinalPanel, np.ndarray]:
    """Draw covariates, the latent chain, and responses for every subject.

    Returns the panel plus the hidden truth: an (n, T) array of 0-based state
    indices. Output is a pure function of the seed.
    """
    n, T = config.n_subjects, config.n_times
    J = config.schema.n_items
    spec, params = config.spec, config.params

    fixed_gens = [g for g in config.generators if g.kind == "fixed"]
    varying_gens = [g for g in config.generators if g.kind == "varying"]
    fixed_names = tuple(g.name for g in fixed_gens)
    varying_names = tuple(g.name for g in varying_gens)

    responses = np.empty((n, T, J), dtype=np.int64)
    fixed = np.empty((n, len(fixed_gens)))
    varying = np.empty((n, T, len(varying_gens)))
    truth = np.empty((n, T), dtype=np.int64)

    init_idx = [
        ("f", fixed_names.index(nm)) if nm in fixed_names else ("v", varying_names.index(nm))
        for nm in spec.init_covariates
    ]
    trans_idx = [
        ("f", fixed_names.index(nm)) if nm in fixed_names else ("v", varying_names.index(nm))
        for nm in spec.trans_covariates
    ]

    def covariate_vector(i: int, t: int, index) -> np.ndarray:
        return np.array(
            [fixed[i, pos] if kind == "f" else varying[i, t, pos] for kind, pos in index]
        )

    def one_subject(i: int) -> None:
        rng = _subject_rng(config.seed, i)
        for pos, gen in enumerate(fixed_gens):
            fixed[i, pos] = gen.sample(rng)[0]
        for pos, gen in enumerate(varying_gens):
            varying[i, :, pos] = gen.sample(rng, T)

        if spec.is_unrestricted:
            delta = params.delta_raw
        else:
            delta = initial_probs(params.beta, covariate_vector(i, 0, init_idx))
        u = _draw_category(rng, delta)
        truth[i, 0] = u
        for t in range(1, T):
            if spec.is_unrestricted:
                row = params.tau_raw[t - 1, u]
            else:
                row = transition_matrix(
                    params.gamma, covariate_vector(i, t, trans_idx)
                )[u]
            u = _draw_category(rng, row)
            truth[i, t] = u
        for t in range(T):
            state = truth[i, t]
            for j in range(J):
                responses[i, t, j] = _draw_category(rng, params.phi[j][state])

    if n_threads > 1:
        chunk = max(1, (n + n_threads - 1) // n_threads)
        ranges = [range(s, min(s + chunk, n)) for s in range(0, n, chunk)]

        def run_chunk(idx_range):
            for i in idx_range:
                one_subject(i)

        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run_chunk, ranges))
    else:
        for i in range(n):
            one_subject(i)

    width = len(str(n))
    subject_ids = tuple(f"s{i + 1:0{width}d}" for i in range(n))
    panel = LongitudinalPanel(
        items=config.schema,
        subject_ids=subject_ids,
        responses=responses,
        fixed_names=fixed_names,
        fixed=fixed,
        varying_names=varying_names,
        varying=varying,
    )
    return panel, truth


def write_truth_csv(truth: np.ndarray, subject_ids, path) -> None:
    """Hidden state sequences as (subject, time, state) rows, states 1-based."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "time", "state"])
        for i, sid in enumerate(subject_ids):
            for t in range(truth.shape[1]):
                writer.writerow([sid, t + 1, int(truth[i, t]) + 1])
