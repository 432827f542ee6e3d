"""Per-subject posterior probability profiles, local decoding, and summaries.

States in decoded sequences and CSV files are labeled 1..k; probability
matrices keep 0-based column indexing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .em import FitResult
from .likelihood import compute_lattice
from .model import ModelSpec, initial_probs_matrix
from .panel import LongitudinalPanel


@dataclass(frozen=True, eq=False)
class LatentProfile:
    """Posterior state trajectory of one subject.

    matrix: (T, k) posterior probabilities, each row a simplex.
    decoded: length-T tuple of 1-based states, the per-time argmax.
    """

    subject_id: str
    matrix: np.ndarray
    decoded: tuple[int, ...]


def local_decode(matrix: np.ndarray) -> np.ndarray:
    """Per-time argmax of the posterior rows, as 1-based state labels.

    Ties go to the lowest state index.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError("expected a non-empty (T, k) posterior matrix")
    return matrix.argmax(axis=1) + 1


def build_profiles(fit: FitResult, spec: ModelSpec, panel: LongitudinalPanel) -> list[LatentProfile]:
    """Posterior probability profile and decoded sequence for every subject."""
    post = compute_lattice(fit.params, spec, panel).posteriors()
    out = []
    for i, sid in enumerate(panel.subject_ids):
        matrix = post[i]
        out.append(
            LatentProfile(
                subject_id=sid,
                matrix=matrix,
                decoded=tuple(int(s) for s in local_decode(matrix)),
            )
        )
    return out


def prevalence_over_time(profiles: list[LatentProfile]) -> np.ndarray:
    """State prevalences (k, T): entry (u, t) averages p_iu at time t over subjects."""
    if not profiles:
        raise ValueError("need at least one profile")
    shape = profiles[0].matrix.shape
    if any(p.matrix.shape != shape for p in profiles):
        raise ValueError("profiles have mixed dimensions")
    stacked = np.stack([p.matrix for p in profiles])
    return stacked.mean(axis=0).T


def average_initial(fit: FitResult, panel: LongitudinalPanel) -> np.ndarray:
    """Mean initial-state distribution over subjects' covariates.

    Without initial covariates (or under the unrestricted structure) this is
    the shared initial distribution itself.
    """
    spec = fit.spec
    if spec.is_unrestricted:
        return fit.params.delta_raw.copy()
    if spec.p_init == 0:
        return initial_probs_matrix(fit.params.beta, np.zeros((1, 0)))[0]
    x1 = panel.covariate_values(spec.init_covariates, 0)
    delta = initial_probs_matrix(fit.params.beta, x1)
    avg = delta.mean(axis=0)
    return avg / avg.sum()


def write_profiles_csv(profiles: list[LatentProfile], path) -> None:
    """Long-format probabilities: one row per (subject, time, state)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "time", "state", "probability"])
        for p in profiles:
            T, k = p.matrix.shape
            for t in range(T):
                for u in range(k):
                    writer.writerow([p.subject_id, t + 1, u + 1, f"{p.matrix[t, u]:.6f}"])


def write_decoded_csv(profiles: list[LatentProfile], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "time", "state"])
        for p in profiles:
            for t, state in enumerate(p.decoded):
                writer.writerow([p.subject_id, t + 1, state])


def write_prevalence_csv(prevalence: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "time", "value"])
        k, T = prevalence.shape
        for u in range(k):
            for t in range(T):
                writer.writerow([u + 1, t + 1, f"{prevalence[u, t]:.6f}"])
