"""Log-space forward-backward recursions for the manifest likelihood.

Everything runs in log space with log-sum-exp, so chains of any practical
length evaluate without underflow. Missing responses contribute an emission
factor of one (zero in log space).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ModelMismatchError, SchemaMismatchError
from .model import (
    ModelSpec,
    Parameters,
    initial_probs_matrix,
    transition_matrices,
)
from .panel import MISSING, LongitudinalPanel


def validate_dimensions(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> None:
    """Raise ModelMismatchError unless params, spec, and panel agree."""
    if params.k != spec.k:
        raise ModelMismatchError(f"params have k={params.k}, spec k={spec.k}")
    if params.n_items != panel.n_items:
        raise ModelMismatchError("params cover a different number of items")
    if params.category_counts() != panel.items.category_counts():
        raise ModelMismatchError("emission tables disagree with item category counts")
    if spec.is_unrestricted:
        if params.delta_raw is None or params.tau_raw is None:
            raise ModelMismatchError("unrestricted spec requires delta_raw and tau_raw")
        if params.tau_raw.shape[0] != panel.n_times - 1:
            raise ModelMismatchError(
                f"tau_raw covers {params.tau_raw.shape[0]} transitions, panel has "
                f"{panel.n_times - 1}"
            )
    else:
        if params.beta is None or params.gamma is None:
            raise ModelMismatchError("logit spec requires beta and gamma")
        if params.beta.shape[1] != 1 + spec.p_init:
            raise ModelMismatchError("beta width disagrees with init covariates")
        if params.gamma.shape[2] != 1 + spec.p_trans:
            raise ModelMismatchError("gamma width disagrees with trans covariates")
    spec.validate_covariates(panel)


def _covariates_checked(panel: LongitudinalPanel, names, t: int, what: str) -> np.ndarray:
    x = panel.covariate_values(names, t)
    if not np.isfinite(x).all():
        raise SchemaMismatchError(
            f"{what} needs covariates {list(names)} at time {t + 1}, but some "
            "values are missing"
        )
    return x


def emission_logliks(params: Parameters, panel: LongitudinalPanel) -> np.ndarray:
    """Per-state log emission probabilities (n, T, k) of the observed items."""
    n, T = panel.n_subjects, panel.n_times
    out = np.zeros((n, T, params.k))
    with np.errstate(divide="ignore"):
        log_phi = [np.log(table) for table in params.phi]
    for j in range(panel.n_items):
        codes = panel.responses[:, :, j]
        observed = codes != MISSING
        safe = np.where(observed, codes, 0)
        contrib = log_phi[j].T[safe]  # (n, T, k)
        out += np.where(observed[:, :, None], contrib, 0.0)
    return out


def _log_initials(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> np.ndarray:
    n = panel.n_subjects
    with np.errstate(divide="ignore"):
        if spec.is_unrestricted:
            return np.broadcast_to(np.log(params.delta_raw), (n, spec.k))
        if spec.p_init == 0:
            row = np.log(initial_probs_matrix(params.beta, np.zeros((1, 0)))[0])
            return np.broadcast_to(row, (n, spec.k))
        x1 = _covariates_checked(panel, spec.init_covariates, 0, "initial link")
        return np.log(initial_probs_matrix(params.beta, x1))


def _log_transition_stack(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> np.ndarray:
    """Log transition matrices broadcast to (n, T-1, k, k)."""
    n, T, k = panel.n_subjects, panel.n_times, spec.k
    if T == 1:
        return np.zeros((n, 0, k, k))
    with np.errstate(divide="ignore"):
        if spec.is_unrestricted:
            return np.broadcast_to(np.log(params.tau_raw), (n, T - 1, k, k))
        if spec.p_trans == 0:
            mat = np.log(transition_matrices(params.gamma, np.zeros((1, 0)))[0])
            return np.broadcast_to(mat, (n, T - 1, k, k))
        varying = any(
            panel.covariate_kind(name) == "varying" for name in spec.trans_covariates
        )
        if not varying:
            x = _covariates_checked(panel, spec.trans_covariates, 0, "transition link")
            mats = np.log(transition_matrices(params.gamma, x))
            return np.broadcast_to(mats[:, None], (n, T - 1, k, k))
        stack = np.empty((n, T - 1, k, k))
        for t in range(1, T):
            x = _covariates_checked(panel, spec.trans_covariates, t, "transition link")
            stack[:, t - 1] = np.log(transition_matrices(params.gamma, x))
        return stack


@dataclass(frozen=True, eq=False)
class BatchLattice:
    """Forward-backward quantities for every subject in a panel."""

    log_emissions: np.ndarray  # (n, T, k)
    log_alpha: np.ndarray      # (n, T, k)
    log_beta: np.ndarray       # (n, T, k)
    log_trans: np.ndarray      # (n, T-1, k, k), broadcast view allowed
    logliks: np.ndarray        # (n,)

    def posteriors(self) -> np.ndarray:
        """Smoothed state probabilities (n, T, k); rows normalized exactly."""
        p = np.exp(self.log_alpha + self.log_beta - self.logliks[:, None, None])
        return p / p.sum(axis=2, keepdims=True)

    def pairwise(self) -> np.ndarray:
        """Joint (state at t-1, state at t) posteriors (n, T-1, k, k)."""
        n, T, k = self.log_emissions.shape
        if T == 1:
            return np.zeros((n, 0, k, k))
        inner = self.log_emissions[:, 1:] + self.log_beta[:, 1:]
        joint = np.exp(
            self.log_alpha[:, :-1, :, None]
            + self.log_trans
            + inner[:, :, None, :]
            - self.logliks[:, None, None, None]
        )
        return joint / joint.sum(axis=(2, 3), keepdims=True)


def compute_lattice(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> BatchLattice:
    """Run the forward and backward recursions for the whole panel."""
    validate_dimensions(params, spec, panel)
    log_em = emission_logliks(params, panel)
    log_delta = _log_initials(params, spec, panel)
    log_trans = _log_transition_stack(params, spec, panel)

    n, T, k = log_em.shape
    log_alpha = np.empty((n, T, k))
    log_alpha[:, 0] = log_delta + log_em[:, 0]
    for t in range(1, T):
        log_alpha[:, t] = log_em[:, t] + logsumexp(
            log_alpha[:, t - 1][:, :, None] + log_trans[:, t - 1], axis=1
        )
    logliks = logsumexp(log_alpha[:, T - 1], axis=1)

    log_beta = np.zeros((n, T, k))
    for t in range(T - 2, -1, -1):
        log_beta[:, t] = logsumexp(
            log_trans[:, t] + (log_em[:, t + 1] + log_beta[:, t + 1])[:, None, :],
            axis=2,
        )
    return BatchLattice(
        log_emissions=log_em,
        log_alpha=log_alpha,
        log_beta=log_beta,
        log_trans=log_trans,
        logliks=logliks,
    )


@dataclass(frozen=True, eq=False)
class SubjectLattice:
    """Forward-backward accumulators for a single subject."""

    log_emissions: np.ndarray  # (T, k)
    log_alpha: np.ndarray
    log_beta: np.ndarray
    loglik: float


def _require_single(panel: LongitudinalPanel) -> None:
    if panel.n_subjects != 1:
        raise ValueError(
            "expected a single-subject view; take panel.subject(i) first"
        )


def subject_lattice(params: Parameters, spec: ModelSpec, subject: LongitudinalPanel) -> SubjectLattice:
    _require_single(subject)
    batch = compute_lattice(params, spec, subject)
    return SubjectLattice(
        log_emissions=batch.log_emissions[0],
        log_alpha=batch.log_alpha[0],
        log_beta=batch.log_beta[0],
        loglik=float(batch.logliks[0]),
    )


def subject_loglik(params: Parameters, spec: ModelSpec, subject: LongitudinalPanel) -> float:
    """Log-probability of one subject's observed responses given covariates."""
    _require_single(subject)
    return float(compute_lattice(params, spec, subject).logliks[0])


def tree_sum(values: np.ndarray) -> float:
    """Pairwise (tree) reduction; deterministic for a fixed input order."""
    work = np.asarray(values, dtype=float).ravel().copy()
    n = work.size
    if n == 0:
        return 0.0
    while n > 1:
        m = n // 2
        work[:m] = work[0 : 2 * m : 2] + work[1 : 2 * m : 2]
        if n % 2:
            work[m] = work[2 * m]
            n = m + 1
        else:
            n = m
    return float(work[0])


def panel_logliks(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> np.ndarray:
    return compute_lattice(params, spec, panel).logliks


def total_loglik(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> float:
    """Sum of per-subject log-likelihoods, reduced pairwise in subject order."""
    return tree_sum(panel_logliks(params, spec, panel))


def posteriors(params: Parameters, spec: ModelSpec, subject: LongitudinalPanel) -> np.ndarray:
    """Posterior state probabilities (T, k) for a single-subject view."""
    _require_single(subject)
    return compute_lattice(params, spec, subject).posteriors()[0]


def pairwise_posteriors(params: Parameters, spec: ModelSpec, subject: LongitudinalPanel) -> np.ndarray:
    """Joint posteriors over consecutive states, (T-1, k, k), for one subject."""
    _require_single(subject)
    return compute_lattice(params, spec, subject).pairwise()[0]
