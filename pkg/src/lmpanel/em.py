"""Maximum-likelihood estimation by multi-start EM.

The E-step reuses the forward-backward lattice. The M-step is exact for the
emission tables and for intercept-only links; with covariates, the initial and
transition logits are refreshed by a damped Newton-Raphson pass on the
expected (posterior-weighted) multinomial-logit log-likelihood. Step-halving
guarantees that the M-step never decreases the objective it optimizes, which
in turn keeps the EM trace monotone.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import FitFailureError, MStepFailureError
from .likelihood import compute_lattice, tree_sum, validate_dimensions
from .model import (
    ModelSpec,
    Parameters,
    apply_state_permutation,
    canonical_state_order,
    count_free_params,
    init_logits_from_probs,
    trans_logits_from_probs,
)
from .panel import MISSING, ItemSchema, LongitudinalPanel

# A state whose total posterior mass falls below this fraction of n*T is
# treated as empty: its emission rows are reset to the pooled frequencies.
EMPTY_STATE_FRACTION = 1e-6

_NEWTON_RIDGE = 1e-8
_MAX_HALVINGS = 20


@dataclass(frozen=True)
class FitOptions:
    """Knobs for the EM driver; defaults suit panels up to a few thousand rows."""

    n_starts: int = 10
    max_iter: int = 1000
    rel_tol: float = 1e-8
    seed: int = 0
    mstep_max_newton: int = 50
    mstep_tol: float = 1e-9
    n_threads: int = 1

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")


@dataclass
class FitResult:
    """Converged parameters plus bookkeeping for one fitted model."""

    params: Parameters
    spec: ModelSpec
    loglik: float
    g: int
    aic: float
    bic: float
    n_iter: int
    converged: bool
    start_index: int
    trace: list[float]
    warnings: list[str] = field(default_factory=list)


def _start_rng(seed: int, start_index: int) -> np.random.Generator:
    # Counter-based stream per start: reproducible regardless of scheduling.
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(start_index)])
    return np.random.Generator(np.random.Philox(key=key))


def pooled_frequencies(panel: LongitudinalPanel) -> list[np.ndarray]:
    """Observed category frequencies per item, pooled over subjects and times."""
    out = []
    for j, item in enumerate(panel.items.items):
        codes = panel.responses[:, :, j]
        present = codes[codes != MISSING]
        if present.size == 0:
            out.append(np.full(item.n_categories, 1.0 / item.n_categories))
            continue
        counts = np.bincount(present, minlength=item.n_categories).astype(float)
        out.append(counts / counts.sum())
    return out


def _perturbed_simplex(rng: np.random.Generator, base: np.ndarray, conc: float = 25.0) -> np.ndarray:
    draw = rng.dirichlet(base * conc + 0.5)
    return draw / draw.sum()


def initialize(
    spec: ModelSpec,
    schema: ItemSchema,
    panel: LongitudinalPanel,
    start_index: int,
    seed: int,
) -> Parameters:
    """Build starting parameters for one EM chain.

    Start 0 is deterministic: emissions are the pooled category frequencies
    tilted by a fixed per-state ramp, the initial distribution is uniform, and
    transitions are diagonal-dominant (0.8 stay probability). Later starts add
    Dirichlet noise from a per-start counter-based stream. Logit coefficients
    come from inverting those probabilities, with zero covariate slopes.
    """
    k = spec.k
    pooled = pooled_frequencies(panel)
    rng = _start_rng(seed, start_index) if start_index > 0 else None

    tilts = np.zeros(1) if k == 1 else np.linspace(-1.0, 1.0, k)
    phi = []
    for j, item in enumerate(schema.items):
        c = item.n_categories
        grid = np.arange(c) / (c - 1) - 0.5
        table = pooled[j][None, :] * np.exp(tilts[:, None] * grid[None, :])
        table = table / table.sum(axis=1, keepdims=True)
        if rng is not None:
            table = np.stack([_perturbed_simplex(rng, row) for row in table])
        phi.append(table)

    delta = np.full(k, 1.0 / k)
    tau = np.full((k, k), 0.2 / (k - 1) if k > 1 else 0.0)
    np.fill_diagonal(tau, 0.8 if k > 1 else 1.0)
    if rng is not None:
        delta = _perturbed_simplex(rng, delta)

    if spec.is_unrestricted:
        T = panel.n_times
        tau_raw = np.broadcast_to(tau, (max(T - 1, 0), k, k)).copy()
        if rng is not None:
            for t in range(tau_raw.shape[0]):
                tau_raw[t] = np.stack([_perturbed_simplex(rng, row) for row in tau])
        return Parameters(phi=tuple(phi), delta_raw=delta, tau_raw=tau_raw)

    if rng is not None and k > 1:
        tau = np.stack([_perturbed_simplex(rng, row) for row in tau])
    beta = init_logits_from_probs(delta, spec.p_init)
    gamma = trans_logits_from_probs(tau, spec.p_trans)
    return Parameters(phi=tuple(phi), beta=beta, gamma=gamma)


def _mnlogit_objective(coef: np.ndarray, X: np.ndarray, W: np.ndarray, nonref: np.ndarray):
    """Weighted multinomial-logit log-likelihood, probabilities included."""
    logits = np.zeros((X.shape[0], W.shape[1]))
    logits[:, nonref] = X @ coef.T
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    log_p = z - np.log(denom)
    return float((W * log_p).sum()), e / denom


def _fit_weighted_mnlogit(
    X: np.ndarray,
    W: np.ndarray,
    ref: int,
    coef0: np.ndarray,
    max_newton: int,
    tol: float,
    context: str,
) -> np.ndarray:
    """Maximize sum_i sum_c W[i,c] log p_c(x_i) over reference-coded coefficients.

    X is (m, d) with an intercept column; W is (m, k) nonnegative weights.
    Newton steps are ridge-stabilized and halved until the objective does not
    decrease; a step that cannot improve while the gradient is still large
    raises MStepFailureError.
    """
    m, d = X.shape
    k = W.shape[1]
    nonref = np.array([c for c in range(k) if c != ref], dtype=int)
    coef = np.asarray(coef0, dtype=float).copy()
    if nonref.size == 0:
        return coef
    total_weight = float(W.sum())
    grad_scale = max(1.0, total_weight)
    q_val, probs = _mnlogit_objective(coef, X, W, nonref)

    for _ in range(max_newton):
        w_tot = W.sum(axis=1)
        resid = W[:, nonref] - w_tot[:, None] * probs[:, nonref]
        grad = np.concatenate([X.T @ resid[:, a] for a in range(nonref.size)])
        if np.abs(grad).max() <= tol * grad_scale:
            break
        size = nonref.size * d
        hess = np.empty((size, size))
        for a in range(nonref.size):
            pa = probs[:, nonref[a]]
            for b in range(a, nonref.size):
                pb = probs[:, nonref[b]]
                s = w_tot * pa * ((1.0 if a == b else 0.0) - pb)
                block = X.T @ (s[:, None] * X)
                hess[a * d : (a + 1) * d, b * d : (b + 1) * d] = block
                hess[b * d : (b + 1) * d, a * d : (a + 1) * d] = block.T
        hess[np.diag_indices_from(hess)] += _NEWTON_RIDGE
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad / hess.diagonal().max()
        step = step.reshape(nonref.size, d)

        scale = 1.0
        improved = False
        for _ in range(_MAX_HALVINGS):
            cand = coef + scale * step
            q_new, probs_new = _mnlogit_objective(cand, X, W, nonref)
            if q_new >= q_val:
                coef, q_val, probs = cand, q_new, probs_new
                improved = True
                break
            scale *= 0.5
        if not improved:
            # No ascent direction progressed: either we are numerically at the
            # optimum, or the step is genuinely diverging.
            if np.abs(grad).max() <= np.sqrt(tol) * grad_scale:
                break
            raise MStepFailureError(
                f"Newton step failed after {_MAX_HALVINGS} halvings ({context}; "
                f"max |grad| = {np.abs(grad).max():.3e})"
            )
    return coef


def _update_emissions(post: np.ndarray, panel: LongitudinalPanel, pooled) -> tuple[tuple, list[str]]:
    n, T, k = post.shape
    flat = post.reshape(n * T, k)
    mass = flat.sum(axis=0)
    warnings: list[str] = []
    low = mass < EMPTY_STATE_FRACTION * n * T
    phi = []
    for j, item in enumerate(panel.items.items):
        codes = panel.responses[:, :, j].ravel()
        observed = codes != MISSING
        weights = np.zeros((item.n_categories, k))
        np.add.at(weights, codes[observed], flat[observed])
        table = weights.T
        totals = table.sum(axis=1, keepdims=True)
        safe = np.where(totals > 0, totals, 1.0)
        table = np.where(totals > 0, table / safe, pooled[j][None, :])
        table[low] = pooled[j]
        table = table / table.sum(axis=1, keepdims=True)
        phi.append(table)
    for u in np.nonzero(low)[0]:
        warnings.append(
            f"state {u + 1} starved (posterior mass {mass[u]:.3e}); emission "
            "rows reset to pooled frequencies"
        )
    return tuple(phi), warnings


def _update_links(
    post: np.ndarray,
    pair: np.ndarray,
    params: Parameters,
    spec: ModelSpec,
    panel: LongitudinalPanel,
    options: FitOptions,
    context: str,
) -> dict:
    n, T, k = post.shape
    if spec.is_unrestricted:
        delta = post[:, 0].sum(axis=0)
        delta = delta / delta.sum()
        tau_raw = np.empty((T - 1, k, k))
        for t in range(T - 1):
            counts = pair[:, t].sum(axis=0)
            totals = counts.sum(axis=1, keepdims=True)
            tau_raw[t] = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / k)
            tau_raw[t] = tau_raw[t] / tau_raw[t].sum(axis=1, keepdims=True)
        return {"delta_raw": delta, "tau_raw": tau_raw}

    # Initial-probability logits.
    w1 = post[:, 0]
    if spec.p_init == 0:
        delta = w1.sum(axis=0)
        beta = init_logits_from_probs(delta / delta.sum(), 0)
    else:
        x1 = panel.covariate_values(spec.init_covariates, 0)
        X = np.column_stack([np.ones(n), x1])
        beta = _fit_weighted_mnlogit(
            X, w1, 0, params.beta, options.mstep_max_newton, options.mstep_tol,
            f"{context}, initial logits",
        )

    # Transition logits, pooled over t (time-homogeneous).
    if k == 1:
        gamma = np.zeros((1, 0, 1 + spec.p_trans))
    elif spec.p_trans == 0:
        counts = pair.sum(axis=(0, 1))
        totals = counts.sum(axis=1, keepdims=True)
        tau = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / k)
        tau = tau / tau.sum(axis=1, keepdims=True)
        gamma = trans_logits_from_probs(tau, 0)
    elif T == 1:
        gamma = params.gamma
    else:
        blocks = [
            panel.covariate_values(spec.trans_covariates, t) for t in range(1, T)
        ]
        Xt = np.concatenate(blocks, axis=0)  # rows ordered t-major, subject-minor
        X = np.column_stack([np.ones(Xt.shape[0]), Xt])
        gamma = np.empty_like(params.gamma)
        for ubar in range(k):
            W = pair[:, :, ubar, :].transpose(1, 0, 2).reshape(-1, k)
            gamma[ubar] = _fit_weighted_mnlogit(
                X, W, ubar, params.gamma[ubar], options.mstep_max_newton,
                options.mstep_tol, f"{context}, transition row {ubar + 1}",
            )
    return {"beta": beta, "gamma": gamma}


def _estep(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel):
    lattice = compute_lattice(params, spec, panel)
    return lattice.posteriors(), lattice.pairwise(), tree_sum(lattice.logliks)


def _mstep(
    post: np.ndarray,
    pair: np.ndarray,
    params: Parameters,
    spec: ModelSpec,
    panel: LongitudinalPanel,
    options: FitOptions,
    pooled,
    context: str,
) -> tuple[Parameters, list[str]]:
    phi, warnings = _update_emissions(post, panel, pooled)
    links = _update_links(post, pair, params, spec, panel, options, context)
    return Parameters(phi=phi, **links), warnings


def em_step(
    params: Parameters,
    spec: ModelSpec,
    panel: LongitudinalPanel,
    options: FitOptions | None = None,
) -> tuple[Parameters, float]:
    """One EM update; returns the new parameters and their total log-likelihood."""
    options = options or FitOptions()
    pooled = pooled_frequencies(panel)
    post, pair, _ = _estep(params, spec, panel)
    new_params, _ = _mstep(post, pair, params, spec, panel, options, pooled, "em_step")
    _, _, new_ll = _estep(new_params, spec, panel)
    return new_params, new_ll


@dataclass
class _StartOutcome:
    start_index: int
    params: Parameters | None
    trace: list[float]
    converged: bool
    warnings: list[str]
    error: str | None = None


def _run_start(spec, schema, panel, options, start_index, pooled) -> _StartOutcome:
    params = initialize(spec, schema, panel, start_index, options.seed)
    trace: list[float] = []
    warnings: list[str] = []
    converged = False
    ll_prev = None
    try:
        for it in range(options.max_iter):
            post, pair, ll = _estep(params, spec, panel)
            trace.append(ll)
            if ll_prev is not None and abs(ll - ll_prev) / (abs(ll) + 1.0) < options.rel_tol:
                converged = True
                break
            if it == options.max_iter - 1:
                break
            params, step_warnings = _mstep(
                post, pair, params, spec, panel, options, pooled,
                f"start {start_index}, iteration {it}",
            )
            warnings.extend(step_warnings)
            ll_prev = ll
    except MStepFailureError as exc:
        return _StartOutcome(start_index, None, trace, False, warnings, str(exc))
    return _StartOutcome(start_index, params, trace, converged, warnings)


def fit(
    spec: ModelSpec,
    schema: ItemSchema,
    panel: LongitudinalPanel,
    options: FitOptions | None = None,
    log_path=None,
) -> FitResult:
    """Multi-start EM fit; returns the best start, canonically relabeled.

    States are reordered by decreasing initial prevalence at the panel-mean
    covariates so runs are comparable across seeds. When ``log_path`` is set,
    a JSON-lines iteration log ({start, iter, loglik} per line) is written
    after all starts finish, ordered by start then iteration.
    """
    options = options or FitOptions()
    spec.validate_covariates(panel)
    probe = initialize(spec, schema, panel, 0, options.seed)
    validate_dimensions(probe, spec, panel)
    pooled = pooled_frequencies(panel)

    indices = list(range(options.n_starts))
    if options.n_threads > 1 and options.n_starts > 1:
        with ThreadPoolExecutor(max_workers=options.n_threads) as pool:
            outcomes = list(
                pool.map(
                    lambda s: _run_start(spec, schema, panel, options, s, pooled),
                    indices,
                )
            )
    else:
        outcomes = [_run_start(spec, schema, panel, options, s, pooled) for s in indices]

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for outcome in outcomes:
                for it, ll in enumerate(outcome.trace):
                    fh.write(
                        json.dumps({"start": outcome.start_index, "iter": it, "loglik": ll})
                        + "\n"
                    )

    successes = [o for o in outcomes if o.params is not None]
    if not successes:
        details = "; ".join(o.error or "unknown" for o in outcomes)
        raise FitFailureError(f"all {options.n_starts} starts failed: {details}")

    best = successes[0]
    for outcome in successes[1:]:
        if outcome.trace[-1] > best.trace[-1]:
            best = outcome

    perm = canonical_state_order(best.params, spec, panel)
    params = apply_state_permutation(best.params, perm)
    # Lazy import: selection depends on this module for grid fitting.
    from .selection import information_criteria

    g = count_free_params(spec, schema, panel.n_times)
    aic, bic = information_criteria(best.trace[-1], g, panel.n_subjects)
    warnings = list(best.warnings)
    for outcome in outcomes:
        if outcome.error is not None:
            warnings.append(f"start {outcome.start_index} failed: {outcome.error}")
    return FitResult(
        params=params,
        spec=spec,
        loglik=best.trace[-1],
        g=g,
        aic=aic,
        bic=bic,
        n_iter=len(best.trace),
        converged=best.converged,
        start_index=best.start_index,
        trace=list(best.trace),
        warnings=warnings,
    )


def best_state_alignment(
    phi_fit: tuple[np.ndarray, ...], phi_ref: tuple[np.ndarray, ...]
) -> tuple[np.ndarray, float]:
    """Permutation of fitted states minimizing the worst emission-cell error.

    Returns (perm, err) where perm maps reference state u to fitted state
    perm[u]; labels are not identified, so recovery checks go through this.
    """
    k = phi_ref[0].shape[0]
    best_perm, best_err = None, np.inf
    for perm in itertools.permutations(range(k)):
        idx = np.array(perm)
        err = max(
            float(np.abs(fit_t[idx] - ref_t).max())
            for fit_t, ref_t in zip(phi_fit, phi_ref)
        )
        if err < best_err:
            best_perm, best_err = idx, err
    return best_perm, best_err
