"""Shared fixtures and independent oracles for the test suite.

The enumeration oracle below computes likelihoods and posteriors by summing
over every latent path in plain probability space; it never touches the
package's forward-backward code.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from lmpanel import (
    CovariateGenerator,
    ItemSchema,
    LongitudinalPanel,
    ModelSpec,
    Parameters,
    ResponseItem,
    SimConfig,
    simulate_panel,
)
from lmpanel.panel import MISSING


# ---------------------------------------------------------------------------
# Independent math (no package link or lattice code).

def naive_softmax(z):
    e = np.exp(np.asarray(z, dtype=float))
    return e / e.sum()


def naive_initial(beta, x):
    """Reference-coded softmax, state 1 as reference."""
    k = beta.shape[0] + 1
    z = np.zeros(k)
    for u in range(1, k):
        z[u] = beta[u - 1, 0] + float(np.dot(beta[u - 1, 1:], x))
    return naive_softmax(z)


def naive_transition(gamma, x):
    k = gamma.shape[0]
    out = np.zeros((k, k))
    for ubar in range(k):
        z = np.zeros(k)
        row = 0
        for u in range(k):
            if u == ubar:
                continue
            z[u] = gamma[ubar, row, 0] + float(np.dot(gamma[ubar, row, 1:], x))
            row += 1
        out[ubar] = naive_softmax(z)
    return out


def subject_emission_probs(params, responses_it):
    """P(observed items at t | state u) for one subject; missing items skipped."""
    T = responses_it.shape[0]
    k = params.k
    emis = np.ones((T, k))
    for t in range(T):
        for j, code in enumerate(responses_it[t]):
            if code == MISSING:
                continue
            emis[t] *= params.phi[j][:, code]
    return emis


def subject_links(params, spec, panel, i):
    """(delta, taus) for subject i via the naive link formulas."""
    T = panel.n_times
    if spec.is_unrestricted:
        delta = np.asarray(params.delta_raw)
        taus = [np.asarray(params.tau_raw[t]) for t in range(T - 1)]
        return delta, taus
    x1 = panel.covariate_values(spec.init_covariates, 0)[i]
    delta = naive_initial(params.beta, x1)
    taus = []
    for t in range(1, T):
        xt = panel.covariate_values(spec.trans_covariates, t)[i]
        taus.append(naive_transition(params.gamma, xt))
    return delta, taus


def enumerate_subject(params, spec, panel, i):
    """Brute-force joint quantities for subject i by path enumeration.

    Returns (loglik, posteriors (T, k), pairwise (T-1, k, k)).
    """
    T, k = panel.n_times, params.k
    delta, taus = subject_links(params, spec, panel, i)
    emis = subject_emission_probs(params, panel.responses[i])

    total = 0.0
    post = np.zeros((T, k))
    pair = np.zeros((max(T - 1, 0), k, k))
    for path in itertools.product(range(k), repeat=T):
        p = delta[path[0]] * emis[0, path[0]]
        for t in range(1, T):
            p *= taus[t - 1][path[t - 1], path[t]] * emis[t, path[t]]
        total += p
        for t in range(T):
            post[t, path[t]] += p
        for t in range(1, T):
            pair[t - 1, path[t - 1], path[t]] += p
    return math.log(total), post / total, pair / total


# ---------------------------------------------------------------------------
# Random instance builders.

def random_simplex(rng, size, floor=0.05):
    v = rng.dirichlet(np.ones(size)) + floor
    return v / v.sum()


def random_parameters(rng, spec, category_counts, T):
    k = spec.k
    phi = tuple(
        np.stack([random_simplex(rng, c) for _ in range(k)]) for c in category_counts
    )
    if spec.is_unrestricted:
        delta = random_simplex(rng, k)
        tau = np.stack(
            [np.stack([random_simplex(rng, k) for _ in range(k)]) for _ in range(T - 1)]
        ) if T > 1 else np.zeros((0, k, k))
        return Parameters(phi=phi, delta_raw=delta, tau_raw=tau)
    beta = rng.normal(0.0, 0.7, size=(k - 1, 1 + spec.p_init))
    gamma = rng.normal(0.0, 0.7, size=(k, max(k - 1, 0), 1 + spec.p_trans))
    return Parameters(phi=phi, beta=beta, gamma=gamma)


def random_schema(rng, J):
    items = []
    for j in range(J):
        c = int(rng.integers(2, 5))
        items.append(ResponseItem(f"item{j + 1}", tuple(f"c{y}" for y in range(c))))
    return ItemSchema(tuple(items))


def random_instance(rng, k=None, T=None, J=None, with_covariates=True, missing_rate=0.0):
    """A random (params, spec, panel) triple of modest size."""
    k = k or int(rng.integers(2, 4))
    T = T or int(rng.integers(2, 5))
    J = J or int(rng.integers(1, 4))
    schema = random_schema(rng, J)

    structure = "logit_time_homogeneous"
    if with_covariates:
        p_init = int(rng.integers(0, 3))
        p_trans = int(rng.integers(0, 2))
    else:
        p_init = p_trans = 0
    names = [f"z{m}" for m in range(max(p_init, p_trans) + 1)]
    init_covs = tuple(names[:p_init])
    trans_covs = tuple(names[:p_trans])
    spec = ModelSpec(
        k=k, transition_structure=structure,
        init_covariates=init_covs, trans_covariates=trans_covs,
    )
    params = random_parameters(rng, spec, schema.category_counts(), T)

    used = sorted(set(init_covs) | set(trans_covs))
    gens = tuple(
        CovariateGenerator(nm, "varying" if rng.random() < 0.5 else "fixed", "normal", (0.0, 1.0))
        for nm in used
    )
    config = SimConfig(
        params=params, spec=spec, schema=schema,
        n_subjects=int(rng.integers(3, 8)), n_times=T,
        generators=gens, seed=int(rng.integers(0, 2**31)),
    )
    panel, _ = simulate_panel(config)
    if missing_rate > 0:
        resp = panel.responses.copy()
        mask = rng.random(resp.shape) < missing_rate
        # keep at least one observed cell per panel so the fit stays sane
        mask[0, 0, 0] = False
        resp[mask] = MISSING
        panel = LongitudinalPanel(
            items=panel.items, subject_ids=panel.subject_ids, responses=resp,
            fixed_names=panel.fixed_names, fixed=panel.fixed,
            varying_names=panel.varying_names, varying=panel.varying,
        )
    return params, spec, panel


def with_extra_fixed_covariates(panel, extra: dict[str, np.ndarray]) -> LongitudinalPanel:
    """Rebuild a panel with additional fixed covariate columns."""
    names = panel.fixed_names + tuple(extra.keys())
    cols = [panel.fixed] + [np.asarray(v, dtype=float)[:, None] for v in extra.values()]
    return LongitudinalPanel(
        items=panel.items,
        subject_ids=panel.subject_ids,
        responses=panel.responses,
        fixed_names=names,
        fixed=np.hstack(cols),
        varying_names=panel.varying_names,
        varying=panel.varying,
        centers=panel.centers,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
