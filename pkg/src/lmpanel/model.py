"""Model specification, parameter containers, and multinomial-logit links.

The latent chain has k states. Initial-state probabilities use state 1 as the
logit reference; each transition row uses its own diagonal (staying) state as
reference. Emission tables are time-homogeneous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ModelMismatchError, NumericOverflowError, SchemaMismatchError
from .panel import ItemSchema, LongitudinalPanel, PanelSchema, _schema_from_dict, _schema_to_dict

SIMPLEX_TOL = 1e-12

# Floor applied to probabilities before logit inversion, so that zero cells
# produced by an unrestricted M-step never become infinite logits.
LOGIT_FLOOR = 1e-10


class TransitionStructure(str, Enum):
    UNRESTRICTED = "unrestricted_time_heterogeneous"
    LOGIT = "logit_time_homogeneous"


@dataclass(frozen=True)
class ModelSpec:
    """Number of states, transition structure, and covariate assignments."""

    k: int
    transition_structure: TransitionStructure = TransitionStructure.LOGIT
    init_covariates: tuple[str, ...] = ()
    trans_covariates: tuple[str, ...] = ()
    emissions_time_homogeneous: bool = True

    def __post_init__(self):
        object.__setattr__(
            self, "transition_structure", TransitionStructure(self.transition_structure)
        )
        object.__setattr__(self, "init_covariates", tuple(self.init_covariates))
        object.__setattr__(self, "trans_covariates", tuple(self.trans_covariates))
        if self.k < 1:
            raise ModelMismatchError("number of states k must be >= 1")
        if not self.emissions_time_homogeneous:
            raise ModelMismatchError("time-varying emissions are not supported")
        if self.transition_structure is TransitionStructure.UNRESTRICTED and (
            self.init_covariates or self.trans_covariates
        ):
            raise ModelMismatchError(
                "the unrestricted structure does not admit covariates"
            )

    @property
    def is_unrestricted(self) -> bool:
        return self.transition_structure is TransitionStructure.UNRESTRICTED

    @property
    def p_init(self) -> int:
        return len(self.init_covariates)

    @property
    def p_trans(self) -> int:
        return len(self.trans_covariates)

    def validate_covariates(self, panel: LongitudinalPanel) -> None:
        for name in self.init_covariates + self.trans_covariates:
            if not panel.has_covariate(name):
                raise SchemaMismatchError(
                    f"model references covariate {name!r} absent from the panel"
                )


def _check_simplex(vec: np.ndarray, what: str) -> None:
    if vec.min() < 0 or abs(float(vec.sum()) - 1.0) > SIMPLEX_TOL:
        raise ModelMismatchError(f"{what} is not a probability simplex")


@dataclass(frozen=True, eq=False)
class Parameters:
    """Estimated model parameters.

    phi: per item j an array (k, c_j); row u is the emission distribution of
    item j in state u.
    beta: (k-1, 1+p_init) initial-logit coefficients for states 2..k
    (column 0 is the intercept), or None under the unrestricted structure.
    gamma: (k, k-1, 1+p_trans) transition-logit coefficients; gamma[u] holds
    one coefficient row per destination state != u in ascending state order.
    delta_raw / tau_raw: explicit initial vector and per-time transition
    matrices for the unrestricted structure.
    """

    phi: tuple[np.ndarray, ...]
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    delta_raw: np.ndarray | None = None
    tau_raw: np.ndarray | None = None

    def __post_init__(self):
        phi = tuple(np.ascontiguousarray(np.asarray(p, dtype=float)) for p in self.phi)
        if not phi:
            raise ModelMismatchError("phi must cover at least one item")
        k = phi[0].shape[0]
        for j, table in enumerate(phi):
            if table.ndim != 2 or table.shape[0] != k:
                raise ModelMismatchError(f"phi[{j}] must be a (k, c_j) table")
            for u in range(k):
                _check_simplex(table[u], f"phi[{j}] state {u + 1}")
        object.__setattr__(self, "phi", phi)

        def _own(arr, shape_check, what):
            if arr is None:
                return None
            arr = np.ascontiguousarray(np.asarray(arr, dtype=float))
            shape_check(arr, what)
            arr.setflags(write=False)
            return arr

        def _beta_shape(arr, what):
            if arr.ndim != 2 or arr.shape[0] != k - 1 or arr.shape[1] < 1:
                raise ModelMismatchError(f"{what} must have shape (k-1, 1+p)")

        def _gamma_shape(arr, what):
            if arr.ndim != 3 or arr.shape[0] != k or arr.shape[1] != k - 1 or arr.shape[2] < 1:
                raise ModelMismatchError(f"{what} must have shape (k, k-1, 1+p)")

        def _delta_shape(arr, what):
            if arr.shape != (k,):
                raise ModelMismatchError(f"{what} must have shape (k,)")
            _check_simplex(arr, what)

        def _tau_shape(arr, what):
            if arr.ndim != 3 or arr.shape[1:] != (k, k):
                raise ModelMismatchError(f"{what} must have shape (T-1, k, k)")
            for t in range(arr.shape[0]):
                for u in range(k):
                    _check_simplex(arr[t, u], f"{what}[{t}] row {u + 1}")

        object.__setattr__(self, "beta", _own(self.beta, _beta_shape, "beta"))
        object.__setattr__(self, "gamma", _own(self.gamma, _gamma_shape, "gamma"))
        object.__setattr__(self, "delta_raw", _own(self.delta_raw, _delta_shape, "delta_raw"))
        object.__setattr__(self, "tau_raw", _own(self.tau_raw, _tau_shape, "tau_raw"))
        for table in phi:
            table.setflags(write=False)

    @property
    def k(self) -> int:
        return self.phi[0].shape[0]

    @property
    def n_items(self) -> int:
        return len(self.phi)

    def category_counts(self) -> tuple[int, ...]:
        return tuple(table.shape[1] for table in self.phi)


def _softmax_last(logits: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis with max-subtraction."""
    if not np.isfinite(logits).all():
        raise NumericOverflowError("non-finite linear predictor in link function")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _with_intercept(x: np.ndarray, n_covs: int, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != n_covs:
        raise ModelMismatchError(
            f"{what}: covariate vector has length {x.shape[1]}, expected {n_covs}"
        )
    return x


def initial_probs_matrix(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Initial-state probabilities (n, k) for covariate rows ``x`` (n, p).

    State 1 is the reference: its logit is fixed at zero.
    """
    beta = np.asarray(beta, dtype=float)
    k = beta.shape[0] + 1
    x = _with_intercept(x, beta.shape[1] - 1, "initial_probs")
    logits = np.zeros((x.shape[0], k))
    if k > 1:
        logits[:, 1:] = beta[:, 0] + x @ beta[:, 1:].T
    return _softmax_last(logits)


def initial_probs(beta: np.ndarray, x1: Sequence[float]) -> np.ndarray:
    """Initial-state simplex of length k for one covariate vector."""
    return initial_probs_matrix(beta, np.atleast_2d(np.asarray(x1, dtype=float)))[0]


def _offdiag_columns(k: int) -> np.ndarray:
    cols = np.empty((k, max(k - 1, 0)), dtype=int)
    for u in range(k):
        cols[u] = [v for v in range(k) if v != u]
    return cols


def transition_matrices(gamma: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-stochastic transition matrices (n, k, k) for covariate rows ``x``.

    Each row uses its diagonal as the logit reference, so the probability of
    staying put is proportional to one.
    """
    gamma = np.asarray(gamma, dtype=float)
    k = gamma.shape[0]
    x = _with_intercept(x, gamma.shape[2] - 1, "transition_matrix")
    n = x.shape[0]
    logits = np.zeros((n, k, k))
    if k > 1:
        lin = gamma[:, :, 0][None, :, :] + np.einsum("ukp,np->nuk", gamma[:, :, 1:], x)
        cols = _offdiag_columns(k)
        logits[:, np.arange(k)[:, None], cols] = lin
    return _softmax_last(logits)


def transition_matrix(gamma: np.ndarray, xt: Sequence[float]) -> np.ndarray:
    """k x k row-stochastic transition matrix for one covariate vector."""
    return transition_matrices(gamma, np.atleast_2d(np.asarray(xt, dtype=float)))[0]


def init_logits_from_probs(delta: np.ndarray, n_covs: int) -> np.ndarray:
    """Invert a simplex into intercept-only initial-logit coefficients."""
    d = np.maximum(np.asarray(delta, dtype=float), LOGIT_FLOOR)
    k = d.shape[0]
    beta = np.zeros((k - 1, 1 + n_covs))
    beta[:, 0] = np.log(d[1:] / d[0])
    return beta


def trans_logits_from_probs(tau: np.ndarray, n_covs: int) -> np.ndarray:
    """Invert a row-stochastic matrix into intercept-only transition logits."""
    t = np.maximum(np.asarray(tau, dtype=float), LOGIT_FLOOR)
    k = t.shape[0]
    gamma = np.zeros((k, max(k - 1, 0), 1 + n_covs))
    cols = _offdiag_columns(k)
    for u in range(k):
        gamma[u, :, 0] = np.log(t[u, cols[u]] / t[u, u])
    return gamma


def count_free_params(spec: ModelSpec, schema: ItemSchema, T: int) -> int:
    """Number of independently estimable parameters g used by AIC/BIC.

    Emissions contribute k * sum_j (c_j - 1). The unrestricted structure adds
    (k-1) initial probabilities and (T-1) * k * (k-1) transition cells; the
    logit structure adds one intercept plus covariate slopes per free logit.
    """
    if T < 1:
        raise ModelMismatchError("T must be >= 1")
    k = spec.k
    g = k * sum(c - 1 for c in schema.category_counts())
    if spec.is_unrestricted:
        g += (k - 1) + (T - 1) * k * (k - 1)
    else:
        g += (k - 1) * (1 + spec.p_init) + k * (k - 1) * (1 + spec.p_trans)
    return g


def apply_state_permutation(params: Parameters, perm: np.ndarray) -> Parameters:
    """Relabel states by ``perm`` (new index -> old index), consistently.

    Logit coefficients are re-expressed against the permuted reference states
    exactly, without going through probabilities.
    """
    perm = np.asarray(perm, dtype=int)
    k = params.k
    if sorted(perm.tolist()) != list(range(k)):
        raise ModelMismatchError("perm must be a permutation of 0..k-1")

    phi = tuple(table[perm] for table in params.phi)

    beta = params.beta
    if beta is not None:
        full = np.vstack([np.zeros((1, beta.shape[1])), beta])
        permuted = full[perm]
        beta = permuted[1:] - permuted[0]

    gamma = params.gamma
    if gamma is not None:
        d = gamma.shape[2]
        full = np.zeros((k, k, d))
        cols = _offdiag_columns(k)
        for u in range(k):
            full[u, cols[u]] = gamma[u]
        full = full[perm][:, perm]
        gamma = np.empty((k, max(k - 1, 0), d))
        for u in range(k):
            gamma[u] = (full[u] - full[u, u])[cols[u]]

    delta_raw = params.delta_raw[perm] if params.delta_raw is not None else None
    tau_raw = (
        params.tau_raw[:, perm][:, :, perm] if params.tau_raw is not None else None
    )
    return Parameters(phi=phi, beta=beta, gamma=gamma, delta_raw=delta_raw, tau_raw=tau_raw)


def canonical_state_order(params: Parameters, spec: ModelSpec, panel: LongitudinalPanel) -> np.ndarray:
    """Permutation ordering states by decreasing initial prevalence at the
    panel-mean covariate vector (ties keep the lower original index)."""
    if spec.is_unrestricted:
        delta = params.delta_raw
    else:
        xbar = panel.covariate_values(spec.init_covariates, 0).mean(axis=0)
        delta = initial_probs(params.beta, xbar)
    return np.argsort(-np.asarray(delta), kind="stable")


@dataclass(frozen=True)
class ModelDocument:
    """Contents of a model JSON file: spec, schema, parameters, extras."""

    spec: ModelSpec
    schema: PanelSchema
    params: Parameters
    centers: dict
    fit_meta: dict | None = None
    covariate_generators: list | None = None


def _params_to_dict(params: Parameters) -> dict:
    def opt(arr):
        return None if arr is None else arr.tolist()

    return {
        "phi": [table.tolist() for table in params.phi],
        "beta": opt(params.beta),
        "gamma": opt(params.gamma),
        "delta_raw": opt(params.delta_raw),
        "tau_raw": opt(params.tau_raw),
    }


def _params_from_dict(doc: dict) -> Parameters:
    def opt(value):
        return None if value is None else np.asarray(value, dtype=float)

    return Parameters(
        phi=tuple(np.asarray(t, dtype=float) for t in doc["phi"]),
        beta=opt(doc.get("beta")),
        gamma=opt(doc.get("gamma")),
        delta_raw=opt(doc.get("delta_raw")),
        tau_raw=opt(doc.get("tau_raw")),
    )


def save_model(
    path,
    spec: ModelSpec,
    schema: PanelSchema,
    params: Parameters,
    centers: dict | None = None,
    fit_meta: dict | None = None,
    covariate_generators: list | None = None,
) -> None:
    """Write the model JSON document (full float precision, round-trip exact)."""
    doc = {
        "spec": {
            "k": spec.k,
            "transition_structure": spec.transition_structure.value,
            "init_covariates": list(spec.init_covariates),
            "trans_covariates": list(spec.trans_covariates),
            "emissions_time_homogeneous": spec.emissions_time_homogeneous,
        },
        "schema": _schema_to_dict(schema),
        "params": _params_to_dict(params),
        "centers": dict(centers or {}),
    }
    if fit_meta is not None:
        doc["fit"] = fit_meta
    if covariate_generators is not None:
        doc["covariate_generators"] = covariate_generators
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> ModelDocument:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatchError(f"model file is not valid JSON: {exc}") from exc
    try:
        spec_doc = doc["spec"]
        spec = ModelSpec(
            k=spec_doc["k"],
            transition_structure=spec_doc["transition_structure"],
            init_covariates=tuple(spec_doc.get("init_covariates", ())),
            trans_covariates=tuple(spec_doc.get("trans_covariates", ())),
            emissions_time_homogeneous=spec_doc.get("emissions_time_homogeneous", True),
        )
        schema = _schema_from_dict(doc["schema"])
        params = _params_from_dict(doc["params"])
    except (KeyError, TypeError) as exc:
        raise SchemaMismatchError(f"malformed model document: {exc}") from exc
    return ModelDocument(
        spec=spec,
        schema=schema,
        params=params,
        centers=dict(doc.get("centers", {})),
        fit_meta=doc.get("fit"),
        covariate_generators=doc.get("covariate_generators"),
    )
