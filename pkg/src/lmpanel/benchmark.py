"""Documented generator fixtures for recovery benchmarks.

The four-state generator below drives the package's parameter-recovery suite:
three 4-category severity items plus three binary presence items, age-dependent
initial probabilities, and time-homogeneous intercept-only transitions. The
emission table is a fixture chosen so the states are well separated and
qualitatively distinct:

  state 1: low severity everywhere ("quiet"),
  state 2: mild first severity item, binary events clearly possible,
  state 3: elevated first severity item only,
  state 4: several elevated severity items, first item never at level 0.

The initial-logit slopes are all positive, so older subjects start more often
in states 2..4 than younger ones.
"""

from __future__ import annotations

import numpy as np

from .model import ModelSpec, Parameters, trans_logits_from_probs
from .panel import CovariateDecl, ItemSchema, PanelSchema, ResponseItem
from .simulate import CovariateGenerator, SimConfig

AGE_CENTER = 15.0
AGE_SD = 3.0

# Intercepts for states 2..4 at age == AGE_CENTER, and age slopes per year.
INIT_INTERCEPTS = np.array([-1.2679, 1.0138, -0.3031])
INIT_AGE_SLOPES = np.array([0.1858, 0.0014, 0.0512])

# Row-stochastic transition matrix (rows renormalized to machine precision).
TRANSITIONS = np.array(
    [
        [0.9674, 0.0167, 0.0032, 0.0127],
        [0.0525, 0.9214, 0.0245, 0.0016],
        [0.1070, 0.0526, 0.7581, 0.0824],
        [0.1555, 0.0356, 0.0868, 0.7221],
    ]
)
TRANSITIONS = TRANSITIONS / TRANSITIONS.sum(axis=1, keepdims=True)
TRANSITIONS.setflags(write=False)

_SEVERITY_LABELS = ("none", "mild", "moderate", "severe")
_BINARY_LABELS = ("no", "yes")

EMISSIONS = (
    # sev_a: the headline severity item; state 4 never reports "none".
    np.array(
        [
            [0.75, 0.15, 0.07, 0.03],
            [0.25, 0.45, 0.25, 0.05],
            [0.05, 0.15, 0.45, 0.35],
            [0.00, 0.10, 0.40, 0.50],
        ]
    ),
    np.array(
        [
            [0.85, 0.08, 0.05, 0.02],
            [0.70, 0.12, 0.12, 0.06],
            [0.85, 0.07, 0.05, 0.03],
            [0.35, 0.15, 0.30, 0.20],
        ]
    ),
    np.array(
        [
            [0.85, 0.08, 0.05, 0.02],
            [0.65, 0.15, 0.12, 0.08],
            [0.80, 0.10, 0.06, 0.04],
            [0.30, 0.20, 0.30, 0.20],
        ]
    ),
    np.array([[0.97, 0.03], [0.80, 0.20], [0.97, 0.03], [0.90, 0.10]]),
    # bin_b: the signature binary event of state 2.
    np.array([[0.95, 0.05], [0.571, 0.429], [0.95, 0.05], [0.88, 0.12]]),
    np.array([[0.97, 0.03], [0.85, 0.15], [0.97, 0.03], [0.92, 0.08]]),
)
for _table in EMISSIONS:
    _table.setflags(write=False)


def benchmark_items() -> ItemSchema:
    items = tuple(
        ResponseItem(name, _SEVERITY_LABELS) for name in ("sev_a", "sev_b", "sev_c")
    ) + tuple(ResponseItem(name, _BINARY_LABELS) for name in ("bin_a", "bin_b", "bin_c"))
    return ItemSchema(items)


def benchmark_spec() -> ModelSpec:
    return ModelSpec(k=4, init_covariates=("age",))


def benchmark_parameters() -> Parameters:
    """Generator parameters on the raw age scale.

    The intercepts are shifted by -AGE_CENTER * slope so that feeding raw ages
    reproduces exactly the initial probabilities the fixture defines at the
    centered scale.
    """
    beta = np.column_stack([INIT_INTERCEPTS - AGE_CENTER * INIT_AGE_SLOPES, INIT_AGE_SLOPES])
    gamma = trans_logits_from_probs(TRANSITIONS, 0)
    return Parameters(phi=EMISSIONS, beta=beta, gamma=gamma)


def benchmark_sim_config(n_subjects: int, seed: int, n_times: int = 6) -> SimConfig:
    return SimConfig(
        params=benchmark_parameters(),
        spec=benchmark_spec(),
        schema=benchmark_items(),
        n_subjects=n_subjects,
        n_times=n_times,
        generators=(CovariateGenerator("age", "fixed", "normal", (AGE_CENTER, AGE_SD)),),
        seed=seed,
    )


def benchmark_panel_schema() -> PanelSchema:
    return PanelSchema(items=benchmark_items(), covariates=(CovariateDecl("age", "fixed"),))
