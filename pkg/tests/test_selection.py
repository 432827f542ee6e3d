"""Information criteria and the two-step selection procedure."""

import math

import numpy as np
import pytest
from conftest import with_extra_fixed_covariates

from lmpanel import (
    FitOptions,
    ItemSchema,
    LongitudinalPanel,
    ModelSpec,
    Parameters,
    ResponseItem,
    SimConfig,
    information_criteria,
    select_states,
    simulate_panel,
    stepwise_covariates,
)
from lmpanel.selection import SelectionReport, SelectionRow, write_report_csv, write_report_json
from lmpanel.simulate import CovariateGenerator


def test_information_criteria_formula_examples():
    aic, bic = information_criteria(-8794.91, 18, 377)
    assert aic == pytest.approx(17625.81, abs=0.02)
    assert bic == pytest.approx(17696.59, abs=0.02)

    aic, bic = information_criteria(-8069.21, 63, 377)
    assert aic == pytest.approx(16264.43, abs=0.02)
    assert bic == pytest.approx(16512.16, abs=0.02)

    assert information_criteria(0.0, 0, 10) == (0.0, 0.0)


def test_bic_minus_aic_identity(rng):
    for _ in range(20):
        ll = float(rng.normal(scale=1000))
        g = int(rng.integers(0, 200))
        n = int(rng.integers(1, 5000))
        aic, bic = information_criteria(ll, g, n)
        assert bic - aic == pytest.approx((math.log(n) - 2.0) * g, rel=1e-12)


def test_information_criteria_validates_inputs():
    with pytest.raises(ValueError):
        information_criteria(0.0, -1, 10)
    with pytest.raises(ValueError):
        information_criteria(0.0, 0, 0)


# ---------------------------------------------------------------------------
# report bookkeeping


def _row(label, k, g, ll, n=100):
    aic, bic = information_criteria(ll, g, n)
    return SelectionRow(label=label, k=k, g=g, loglik=ll, aic=aic, bic=bic)


def test_best_by_bic_tie_breaks():
    # equal BIC: smaller g wins, then smaller k, then label
    rows = [
        SelectionRow("a", k=3, g=10, loglik=-5.0, aic=1.0, bic=2.0),
        SelectionRow("b", k=2, g=8, loglik=-5.0, aic=1.0, bic=2.0),
        SelectionRow("c", k=3, g=8, loglik=-5.0, aic=1.0, bic=2.0),
    ]
    report = SelectionReport(rows=rows, n_subjects=50)
    assert report.best_by_bic == "b"


def test_failed_rows_skipped():
    rows = [
        SelectionRow("bad", 2, 10, math.nan, math.nan, math.nan, status="failed"),
        _row("good", 3, 12, -40.0),
    ]
    report = SelectionReport(rows=rows, n_subjects=100)
    assert report.best_by_bic == "good"


def test_report_serialization(tmp_path):
    rows = [
        _row("one", 1, 5, -10.0),
        SelectionRow("oops", 2, 9, math.nan, math.nan, math.nan, status="failed", message="x"),
    ]
    report = SelectionReport(rows=rows, n_subjects=100)
    csv_path = tmp_path / "selection.csv"
    json_path = tmp_path / "selection.json"
    write_report_csv(report, csv_path)
    write_report_json(report, json_path)

    lines = csv_path.read_text().splitlines()
    assert lines[0] == "label,k,g,loglik,aic,bic,status"
    assert lines[1].startswith("one,1,5,-10.000000,")
    assert lines[2] == "oops,2,9,,,,failed"

    import json

    doc = json.loads(json_path.read_text())
    assert doc["best_by_bic"] == "one"
    assert doc["rows"][1]["loglik"] is None


# ---------------------------------------------------------------------------
# select_states


def _three_state_panel(n, seed, T=5):
    k = 3
    schema = ItemSchema(
        tuple(ResponseItem(f"it{j}", ("a", "b", "c")) for j in range(3))
    )
    phi = []
    for _ in range(3):
        table = np.full((k, 3), 0.1)
        for u in range(k):
            table[u, u] = 0.8
        phi.append(table)
    tau = np.full((k, k), 0.1)
    np.fill_diagonal(tau, 0.8)
    from lmpanel.model import init_logits_from_probs, trans_logits_from_probs

    params = Parameters(
        phi=tuple(phi),
        beta=init_logits_from_probs(np.array([0.4, 0.35, 0.25]), 0),
        gamma=trans_logits_from_probs(tau, 0),
    )
    spec = ModelSpec(k=k)
    config = SimConfig(
        params=params, spec=spec, schema=schema, n_subjects=n, n_times=T, seed=seed
    )
    return simulate_panel(config)[0]


def test_select_states_single_k(rng):
    panel = _three_state_panel(30, seed=1, T=3)
    options = FitOptions(n_starts=1, max_iter=30, rel_tol=1e-7, seed=0)
    report = select_states(panel.items, panel, [1], options)
    assert len(report.rows) == 1
    assert report.best_by_bic == "unrestricted-k1"
    assert report.rows[0].k == 1


def test_select_states_recovers_three(rng):
    panel = _three_state_panel(400, seed=2)
    options = FitOptions(n_starts=2, max_iter=150, rel_tol=1e-7, seed=0, n_threads=2)
    report = select_states(panel.items, panel, range(1, 5), options)
    best = report.row(report.best_by_bic)
    assert best.k == 3
    # rows come back ordered by k
    assert [r.k for r in report.rows] == [1, 2, 3, 4]


def test_select_states_duplicated_panel_doubles_loglik():
    panel = _three_state_panel(100, seed=3, T=3)
    doubled = LongitudinalPanel(
        items=panel.items,
        subject_ids=panel.subject_ids + tuple(s + "x" for s in panel.subject_ids),
        responses=np.concatenate([panel.responses, panel.responses]),
    )
    options = FitOptions(n_starts=1, max_iter=300, rel_tol=1e-10, seed=0)
    single = select_states(panel.items, panel, [2], options)
    double = select_states(panel.items, doubled, [2], options)
    ll1 = single.rows[0].loglik
    ll2 = double.rows[0].loglik
    assert ll2 == pytest.approx(2 * ll1, rel=1e-5)
    assert single.rows[0].g == double.rows[0].g


def test_select_states_empty_range():
    panel = _three_state_panel(20, seed=4, T=3)
    with pytest.raises(ValueError):
        select_states(panel.items, panel, [], FitOptions(n_starts=1))


# ---------------------------------------------------------------------------
# stepwise_covariates


def _covariate_effect_panel(n, seed, slope=1.4, T=4):
    """Two-state generator whose initial probabilities depend on one covariate."""
    schema = ItemSchema(
        (ResponseItem("a", ("x", "y", "z")), ResponseItem("b", ("x", "y", "z")))
    )
    phi = (
        np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]),
        np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]),
    )
    from lmpanel.model import trans_logits_from_probs

    tau = np.array([[0.85, 0.15], [0.15, 0.85]])
    params = Parameters(
        phi=phi,
        beta=np.array([[0.0, slope]]),
        gamma=trans_logits_from_probs(tau, 0),
    )
    spec = ModelSpec(k=2, init_covariates=("x_true",))
    config = SimConfig(
        params=params, spec=spec, schema=schema, n_subjects=n, n_times=T,
        generators=(CovariateGenerator("x_true", "fixed", "normal", (0.0, 1.0)),),
        seed=seed,
    )
    panel, _ = simulate_panel(config)
    noise_rng = np.random.default_rng(seed + 10_000)
    return with_extra_fixed_covariates(
        panel,
        {
            "x_noise1": noise_rng.normal(size=n),
            "x_noise2": noise_rng.normal(size=n),
        },
    )


def test_stepwise_accepts_true_covariate_and_rejects_noise():
    panel = _covariate_effect_panel(600, seed=5)
    options = FitOptions(n_starts=2, max_iter=120, rel_tol=1e-7, seed=0, n_threads=2)
    candidates = [("x_true", "initial"), ("x_noise1", "initial"), ("x_noise2", "initial")]
    report = stepwise_covariates(panel.items, panel, k=2, candidates=candidates, options=options)
    assert report.best_by_bic == "base+x_true:initial"
    # first sweep fits one row per candidate
    first_sweep = [r for r in report.rows if r.label.count("+") == 1]
    assert len(first_sweep) == 3


def test_stepwise_keeps_base_when_nothing_helps():
    panel = _covariate_effect_panel(400, seed=6, slope=0.0)
    options = FitOptions(n_starts=2, max_iter=100, rel_tol=1e-7, seed=0)
    candidates = [("x_noise1", "initial"), ("x_noise2", "initial")]
    report = stepwise_covariates(panel.items, panel, k=2, candidates=candidates, options=options)
    assert report.best_by_bic == "base"


def test_stepwise_max_steps_limits_acceptance():
    panel = _covariate_effect_panel(300, seed=7)
    options = FitOptions(n_starts=1, max_iter=60, rel_tol=1e-6, seed=0)
    candidates = [("x_true", "initial"), ("x_noise1", "initial")]
    report = stepwise_covariates(
        panel.items, panel, k=2, candidates=candidates, options=options, max_steps=1
    )
    # exactly one sweep after the base row: base + 2 candidates + second sweep skipped
    labels = [r.label for r in report.rows]
    assert labels[0] == "base"
    assert len(labels) <= 1 + 2 + 1


def test_stepwise_candidate_g_counts():
    panel = _covariate_effect_panel(120, seed=8)
    options = FitOptions(n_starts=1, max_iter=40, rel_tol=1e-6, seed=0)
    candidates = [
        ("x_true", "initial"),
        ("x_noise1", "transition"),
        ("x_noise2", "both"),
    ]
    report = stepwise_covariates(
        panel.items, panel, k=2, candidates=candidates, options=options, max_steps=0
    )
    by_label = {r.label: r for r in report.rows}
    base_g = by_label["base"].g
    # k=2, 2 items with 3 categories each: emissions 2*4=8, links 2 + 2*1 = 12 total
    assert base_g == 8 + 1 * 1 + 2 * 1 * 1
    # max_steps=0 still fits nothing beyond base
    assert set(by_label) == {"base"}


def test_stepwise_first_sweep_parameter_counts():
    panel = _covariate_effect_panel(150, seed=9)
    options = FitOptions(n_starts=1, max_iter=40, rel_tol=1e-6, seed=0)
    candidates = [
        ("x_true", "initial"),
        ("x_noise1", "transition"),
        ("x_noise2", "both"),
    ]
    report = stepwise_covariates(
        panel.items, panel, k=2, candidates=candidates, options=options, max_steps=1
    )
    by_label = {r.label: r for r in report.rows}
    base_g = by_label["base"].g
    assert by_label["base+x_true:initial"].g == base_g + (2 - 1)
    assert by_label["base+x_noise1:transition"].g == base_g + 2 * (2 - 1)
    assert by_label["base+x_noise2:both"].g == base_g + 3 * (2 - 1)


def test_stepwise_rejects_unknown_candidates():
    panel = _covariate_effect_panel(50, seed=10)
    with pytest.raises(ValueError):
        stepwise_covariates(panel.items, panel, 2, [("ghost", "initial")], FitOptions(n_starts=1))
    with pytest.raises(ValueError):
        stepwise_covariates(panel.items, panel, 2, [("x_true", "sideways")], FitOptions(n_starts=1))
