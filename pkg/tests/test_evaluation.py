import json

import numpy as np
import pandas as pd
import pytest

from loadsynth.exceptions import DatasetError
from loadsynth.services.cvae import default_bandwidths, mmd_loss
from loadsynth.services.evaluation import (
    TstrSet,
    fidelity_mmd,
    full_report,
    mean_relative_error,
    mirror_training_set,
    noise_baseline,
    pca_project,
    quantile_curves,
    ridge_fit,
    split_periods,
    tstr,
    write_report,
)
from loadsynth.services.profile_store import N_PERIODS


def _report(pipeline):
    settings, prepared, trained = pipeline.settings, pipeline.prepared, pipeline.trained
    return full_report(
        trained.model,
        trained.mixture,
        prepared.train,
        prepared.holdout,
        seed=settings.SEED,
        eval_cfg=settings.EVAL,
        guard=settings.guard,
        k=settings.K_ANONYMITY,
        model_version=pipeline.artifact.model_version,
    )


@pytest.fixture(scope="module")
def report(small_pipeline):
    return _report(small_pipeline)


def test_quantile_curves_of_identical_profiles():
    row = np.linspace(0.1, 2.0, N_PERIODS)
    curves = quantile_curves(np.tile(row, (30, 1)), (0.05, 0.5, 0.95))
    for curve in curves:
        np.testing.assert_allclose(curve, row)


def test_quantile_curves_interpolate_and_are_monotone():
    values = np.tile(np.arange(1.0, 100.0)[:, None], (1, N_PERIODS))
    curves = quantile_curves(values, (0.05, 0.25, 0.5, 0.75, 0.95))
    np.testing.assert_allclose(curves[2], 50.0)
    assert np.all(np.diff(curves, axis=0) >= 0)
    noisy = np.random.default_rng(0).gamma(2.0, 0.3, size=(200, N_PERIODS))
    assert np.all(np.diff(quantile_curves(noisy, (0.05, 0.5, 0.95)), axis=0) >= 0)
    with pytest.raises(DatasetError):
        quantile_curves(values[:19], (0.5,))


def test_mean_relative_error_floors_the_denominator():
    assert mean_relative_error(np.full(4, 2.0), np.full(4, 3.0)) == pytest.approx(0.5)
    assert mean_relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_mmd_test_accepts_identical_sets():
    x = np.random.default_rng(1).normal(size=(60, N_PERIODS))
    result = fidelity_mmd(x, x.copy(), n_permutations=99, seed=2)
    assert result.p_value > 0.5
    assert result.statistic == 0.0
    assert result.n_permutations == 99


def test_mmd_test_rejects_shifted_sets():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(60, N_PERIODS)), rng.normal(5.0, 1.0, size=(60, N_PERIODS))
    result = fidelity_mmd(x, y, n_permutations=199, seed=4)
    assert result.p_value < 0.01
    assert result.p_value == pytest.approx(1 / 200)
    assert result.statistic == pytest.approx(mmd_loss(x, y, default_bandwidths(N_PERIODS)), rel=1e-10)
    assert result.statistic == pytest.approx(fidelity_mmd(y, x, n_permutations=9).statistic, rel=1e-10)
    with pytest.raises(DatasetError):
        fidelity_mmd(x[:10], y)


def test_pca_on_a_line():
    rng = np.random.default_rng(5)
    direction = rng.normal(size=N_PERIODS)
    direction /= np.linalg.norm(direction)
    real = rng.normal(size=(80, 1)) * direction + 1e-4 * rng.normal(size=(80, N_PERIODS))
    projection = pca_project(real, real[:10] + 1.0)
    assert projection.explained_variance_ratio[0] >= 0.999
    assert projection.explained_variance_ratio[0] >= projection.explained_variance_ratio[1]
    assert projection.real.shape == (80, 2)
    assert projection.synthetic.shape == (10, 2)


def test_pca_coordinates_carry_the_eigenvalues():
    real = np.random.default_rng(6).normal(size=(200, N_PERIODS)) * np.linspace(0.5, 3.0, N_PERIODS)
    projection = pca_project(real, real)
    eigenvalues = np.sort(np.linalg.eigvalsh(np.cov(real, rowvar=False)))[::-1][:2]
    np.testing.assert_allclose(np.var(projection.real, axis=0, ddof=1), eigenvalues, rtol=1e-8)
    pivots = np.argmax(np.abs(projection.components), axis=0)
    assert np.all(projection.components[pivots, [0, 1]] > 0)
    with pytest.raises(DatasetError):
        pca_project(real[:1], real[:1])


def test_ridge_closed_form():
    coefficients = ridge_fit(np.array([[1.0], [2.0]]), np.array([[2.0], [4.0]]), alpha=1e-3)
    assert coefficients[0, 0] == pytest.approx(10.0 / 5.001)
    with pytest.raises(ValueError):
        ridge_fit(np.ones((2, 1)), np.ones((2, 1)), alpha=0.0)


def test_tstr_on_identical_sets_has_unit_ratio(small_pipeline):
    train = TstrSet.from_dataset(small_pipeline.prepared.train)
    test = TstrSet.from_dataset(small_pipeline.prepared.holdout)
    assert tstr(train, train, test).ratio == 1.0
    assert tstr(train, noise_baseline(train, seed=0), test).ratio > 1.0
    assert train.features().shape == (len(train), 15 + 2)


def test_tstr_refuses_test_households_seen_in_training(small_pipeline):
    train = TstrSet.from_dataset(small_pipeline.prepared.train)
    synthetic = TstrSet(train.onehot, train.weekend, train.readings)
    assert synthetic.households == frozenset()
    with pytest.raises(DatasetError, match="overlap"):
        tstr(train, synthetic, train)


def test_split_periods_separates_the_calendar(small_pipeline):
    train, holdout = small_pipeline.prepared.train, small_pipeline.prepared.holdout
    earlier, later = split_periods(train, holdout)
    assert max(earlier.dates) < min(later.dates)
    assert set(earlier.household_ids) <= set(train.household_ids)
    assert set(later.household_ids) <= set(holdout.household_ids)


def test_mirror_matches_reference_labels(small_pipeline):
    trained, train = small_pipeline.trained, small_pipeline.prepared.train
    synthetic, skipped = mirror_training_set(trained.model, trained.mixture, train, small_pipeline.settings.guard, 1)
    assert skipped == 0
    assert len(synthetic) == len(train)
    assert synthetic.onehot.sum(axis=0).tolist() == train.onehot.sum(axis=0).tolist()
    assert synthetic.weekend.sum() == sum(d.weekday() >= 5 for d in train.dates)


def test_full_report_invariants(report, small_pipeline):
    holdout = small_pipeline.prepared.holdout
    settings = small_pipeline.settings
    assert report.n_real == len(holdout)
    assert report.n_synthetic == settings.EVAL.n_synthetic
    assert [c.quantile for c in report.quantile_curves] == list(settings.EVAL.quantiles)
    assert 0 < report.mmd.p_value <= 1
    assert report.mmd.statistic >= 0
    assert report.tstr.ratio == pytest.approx(report.tstr.mae_synthetic_trained / report.tstr.mae_real_trained)
    assert report.tstr.noise_baseline_ratio > 0
    assert len(report.pca.explained_variance_ratio) == 2
    assert report.guard_audit.violations == []
    assert report.conditional_means.ev_real is not None
    assert report.conditional_means.non_ev_synthetic is not None
    assert report.model_version == small_pipeline.artifact.model_version


def test_full_report_is_deterministic(report, small_pipeline):
    again = _report(small_pipeline)
    first = json.dumps(report.model_dump(mode="json"), sort_keys=True)
    assert json.dumps(again.model_dump(mode="json"), sort_keys=True) == first


def test_write_report_files(report, tmp_path):
    paths = write_report(report, str(tmp_path / "reports"))
    assert set(paths) == {"report", "quantile_curves", "pca_coordinates"}
    with open(paths["report"]) as f:
        assert json.load(f)["schema_version"] == "1.0"
    curves = pd.read_csv(paths["quantile_curves"])
    assert len(curves) == N_PERIODS
    assert {"period", "q05_real", "q95_synthetic"} <= set(curves.columns)
    coordinates = pd.read_csv(paths["pca_coordinates"])
    assert list(coordinates.columns) == ["source", "pc1", "pc2"]
    assert set(coordinates["source"]) == {"real", "synthetic"}
