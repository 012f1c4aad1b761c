import numpy as np
import pytest
from scipy.stats import binomtest, multivariate_normal

from loadsynth.exceptions import MixtureFitError
from loadsynth.services.latent_gmm import (
    LatentMixture,
    decode_label_tails,
    decode_sampled_labels,
    fit_gmm,
    matching_households,
    population_fraction,
    sample_mixture,
    select_n_components,
)
from loadsynth.services.profile_store import LABEL_DIM, LabelCondition, LabelGroup, LabelLayout, LabelVector

TINY_LAYOUT = LabelLayout((LabelGroup("flag", 0, 1, False),))


def _two_clusters(n: int = 400, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    left = rng.normal([-3.0, 0.0], 0.5, size=(n, 2))
    right = rng.normal([3.0, 1.0], 0.5, size=(n, 2))
    return np.vstack([left, right])


def test_single_component_matches_closed_form():
    data = np.random.default_rng(1).normal(size=(200, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 2.0, 0.5], [0.0, 0.0, 0.7]])
    fit = fit_gmm(data, 1, label_layout=TINY_LAYOUT)
    mixture = fit.mixture
    np.testing.assert_allclose(mixture.weights, [1.0])
    np.testing.assert_allclose(mixture.means[0], data.mean(axis=0), atol=1e-9)
    expected = np.cov(data, rowvar=False, bias=True) + 1e-6 * np.eye(3)
    np.testing.assert_allclose(mixture.covariances[0], expected, atol=1e-9)
    assert fit.converged


def test_two_gaussians_are_recovered():
    fit = fit_gmm(_two_clusters(), 2, seed=0, label_layout=TINY_LAYOUT)
    means = fit.mixture.means[np.argsort(fit.mixture.means[:, 0])]
    np.testing.assert_allclose(means, [[-3.0, 0.0], [3.0, 1.0]], atol=0.1)
    np.testing.assert_allclose(fit.mixture.weights, [0.5, 0.5], atol=0.01)


def test_log_likelihood_trace_is_monotone():
    for k in (2, 3, 4):
        fit = fit_gmm(_two_clusters(seed=k), k, seed=k, label_layout=TINY_LAYOUT)
        assert np.all(np.diff(fit.log_likelihood_trace) >= -1e-8)


def test_log_likelihood_matches_scipy():
    data = _two_clusters()
    mixture = fit_gmm(data, 1, label_layout=TINY_LAYOUT).mixture
    expected = multivariate_normal(mixture.means[0], mixture.covariances[0]).logpdf(data).mean()
    assert mixture.log_likelihood(data) == pytest.approx(expected, rel=1e-9)


def test_bic_prefers_the_true_component_count():
    best, scores = select_n_components(_two_clusters(), (1, 2), seed=0, label_layout=TINY_LAYOUT)
    assert set(scores) == {1, 2}
    assert best.mixture.n_components == 2
    with pytest.raises(MixtureFitError):
        select_n_components(_two_clusters(n=5), (2, 5), label_layout=TINY_LAYOUT)


def test_fit_rejects_degenerate_input():
    with pytest.raises(MixtureFitError):
        fit_gmm(np.ones((50, 2)), 2, label_layout=TINY_LAYOUT)
    with pytest.raises(MixtureFitError):
        fit_gmm(np.random.default_rng(0).normal(size=(15, 2)), 2, label_layout=TINY_LAYOUT)
    bad = _two_clusters()
    bad[3, 1] = np.nan
    with pytest.raises(MixtureFitError):
        fit_gmm(bad, 2, label_layout=TINY_LAYOUT)


def test_sampling_is_seeded_and_matches_moments():
    mixture = fit_gmm(_two_clusters(), 2, seed=0, label_layout=TINY_LAYOUT).mixture
    np.testing.assert_array_equal(sample_mixture(mixture, 100, 3), sample_mixture(mixture, 100, 3))
    samples = sample_mixture(mixture, 200_000, 4)
    expected_mean = mixture.weights @ mixture.means
    np.testing.assert_allclose(samples.mean(axis=0), expected_mean, atol=0.05)
    with pytest.raises(ValueError):
        sample_mixture(mixture, 0, 1)


def test_component_frequencies_follow_the_weights():
    weights = np.array([0.2, 0.5, 0.05, 0.25])
    means = np.column_stack([100.0 * np.arange(4), np.zeros(4)])
    chol = np.tile(0.01 * np.eye(2), (4, 1, 1))
    mixture = LatentMixture(weights, means, chol, label_layout=TINY_LAYOUT)
    n = 20_000
    components = np.rint(sample_mixture(mixture, n, 8)[:, 0] / 100.0).astype(int)
    counts = np.bincount(components, minlength=4)
    assert counts.sum() == n
    for count, weight in zip(counts, weights):
        assert binomtest(int(count), n, weight).pvalue > 1e-4


def test_label_tail_decoding_rules():
    label = LabelVector(True, False, True, "flat", "e")
    assert decode_sampled_labels(label.encode_onehot()) == label

    tail = np.zeros(LABEL_DIM)
    tail[0], tail[1], tail[2] = 0.5, 0.49, -1.0
    tail[3:8] = [0.4, 0.4, 0.1, 0.0, 0.0]
    tail[8:] = [0.0, 0.0, 0.9, 0.9, 0.0, 0.0, 0.0]
    decoded = decode_label_tails(tail[None, :])
    assert decoded.label(0) == LabelVector(True, False, False, "detached", "c")


def _toy_mixture(counts, total):
    dim = 2 + LABEL_DIM
    return LatentMixture(
        weights=np.ones(1),
        means=np.zeros((1, dim)),
        cholesky_factors=np.eye(dim)[None],
        population_counts=counts,
        total_households=total,
    )


def test_population_fraction_uses_household_counts():
    ev = LabelVector(True, False, False, "detached", "c")
    plain = LabelVector(False, False, False, "flat", "c")
    mixture = _toy_mixture({ev: 30, plain: 70}, 100)
    assert matching_households(mixture, LabelCondition(has_ev=True)) == 30
    assert population_fraction(mixture, LabelCondition(energy_rating="c")) == 1.0
    assert population_fraction(mixture, LabelCondition(property_type="flat", has_ev=True)) == 0.0
    assert mixture.latent_dim == 2
