"""
Full-covariance Gaussian mixture over latent codes with the one-hot labels appended.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from loadsynth.exceptions import MixtureFitError
from loadsynth.services.nn_core import SeedLike, as_generator
from loadsynth.services.profile_store import (
    ENERGY_RATINGS,
    LABEL_LAYOUT,
    PROPERTY_TYPES,
    LabelCondition,
    LabelLayout,
    LabelVector,
)

logger = logging.getLogger(__name__)

REG_COVAR = 1e-6
MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class LatentMixture:
    weights: np.ndarray
    means: np.ndarray
    cholesky_factors: np.ndarray
    label_layout: LabelLayout = LABEL_LAYOUT
    population_counts: Mapping[LabelVector, int] = field(default_factory=dict)
    total_households: int = 1

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        chol = np.asarray(self.cholesky_factors, dtype=np.float64)
        k, d = means.shape
        if weights.shape != (k,) or chol.shape != (k, d, d):
            raise MixtureFitError(f"inconsistent mixture shapes {weights.shape}, {means.shape}, {chol.shape}")
        if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
            raise MixtureFitError("mixture weights must lie on the simplex")
        if d <= self.label_layout.width:
            raise MixtureFitError("mixture dimension must exceed the label width")
        if self.total_households < 1:
            raise MixtureFitError("total_households must be positive")
        for array in (weights, means, chol):
            array.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "cholesky_factors", chol)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.dim - self.label_layout.width

    @property
    def covariances(self) -> np.ndarray:
        return np.einsum("kij,klj->kil", self.cholesky_factors, self.cholesky_factors)

    def log_likelihood(self, data: np.ndarray) -> float:
        """Mean log-density of the rows of data."""
        return float(np.mean(logsumexp(_weighted_log_prob(data, self.weights, self.means, self.cholesky_factors), axis=1)))

    def n_parameters(self) -> int:
        k, d = self.n_components, self.dim
        return (k - 1) + k * d + k * d * (d + 1) // 2

    def bic(self, data: np.ndarray) -> float:
        n = len(data)
        return -2.0 * n * self.log_likelihood(data) + self.n_parameters() * np.log(n)


@dataclass(frozen=True)
class MixtureFit:
    mixture: LatentMixture
    log_likelihood_trace: Tuple[float, ...]
    converged: bool


def _log_gaussian(data: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    d = data.shape[1]
    solved = scipy.linalg.solve_triangular(chol, (data - mean).T, lower=True)
    log_det = np.sum(np.log(np.diag(chol)))
    return -0.5 * d * np.log(2.0 * np.pi) - log_det - 0.5 * np.sum(solved ** 2, axis=0)


def _weighted_log_prob(data, weights, means, chols) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    columns = [
        _log_gaussian(data, means[k], chols[k]) + np.log(weights[k]) if weights[k] > 0
        else np.full(len(data), -np.inf)
        for k in range(len(weights))
    ]
    return np.column_stack(columns)


def _m_step(data: np.ndarray, resp: np.ndarray, reg: float):
    n, d = data.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ data) / nk[:, None]
    chols = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = data - means[k]
        cov = (resp[:, k][:, None] * diff).T @ diff / nk[k]
        cov = 0.5 * (cov + cov.T) + reg * np.eye(d)
        chols[k] = scipy.linalg.cholesky(cov, lower=True)
    return weights, means, chols


def fit_gmm(
    data: np.ndarray,
    n_components: int,
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-6,
    reg_covar: float = REG_COVAR,
    label_layout: LabelLayout = LABEL_LAYOUT,
    population_counts: Optional[Mapping[LabelVector, int]] = None,
    total_households: Optional[int] = None,
) -> MixtureFit:
    """
    EM with k-means++ initial means and the pooled covariance as every component's starting
    covariance; stops when the mean log-likelihood improves by less than tol (relative) or after
    max_iters iterations
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if n_components < 1:
        raise MixtureFitError("n_components must be positive")
    if n < 10 * n_components:
        raise MixtureFitError(f"need at least {10 * n_components} rows for {n_components} components, got {n}")
    if not np.all(np.isfinite(data)):
        raise MixtureFitError("latent matrix contains non-finite values")
    if np.all(data == data[0]):
        raise MixtureFitError("all points are identical; the mixture is degenerate")

    if n_components == 1:
        weights, means, chols = _m_step(data, np.ones((n, 1)), reg_covar)
        weights = np.ones(1)
    else:
        centers, _ = kmeans_plusplus(data, n_components, random_state=seed)
        pooled = np.cov(data, rowvar=False, bias=True) + reg_covar * np.eye(d)
        chols = np.repeat(scipy.linalg.cholesky(pooled, lower=True)[None], n_components, axis=0)
        weights = np.full(n_components, 1.0 / n_components)
        means = centers.astype(np.float64)

    trace: List[float] = []
    converged = False
    previous = (weights, means, chols)
    for iteration in range(max_iters):
        log_prob = _weighted_log_prob(data, weights, means, chols)
        log_norm = logsumexp(log_prob, axis=1)
        ll = float(np.mean(log_norm))
        if trace and ll < trace[-1] - MONOTONE_SLACK:
            # regularised M-step overshot; keep the last accepted parameters
            logger.warning(f"EM log-likelihood fell at iteration {iteration}; keeping previous parameters")
            weights, means, chols = previous
            converged = True
            break
        trace.append(ll)
        logger.debug(f"EM iteration {iteration}: mean log-likelihood {ll:.6f}")
        if len(trace) > 1 and trace[-1] - trace[-2] < tol * max(1.0, abs(trace[-2])):
            converged = True
            break
        resp = np.exp(log_prob - log_norm[:, None])
        previous = (weights, means, chols)
        weights, means, chols = _m_step(data, resp, reg_covar)

    logger.info(
        f"GMM K={n_components}: {len(trace)} iterations, mean log-likelihood {trace[-1]:.4f}"
        f"{'' if converged else ' (max_iters reached)'}"
    )
    counts = dict(population_counts or {})
    mixture = LatentMixture(
        weights=weights / weights.sum(),
        means=means,
        cholesky_factors=chols,
        label_layout=label_layout,
        population_counts=counts,
        total_households=total_households if total_households is not None else max(1, sum(counts.values())),
    )
    return MixtureFit(mixture, tuple(trace), converged)


def select_n_components(
    data: np.ndarray, candidates: Sequence[int], seed: int = 0, **fit_kwargs
) -> Tuple[MixtureFit, Dict[int, float]]:
    """Fits every candidate K that the data supports and keeps the lowest BIC."""
    usable = [k for k in candidates if len(data) >= 10 * k]
    if not usable:
        raise MixtureFitError(f"no candidate in {list(candidates)} fits {len(data)} rows")
    scores: Dict[int, float] = {}
    best: Optional[MixtureFit] = None
    for k in usable:
        fit = fit_gmm(data, k, seed=seed, **fit_kwargs)
        scores[k] = fit.mixture.bic(data)
        if best is None or scores[k] < scores[best.mixture.n_components]:
            best = fit
    logger.info(f"BIC by K: {', '.join(f'{k}={v:.1f}' for k, v in scores.items())}; chose K={best.mixture.n_components}")
    return best, scores


def sample_mixture(g: LatentMixture, n: int, seed: SeedLike) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = as_generator(seed)
    components = rng.choice(g.n_components, size=n, p=g.weights)
    noise = rng.standard_normal((n, g.dim))
    samples = np.empty((n, g.dim))
    for k in range(g.n_components):
        rows = components == k
        if rows.any():
            samples[rows] = g.means[k] + noise[rows] @ g.cholesky_factors[k].T
    return samples


# --- label tails ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodedLabels:
    booleans: np.ndarray
    property_index: np.ndarray
    rating_index: np.ndarray

    def __len__(self) -> int:
        return len(self.property_index)

    def label(self, i: int) -> LabelVector:
        return LabelVector(
            has_ev=bool(self.booleans[i, 0]),
            has_heat_pump=bool(self.booleans[i, 1]),
            smart_tariff=bool(self.booleans[i, 2]),
            property_type=PROPERTY_TYPES[int(self.property_index[i])],
            energy_rating=ENERGY_RATINGS[int(self.rating_index[i])],
        )


def decode_label_tails(tails: np.ndarray, layout: LabelLayout = LABEL_LAYOUT) -> DecodedLabels:
    """Booleans threshold at 0.5 (inclusive); categorical groups take the argmax, ties to the lower index."""
    tails = np.atleast_2d(np.asarray(tails, dtype=np.float64))
    if tails.shape[1] != layout.width:
        raise MixtureFitError(f"label tail must have {layout.width} entries, got {tails.shape[1]}")
    groups = {g.name: g for g in layout.groups}
    booleans = np.column_stack([
        tails[:, groups[name].start] >= 0.5 for name in ("has_ev", "has_heat_pump", "smart_tariff")
    ])
    prop, rating = groups["property_type"], groups["energy_rating"]
    return DecodedLabels(
        booleans=booleans,
        property_index=np.argmax(tails[:, prop.start:prop.start + prop.size], axis=1),
        rating_index=np.argmax(tails[:, rating.start:rating.start + rating.size], axis=1),
    )


def decode_sampled_labels(row_tail: np.ndarray, layout: LabelLayout = LABEL_LAYOUT) -> LabelVector:
    return decode_label_tails(np.asarray(row_tail)[None, :], layout).label(0)


def matching_households(g: LatentMixture, condition: LabelCondition) -> int:
    return sum(count for label, count in g.population_counts.items() if condition.matches(label))


def population_fraction(g: LatentMixture, condition: LabelCondition) -> float:
    return min(1.0, matching_households(g, condition) / g.total_households)
