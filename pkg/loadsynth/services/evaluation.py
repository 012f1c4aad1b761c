"""
Fidelity, utility and privacy reporting for a trained model and mixture.

Fidelity compares real and generated profiles through per-timestep quantile curves, a kernel
two-sample test and a PCA projection fitted on the real data. Utility is measured by training a
ridge forecaster on synthetic data and testing it on real households it never saw (TSTR).
"""
import json
import logging
import os
from dataclasses import dataclass
from datetime import date
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from loadsynth.config import EvalConfig, GuardConfig
from loadsynth.exceptions import BudgetExhaustedError, DatasetError, GuardRefusedError, ShapeMismatchError
from loadsynth.schemas.report import (
    AuditEntry,
    ConditionalMeans,
    EvalReport,
    GuardAudit,
    MmdSummary,
    PcaSummary,
    QuantileCurve,
    TstrSummary,
)
from loadsynth.services.cvae import CvaeModel, default_bandwidths, mmd_from_kernels, rbf_kernel_sum
from loadsynth.services.generator import MAX_COUNT, GenerationRequest, generate
from loadsynth.services.latent_gmm import LatentMixture
from loadsynth.services.profile_store import (
    N_PERIODS,
    Dataset,
    LabelCondition,
    LabelVector,
    NormalizationParams,
    encode_labels,
    is_weekend,
    k_anonymity_audit,
    write_csv,
)
from loadsynth.utils.file_utils import atomic_write_text

logger = logging.getLogger(__name__)

MIN_QUANTILE_PROFILES = 20
MIN_MMD_PROFILES = 50
MIN_PCA_PROFILES = 10
RIDGE_ALPHA = 1e-3


# --- fidelity ------------------------------------------------------------------------------------

def quantile_curves(profiles: np.ndarray, quantiles: Sequence[float]) -> np.ndarray:
    """One 48-vector per quantile, linear interpolation between order statistics."""
    x = np.asarray(profiles, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != N_PERIODS:
        raise ShapeMismatchError(f"expected profiles of shape (n, {N_PERIODS}), got {x.shape}")
    if len(x) < MIN_QUANTILE_PROFILES:
        raise DatasetError(f"quantile curves need at least {MIN_QUANTILE_PROFILES} profiles, got {len(x)}")
    return np.quantile(x, list(quantiles), axis=0)


def mean_relative_error(real_curve: np.ndarray, synthetic_curve: np.ndarray) -> float:
    real_curve = np.asarray(real_curve, dtype=np.float64)
    denominator = np.maximum(np.abs(real_curve), 1e-9)
    return float(np.mean(np.abs(np.asarray(synthetic_curve) - real_curve) / denominator))


@dataclass(frozen=True)
class MmdTestResult:
    statistic: float
    p_value: float
    n_permutations: int


def fidelity_mmd(
    real: np.ndarray,
    synthetic: np.ndarray,
    n_permutations: int = 199,
    seed: int = 0,
    normalization: Optional[NormalizationParams] = None,
    bandwidths: Optional[Sequence[float]] = None,
) -> MmdTestResult:
    """
    Unbiased MMD between the two sets with a permutation p-value

    The kernel matrix of the pooled sample is computed once; every permutation only re-indexes it.
    p = (1 + #{permuted statistic >= observed}) / (1 + n_permutations).
    """
    x = np.asarray(real, dtype=np.float64)
    y = np.asarray(synthetic, dtype=np.float64)
    if len(x) < MIN_MMD_PROFILES or len(y) < MIN_MMD_PROFILES:
        raise DatasetError(f"the MMD test needs at least {MIN_MMD_PROFILES} profiles per side")
    if x.shape[1:] != y.shape[1:]:
        raise ShapeMismatchError(f"real {x.shape} and synthetic {y.shape} differ in width")
    if n_permutations < 1:
        raise ValueError("n_permutations must be positive")
    if normalization is not None:
        x, y = normalization.normalize(x), normalization.normalize(y)
    bandwidths = tuple(bandwidths) if bandwidths is not None else default_bandwidths(x.shape[1])

    pooled = np.vstack([x, y])
    kernel = rbf_kernel_sum(pooled, pooled, bandwidths)
    m = len(x)

    def statistic(order: np.ndarray) -> float:
        a, b = order[:m], order[m:]
        return mmd_from_kernels(kernel[np.ix_(a, a)], kernel[np.ix_(b, b)], kernel[np.ix_(a, b)])

    observed = statistic(np.arange(len(pooled)))
    rng = np.random.default_rng(seed)
    exceed = sum(statistic(rng.permutation(len(pooled))) >= observed for _ in range(n_permutations))
    p_value = (1 + exceed) / (1 + n_permutations)
    logger.debug(f"MMD statistic {observed:.6f}, p={p_value:.4f}")
    return MmdTestResult(max(observed, 0.0), p_value, n_permutations)


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    real: np.ndarray
    synthetic: np.ndarray


def pca_project(real: np.ndarray, synthetic: np.ndarray, n_components: int = 2) -> PcaProjection:
    """
    Fits principal components on the real set only and projects both sets into that basis;
    each component is signed so its largest-magnitude coordinate is positive
    """
    x = np.asarray(real, dtype=np.float64)
    y = np.asarray(synthetic, dtype=np.float64).reshape(-1, x.shape[1])
    if len(x) + len(y) < MIN_PCA_PROFILES or len(x) < 2:
        raise DatasetError(f"PCA needs at least {MIN_PCA_PROFILES} profiles and two real ones")
    mean = x.mean(axis=0)
    eigenvalues, eigenvectors = scipy.linalg.eigh(np.cov(x, rowvar=False))
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    components = eigenvectors[:, order[:n_components]]
    pivots = np.argmax(np.abs(components), axis=0)
    components = components * np.sign(components[pivots, np.arange(components.shape[1])])
    total = eigenvalues.sum()
    ratio = eigenvalues[:n_components] / total if total > 0 else np.zeros(n_components)
    return PcaProjection(
        mean=mean,
        components=components,
        explained_variance_ratio=ratio,
        real=(x - mean) @ components,
        synthetic=(y - mean) @ components,
    )


# --- utility (TSTR) ------------------------------------------------------------------------------

def ridge_fit(features: np.ndarray, targets: np.ndarray, alpha: float = RIDGE_ALPHA) -> np.ndarray:
    """Closed-form ridge coefficients, (X'X + alpha I)^-1 X'Y."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    gram = x.T @ x + alpha * np.eye(x.shape[1])
    return scipy.linalg.solve(gram, x.T @ y, assume_a="pos")


@dataclass(frozen=True)
class TstrSet:
    onehot: np.ndarray
    weekend: np.ndarray
    readings: np.ndarray
    # empty for synthetic sets
    households: FrozenSet[str] = frozenset()

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "TstrSet":
        return cls(
            onehot=np.asarray(dataset.onehot, dtype=np.float64),
            weekend=np.array([is_weekend(d) for d in dataset.dates], dtype=bool),
            readings=np.asarray(dataset.readings, dtype=np.float64),
            households=frozenset(dataset.household_ids),
        )

    def __len__(self) -> int:
        return len(self.readings)

    def features(self) -> np.ndarray:
        return np.column_stack([self.onehot, self.weekend.astype(np.float64), np.ones(len(self))])


@dataclass(frozen=True)
class TstrResult:
    mae_synthetic_trained: float
    mae_real_trained: float
    ratio: float


def _forecast_mae(train: TstrSet, test: TstrSet, alpha: float) -> float:
    coefficients = ridge_fit(train.features(), train.readings, alpha)
    return float(np.mean(np.abs(test.features() @ coefficients - test.readings)))


def tstr(real_train: TstrSet, synthetic_train: TstrSet, real_test: TstrSet, alpha: float = RIDGE_ALPHA) -> TstrResult:
    if len(real_train) == 0 or len(synthetic_train) == 0 or len(real_test) == 0:
        raise DatasetError("TSTR needs non-empty real, synthetic and test sets")
    shared = real_train.households & real_test.households
    if shared:
        raise DatasetError(f"TSTR test households overlap the real training set: {sorted(shared)[:5]}")
    mae_real = _forecast_mae(real_train, real_test, alpha)
    mae_synthetic = _forecast_mae(synthetic_train, real_test, alpha)
    ratio = mae_synthetic / mae_real if mae_real > 0 else float("inf")
    logger.info(f"TSTR: MAE synthetic-trained {mae_synthetic:.4f}, real-trained {mae_real:.4f}, ratio {ratio:.3f}")
    return TstrResult(mae_synthetic, mae_real, ratio)


def noise_baseline(real_train: TstrSet, seed: int) -> TstrSet:
    """Same labels and day flags, readings replaced by shapeless noise with the real marginal mean and spread."""
    rng = np.random.default_rng(seed)
    readings = real_train.readings
    noise = rng.normal(readings.mean(), readings.std(), size=readings.shape)
    return TstrSet(real_train.onehot, real_train.weekend, np.maximum(noise, 0.0))


def mirror_training_set(
    model: CvaeModel,
    mixture: LatentMixture,
    reference: Dataset,
    guard: GuardConfig,
    seed: int,
) -> Tuple[TstrSet, int]:
    """
    Generates one synthetic profile per reference profile with the same full label and day flag

    Combinations refused by the guards or exhausting the attempt budget are skipped; their count
    is returned alongside the set.
    """
    flags = np.array([is_weekend(d) for d in reference.dates], dtype=bool)
    rows_by_label: Dict[LabelVector, List[int]] = {}
    for i, label in enumerate(reference.labels):
        rows_by_label.setdefault(label, []).append(i)

    rng = np.random.default_rng(seed)
    profiles, labels, weekend, skipped = [], [], [], 0
    for label in sorted(rows_by_label, key=LabelVector.sort_key):
        rows = rows_by_label[label]
        condition = LabelCondition(**label.as_dict())
        for start in range(0, len(rows), MAX_COUNT):
            chunk = rows[start:start + MAX_COUNT]
            request = GenerationRequest(condition, len(chunk), seed=int(rng.integers(2**63 - 1)))
            try:
                result = generate(model, mixture, request, guard)
            except (GuardRefusedError, BudgetExhaustedError) as e:
                logger.warning(f"Skipping a label combination in the synthetic training set: {e}")
                skipped += 1
                break
            profiles.append(result.profiles)
            labels.extend(result.realized_labels)
            weekend.append(flags[chunk])

    if not profiles:
        raise DatasetError("no label combination of the reference set could be generated")
    return TstrSet(encode_labels(labels), np.concatenate(weekend), np.vstack(profiles)), skipped


def split_periods(train: Dataset, test: Dataset) -> Tuple[Dataset, Dataset]:
    """
    Earlier half of the calendar for training, later half for testing

    Falls back to the full sets when either side of the cut would be empty.
    """
    days = sorted(set(train.dates) | set(test.dates))
    if len(days) >= 2:
        cutoff: date = days[len(days) // 2]
        earlier = train.subset(d < cutoff for d in train.dates)
        later = test.subset(d >= cutoff for d in test.dates)
        if len(earlier) and len(later):
            return earlier, later
    logger.warning("Cannot split the calendar into two periods; TSTR uses all dates on both sides")
    return train, test


# --- conditional curves --------------------------------------------------------------------------

def conditional_means(
    model: CvaeModel,
    mixture: LatentMixture,
    guard: GuardConfig,
    real: Dataset,
    n: int,
    seed: int,
) -> ConditionalMeans:
    """Mean curves for has_ev true and false, real and generated."""
    curves: Dict[str, Optional[List[float]]] = {}
    ev_flags = np.array([label.has_ev for label in real.labels], dtype=bool)
    for has_ev, name in ((True, "ev"), (False, "non_ev")):
        rows = real.readings[ev_flags == has_ev]
        curves[f"{name}_real"] = rows.mean(axis=0).tolist() if len(rows) else None
        try:
            result = generate(model, mixture, GenerationRequest(LabelCondition(has_ev=has_ev), n, seed), guard)
            curves[f"{name}_synthetic"] = result.profiles.mean(axis=0).tolist()
        except (GuardRefusedError, BudgetExhaustedError) as e:
            logger.warning(f"No generated curve for has_ev={has_ev}: {e}")
            curves[f"{name}_synthetic"] = None
    return ConditionalMeans(**curves)


# --- report --------------------------------------------------------------------------------------

def _subsample(x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= size:
        return x
    return x[np.sort(rng.choice(len(x), size=size, replace=False))]


def full_report(
    model: CvaeModel,
    mixture: LatentMixture,
    train: Dataset,
    holdout: Dataset,
    seed: int,
    eval_cfg: EvalConfig = EvalConfig(),
    guard: GuardConfig = GuardConfig(),
    k: int = 3,
    model_version: Optional[str] = None,
) -> EvalReport:
    rng = np.random.default_rng(seed)
    generation_seed, mmd_seed, sample_seed, mirror_seed, noise_seed, conditional_seed = (
        int(s) for s in rng.integers(0, 2**31 - 1, size=6)
    )
    logger.info(f"Evaluating on {len(holdout)} holdout profiles, {eval_cfg.n_synthetic} generated")

    generated = generate(model, mixture, GenerationRequest(LabelCondition(), eval_cfg.n_synthetic, generation_seed), guard)
    real, synthetic = holdout.readings, generated.profiles

    real_curves = quantile_curves(real, eval_cfg.quantiles)
    synthetic_curves = quantile_curves(synthetic, eval_cfg.quantiles)
    curves = [
        QuantileCurve(
            quantile=q,
            real=real_curves[i].tolist(),
            synthetic=synthetic_curves[i].tolist(),
            mean_relative_error=mean_relative_error(real_curves[i], synthetic_curves[i]),
        )
        for i, q in enumerate(eval_cfg.quantiles)
    ]

    sampler = np.random.default_rng(sample_seed)
    mmd_real = _subsample(real, eval_cfg.mmd_sample_size, sampler)
    mmd_synthetic = _subsample(synthetic, eval_cfg.mmd_sample_size, sampler)
    mmd = fidelity_mmd(mmd_real, mmd_synthetic, eval_cfg.n_permutations, mmd_seed, model.normalization)

    projection = pca_project(
        _subsample(real, eval_cfg.pca_sample_size, sampler),
        _subsample(synthetic, eval_cfg.pca_sample_size, sampler),
    )

    train_period, test_period = split_periods(train, holdout)
    real_train, real_test = TstrSet.from_dataset(train_period), TstrSet.from_dataset(test_period)
    synthetic_train, skipped = mirror_training_set(model, mixture, train_period, guard, mirror_seed)
    utility = tstr(real_train, synthetic_train, real_test)
    noise = tstr(real_train, noise_baseline(real_train, noise_seed), real_test)

    findings = k_anonymity_audit(train, k)
    report = EvalReport(
        model_version=model_version,
        seed=seed,
        n_real=len(holdout),
        n_synthetic=len(synthetic),
        quantile_curves=curves,
        mmd=MmdSummary(
            statistic=mmd.statistic,
            p_value=mmd.p_value,
            n_permutations=mmd.n_permutations,
            sample_size=min(len(mmd_real), len(mmd_synthetic)),
        ),
        pca=PcaSummary(
            explained_variance_ratio=projection.explained_variance_ratio.tolist(),
            real=projection.real.tolist(),
            synthetic=projection.synthetic.tolist(),
        ),
        tstr=TstrSummary(
            mae_synthetic_trained=utility.mae_synthetic_trained,
            mae_real_trained=utility.mae_real_trained,
            ratio=utility.ratio,
            noise_baseline_ratio=noise.ratio,
            skipped_combinations=skipped,
        ),
        conditional_means=conditional_means(model, mixture, guard, holdout, eval_cfg.n_synthetic, conditional_seed),
        guard_audit=GuardAudit(
            k=k,
            min_fraction=guard.min_fraction,
            min_households=guard.min_households,
            violations=[AuditEntry(labels=f.labels.as_dict(), households=f.households) for f in findings],
        ),
    )
    logger.info(
        f"Report: MMD p={mmd.p_value:.3f}, TSTR ratio {utility.ratio:.3f} (noise {noise.ratio:.3f})"
    )
    return report


def _quantile_column(q: float) -> str:
    return f"q{round(q * 100):02d}"


def write_report(report: EvalReport, directory: str) -> Dict[str, str]:
    """Writes report.json plus quantile_curves.csv and pca_coordinates.csv sidecars."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "report": os.path.join(directory, "report.json"),
        "quantile_curves": os.path.join(directory, "quantile_curves.csv"),
        "pca_coordinates": os.path.join(directory, "pca_coordinates.csv"),
    }
    document = json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True)
    atomic_write_text(paths["report"], document + "\n")

    columns = {"period": np.arange(1, N_PERIODS + 1)}
    for curve in report.quantile_curves:
        columns[f"{_quantile_column(curve.quantile)}_real"] = curve.real
        columns[f"{_quantile_column(curve.quantile)}_synthetic"] = curve.synthetic
    write_csv(pd.DataFrame(columns), paths["quantile_curves"])

    coordinates = [
        {"source": source, **{f"pc{j + 1}": value for j, value in enumerate(row)}}
        for source, rows in (("real", report.pca.real), ("synthetic", report.pca.synthetic))
        for row in rows
    ]
    write_csv(pd.DataFrame(coordinates), paths["pca_coordinates"])
    logger.info(f"Report written to {directory}")
    return paths
