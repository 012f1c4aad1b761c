"""
Train and evaluate orchestration shared by the CLI and the tests.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from loadsynth.config import Settings
from loadsynth.schemas.report import EvalReport
from loadsynth.services.artifact import ModelArtifact, load_artifact, save_artifact
from loadsynth.services.cvae import CvaeModel, TrainingResult, encode_latents
from loadsynth.services.cvae import train as train_cvae
from loadsynth.services.evaluation import full_report, write_report
from loadsynth.services.latent_gmm import LatentMixture, MixtureFit, fit_gmm, select_n_components
from loadsynth.services.profile_store import (
    AnonymityPolicy,
    Dataset,
    enforce_k_anonymity,
    fit_normalization,
    ingest_csv,
    k_anonymity_audit,
    split_holdout,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreparedData:
    train: Dataset
    holdout: Dataset


@dataclass
class TrainedPipeline:
    model: CvaeModel
    mixture: LatentMixture
    training: TrainingResult
    mixture_fit: MixtureFit


def prepare_datasets(dataset: Dataset, settings: Settings) -> PreparedData:
    """
    Household split first, then k-anonymity on the training side; the holdout never reaches the model
    """
    train, holdout = split_holdout(dataset, settings.HOLDOUT_FRACTION, settings.SEED)
    train = enforce_k_anonymity(train, settings.K_ANONYMITY, AnonymityPolicy(settings.K_ANONYMITY_POLICY))
    assert not k_anonymity_audit(train, settings.K_ANONYMITY)
    logger.info(
        f"Prepared {train.n_households} training and {holdout.n_households} holdout households "
        f"({len(train)} / {len(holdout)} profiles)"
    )
    return PreparedData(train, holdout)


def load_prepared(settings: Settings) -> PreparedData:
    return prepare_datasets(ingest_csv(settings.DATA_PATH), settings)


def fit_mixture(model: CvaeModel, train: Dataset, settings: Settings) -> MixtureFit:
    """Encodes the training set (one posterior draw per profile), appends one-hot labels, fits the mixture."""
    latents = encode_latents(model, model.normalization.normalize(train.readings), train.onehot, settings.SEED)
    data = np.hstack([latents, train.onehot])
    cfg = settings.MIXTURE
    kwargs = dict(
        max_iters=cfg.max_iters,
        tol=cfg.tol,
        reg_covar=cfg.reg_covar,
        population_counts=train.label_counts,
        total_households=train.n_households,
    )
    if cfg.select_by_bic:
        return select_n_components(data, cfg.candidates, seed=settings.SEED, **kwargs)[0]
    return fit_gmm(data, cfg.n_components, seed=settings.SEED, **kwargs)


def train_pipeline(train: Dataset, settings: Settings) -> TrainedPipeline:
    normalization = fit_normalization(train)
    cfg = settings.TRAIN.model_copy(update={"seed": settings.SEED})
    training = train_cvae(train, cfg, normalization)
    mixture_fit = fit_mixture(training.model, train, settings)
    return TrainedPipeline(training.model, mixture_fit.mixture, training, mixture_fit)


def train_and_save(settings: Settings) -> ModelArtifact:
    prepared = load_prepared(settings)
    trained = train_pipeline(prepared.train, settings)
    return save_artifact(trained.model, trained.mixture, settings.MODEL_PATH)


def evaluate_pipeline(
    settings: Settings,
    artifact: Optional[ModelArtifact] = None,
    prepared: Optional[PreparedData] = None,
) -> Tuple[EvalReport, Dict[str, str]]:
    artifact = artifact or load_artifact(settings.MODEL_PATH)
    prepared = prepared or load_prepared(settings)
    report = full_report(
        artifact.model,
        artifact.mixture,
        prepared.train,
        prepared.holdout,
        seed=settings.SEED,
        eval_cfg=settings.EVAL,
        guard=settings.guard,
        k=settings.K_ANONYMITY,
        model_version=artifact.model_version,
    )
    return report, write_report(report, settings.REPORTS_DIR)
