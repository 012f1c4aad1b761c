from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
import pytest

from loadsynth.config import EvalConfig, MixtureConfig, Settings, TrainConfig
from loadsynth.services.artifact import ModelArtifact, save_artifact
from loadsynth.services.pipeline import PreparedData, TrainedPipeline, prepare_datasets, train_pipeline
from loadsynth.services.profile_store import Dataset, LabelVector, LoadProfile
from loadsynth.services.simdata import CohortSpec, generate_cohort


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def small_settings(**overrides) -> Settings:
    values = dict(
        SEED=3,
        DATABASE_URL="sqlite://",
        K_ANONYMITY=3,
        MIN_FRACTION=0.01,
        MIN_HOUSEHOLDS=3,
        HOLDOUT_FRACTION=0.2,
        API_TOKENS="",
        TRAIN=TrainConfig(
            epochs=25,
            batch_size=64,
            learning_rate=3e-3,
            latent_dim=4,
            encoder_hidden=(32, 16),
            decoder_hidden=(16, 32),
            patience=25,
        ),
        MIXTURE=MixtureConfig(n_components=3),
        EVAL=EvalConfig(n_synthetic=300, mmd_sample_size=100, n_permutations=49, pca_sample_size=100),
    )
    values.update(overrides)
    return Settings(_env_file=None, **values)


@pytest.fixture(scope="session")
def small_cohort() -> Dataset:
    return generate_cohort(CohortSpec(n_households=120, days_per_household=20, seed=7))


@dataclass
class SmallPipeline:
    settings: Settings
    prepared: PreparedData
    trained: TrainedPipeline
    artifact: ModelArtifact
    artifact_path: str


@pytest.fixture(scope="session")
def small_pipeline(small_cohort, tmp_path_factory) -> SmallPipeline:
    """The small cohort trained end to end and saved once per session."""
    settings = small_settings()
    prepared = prepare_datasets(small_cohort, settings)
    trained = train_pipeline(prepared.train, settings)
    path = str(tmp_path_factory.mktemp("artifacts") / "model.fday")
    artifact = save_artifact(trained.model, trained.mixture, path)
    return SmallPipeline(settings, prepared, trained, artifact, path)


@pytest.fixture
def make_dataset():
    """Builds a dataset from (household_id, label, n_days) triples with random readings."""

    def build(households, seed=0):
        rng = np.random.default_rng(seed)
        records = []
        for household_id, label, n_days in households:
            for offset in range(n_days):
                day = date(2022, 1, 3) + timedelta(days=offset)
                records.append((LoadProfile(household_id, day, rng.gamma(2.0, 0.2, size=48)), label))
        return Dataset.from_records(records)

    return build


@pytest.fixture
def label_a() -> LabelVector:
    return LabelVector(False, False, False, "terraced", "a")


@pytest.fixture
def label_b() -> LabelVector:
    return LabelVector(False, False, False, "terraced", "b")


@pytest.fixture
def settings_factory():
    return small_settings
