"""
Conditional generation: rejection sampling from the latent mixture, decoding with the
model's observation noise, denormalization.
"""
import logging
import threading
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from loadsynth.config import MAX_GENERATION_COUNT, GuardConfig
from loadsynth.exceptions import (
    BudgetExhaustedError,
    GuardRefusedError,
    InvalidRequestError,
    LayoutMismatchError,
)
from loadsynth.services.cvae import CvaeModel, decode
from loadsynth.services.latent_gmm import (
    LatentMixture,
    decode_label_tails,
    matching_households,
    population_fraction,
    sample_mixture,
)
from loadsynth.services.profile_store import N_PERIODS, LabelCondition, LabelVector, encode_labels

logger = logging.getLogger(__name__)

MAX_COUNT = MAX_GENERATION_COUNT
ATTEMPTS_PER_PROFILE = 1000
MIN_DRAW = 256


@dataclass(frozen=True)
class GenerationRequest:
    condition: LabelCondition
    count: int
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.count, (int, np.integer)) or isinstance(self.count, bool):
            raise InvalidRequestError("count must be an integer")
        if not 1 <= self.count <= MAX_COUNT:
            raise InvalidRequestError(f"count must be between 1 and {MAX_COUNT}")
        if not isinstance(self.condition, LabelCondition):
            raise InvalidRequestError("condition must be a LabelCondition")


@dataclass(frozen=True)
class GenerationDiagnostics:
    attempts: int
    acceptance_rate: float
    population_fraction: float


@dataclass(frozen=True)
class GenerationResult:
    profiles: np.ndarray
    realized_labels: List[LabelVector]
    diagnostics: GenerationDiagnostics


@dataclass(frozen=True)
class GuardDecision:
    passed: bool
    rule: Optional[str] = None
    reason: Optional[str] = None


def check_guards(mixture: LatentMixture, condition: LabelCondition, guard: GuardConfig) -> GuardDecision:
    """
    Refuses conditions whose matching households are too few or too small a share of training
    """
    if population_fraction(mixture, condition) < guard.min_fraction:
        return GuardDecision(False, "min_fraction", "condition matches too small a share of the training households")
    if matching_households(mixture, condition) < guard.min_households:
        return GuardDecision(False, "min_households", "condition matches too few training households")
    return GuardDecision(True)


def generate(
    model: CvaeModel,
    mixture: LatentMixture,
    req: GenerationRequest,
    guard: GuardConfig,
) -> GenerationResult:
    if mixture.latent_dim != model.latent_dim or mixture.label_layout.width != model.label_dim:
        raise LayoutMismatchError(
            f"mixture dimension {mixture.dim} does not match latent {model.latent_dim} + labels {model.label_dim}"
        )
    decision = check_guards(mixture, req.condition, guard)
    if not decision.passed:
        logger.info(f"Generation refused by guard {decision.rule}")
        raise GuardRefusedError(decision.rule, decision.reason)

    rng = np.random.default_rng(req.seed)
    budget = ATTEMPTS_PER_PROFILE * req.count
    accepted_rows: List[np.ndarray] = []
    accepted_labels: List[LabelVector] = []
    attempts = 0
    while len(accepted_labels) < req.count:
        if attempts >= budget:
            raise BudgetExhaustedError(len(accepted_labels), attempts)
        remaining = req.count - len(accepted_labels)
        draw = min(max(MIN_DRAW, 2 * remaining), budget - attempts)
        samples = sample_mixture(mixture, draw, rng)
        decoded = decode_label_tails(samples[:, mixture.latent_dim:], mixture.label_layout)
        keep = np.flatnonzero(req.condition.mask(decoded.booleans, decoded.property_index, decoded.rating_index))
        if len(keep) >= remaining:
            keep = keep[:remaining]
            # rows after the last accepted one were never needed
            attempts += int(keep[-1]) + 1
        else:
            attempts += draw
        accepted_rows.append(samples[keep, :mixture.latent_dim])
        accepted_labels.extend(decoded.label(int(i)) for i in keep)

    z = np.vstack(accepted_rows)
    y = encode_labels(accepted_labels)
    normalized = decode(model, z, y) + rng.standard_normal((req.count, N_PERIODS)) * model.output_noise
    profiles = np.maximum(model.normalization.denormalize(normalized), 0.0)
    assert profiles.shape == (req.count, N_PERIODS)

    diagnostics = GenerationDiagnostics(
        attempts=attempts,
        acceptance_rate=req.count / attempts,
        population_fraction=population_fraction(mixture, req.condition),
    )
    logger.debug(f"Generated {req.count} profiles, acceptance rate {diagnostics.acceptance_rate:.3f}")
    return GenerationResult(profiles, accepted_labels, diagnostics)


class SeedCounter:
    """Per-request seeds derived from a service seed and a monotonically increasing counter."""

    def __init__(self, service_seed: int):
        self.service_seed = service_seed
        self._counter = 0
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            self._counter += 1
            counter = self._counter
        return int(np.random.SeedSequence([self.service_seed, counter]).generate_state(1, np.uint64)[0])
