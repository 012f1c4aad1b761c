"""
Simulated household cohorts with known ground-truth load shapes.

Every daily profile is a constant base load plus raised-cosine bumps:
  - morning peak over periods 14-18 and evening peak over periods 35-41 for every household;
  - heat pumps lift both peaks on cold-season days, more for poorly rated homes;
  - EVs add a contiguous overnight charging block on a random subset of days: periods 1-8
    for smart-tariff households, 45-48 then 1-4 otherwise, at a rate drawn per charging day.
Multiplicative lognormal noise with parameter noise_scale is applied last.

With the default mix, more than 10% of all profiles charge at every period of either block.
"""
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, Mapping

import numpy as np

from loadsynth.services.profile_store import (
    N_PERIODS,
    Dataset,
    EnergyRating,
    LabelVector,
    LoadProfile,
    PropertyType,
    is_cold_season,
    is_weekend,
)

logger = logging.getLogger(__name__)

PERIODS = np.arange(1, N_PERIODS + 1, dtype=float)

BASE_LOAD = 0.15
MORNING_CENTER, MORNING_HALF_WIDTH, MORNING_HEIGHT = 16.0, 3.0, 0.35
EVENING_CENTER, EVENING_HALF_WIDTH, EVENING_HEIGHT = 38.0, 4.0, 0.60
WEEKEND_BASE_FACTOR = 1.2
WEEKEND_MORNING_FACTOR = 1.3
TARIFF_EVENING_FACTOR = 0.9
HEAT_PUMP_MORNING, HEAT_PUMP_EVENING = 0.5, 0.4
EV_CHARGE_PROBABILITY = 0.6
EV_RATE_RANGE = (3.0, 7.0)
# chronological order, as 1-based periods
EV_WINDOW_EARLY = (1, 2, 3, 4, 5, 6, 7, 8)
SMART_CHARGE_BLOCK = EV_WINDOW_EARLY
STANDARD_CHARGE_BLOCK = (45, 46, 47, 48, 1, 2, 3, 4)

PROPERTY_PEAK_FACTOR: Dict[PropertyType, float] = {
    PropertyType.DETACHED: 1.3,
    PropertyType.SEMI_DETACHED: 1.1,
    PropertyType.TERRACED: 1.0,
    PropertyType.FLAT: 0.8,
    PropertyType.BUNGALOW: 0.9,
}
RATING_HEAT_FACTOR: Dict[EnergyRating, float] = {
    EnergyRating.A: 0.6,
    EnergyRating.B: 0.7,
    EnergyRating.C: 0.85,
    EnergyRating.D: 1.0,
    EnergyRating.E: 1.15,
    EnergyRating.F: 1.3,
    EnergyRating.G: 1.45,
}


def default_label_mix() -> Dict[LabelVector, float]:
    return {
        LabelVector(False, False, False, PropertyType.SEMI_DETACHED, EnergyRating.D): 0.17,
        LabelVector(False, False, True, PropertyType.TERRACED, EnergyRating.D): 0.12,
        LabelVector(True, False, True, PropertyType.DETACHED, EnergyRating.C): 0.15,
        LabelVector(False, False, False, PropertyType.FLAT, EnergyRating.C): 0.10,
        LabelVector(False, True, True, PropertyType.DETACHED, EnergyRating.B): 0.10,
        LabelVector(False, False, False, PropertyType.TERRACED, EnergyRating.E): 0.08,
        LabelVector(True, False, False, PropertyType.SEMI_DETACHED, EnergyRating.D): 0.20,
        LabelVector(True, True, True, PropertyType.DETACHED, EnergyRating.B): 0.08,
    }


@dataclass(frozen=True)
class CohortSpec:
    n_households: int = 600
    days_per_household: int = 60
    label_mix: Mapping[LabelVector, float] = field(default_factory=default_label_mix)
    noise_scale: float = 0.25
    seed: int = 0
    start_date: date = date(2021, 3, 1)

    def __post_init__(self):
        if self.n_households < 1 or self.days_per_household < 1:
            raise ValueError("n_households and days_per_household must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if not self.label_mix:
            raise ValueError("label_mix must not be empty")
        proportions = np.array(list(self.label_mix.values()), dtype=float)
        if np.any(proportions < 0) or abs(proportions.sum() - 1.0) > 1e-9:
            raise ValueError(f"label_mix proportions must be non-negative and sum to 1, got {proportions.sum()}")


def raised_cosine(center: float, half_width: float, height: float) -> np.ndarray:
    distance = np.abs(PERIODS - center)
    bump = 0.5 * height * (1.0 + np.cos(np.pi * distance / half_width))
    return np.where(distance < half_width, bump, 0.0)


def structural_profile(label: LabelVector, day: date) -> np.ndarray:
    """Noise-free, charging-free profile for one household-day."""
    weekend = is_weekend(day)
    peak = PROPERTY_PEAK_FACTOR[label.property_type]
    base = BASE_LOAD * (WEEKEND_BASE_FACTOR if weekend else 1.0)
    morning = MORNING_HEIGHT * peak * (WEEKEND_MORNING_FACTOR if weekend else 1.0)
    evening = EVENING_HEIGHT * peak * (TARIFF_EVENING_FACTOR if label.smart_tariff else 1.0)
    if label.has_heat_pump and is_cold_season(day):
        heat = RATING_HEAT_FACTOR[label.energy_rating]
        morning += HEAT_PUMP_MORNING * heat
        evening += HEAT_PUMP_EVENING * heat
    return (
        base
        + raised_cosine(MORNING_CENTER, MORNING_HALF_WIDTH, morning)
        + raised_cosine(EVENING_CENTER, EVENING_HALF_WIDTH, evening)
    )


def charging_block(label: LabelVector, rng: np.random.Generator) -> np.ndarray:
    periods = SMART_CHARGE_BLOCK if label.smart_tariff else STANDARD_CHARGE_BLOCK
    block = np.zeros(N_PERIODS)
    block[[p - 1 for p in periods]] = rng.uniform(*EV_RATE_RANGE)
    return block


def _allocate_labels(spec: CohortSpec, rng: np.random.Generator) -> list:
    labels = list(spec.label_mix.keys())
    proportions = np.array([spec.label_mix[l] for l in labels], dtype=float)
    exact = proportions * spec.n_households
    counts = np.floor(exact).astype(int)
    # largest remainder, ties to the earlier pattern
    remainder = spec.n_households - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    assigned = [label for label, count in zip(labels, counts) for _ in range(count)]
    return [assigned[i] for i in rng.permutation(len(assigned))]


def generate_household(
    index: int, label: LabelVector, spec: CohortSpec
) -> list:
    rng = np.random.default_rng([spec.seed, index])
    household_id = f"H{index:05d}"
    household_level = rng.lognormal(0.0, 0.5 * spec.noise_scale) if spec.noise_scale > 0 else 1.0
    records = []
    for offset in range(spec.days_per_household):
        day = spec.start_date + timedelta(days=offset)
        readings = structural_profile(label, day) * household_level
        if label.has_ev and rng.random() < EV_CHARGE_PROBABILITY:
            readings = readings + charging_block(label, rng)
        if spec.noise_scale > 0:
            sigma = spec.noise_scale
            readings = readings * rng.lognormal(-0.5 * sigma**2, sigma, size=N_PERIODS)
        records.append((LoadProfile(household_id, day, readings), label))
    return records


def generate_cohort(spec: CohortSpec) -> Dataset:
    """
    Deterministic simulated cohort; household i draws from the substream (seed, i)
    """
    # household substreams use indices below n_households, so this one never collides
    labels = _allocate_labels(spec, np.random.default_rng([spec.seed, spec.n_households]))
    records = []
    for index, label in enumerate(labels):
        records.extend(generate_household(index, label, spec))
    logger.info(
        f"Simulated {spec.n_households} households x {spec.days_per_household} days "
        f"(noise_scale={spec.noise_scale}, seed={spec.seed})"
    )
    return Dataset.from_records(records)
