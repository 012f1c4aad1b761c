"""
Labeled daily load profiles: data model, CSV ingestion, normalization and k-anonymity.
"""
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from loadsynth.exceptions import DatasetError, DatasetNotFoundError

logger = logging.getLogger(__name__)

N_PERIODS = 48
READING_COLUMNS = [f"r{i:02d}" for i in range(1, N_PERIODS + 1)]
LABEL_COLUMNS = ["has_ev", "has_heat_pump", "smart_tariff", "property_type", "energy_rating"]
CSV_COLUMNS = ["household_id", "date", *LABEL_COLUMNS, *READING_COLUMNS]
SCALE_FLOOR = 1e-6


class PropertyType(str, Enum):
    DETACHED = "detached"
    SEMI_DETACHED = "semi_detached"
    TERRACED = "terraced"
    FLAT = "flat"
    BUNGALOW = "bungalow"


class EnergyRating(str, Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"
    E = "e"
    F = "f"
    G = "g"


PROPERTY_TYPES: Tuple[PropertyType, ...] = tuple(PropertyType)
ENERGY_RATINGS: Tuple[EnergyRating, ...] = tuple(EnergyRating)
BOOLEAN_ATTRIBUTES = ("has_ev", "has_heat_pump", "smart_tariff")


@dataclass(frozen=True)
class LabelGroup:
    name: str
    start: int
    size: int
    categorical: bool


@dataclass(frozen=True)
class LabelLayout:
    """Position of each attribute inside the one-hot label vector."""

    groups: Tuple[LabelGroup, ...]

    @property
    def width(self) -> int:
        return sum(group.size for group in self.groups)

    def to_dict(self) -> List[dict]:
        return [
            {"name": g.name, "start": g.start, "size": g.size, "categorical": g.categorical}
            for g in self.groups
        ]

    @classmethod
    def from_dict(cls, groups: Sequence[Mapping]) -> "LabelLayout":
        return cls(tuple(
            LabelGroup(g["name"], int(g["start"]), int(g["size"]), bool(g["categorical"]))
            for g in groups
        ))


LABEL_LAYOUT = LabelLayout((
    LabelGroup("has_ev", 0, 1, False),
    LabelGroup("has_heat_pump", 1, 1, False),
    LabelGroup("smart_tariff", 2, 1, False),
    LabelGroup("property_type", 3, len(PROPERTY_TYPES), True),
    LabelGroup("energy_rating", 3 + len(PROPERTY_TYPES), len(ENERGY_RATINGS), True),
))
LABEL_DIM = LABEL_LAYOUT.width


@dataclass(frozen=True)
class LabelVector:
    has_ev: bool
    has_heat_pump: bool
    smart_tariff: bool
    property_type: PropertyType
    energy_rating: EnergyRating

    def __post_init__(self):
        # accept raw tokens, store enums
        object.__setattr__(self, "property_type", PropertyType(self.property_type))
        object.__setattr__(self, "energy_rating", EnergyRating(self.energy_rating))
        for name in BOOLEAN_ATTRIBUTES:
            object.__setattr__(self, name, bool(getattr(self, name)))

    def encode_onehot(self) -> np.ndarray:
        vector = np.zeros(LABEL_DIM)
        vector[0] = float(self.has_ev)
        vector[1] = float(self.has_heat_pump)
        vector[2] = float(self.smart_tariff)
        vector[3 + PROPERTY_TYPES.index(self.property_type)] = 1.0
        vector[3 + len(PROPERTY_TYPES) + ENERGY_RATINGS.index(self.energy_rating)] = 1.0
        return vector

    @classmethod
    def decode(cls, vector: Sequence[float]) -> "LabelVector":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (LABEL_DIM,):
            raise DatasetError(f"label vector must have {LABEL_DIM} entries, got {vector.shape}")
        n_prop = len(PROPERTY_TYPES)
        return cls(
            has_ev=bool(vector[0] >= 0.5),
            has_heat_pump=bool(vector[1] >= 0.5),
            smart_tariff=bool(vector[2] >= 0.5),
            property_type=PROPERTY_TYPES[int(np.argmax(vector[3:3 + n_prop]))],
            energy_rating=ENERGY_RATINGS[int(np.argmax(vector[3 + n_prop:]))],
        )

    def as_dict(self) -> Dict[str, object]:
        return {
            "has_ev": self.has_ev,
            "has_heat_pump": self.has_heat_pump,
            "smart_tariff": self.smart_tariff,
            "property_type": self.property_type.value,
            "energy_rating": self.energy_rating.value,
        }

    def sort_key(self) -> Tuple:
        return (
            self.has_ev, self.has_heat_pump, self.smart_tariff,
            PROPERTY_TYPES.index(self.property_type), ENERGY_RATINGS.index(self.energy_rating),
        )


def all_label_vectors() -> List[LabelVector]:
    return [
        LabelVector(ev, hp, tariff, prop, rating)
        for ev in (False, True)
        for hp in (False, True)
        for tariff in (False, True)
        for prop in PROPERTY_TYPES
        for rating in ENERGY_RATINGS
    ]


def encode_labels(labels: Sequence[LabelVector]) -> np.ndarray:
    if not labels:
        return np.zeros((0, LABEL_DIM))
    return np.stack([label.encode_onehot() for label in labels])


def label_schema() -> Dict[str, List[object]]:
    return {
        "has_ev": [False, True],
        "has_heat_pump": [False, True],
        "smart_tariff": [False, True],
        "property_type": [p.value for p in PROPERTY_TYPES],
        "energy_rating": [r.value for r in ENERGY_RATINGS],
    }


@dataclass(frozen=True)
class LabelCondition:
    """Partial label constraint; unset attributes match anything."""

    has_ev: Optional[bool] = None
    has_heat_pump: Optional[bool] = None
    smart_tariff: Optional[bool] = None
    property_type: Optional[PropertyType] = None
    energy_rating: Optional[EnergyRating] = None

    def __post_init__(self):
        if self.property_type is not None:
            object.__setattr__(self, "property_type", PropertyType(self.property_type))
        if self.energy_rating is not None:
            object.__setattr__(self, "energy_rating", EnergyRating(self.energy_rating))

    @property
    def is_empty(self) -> bool:
        return all(value is None for value in self.as_dict().values())

    def as_dict(self) -> Dict[str, object]:
        return {
            "has_ev": self.has_ev,
            "has_heat_pump": self.has_heat_pump,
            "smart_tariff": self.smart_tariff,
            "property_type": self.property_type.value if self.property_type else None,
            "energy_rating": self.energy_rating.value if self.energy_rating else None,
        }

    def constraints(self) -> Dict[str, object]:
        return {k: v for k, v in self.as_dict().items() if v is not None}

    def matches(self, label: LabelVector) -> bool:
        if self.has_ev is not None and label.has_ev != self.has_ev:
            return False
        if self.has_heat_pump is not None and label.has_heat_pump != self.has_heat_pump:
            return False
        if self.smart_tariff is not None and label.smart_tariff != self.smart_tariff:
            return False
        if self.property_type is not None and label.property_type != self.property_type:
            return False
        if self.energy_rating is not None and label.energy_rating != self.energy_rating:
            return False
        return True

    def mask(self, booleans: np.ndarray, property_index: np.ndarray, rating_index: np.ndarray) -> np.ndarray:
        """Vectorised match over decoded label arrays (booleans is [n, 3])."""
        keep = np.ones(len(property_index), dtype=bool)
        for column, name in enumerate(BOOLEAN_ATTRIBUTES):
            wanted = getattr(self, name)
            if wanted is not None:
                keep &= booleans[:, column] == wanted
        if self.property_type is not None:
            keep &= property_index == PROPERTY_TYPES.index(self.property_type)
        if self.energy_rating is not None:
            keep &= rating_index == ENERGY_RATINGS.index(self.energy_rating)
        return keep


@dataclass(frozen=True, eq=False)
class LoadProfile:
    household_id: str
    date: date
    readings: np.ndarray

    def __post_init__(self):
        readings = np.array(self.readings, dtype=float)
        if readings.shape != (N_PERIODS,):
            raise DatasetError(f"profile must have {N_PERIODS} readings, got {readings.size}")
        if not np.all(np.isfinite(readings)):
            raise DatasetError("non-finite reading")
        if np.any(readings < 0):
            raise DatasetError("negative reading")
        readings.setflags(write=False)
        object.__setattr__(self, "readings", readings)

    def __eq__(self, other):
        if not isinstance(other, LoadProfile):
            return NotImplemented
        return (
            self.household_id == other.household_id
            and self.date == other.date
            and np.array_equal(self.readings, other.readings)
        )

    def __hash__(self):
        return hash((self.household_id, self.date))


def count_households(records: Iterable[Tuple[LoadProfile, LabelVector]]) -> Dict[LabelVector, int]:
    households: Dict[LabelVector, set] = {}
    for profile, label in records:
        households.setdefault(label, set()).add(profile.household_id)
    return {label: len(ids) for label, ids in sorted(households.items(), key=lambda kv: kv[0].sort_key())}


@dataclass(frozen=True)
class Dataset:
    records: Tuple[Tuple[LoadProfile, LabelVector], ...]
    label_counts: Mapping[LabelVector, int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[Tuple[LoadProfile, LabelVector]]) -> "Dataset":
        records = tuple(records)
        return cls(records=records, label_counts=count_households(records))

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def household_ids(self) -> Tuple[str, ...]:
        return tuple(sorted({profile.household_id for profile, _ in self.records}))

    @property
    def n_households(self) -> int:
        return len(self.household_ids)

    @cached_property
    def readings(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, N_PERIODS))
        matrix = np.stack([profile.readings for profile, _ in self.records])
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def labels(self) -> Tuple[LabelVector, ...]:
        return tuple(label for _, label in self.records)

    @cached_property
    def onehot(self) -> np.ndarray:
        matrix = encode_labels(self.labels)
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def dates(self) -> Tuple[date, ...]:
        return tuple(profile.date for profile, _ in self.records)

    def subset(self, keep: Iterable[bool]) -> "Dataset":
        return Dataset.from_records(rec for rec, flag in zip(self.records, keep) if flag)


def _parse_bool(token: str, row: int, column: str) -> bool:
    if token == "1":
        return True
    if token == "0":
        return False
    raise DatasetError(f"expected 0/1, got {token!r}", row=row, column=column)


def ingest_csv(path: str) -> Dataset:
    """
    Reads a profile CSV, validating every row; row numbers are file line numbers (header is line 1)
    """
    if not os.path.exists(path):
        raise DatasetNotFoundError(f"data file not found: {path}")

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise DatasetError(f"malformed CSV: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetError("empty CSV file") from e

    df.columns = df.columns.str.strip()
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DatasetError(f"missing columns: {', '.join(missing)}")

    raw = df[READING_COLUMNS]
    values = raw.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    blank = (raw.isna() | (raw.apply(lambda col: col.str.strip()) == "")).to_numpy()
    bad = ~np.isfinite(values) | blank | (values < 0)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        row, column = i + 2, READING_COLUMNS[j]
        if blank[i, j]:
            raise DatasetError("missing reading (row must have 48 readings)", row=row, column=column)
        if not np.isfinite(values[i, j]):
            raise DatasetError(f"malformed reading {raw.iat[i, j]!r}", row=row, column=column)
        raise DatasetError(f"negative reading {values[i, j]}", row=row, column=column)

    records = []
    for i, rec in enumerate(df[["household_id", "date", *LABEL_COLUMNS]].itertuples(index=False)):
        row = i + 2
        if not rec.household_id.strip():
            raise DatasetError("empty household_id", row=row, column="household_id")
        try:
            day = date.fromisoformat(rec.date.strip())
        except ValueError:
            raise DatasetError(f"invalid ISO date {rec.date!r}", row=row, column="date")
        try:
            prop = PropertyType(rec.property_type.strip())
        except ValueError:
            raise DatasetError(f"unknown property_type {rec.property_type!r}", row=row, column="property_type")
        try:
            rating = EnergyRating(rec.energy_rating.strip())
        except ValueError:
            raise DatasetError(f"unknown energy_rating {rec.energy_rating!r}", row=row, column="energy_rating")
        label = LabelVector(
            has_ev=_parse_bool(rec.has_ev.strip(), row, "has_ev"),
            has_heat_pump=_parse_bool(rec.has_heat_pump.strip(), row, "has_heat_pump"),
            smart_tariff=_parse_bool(rec.smart_tariff.strip(), row, "smart_tariff"),
            property_type=prop,
            energy_rating=rating,
        )
        records.append((LoadProfile(rec.household_id.strip(), day, values[i]), label))

    logger.info(f"Ingested {len(records)} profiles from {path}")
    return Dataset.from_records(records)


def dataset_frame(
    readings: np.ndarray,
    labels: Sequence[LabelVector],
    household_ids: Sequence[str],
    dates: Sequence[date],
) -> pd.DataFrame:
    frame = pd.DataFrame({
        "household_id": list(household_ids),
        "date": [d.isoformat() for d in dates],
        "has_ev": [int(l.has_ev) for l in labels],
        "has_heat_pump": [int(l.has_heat_pump) for l in labels],
        "smart_tariff": [int(l.smart_tariff) for l in labels],
        "property_type": [l.property_type.value for l in labels],
        "energy_rating": [l.energy_rating.value for l in labels],
    })
    readings_frame = pd.DataFrame(np.asarray(readings, dtype=float).reshape(-1, N_PERIODS), columns=READING_COLUMNS)
    return pd.concat([frame, readings_frame], axis=1)


def write_csv(frame: pd.DataFrame, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def write_dataset_csv(dataset: Dataset, path: str) -> str:
    frame = dataset_frame(
        dataset.readings, dataset.labels,
        [p.household_id for p, _ in dataset.records], dataset.dates,
    )
    return write_csv(frame, path)


# --- normalization -------------------------------------------------------------------------------

class NormalizationScheme(str, Enum):
    PER_TIMESTEP_STANDARD = "per_timestep_standard"
    GLOBAL_LOG1P_STANDARD = "global_log1p_standard"


@dataclass(frozen=True)
class NormalizationParams:
    location: np.ndarray
    scale: np.ndarray
    scheme: NormalizationScheme

    def __post_init__(self):
        location = np.array(self.location, dtype=float)
        scale = np.array(self.scale, dtype=float)
        if location.shape != (N_PERIODS,) or scale.shape != (N_PERIODS,):
            raise DatasetError("normalization needs 48 location and 48 scale values")
        if not np.all(scale > 0):
            raise DatasetError("normalization scale values must be strictly positive")
        location.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "location", location)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "scheme", NormalizationScheme(self.scheme))

    def normalize(self, readings: np.ndarray) -> np.ndarray:
        x = np.asarray(readings, dtype=float)
        if self.scheme is NormalizationScheme.GLOBAL_LOG1P_STANDARD:
            x = np.log1p(x)
        return (x - self.location) / self.scale

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        x = np.asarray(values, dtype=float) * self.scale + self.location
        if self.scheme is NormalizationScheme.GLOBAL_LOG1P_STANDARD:
            x = np.expm1(x)
        return x


def fit_normalization(
    dataset: Dataset,
    scheme: NormalizationScheme = NormalizationScheme.GLOBAL_LOG1P_STANDARD,
) -> NormalizationParams:
    if len(dataset) == 0:
        raise DatasetError("cannot fit normalization on an empty dataset")
    scheme = NormalizationScheme(scheme)
    x = dataset.readings
    if scheme is NormalizationScheme.GLOBAL_LOG1P_STANDARD:
        x = np.log1p(x)
    location = x.mean(axis=0)
    std = x.std(axis=0)
    floored = std < SCALE_FLOOR
    if floored.any():
        logger.warning(f"Zero-variance timesteps floored: {[int(i) + 1 for i in np.flatnonzero(floored)]}")
    return NormalizationParams(location=location, scale=np.maximum(std, SCALE_FLOOR), scheme=scheme)


# --- privacy -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditFinding:
    labels: LabelVector
    households: int


class AnonymityPolicy(str, Enum):
    DROP = "drop"
    COARSEN_ENERGY_RATING = "coarsen_energy_rating"


RATING_GROUPS: Tuple[Tuple[EnergyRating, ...], ...] = (
    (EnergyRating.A, EnergyRating.B),
    (EnergyRating.C, EnergyRating.D),
    (EnergyRating.E, EnergyRating.F, EnergyRating.G),
)


def _rating_group(rating: EnergyRating) -> Tuple[EnergyRating, ...]:
    return next(group for group in RATING_GROUPS if rating in group)


def k_anonymity_audit(dataset: Dataset, k: int) -> List[AuditFinding]:
    """
    Lists every present label combination held by fewer than k distinct households
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    return [
        AuditFinding(labels, count)
        for labels, count in dataset.label_counts.items()
        if 0 < count < k
    ]


def _drop_labels(dataset: Dataset, offenders: set) -> Dataset:
    return Dataset.from_records(rec for rec in dataset.records if rec[1] not in offenders)


def enforce_k_anonymity(dataset: Dataset, k: int, policy: AnonymityPolicy = AnonymityPolicy.DROP) -> Dataset:
    """
    Returns a dataset whose audit at level k is empty

    The coarsening policy relabels every household of an offending combination's rating group
    (A/B, C/D, E/F/G with the other attributes equal) to the group's first rating, then drops
    whatever still falls below k.
    """
    policy = AnonymityPolicy(policy)
    findings = k_anonymity_audit(dataset, k)
    if not findings:
        return dataset

    if policy is AnonymityPolicy.COARSEN_ENERGY_RATING:
        merge_keys = {
            (f.labels.has_ev, f.labels.has_heat_pump, f.labels.smart_tariff,
             f.labels.property_type, _rating_group(f.labels.energy_rating))
            for f in findings
        }
        records = []
        for profile, label in dataset.records:
            group = _rating_group(label.energy_rating)
            key = (label.has_ev, label.has_heat_pump, label.smart_tariff, label.property_type, group)
            if key in merge_keys and label.energy_rating != group[0]:
                label = LabelVector(
                    label.has_ev, label.has_heat_pump, label.smart_tariff, label.property_type, group[0]
                )
            records.append((profile, label))
        dataset = Dataset.from_records(records)
        logger.info(f"Coarsened energy rating for {len(merge_keys)} label groups")
        findings = k_anonymity_audit(dataset, k)

    if findings:
        offenders = {f.labels for f in findings}
        before = dataset.n_households
        dataset = _drop_labels(dataset, offenders)
        logger.info(
            f"Dropped {len(offenders)} label combinations below k={k} "
            f"({before - dataset.n_households} households)"
        )
    return dataset


def split_holdout(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Splits by household; holdout size is rounded up to at least one household
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    households = dataset.household_ids
    n = len(households)
    if n < 2:
        raise DatasetError("need at least two households to split")
    n_holdout = max(1, math.ceil(fraction * n - 1e-9))
    if n_holdout >= n:
        raise DatasetError(f"holdout fraction {fraction} leaves no training households")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    holdout_ids = {households[i] for i in order[:n_holdout]}
    in_holdout = [profile.household_id in holdout_ids for profile, _ in dataset.records]
    train = dataset.subset(not flag for flag in in_holdout)
    holdout = dataset.subset(in_holdout)
    return train, holdout


def is_weekend(day: date) -> bool:
    return day.weekday() >= 5


COLD_MONTHS = frozenset({1, 2, 3, 10, 11, 12})


def is_cold_season(day: date) -> bool:
    return day.month in COLD_MONTHS


def season_of(day: date) -> str:
    return "cold" if is_cold_season(day) else "warm"
