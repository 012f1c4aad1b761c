from pydantic import BaseModel, ConfigDict, Field, StrictBool, StrictInt
from typing import Any, Dict, List, Optional

from loadsynth.services.generator import MAX_COUNT
from loadsynth.services.profile_store import EnergyRating, LabelCondition, PropertyType


class ConditionSchema(BaseModel):
    model_config = ConfigDict(extra="forbid")

    has_ev: Optional[StrictBool] = None
    has_heat_pump: Optional[StrictBool] = None
    smart_tariff: Optional[StrictBool] = None
    property_type: Optional[PropertyType] = None
    energy_rating: Optional[EnergyRating] = None

    def to_condition(self) -> LabelCondition:
        return LabelCondition(**self.model_dump())


class GenerateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    condition: ConditionSchema = Field(default_factory=ConditionSchema)
    count: StrictInt = Field(..., ge=1, le=MAX_COUNT)
    seed: Optional[StrictInt] = Field(None, ge=0)


class ProfileLabels(BaseModel):
    has_ev: bool
    has_heat_pump: bool
    smart_tariff: bool
    property_type: str
    energy_rating: str


class DiagnosticsSchema(BaseModel):
    acceptance_rate: float
    attempts: int


class GenerateResponse(BaseModel):
    profiles: List[List[float]]
    labels: List[ProfileLabels]
    diagnostics: DiagnosticsSchema
    seed: int
    model_version: str


class GuardThresholds(BaseModel):
    min_fraction: float
    min_households: int


class MetadataResponse(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    label_schema: Dict[str, List[Any]] = Field(..., alias="schema")
    guards: GuardThresholds
    model_version: str


class ErrorResponse(BaseModel):
    error: str
    message: str
