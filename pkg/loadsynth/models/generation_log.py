from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Float, Integer, String, Text

from loadsynth.database import Base


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class GenerationLog(Base):
    """One row per generation request served over HTTP; never stores household counts."""

    __tablename__ = "generation_log"

    id = Column(Integer, primary_key=True, index=True)
    created_at = Column(DateTime, default=_utcnow)
    model_version = Column(String(64), nullable=False)
    seed = Column(String(32), nullable=False)  # 64-bit seeds overflow SQLite INTEGER
    condition = Column(Text, nullable=False)  # JSON of the requested constraints
    requested_count = Column(Integer, nullable=False)
    outcome = Column(String(50), nullable=False)  # ok, population_guard, acceptance_rate_too_low
    acceptance_rate = Column(Float, nullable=True)
