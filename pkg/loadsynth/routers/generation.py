import json
import logging

from fastapi import APIRouter, Depends, Request
from sqlalchemy.orm import Session

from loadsynth.database import get_db
from loadsynth.exceptions import BudgetExhaustedError, GuardRefusedError
from loadsynth.models.generation_log import GenerationLog
from loadsynth.schemas.generation import (
    DiagnosticsSchema,
    ErrorResponse,
    GenerateRequest,
    GenerateResponse,
    ProfileLabels,
)
from loadsynth.services.generator import GenerationRequest, generate
from loadsynth.utils.security import require_token

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/v1", tags=["Generation"], dependencies=[Depends(require_token)])


def _record(db: Session, entry: GenerationLog) -> None:
    db.add(entry)
    db.commit()


@router.post(
    "/generate",
    response_model=GenerateResponse,
    responses={
        401: {"model": ErrorResponse},
        403: {"model": ErrorResponse, "description": "population_guard"},
        422: {"model": ErrorResponse, "description": "invalid_request or acceptance_rate_too_low"},
    },
)
def generate_profiles(body: GenerateRequest, request: Request, db: Session = Depends(get_db)):
    """
    Generates daily profiles matching the condition; seeds come from the service counter unless given
    """
    state = request.app.state
    artifact = state.artifact
    seed = body.seed if body.seed is not None else state.seeds.next()
    condition = body.condition.to_condition()
    entry = GenerationLog(
        model_version=artifact.model_version,
        seed=str(seed),
        condition=json.dumps(condition.constraints(), sort_keys=True),
        requested_count=body.count,
        outcome="ok",
    )

    try:
        result = generate(artifact.model, artifact.mixture, GenerationRequest(condition, body.count, seed), state.guard)
    except GuardRefusedError as e:
        entry.outcome = "population_guard"
        _record(db, entry)
        logger.info(f"POST /v1/generate refused ({e.rule})")
        raise
    except BudgetExhaustedError as e:
        entry.outcome = "acceptance_rate_too_low"
        entry.acceptance_rate = e.acceptance_rate
        _record(db, entry)
        logger.info("POST /v1/generate exhausted its attempt budget")
        raise

    entry.acceptance_rate = result.diagnostics.acceptance_rate
    _record(db, entry)
    logger.info(f"POST /v1/generate served {body.count} profiles")
    return GenerateResponse(
        profiles=result.profiles.tolist(),
        labels=[ProfileLabels(**label.as_dict()) for label in result.realized_labels],
        diagnostics=DiagnosticsSchema(
            acceptance_rate=result.diagnostics.acceptance_rate,
            attempts=result.diagnostics.attempts,
        ),
        seed=seed,
        model_version=artifact.model_version,
    )
