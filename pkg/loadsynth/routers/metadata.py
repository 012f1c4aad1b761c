from fastapi import APIRouter, Depends, Request

from loadsynth.schemas.generation import ErrorResponse, GuardThresholds, MetadataResponse
from loadsynth.services.profile_store import label_schema
from loadsynth.utils.security import require_token

router = APIRouter(prefix="/v1", tags=["Metadata"], dependencies=[Depends(require_token)])


@router.get("/metadata", response_model=MetadataResponse, responses={401: {"model": ErrorResponse}})
def metadata(request: Request):
    """Label schema, guard thresholds and model version; no per-combination counts."""
    state = request.app.state
    return MetadataResponse(
        label_schema=label_schema(),
        guards=GuardThresholds(min_fraction=state.guard.min_fraction, min_households=state.guard.min_households),
        model_version=state.artifact.model_version,
    )
