import logging
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from loadsynth.config import Settings, settings as default_settings
from loadsynth.database import make_session_factory
from loadsynth.exceptions import BudgetExhaustedError, GuardRefusedError, InvalidRequestError, LoadSynthError
from loadsynth.routers import generation, metadata
from loadsynth.services.artifact import ModelArtifact, load_artifact
from loadsynth.services.generator import SeedCounter

logger = logging.getLogger(__name__)

HTTP_ERROR_CODES = {401: "unauthorized", 404: "not_found", 405: "method_not_allowed"}


def _error(status_code: int, code: str, message: str, headers: Optional[dict] = None) -> JSONResponse:
    return JSONResponse(status_code=status_code, content={"error": code, "message": message}, headers=headers)


def _validation_message(exc: RequestValidationError) -> str:
    parts = []
    for err in exc.errors():
        location = ".".join(str(p) for p in err.get("loc", ()) if p != "body")
        parts.append(f"{location}: {err.get('msg')}" if location else str(err.get("msg")))
    return "; ".join(parts) or "invalid request"


def register_exception_handlers(app: FastAPI) -> None:
    @app.exception_handler(GuardRefusedError)
    async def guard_refused(request: Request, exc: GuardRefusedError):
        return _error(403, "population_guard", str(exc))

    @app.exception_handler(BudgetExhaustedError)
    async def budget_exhausted(request: Request, exc: BudgetExhaustedError):
        return _error(422, "acceptance_rate_too_low", str(exc))

    @app.exception_handler(RequestValidationError)
    async def request_invalid(request: Request, exc: RequestValidationError):
        return _error(422, "invalid_request", _validation_message(exc))

    @app.exception_handler(InvalidRequestError)
    async def domain_request_invalid(request: Request, exc: InvalidRequestError):
        return _error(422, "invalid_request", str(exc))

    @app.exception_handler(StarletteHTTPException)
    async def http_error(request: Request, exc: StarletteHTTPException):
        code = HTTP_ERROR_CODES.get(exc.status_code, "http_error")
        return _error(exc.status_code, code, str(exc.detail), getattr(exc, "headers", None))

    @app.exception_handler(LoadSynthError)
    async def internal_error(request: Request, exc: LoadSynthError):
        logger.error(f"Unhandled {type(exc).__name__}: {exc}")
        return _error(500, "internal_error", "generation failed")


def create_app(settings: Optional[Settings] = None, artifact: Optional[ModelArtifact] = None) -> FastAPI:
    """
    Builds the API around one immutable model artifact, loaded once
    """
    settings = settings or default_settings
    artifact = artifact or load_artifact(settings.MODEL_PATH)

    app = FastAPI(
        title=settings.APP_NAME,
        version=settings.APP_VERSION,
        description="Conditional generation of synthetic daily household load profiles",
    )
    app.state.settings = settings
    app.state.artifact = artifact
    app.state.guard = settings.guard
    app.state.api_tokens = settings.api_token_list
    app.state.seeds = SeedCounter(settings.SEED)
    app.state.session_factory = make_session_factory(settings.DATABASE_URL, echo=settings.DEBUG)

    # CORS
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    register_exception_handlers(app)
    app.include_router(generation.router)
    app.include_router(metadata.router)

    @app.get("/")
    async def root():
        return {
            "message": settings.APP_NAME,
            "version": settings.APP_VERSION,
            "status": "running",
        }

    @app.get("/v1/health")
    async def health_check():
        return {"status": "ok"}

    if not settings.api_token_list:
        logger.warning("API_TOKENS is empty; the API accepts unauthenticated requests")
    logger.info(f"API ready with model {artifact.model_version}")
    return app
