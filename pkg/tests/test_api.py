import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from loadsynth.main import create_app
from loadsynth.models.generation_log import GenerationLog
from loadsynth.services.generator import GenerationRequest, generate
from loadsynth.services.profile_store import LabelCondition

TOKEN = "secret-token"
AUTH = {"Authorization": f"Bearer {TOKEN}"}


@pytest.fixture
def app(small_pipeline, settings_factory):
    return create_app(settings_factory(API_TOKENS=TOKEN), small_pipeline.artifact)


@pytest.fixture
def client(app):
    return TestClient(app)


def test_health_and_root(client):
    assert client.get("/v1/health").json() == {"status": "ok"}
    root = client.get("/").json()
    assert root["status"] == "running"


def test_missing_or_wrong_token_is_unauthorized(client):
    response = client.post("/v1/generate", json={"count": 1})
    assert response.status_code == 401
    assert response.json()["error"] == "unauthorized"
    assert response.headers["www-authenticate"] == "Bearer"
    wrong = client.post("/v1/generate", json={"count": 1}, headers={"Authorization": "Bearer nope"})
    assert wrong.status_code == 401
    assert client.get("/v1/metadata").status_code == 401


def test_non_ascii_token_is_unauthorized(client):
    response = client.get("/v1/metadata", headers={"Authorization": "Bearer caf\u00e9".encode("latin-1")})
    assert response.status_code == 401
    assert response.json()["error"] == "unauthorized"


def test_empty_token_list_disables_auth(small_pipeline, settings_factory):
    open_client = TestClient(create_app(settings_factory(API_TOKENS=""), small_pipeline.artifact))
    assert open_client.post("/v1/generate", json={"count": 2}).status_code == 200


def test_generate_conditioned_profiles(client, small_pipeline):
    response = client.post("/v1/generate", json={"condition": {"has_ev": True}, "count": 5}, headers=AUTH)
    assert response.status_code == 200
    body = response.json()
    assert len(body["profiles"]) == 5
    assert all(len(profile) == 48 for profile in body["profiles"])
    assert all(min(profile) >= 0 for profile in body["profiles"])
    assert all(label["has_ev"] is True for label in body["labels"])
    assert set(body["diagnostics"]) == {"acceptance_rate", "attempts"}
    assert body["model_version"] == small_pipeline.artifact.model_version
    assert "population_fraction" not in json.dumps(body)


def test_seeded_request_matches_library(client, small_pipeline):
    response = client.post(
        "/v1/generate", json={"condition": {"smart_tariff": False}, "count": 4, "seed": 123}, headers=AUTH
    )
    body = response.json()
    assert body["seed"] == 123
    artifact = small_pipeline.artifact
    expected = generate(
        artifact.model,
        artifact.mixture,
        GenerationRequest(LabelCondition(smart_tariff=False), 4, 123),
        small_pipeline.settings.guard,
    )
    np.testing.assert_allclose(np.array(body["profiles"]), expected.profiles, rtol=1e-12)
    assert [label["property_type"] for label in body["labels"]] == [
        label.property_type.value for label in expected.realized_labels
    ]


def test_unseeded_requests_get_fresh_seeds(client):
    first = client.post("/v1/generate", json={"count": 1}, headers=AUTH).json()
    second = client.post("/v1/generate", json={"count": 1}, headers=AUTH).json()
    assert first["seed"] != second["seed"]


def test_guard_refusal_reveals_no_counts(client):
    response = client.post(
        "/v1/generate", json={"condition": {"property_type": "bungalow"}, "count": 3}, headers=AUTH
    )
    assert response.status_code == 403
    body = response.json()
    assert body["error"] == "population_guard"
    assert not any(ch.isdigit() for ch in body["message"])


@pytest.mark.parametrize(
    "payload",
    [
        {"count": 0},
        {"count": 10_001},
        {"count": "5"},
        {"count": 1, "colour": "red"},
        {"count": 1, "condition": {"has_pool": True}},
        {"count": 1, "condition": {"energy_rating": "z"}},
        {"count": 1, "condition": {"has_ev": "yes"}},
        {"condition": {}},
    ],
)
def test_invalid_requests(client, payload):
    response = client.post("/v1/generate", json=payload, headers=AUTH)
    assert response.status_code == 422
    assert response.json()["error"] == "invalid_request"


def test_metadata_lists_schema_without_counts(client, small_pipeline):
    response = client.get("/v1/metadata", headers=AUTH)
    assert response.status_code == 200
    body = response.json()
    assert set(body) == {"schema", "guards", "model_version"}
    assert body["schema"]["energy_rating"] == ["a", "b", "c", "d", "e", "f", "g"]
    assert body["guards"] == {"min_fraction": 0.01, "min_households": 3}
    assert body["model_version"] == small_pipeline.artifact.model_version


def test_requests_are_logged(app, client):
    client.post("/v1/generate", json={"condition": {"has_ev": True}, "count": 2, "seed": 9}, headers=AUTH)
    client.post("/v1/generate", json={"condition": {"property_type": "bungalow"}, "count": 2}, headers=AUTH)
    db = app.state.session_factory()
    try:
        rows = db.query(GenerationLog).order_by(GenerationLog.id).all()
    finally:
        db.close()
    assert [row.outcome for row in rows] == ["ok", "population_guard"]
    assert rows[0].seed == "9"
    assert json.loads(rows[0].condition) == {"has_ev": True}
    assert rows[0].requested_count == 2
    assert 0 < rows[0].acceptance_rate <= 1
    assert rows[1].acceptance_rate is None


def test_openapi_documents_error_bodies(client):
    paths = client.get("/openapi.json").json()["paths"]
    generate_responses = paths["/v1/generate"]["post"]["responses"]
    for status in ("401", "403", "422"):
        schema = generate_responses[status]["content"]["application/json"]["schema"]
        assert schema["$ref"].endswith("/ErrorResponse")
    metadata_responses = paths["/v1/metadata"]["get"]["responses"]
    assert metadata_responses["401"]["content"]["application/json"]["schema"]["$ref"].endswith("/ErrorResponse")
