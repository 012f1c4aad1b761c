import secrets
from typing import Optional

from fastapi import Depends, HTTPException, Request
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer

bearer_scheme = HTTPBearer(auto_error=False)


def _same_token(presented: str, expected: str) -> bool:
    # compare_digest rejects non-ASCII str
    return secrets.compare_digest(presented.encode("utf-8"), expected.encode("utf-8"))


def require_token(
    request: Request,
    credentials: Optional[HTTPAuthorizationCredentials] = Depends(bearer_scheme),
) -> Optional[str]:
    """
    Checks the bearer token against the configured list; an empty list disables auth
    """
    tokens = request.app.state.api_tokens
    if not tokens:
        return None
    if credentials is None or not any(_same_token(credentials.credentials, t) for t in tokens):
        raise HTTPException(
            status_code=401,
            detail="missing or invalid bearer token",
            headers={"WWW-Authenticate": "Bearer"},
        )
    return credentials.credentials
