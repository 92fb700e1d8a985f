"""Thin HTTP client used by ``masattn generate --server``."""

from __future__ import annotations

import httpx

from ..errors import MasError, RemoteError, ValidationError


def generate_remote(base_url: str, system: str, user: str, mode: str, max_new: int, timeout: float = 60.0) -> dict:
    try:
        resp = httpx.post(base_url.rstrip("/") + "/generate",
                          json={"system": system, "user": user, "mode": mode, "max_new": max_new}, timeout=timeout)
    except httpx.HTTPError as exc:
        raise RemoteError(f"cannot reach {base_url}: {exc}") from exc
    if resp.status_code == 422:
        body = resp.json()
        if "code" in body:
            err = MasError(body["detail"].split(": ", 1)[-1])
            err.code = body["code"]
            raise err
        raise ValidationError(f"server rejected request: {body}")
    if resp.status_code != 200:
        raise RemoteError(f"server answered {resp.status_code}")
    return resp.json()
