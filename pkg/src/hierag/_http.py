"""POST-JSON with retries, shared by the remote LLM and embedding clients."""

from __future__ import annotations

import logging
import time

import httpx

from .errors import AuthError, BackendError, BackendUnreachable, MalformedResponse, RateLimited

log = logging.getLogger(__name__)


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    api_key: str,
    *,
    max_retries: int,
    backoff_base: float,
    sleep=time.sleep,
) -> dict:
    """Send ``payload`` and return the decoded JSON body.

    Connection failures, timeouts, 429 and 5xx are retried up to
    ``max_retries`` times with exponential backoff. The key is only ever
    placed in the Authorization header.
    """
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    attempts = max_retries + 1
    last: BackendError | None = None
    for attempt in range(attempts):
        try:
            resp = client.post(url, json=payload, headers=headers)
        except (httpx.ConnectError, httpx.TimeoutException, httpx.NetworkError) as exc:
            last = BackendUnreachable(f"{url}: {type(exc).__name__}")
        else:
            if resp.status_code in (401, 403):
                raise AuthError(f"{url}: HTTP {resp.status_code}")
            if resp.status_code == 429:
                last = RateLimited(f"{url}: HTTP 429")
            elif resp.status_code >= 500:
                last = BackendUnreachable(f"{url}: HTTP {resp.status_code}")
            elif resp.status_code >= 400:
                raise BackendError(f"{url}: HTTP {resp.status_code}")
            else:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise MalformedResponse(f"{url}: body is not JSON") from exc
        if attempt + 1 < attempts:
            delay = backoff_base * (2**attempt)
            log.warning("attempt %d/%d failed (%s); retrying in %.3fs", attempt + 1, attempts, last, delay)
            sleep(delay)
        else:
            log.error("attempt %d/%d failed (%s); giving up", attempt + 1, attempts, last)
    raise last
