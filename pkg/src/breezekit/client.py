"""Plain text-completion HTTP client with retries and bounded concurrency."""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx

from .codec import EOT

log = logging.getLogger(__name__)

TOKEN_ENV_VAR = "BREEZEKIT_API_TOKEN"


class ClientError(Exception):
    pass


class Transport(ClientError):
    def __init__(self, detail: str, attempts: int):
        self.detail = detail
        self.attempts = attempts
        super().__init__(f"{detail} (after {attempts} attempt{'s' if attempts != 1 else ''})")


class RateLimited(ClientError):
    def __init__(self, retry_after: float | None, attempts: int):
        self.retry_after = retry_after
        self.attempts = attempts
        super().__init__(f"rate limited after {attempts} attempts (retry-after={retry_after})")


class BadRequest(ClientError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body[:200]}")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    path: str = "/completions"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    temperature: float = 0.0
    max_new_tokens: int = 512
    stop: tuple = (EOT,)
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    token: str | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        object.__setattr__(self, "stop", tuple(self.stop))

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + self.path

    def auth_token(self) -> str | None:
        return self.token if self.token is not None else os.environ.get(TOKEN_ENV_VAR)


@dataclass(frozen=True)
class Completion:
    text: str
    usage: dict | None = None
    attempts: int = 1


@dataclass(frozen=True)
class BatchItem:
    index: int
    completion: Completion | None = None
    error: ClientError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


def _extract_text(data: dict) -> str:
    if isinstance(data.get("text"), str):
        return data["text"]
    choices = data.get("choices")
    if choices and isinstance(choices[0], dict) and isinstance(choices[0].get("text"), str):
        return choices[0]["text"]
    raise ValueError("response JSON has no 'text' field")


class CompletionClient:
    """Thread-safe client for one endpoint.

    Transport errors, 5xx and 429 responses are retried with exponential
    backoff; other 4xx responses fail immediately.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        http: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        headers = {}
        token = cfg.auth_token()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = http or httpx.Client(timeout=cfg.timeout)
        self._headers = headers
        self._sleep = sleep
        self._lock = threading.Lock()
        self.attempts = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "CompletionClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _backoff(self, attempt: int, hint: float | None = None) -> float:
        delay = self.cfg.backoff_base * (2 ** (attempt - 1))
        if hint is not None:
            delay = max(delay, hint)
        return min(delay, self.cfg.backoff_max)

    def complete(self, prompt: str) -> Completion:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        cfg = self.cfg
        body = {
            "prompt": prompt,
            "temperature": cfg.temperature,
            "max_new_tokens": cfg.max_new_tokens,
            "stop": list(cfg.stop),
        }
        attempt = 0
        while True:
            attempt += 1
            with self._lock:
                self.attempts += 1
            last_is_final = attempt > cfg.max_retries
            try:
                resp = self._http.post(cfg.url, json=body, headers=self._headers)
            except httpx.TransportError as exc:
                if last_is_final:
                    raise Transport(f"{type(exc).__name__}: {exc}", attempt) from exc
                log.debug("transport error on attempt %d: %s", attempt, exc)
                self._sleep(self._backoff(attempt))
                continue

            status = resp.status_code
            if status == 429:
                hint = _retry_after(resp)
                if last_is_final:
                    raise RateLimited(hint, attempt)
                self._sleep(self._backoff(attempt, hint))
                continue
            if status >= 500:
                if last_is_final:
                    raise Transport(f"HTTP {status}: {resp.text[:200]}", attempt)
                self._sleep(self._backoff(attempt))
                continue
            if status >= 400:
                raise BadRequest(status, resp.text)
            try:
                data = resp.json()
                text = _extract_text(data)
            except ValueError as exc:
                raise Transport(f"unreadable response body: {exc}", attempt) from None
            return Completion(text, data.get("usage"), attempt)

    def run_batch(self, prompts: Sequence[str]) -> list[BatchItem]:
        """Complete every prompt with at most ``max_in_flight`` requests open.

        Results come back in input order; failures are carried per item.
        """

        def one(i: int) -> BatchItem:
            try:
                return BatchItem(i, completion=self.complete(prompts[i]))
            except ClientError as exc:
                return BatchItem(i, error=exc)
            except ValueError as exc:
                return BatchItem(i, error=ClientError(str(exc)))

        with ThreadPoolExecutor(max_workers=self.cfg.max_in_flight) as pool:
            return list(pool.map(one, range(len(prompts))))


def complete(cfg: EndpointConfig, prompt: str) -> Completion:
    with CompletionClient(cfg) as client:
        return client.complete(prompt)


def run_batch(cfg: EndpointConfig, prompts: Sequence[str]) -> list[BatchItem]:
    with CompletionClient(cfg) as client:
        return client.run_batch(prompts)
