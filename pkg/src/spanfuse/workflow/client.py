"""LLM client with live and replay execution modes.

Live mode talks to an HTTP endpoint through a transport callable with retry
and bounded concurrency. Replay mode answers every request from recorded
fixtures and never touches the network, which makes whole pipeline runs
deterministic and testable offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import requests

log = logging.getLogger(__name__)

API_KEY_ENV = "SPANFUSE_API_KEY"

Transport = Callable[[str, str], str]


class WorkflowError(RuntimeError):
    """Base class for workflow failures."""


class TransportError(WorkflowError):
    """Live request failed after exhausting the retry budget."""


class FixtureMissingError(WorkflowError):
    """Replay mode was asked for a request that was never recorded."""


def request_key(template_name: str, prompt: str) -> str:
    """Stable fixture key for one request."""
    payload = template_name.encode("utf-8") + b"\x00" + prompt.encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


class FixtureStore:
    """One human-readable JSON file per recorded request."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path_for(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, template_name: str, prompt: str) -> str:
        key = request_key(template_name, prompt)
        path = self.path_for(key)
        if not path.exists():
            raise FixtureMissingError(
                f"no fixture {key} for template {template_name!r} in {self.directory}"
            )
        record = json.loads(path.read_text(encoding="utf-8"))
        return record["response"]

    def put(self, template_name: str, prompt: str, response: str) -> Path:
        key = request_key(template_name, prompt)
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(key)
        record = {"template": template_name, "prompt": prompt, "response": response}
        path.write_text(
            json.dumps(record, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return path

    def __len__(self) -> int:
        if not self.directory.exists():
            return 0
        return sum(1 for _ in self.directory.glob("*.json"))


class HttpTransport:
    """Chat-completion POST transport; reads its key from the environment."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        temperature: float = 0.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.temperature = temperature

    def __call__(self, template_name: str, prompt: str) -> str:
        if not self.api_key:
            raise TransportError(f"no API key: set {API_KEY_ENV} or pass api_key")
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        try:
            response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            response.raise_for_status()
            body = response.json()
            return body["choices"][0]["message"]["content"]
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed response body: {exc}") from exc


class LlmClient:
    """Dispatches prompts in live or replay mode.

    Live mode retries transport failures with exponential backoff (up to
    ``retry_budget`` retries after the first attempt). Replay mode resolves
    every request from the fixture store and performs no network activity.
    ``record=True`` additionally writes live responses into the store.

    Instrumentation: ``max_in_flight`` is the high-water mark of concurrent
    requests, ``requests_completed`` and ``retries`` count activity.
    """

    def __init__(
        self,
        mode: str,
        fixtures: FixtureStore | None = None,
        transport: Transport | None = None,
        max_concurrency: int = 4,
        retry_budget: int = 3,
        backoff_base: float = 0.5,
        record: bool = False,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if mode not in ("live", "replay"):
            raise WorkflowError(f"unknown mode {mode!r}")
        if mode == "replay" and fixtures is None:
            raise WorkflowError("replay mode requires a fixture store")
        if mode == "live" and transport is None:
            raise WorkflowError("live mode requires a transport")
        if record and fixtures is None:
            raise WorkflowError("recording requires a fixture store")
        if max_concurrency < 1:
            raise WorkflowError("max_concurrency must be at least 1")
        self.mode = mode
        self.fixtures = fixtures
        self.transport = transport
        self.max_concurrency = max_concurrency
        self.retry_budget = retry_budget
        self.backoff_base = backoff_base
        self.record = record
        self._sleep = sleep
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0
        self.requests_completed = 0
        self.retries = 0

    def _enter(self) -> None:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1
            self.requests_completed += 1

    @property
    def in_flight(self) -> int:
        with self._lock:
            return self._in_flight

    def complete(self, template_name: str, prompt: str) -> str:
        self._enter()
        try:
            if self.mode == "replay":
                assert self.fixtures is not None
                return self.fixtures.get(template_name, prompt)
            return self._complete_live(template_name, prompt)
        finally:
            self._exit()

    def _complete_live(self, template_name: str, prompt: str) -> str:
        assert self.transport is not None
        last_error: Exception | None = None
        for attempt in range(self.retry_budget + 1):
            if attempt > 0:
                delay = self.backoff_base * (2 ** (attempt - 1))
                with self._lock:
                    self.retries += 1
                log.warning("retry %d for %s after %.2fs: %s", attempt, template_name, delay, last_error)
                self._sleep(delay)
            try:
                response = self.transport(template_name, prompt)
            except TransportError as exc:
                last_error = exc
                continue
            if self.record and self.fixtures is not None:
                self.fixtures.put(template_name, prompt, response)
            return response
        raise TransportError(
            f"transport failed after {self.retry_budget + 1} attempts for {template_name!r}: {last_error}"
        )

    def complete_many(self, items: Sequence[tuple[str, str]]) -> list[str]:
        """Dispatch (template_name, prompt) items concurrently.

        Results come back in input order regardless of completion order.
        """
        if not items:
            return []
        if self.max_concurrency == 1 or len(items) == 1:
            return [self.complete(name, prompt) for name, prompt in items]
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            futures = [pool.submit(self.complete, name, prompt) for name, prompt in items]
            return [f.result() for f in futures]

    def stats(self) -> dict:
        with self._lock:
            return {
                "mode": self.mode,
                "requests_completed": self.requests_completed,
                "retries": self.retries,
                "max_in_flight": self.max_in_flight,
            }
