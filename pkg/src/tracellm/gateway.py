"""Pluggable LLM gateway: one ``send(prompt, params) -> text`` operation."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import requests

from .errors import GatewayError

DEFAULT_PARAMS: dict[str, Any] = {"temperature": 0.7, "top_p": 1.0, "max_tokens": 2000}


class Gateway(Protocol):
    def send(self, prompt: str, params: Mapping[str, Any] | None = None) -> str: ...


def _params(params: Mapping[str, Any] | None) -> dict[str, Any]:
    merged = dict(DEFAULT_PARAMS)
    merged.update(params or {})
    return merged


class MockGateway:
    """Returns a canned string, or whatever ``responder(prompt)`` returns."""

    def __init__(self, responder: str | Callable[[str], str]):
        self.responder = responder
        self.prompts: list[str] = []

    def send(self, prompt, params=None):
        self.prompts.append(prompt)
        if callable(self.responder):
            return self.responder(prompt)
        return self.responder


class ReplayGateway:
    """Recorded responses keyed by a hash of (prompt, params).

    With ``inner`` set, misses are forwarded and recorded; without it a miss
    is a gateway error.
    """

    def __init__(self, directory: str | os.PathLike, inner: Gateway | None = None):
        self.directory = Path(directory)
        self.inner = inner

    def _path(self, prompt: str, params: dict) -> Path:
        blob = json.dumps({"prompt": prompt, "params": params}, sort_keys=True)
        return self.directory / f"{hashlib.sha256(blob.encode()).hexdigest()}.json"

    def send(self, prompt, params=None):
        params = _params(params)
        path = self._path(prompt, params)
        if path.is_file():
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        if self.inner is None:
            raise GatewayError(f"no recorded response ({path.name})", prompt=prompt)
        response = self.inner.send(prompt, params)
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps({"params": params, "prompt": prompt, "response": response}, sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )
        return response


class HttpGateway:
    """OpenAI-style ``/chat/completions`` client."""

    def __init__(self, url: str, api_key: str | None, model: str | None, timeout: float = 120.0,
                 session: requests.Session | None = None):
        self.url = url
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()

    @classmethod
    def from_env(cls, model: str | None = None) -> HttpGateway:
        return cls(
            os.environ.get("TRACELLM_GATEWAY_URL", "https://openrouter.ai/api/v1/chat/completions"),
            os.environ.get("TRACELLM_GATEWAY_KEY"),
            model or os.environ.get("TRACELLM_GATEWAY_MODEL"),
        )

    def send(self, prompt, params=None):
        if not self.api_key:
            raise GatewayError("no gateway API key configured (TRACELLM_GATEWAY_KEY)", prompt=prompt)
        if not self.model:
            raise GatewayError("no gateway model configured (TRACELLM_GATEWAY_MODEL)", prompt=prompt)
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}], **_params(params)}
        try:
            resp = self.session.post(
                self.url,
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
            raise GatewayError(f"gateway request failed: {exc}", prompt=prompt) from exc
