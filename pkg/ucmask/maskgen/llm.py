"""Chat-completion client that asks a language model for a freeze mask."""
from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple
from urllib import error, request

from pydantic import ValidationError

from ..instance import HistoryBank, UcInstance
from ..mask import FreezeMask
from ..schemas import ChatRequest, ChatResponse, EndpointConfig
from .base import MaskFeedback, MaskGenerator
from .heuristics import stability_mask
from .prompt import (
    ResponseError,
    ResponseParseError,
    ResponseSchemaError,
    build_llm_prompt,
    parse_llm_response,
    revision_request,
)

LOGGER = logging.getLogger(__name__)

RETRY_STATUS = {429, 500, 502, 503, 504}
DEFAULT_H = 3

Messages = List[Dict[str, str]]
Transport = Callable[[EndpointConfig, Dict], Dict]


class TransportError(RuntimeError):
    """Raised when the endpoint cannot be reached or answers with a failure."""


class ConfigError(RuntimeError):
    """Raised when endpoint configuration is missing or invalid."""


def _token() -> Optional[str]:
    return os.getenv("UCMASK_LLM_TOKEN") or None


def _default_url() -> Optional[str]:
    return os.getenv("UCMASK_LLM_URL") or None


def _default_model() -> str:
    return os.getenv("UCMASK_LLM_MODEL", "gpt-4o")


def load_endpoint_config(path: Optional[Path]) -> EndpointConfig:
    """Read the endpoint config file; URL and model fall back to the environment, the token always comes from it."""

    if path is None:
        raise ConfigError("the llm method requires an endpoint config (--endpoint-config)")
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"endpoint config {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"endpoint config {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"endpoint config {path} must be a JSON object")
    if "token" in raw:
        raise ConfigError("endpoint config must not contain a token; set UCMASK_LLM_TOKEN instead")
    if "temperature" in raw:
        if raw.pop("temperature") != 0:
            raise ConfigError("endpoint temperature is fixed at 0")
    raw.setdefault("model", _default_model())
    if "url" not in raw and _default_url():
        raw["url"] = _default_url()
    try:
        return EndpointConfig(**raw, token=_token())
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first.get("loc", ()))
        raise ConfigError(f"endpoint config field {where}: {first.get('msg')}") from exc


_LOCKS: Dict[Tuple[str, str], threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _endpoint_lock(config: EndpointConfig) -> threading.Lock:
    key = (config.url, config.model)
    with _LOCKS_GUARD:
        return _LOCKS.setdefault(key, threading.Lock())


def http_transport(config: EndpointConfig, body: Dict) -> Dict:
    """POST ``body`` as JSON, re-sending on 429/5xx with exponential back-off."""

    data = json.dumps(body).encode("utf-8")
    attempts = config.max_retries + 1
    for attempt in range(1, attempts + 1):
        req = request.Request(config.url, data=data, method="POST")
        req.add_header("Content-Type", "application/json")
        if config.token:
            req.add_header("Authorization", f"Bearer {config.token}")
        try:
            with request.urlopen(req, timeout=config.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except error.HTTPError as exc:
            if exc.code in RETRY_STATUS and attempt < attempts:
                LOGGER.warning("LLM endpoint HTTP %s (%s/%s); backing off", exc.code, attempt, attempts)
                time.sleep(min(2 ** attempt, 30))
                continue
            raise TransportError(f"LLM endpoint answered HTTP {exc.code}") from exc
        except (socket.timeout, TimeoutError) as exc:
            raise TransportError(f"LLM endpoint timed out after {config.timeout}s") from exc
        except error.URLError as exc:
            raise TransportError(f"LLM endpoint unreachable: {exc.reason}") from exc
        except (OSError, ValueError) as exc:
            raise TransportError(f"LLM endpoint failed: {exc}") from exc
    raise TransportError("LLM endpoint failed after retries")


def _complete(config: EndpointConfig, messages: Messages, transport: Transport) -> str:
    body = ChatRequest(model=config.model, messages=messages, temperature=0.0).model_dump()
    with _endpoint_lock(config):
        payload = transport(config, body)
    try:
        reply = ChatResponse.model_validate(payload)
    except ValidationError as exc:
        raise TransportError("LLM endpoint returned a malformed completion envelope") from exc
    if not reply.choices:
        raise TransportError("LLM endpoint returned no choices")
    return reply.choices[0].message.content


def _fallback(inst: UcInstance, history: HistoryBank, H: int, k_cap: int) -> FreezeMask:
    if len(history):
        mask = stability_mask(inst, history, H, k_cap)
    else:
        mask = FreezeMask.empty(k_cap)
    return mask.with_provenance("fallback")


def _ask(
    inst: UcInstance, config: EndpointConfig, messages: Messages, k_cap: int, transport: Transport
) -> Tuple[Optional[FreezeMask], Messages]:
    """Send the conversation, re-asking once on a parse or schema failure."""

    for attempt in range(2):
        reply = _complete(config, messages, transport)
        messages = messages + [{"role": "assistant", "content": reply}]
        try:
            return parse_llm_response(reply, inst, k_cap), messages
        except (ResponseParseError, ResponseSchemaError) as exc:
            LOGGER.warning("LLM reply rejected (%s/2): %s", attempt + 1, exc)
            messages = messages + [{"role": "user", "content": revision_request(f"Your reply was rejected: {exc}", k_cap)}]
    return None, messages


def llm_generate(
    inst: UcInstance,
    history: HistoryBank,
    config: EndpointConfig,
    *,
    H: int = DEFAULT_H,
    k_cap: int,
    transport: Optional[Transport] = None,
) -> FreezeMask:
    """Ask the endpoint for a mask; any failure yields the stability (or empty) fallback."""

    mask, _ = _llm_conversation(inst, history, config, H=H, k_cap=k_cap, transport=transport)
    return mask


def _llm_conversation(
    inst: UcInstance,
    history: HistoryBank,
    config: EndpointConfig,
    *,
    H: int,
    k_cap: int,
    transport: Optional[Transport],
) -> Tuple[FreezeMask, Messages]:
    prompt = build_llm_prompt(inst, history, H, k_cap)
    messages = prompt.messages()
    try:
        mask, messages = _ask(inst, config, messages, k_cap, transport or http_transport)
    except TransportError as exc:
        LOGGER.warning("LLM transport failed: %s; using fallback mask", exc)
        mask = None
    except ResponseError as exc:
        LOGGER.warning("LLM reply rejected: %s; using fallback mask", exc)
        mask = None
    if mask is None:
        return _fallback(inst, history, H, k_cap), messages
    LOGGER.info("LLM proposed %s fixings", len(mask))
    return mask, messages


class LlmMaskGenerator(MaskGenerator):
    name = "llm"

    def __init__(
        self,
        config: EndpointConfig,
        H: int = DEFAULT_H,
        k_cap: Optional[int] = None,
        transport: Optional[Transport] = None,
    ) -> None:
        super().__init__(k_cap)
        self.config = config
        self.H = H
        self.transport = transport
        self._conversation: Messages = []
        self._history = HistoryBank()

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        self._history = history
        mask, self._conversation = _llm_conversation(
            inst, history, self.config, H=self.H, k_cap=self.cap_for(inst), transport=self.transport
        )
        return mask

    def revise(self, inst: UcInstance, previous: FreezeMask, feedback: MaskFeedback) -> FreezeMask:
        """Append the feedback summary to the conversation and ask for a revised mask."""

        messages = self._conversation
        if not messages:
            prompt = build_llm_prompt(inst, self._history, self.H, previous.k_cap)
            messages = prompt.messages() + [{"role": "assistant", "content": previous.to_json()}]
        messages = messages + [{"role": "user", "content": revision_request(feedback.text, previous.k_cap)}]
        try:
            mask, self._conversation = _ask(inst, self.config, messages, previous.k_cap, self.transport or http_transport)
        except (TransportError, ResponseError) as exc:
            LOGGER.warning("LLM revision failed: %s", exc)
            mask = None
        if mask is None:
            return previous.without(feedback.implicated, provenance="fallback")
        return mask
