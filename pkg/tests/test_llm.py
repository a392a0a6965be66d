import json
import os
import socket
import tempfile
import threading
import time
import unittest
from pathlib import Path
from unittest import mock
from urllib import error

import numpy as np
import uvicorn

from tests.helpers import canned
from ucmask.instance import DailySchedule, HistoryBank, HistoryDay
from ucmask.mask import FreezeMask, MaskEntry
from ucmask.maskgen import llm
from ucmask.maskgen.base import MaskFeedback
from ucmask.maskgen.llm import ConfigError, LlmMaskGenerator, TransportError
from ucmask.maskgen.stub import create_stub_app
from ucmask.schemas import EndpointConfig

CONFIG = EndpointConfig(url="http://stub.invalid/v1/chat/completions", model="stub-model")
PROSE = "Sure! Freezing g1 at hour 1 seems wise."


def _envelope(content: str) -> dict:
    return {"model": "stub-model", "choices": [{"message": {"role": "assistant", "content": content}}]}


class _ScriptedTransport:
    def __init__(self, *replies):
        self.replies = list(replies)
        self.bodies = []

    def __call__(self, config, body):
        self.bodies.append(body)
        reply = self.replies[min(len(self.bodies), len(self.replies)) - 1]
        if isinstance(reply, Exception):
            raise reply
        return reply if isinstance(reply, dict) else _envelope(reply)


def _history(inst) -> HistoryBank:
    u = np.array([[1] * 6, [0, 0, 1, 1, 0, 0], [0] * 6])
    return HistoryBank((HistoryDay(profile=inst.total_demand(), schedule=DailySchedule(u=u, p=u * 10.0)),))


class LlmGenerateTest(unittest.TestCase):
    def test_valid_reply_becomes_the_mask(self):
        inst = canned("small")
        transport = _ScriptedTransport('[[2, "g1", 1]]')
        mask = llm.llm_generate(inst, HistoryBank(), CONFIG, k_cap=1, transport=transport)
        self.assertEqual(mask.entries, (MaskEntry(2, "g1", 1),))
        self.assertEqual(mask.provenance, "llm")
        body = transport.bodies[0]
        self.assertEqual(body["temperature"], 0.0)
        self.assertEqual(body["model"], "stub-model")
        self.assertEqual(body["messages"][0]["role"], "user")

    def test_prose_twice_falls_back_to_stability(self):
        inst = canned("small")
        transport = _ScriptedTransport(PROSE)
        mask = llm.llm_generate(inst, _history(inst), CONFIG, k_cap=1, transport=transport)
        self.assertEqual(len(transport.bodies), 2)
        self.assertEqual(mask.provenance, "fallback")
        self.assertEqual(mask.entries, tuple(MaskEntry(t, "g1", 1) for t in range(1, 7)))

    def test_reask_carries_the_rejection(self):
        inst = canned("small")
        transport = _ScriptedTransport(PROSE, '[[1, "g3", 0]]')
        mask = llm.llm_generate(inst, HistoryBank(), CONFIG, k_cap=1, transport=transport)
        self.assertEqual(mask.entries, (MaskEntry(1, "g3", 0),))
        second = transport.bodies[1]["messages"]
        self.assertEqual([m["role"] for m in second], ["user", "assistant", "user"])
        self.assertEqual(second[1]["content"], PROSE)
        self.assertIn("rejected", second[2]["content"])

    def test_semantic_error_falls_back_without_reask(self):
        inst = canned("small")
        transport = _ScriptedTransport('[[1, "g1", 1], [1, "g2", 1]]')
        mask = llm.llm_generate(inst, HistoryBank(), CONFIG, k_cap=1, transport=transport)
        self.assertEqual(len(transport.bodies), 1)
        self.assertEqual((len(mask), mask.provenance), (0, "fallback"))

    def test_transport_failure_falls_back_to_empty(self):
        inst = canned("small")
        transport = _ScriptedTransport(TransportError("connection refused"))
        mask = llm.llm_generate(inst, HistoryBank(), CONFIG, k_cap=1, transport=transport)
        self.assertEqual((len(mask), mask.provenance), (0, "fallback"))

    def test_malformed_envelope_falls_back(self):
        inst = canned("small")
        for payload in ({"unexpected": True}, {"model": "stub-model", "choices": []}):
            with self.subTest(payload=payload):
                mask = llm.llm_generate(inst, HistoryBank(), CONFIG, k_cap=1, transport=_ScriptedTransport(payload))
                self.assertEqual(mask.provenance, "fallback")


class LlmReviseTest(unittest.TestCase):
    def test_revision_continues_the_conversation(self):
        inst = canned("small")
        transport = _ScriptedTransport('[[1, "g2", 0]]', '[[1, "g1", 1]]')
        generator = LlmMaskGenerator(CONFIG, transport=transport)
        first = generator.generate(inst, HistoryBank())
        feedback = MaskFeedback("- capacity (hour 1): short by 5 MW", ((1, "g2"),))
        revised = generator.revise(inst, first, feedback)
        self.assertEqual(revised.entries, (MaskEntry(1, "g1", 1),))
        messages = transport.bodies[1]["messages"]
        self.assertEqual(messages[1]["content"], '[[1, "g2", 0]]')
        self.assertIn("short by 5 MW", messages[2]["content"])

    def test_failed_revision_drops_implicated_entries(self):
        inst = canned("small")
        transport = _ScriptedTransport('[[1, "g2", 0], [2, "g2", 0]]', TransportError("gone"))
        generator = LlmMaskGenerator(CONFIG, transport=transport)
        first = generator.generate(inst, HistoryBank())
        revised = generator.revise(inst, first, MaskFeedback("x", ((1, "g2"),)))
        self.assertEqual(revised.entries, (MaskEntry(2, "g2", 0),))
        self.assertEqual(revised.provenance, "fallback")

    def test_revision_without_prior_conversation(self):
        inst = canned("small")
        transport = _ScriptedTransport("[]")
        previous = FreezeMask.from_tuples([(1, "g1", 0)], k_cap=1)
        feedback = MaskFeedback("hour 1 is short of capacity")
        revised = LlmMaskGenerator(CONFIG, transport=transport).revise(inst, previous, feedback)
        self.assertEqual(len(revised), 0)
        messages = transport.bodies[0]["messages"]
        self.assertEqual([m["role"] for m in messages], ["user", "assistant", "user"])
        self.assertIn("## Task", messages[0]["content"])
        self.assertIn("at most 1 units", messages[0]["content"])
        self.assertEqual(messages[1]["content"], previous.to_json())
        self.assertIn("hour 1 is short of capacity", messages[2]["content"])


class EndpointConfigTest(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.dir = Path(self._tmp.name)

    def _write(self, payload) -> Path:
        path = self.dir / "endpoint.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    def test_missing_path(self):
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(None)
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(self.dir / "absent.json")

    def test_token_comes_from_environment(self):
        path = self._write({"url": "http://127.0.0.1:9/v1/chat/completions", "model": "m", "timeout": 2})
        with mock.patch.dict(os.environ, {"UCMASK_LLM_TOKEN": "secret"}):
            config = llm.load_endpoint_config(path)
        self.assertEqual(config.token, "secret")
        self.assertEqual(config.timeout, 2.0)
        self.assertNotIn("secret", repr(config))

    def test_token_in_file_is_rejected(self):
        path = self._write({"url": "http://x", "model": "m", "token": "leak"})
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(path)

    def test_temperature_must_be_zero(self):
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(self._write({"url": "http://x", "model": "m", "temperature": 0.7}))
        config = llm.load_endpoint_config(self._write({"url": "http://x", "model": "m", "temperature": 0}))
        self.assertEqual(config.model, "m")

    def test_invalid_fields(self):
        with mock.patch.dict(os.environ, {"UCMASK_LLM_URL": ""}):
            with self.assertRaises(ConfigError):
                llm.load_endpoint_config(self._write({"model": "m"}))
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(self._write({"url": "http://x", "model": "m", "timeout": 0}))
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(self._write({"url": "http://x", "model": "m", "retries": 3}))

    def test_not_json(self):
        path = self.dir / "endpoint.json"
        path.write_text("url = http://x", encoding="utf-8")
        with self.assertRaises(ConfigError):
            llm.load_endpoint_config(path)


def _response(payload: dict) -> mock.MagicMock:
    resp = mock.MagicMock()
    resp.__enter__.return_value.read.return_value = json.dumps(payload).encode("utf-8")
    return resp


def _http_error(code: int) -> error.HTTPError:
    return error.HTTPError(CONFIG.url, code, "scripted", {}, None)


class HttpTransportTest(unittest.TestCase):
    @mock.patch("ucmask.maskgen.llm.time.sleep")
    @mock.patch("ucmask.maskgen.llm.request.urlopen")
    def test_retries_on_service_unavailable(self, urlopen, sleep):
        urlopen.side_effect = [_http_error(503), _response(_envelope("[]"))]
        payload = llm.http_transport(CONFIG, {"model": "stub-model"})
        self.assertEqual(payload["choices"][0]["message"]["content"], "[]")
        self.assertEqual(urlopen.call_count, 2)
        sleep.assert_called_once_with(2)

    @mock.patch("ucmask.maskgen.llm.time.sleep")
    @mock.patch("ucmask.maskgen.llm.request.urlopen")
    def test_gives_up_after_max_retries(self, urlopen, sleep):
        urlopen.side_effect = [_http_error(429), _http_error(429)]
        with self.assertRaises(TransportError):
            llm.http_transport(CONFIG, {})
        self.assertEqual(urlopen.call_count, 2)

    @mock.patch("ucmask.maskgen.llm.time.sleep")
    @mock.patch("ucmask.maskgen.llm.request.urlopen")
    def test_client_errors_are_not_retried(self, urlopen, sleep):
        urlopen.side_effect = [_http_error(404)]
        with self.assertRaises(TransportError):
            llm.http_transport(CONFIG, {})
        sleep.assert_not_called()

    @mock.patch("ucmask.maskgen.llm.request.urlopen")
    def test_timeouts_are_not_retried(self, urlopen):
        urlopen.side_effect = socket.timeout("timed out")
        with self.assertRaises(TransportError):
            llm.http_transport(CONFIG, {})
        self.assertEqual(urlopen.call_count, 1)

    @mock.patch("ucmask.maskgen.llm.request.urlopen")
    def test_bearer_header(self, urlopen):
        urlopen.return_value = _response(_envelope("[]"))
        llm.http_transport(CONFIG.model_copy(update={"token": "tok"}), {})
        req = urlopen.call_args[0][0]
        self.assertEqual(req.get_header("Authorization"), "Bearer tok")
        self.assertEqual(req.get_method(), "POST")


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class _StubServer:
    def __init__(self, app):
        self.app = app
        self.port = _free_port()
        self.server = uvicorn.Server(
            uvicorn.Config(app, host="127.0.0.1", port=self.port, log_level="warning", lifespan="off")
        )
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1/chat/completions"

    def __enter__(self):
        self.thread.start()
        deadline = time.monotonic() + 10.0
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("stub server did not start")
            time.sleep(0.02)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10.0)


class StubEndpointTest(unittest.TestCase):
    def test_end_to_end_with_reask(self):
        inst = canned("small")
        app = create_stub_app([PROSE, '[[3, "g2", 1]]'])
        with _StubServer(app) as stub:
            config = EndpointConfig(url=stub.url, model="stub-model", timeout=5.0)
            mask = llm.llm_generate(inst, HistoryBank(), config, k_cap=1)
        self.assertEqual(mask.entries, (MaskEntry(3, "g2", 1),))
        self.assertEqual(len(app.state.requests), 2)
        self.assertEqual(app.state.requests[0].temperature, 0.0)

    def test_timeout_falls_back_promptly(self):
        inst = canned("small")
        app = create_stub_app(['[[1, "g1", 1]]'], delay=3.0)
        with _StubServer(app) as stub:
            config = EndpointConfig(url=stub.url, model="stub-model", timeout=0.3, max_retries=2)
            started = time.monotonic()
            mask = llm.llm_generate(inst, _history(inst), config, k_cap=1)
            elapsed = time.monotonic() - started
        self.assertEqual(mask.provenance, "fallback")
        self.assertLess(elapsed, 0.3 + 1.5)

    def test_bearer_token_is_checked(self):
        inst = canned("small")
        app = create_stub_app(['[[1, "g1", 1]]'], token="tok")
        with _StubServer(app) as stub:
            anonymous = EndpointConfig(url=stub.url, model="stub-model")
            self.assertEqual(llm.llm_generate(inst, HistoryBank(), anonymous, k_cap=1).provenance, "fallback")
            signed = EndpointConfig(url=stub.url, model="stub-model", token="tok")
            self.assertEqual(llm.llm_generate(inst, HistoryBank(), signed, k_cap=1).provenance, "llm")

    def test_scripted_service_errors_are_retried(self):
        inst = canned("small")
        app = create_stub_app(['[[1, "g1", 1]]'], status_codes=(503,))
        with _StubServer(app) as stub, mock.patch("ucmask.maskgen.llm.time.sleep"):
            config = EndpointConfig(url=stub.url, model="stub-model", max_retries=1)
            mask = llm.llm_generate(inst, HistoryBank(), config, k_cap=1)
        self.assertEqual(mask.provenance, "llm")
        self.assertEqual(app.state.calls, 2)


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
