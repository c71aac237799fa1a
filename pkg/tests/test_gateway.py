"""Gateway behavior: templates, caching, retries, limits, HTTP protocol."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from ovemotion.errors import (
    BackendRejected,
    BackendTimeout,
    ConfigError,
    RetriesExhausted,
    TemplateBindingError,
    UnknownBackend,
)
from ovemotion.gateway import (
    BackendSpec,
    DecodeParams,
    Gateway,
    PromptTemplate,
    api_key_env_var,
    backend_spec_from_config,
    cache_key,
    mock_backend,
    prompt_digest,
)

ECHO = PromptTemplate("echo", "1", "echo:{x}", "translate")


def no_sleep_gateway(**kwargs):
    kwargs.setdefault("retry_base_delay", 0.0)
    kwargs.setdefault("sleep", lambda _: None)
    return Gateway(**kwargs)


class TestPromptTemplate:
    def test_placeholders(self):
        template = PromptTemplate("t", "1", "a {x} b {y}", "merge")
        assert template.placeholders() == {"x", "y"}

    def test_render(self):
        assert ECHO.render({"x": "hi"}) == "echo:hi"

    def test_missing_binding(self):
        with pytest.raises(TemplateBindingError):
            ECHO.render({})

    def test_extra_bindings_allowed(self):
        assert ECHO.render({"x": "hi", "unused": "z"}) == "echo:hi"

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            PromptTemplate("t", "1", "body", "review")


class TestMockBackend:
    def test_echo_contract(self):
        gateway = no_sleep_gateway()
        mock = mock_backend(default=lambda prompt: prompt.split(":", 1)[1])
        gateway.register_mock(mock)
        assert gateway.complete("mock", ECHO, {"x": "hi"}) == "hi"

    def test_script_keyed_by_digest(self):
        gateway = no_sleep_gateway()
        mock = mock_backend(script={prompt_digest("echo:hi"): "scripted"})
        gateway.register_mock(mock)
        assert gateway.complete("mock", ECHO, {"x": "hi"}) == "scripted"

    def test_unscripted_without_default_rejected(self):
        gateway = no_sleep_gateway()
        gateway.register_mock(mock_backend(script={}))
        with pytest.raises(BackendRejected):
            gateway.complete("mock", ECHO, {"x": "hi"})

    def test_scripted_failure_sequence_then_success(self):
        gateway = no_sleep_gateway()
        script = {"echo:hi": [BackendTimeout("t1"), BackendTimeout("t2"), "ok"]}
        spec = BackendSpec(name="flaky", max_retries=3)
        mock = mock_backend(script=script, name="flaky")
        mock.spec = spec
        gateway.register(spec, mock)
        assert gateway.complete("flaky", ECHO, {"x": "hi"}) == "ok"
        assert gateway.stats("flaky").network_calls == 3
        assert gateway.stats("flaky").retries == 2


class TestRetries:
    def test_retry_budget(self):
        gateway = no_sleep_gateway()
        spec = BackendSpec(name="down", max_retries=2)
        gateway.register(spec, mock_backend(script={"echo:hi": BackendTimeout}, name="down"))
        with pytest.raises(RetriesExhausted) as excinfo:
            gateway.complete("down", ECHO, {"x": "hi"})
        assert excinfo.value.attempts == 3
        assert gateway.stats("down").network_calls == 3

    def test_backoff_is_exponential(self):
        delays = []
        gateway = Gateway(cache=None, retry_base_delay=0.5, sleep=delays.append)
        spec = BackendSpec(name="down", max_retries=3)
        gateway.register(spec, mock_backend(script={"echo:hi": BackendTimeout}, name="down"))
        with pytest.raises(RetriesExhausted):
            gateway.complete("down", ECHO, {"x": "hi"})
        assert delays == [0.5, 1.0, 2.0]

    def test_permanent_rejection_not_retried(self):
        gateway = no_sleep_gateway()
        spec = BackendSpec(name="deny", max_retries=5)
        gateway.register(
            spec,
            mock_backend(
                script={"echo:hi": BackendRejected("denied", status=403, body="nope")},
                name="deny",
            ),
        )
        with pytest.raises(BackendRejected) as excinfo:
            gateway.complete("deny", ECHO, {"x": "hi"})
        assert excinfo.value.body == "nope"
        assert gateway.stats("deny").network_calls == 1

    def test_retryable_status_is_retried(self):
        gateway = no_sleep_gateway()
        spec = BackendSpec(name="busy", max_retries=1)
        script = {"echo:hi": [BackendRejected("busy", status=503, body="b"), "ok"]}
        gateway.register(spec, mock_backend(script=script, name="busy"))
        assert gateway.complete("busy", ECHO, {"x": "hi"}) == "ok"


class TestCache:
    def test_cache_hit_skips_network(self):
        gateway = Gateway()
        mock = mock_backend(default=lambda p: p)
        gateway.register_mock(mock)
        first = gateway.complete("mock", ECHO, {"x": "hi"})
        second = gateway.complete("mock", ECHO, {"x": "hi"})
        assert first == second
        assert mock.calls == 1
        assert gateway.stats("mock").cache_hits == 1

    def test_cache_disabled_calls_every_time(self):
        gateway = Gateway(cache=None)
        mock = mock_backend(default=lambda p: p)
        gateway.register_mock(mock)
        gateway.complete("mock", ECHO, {"x": "hi"})
        gateway.complete("mock", ECHO, {"x": "hi"})
        assert mock.calls == 2

    def test_cache_equivalence_for_deterministic_backend(self):
        prompts = [{"x": f"v{i % 3}"} for i in range(9)]
        cached = Gateway()
        plain = Gateway(cache=None)
        for gateway in (cached, plain):
            gateway.register_mock(mock_backend(default=lambda p: f"r({p})"))
        cached_replies = [cached.complete("mock", ECHO, b) for b in prompts]
        plain_replies = [plain.complete("mock", ECHO, b) for b in prompts]
        assert cached_replies == plain_replies

    def test_disk_cache_survives_gateway_restart(self, tmp_path):
        cache_dir = tmp_path / "cache"
        first = Gateway(cache=cache_dir)
        mock1 = mock_backend(default=lambda p: "net-reply")
        first.register_mock(mock1)
        assert first.complete("mock", ECHO, {"x": "hi"}) == "net-reply"
        assert mock1.calls == 1

        second = Gateway(cache=cache_dir)
        mock2 = mock_backend(default=lambda p: "should-not-be-called")
        second.register_mock(mock2)
        assert second.complete("mock", ECHO, {"x": "hi"}) == "net-reply"
        assert mock2.calls == 0
        files = list(cache_dir.glob("*.json"))
        assert len(files) == 1
        entry = json.loads(files[0].read_text(encoding="utf-8"))
        assert entry["reply"] == "net-reply"
        assert entry["prompt"] == "echo:hi"

    def test_key_depends_on_prompt_and_params(self):
        base = cache_key("b", "m", "p", DecodeParams())
        assert cache_key("b", "m", "q", DecodeParams()) != base
        assert cache_key("b", "m", "p", DecodeParams(max_tokens=9)) != base
        assert cache_key("c", "m", "p", DecodeParams()) != base


class TestLimits:
    def test_bounded_concurrency(self):
        gateway = Gateway(cache=None)
        spec = BackendSpec(name="mock", max_in_flight=2)
        mock = mock_backend(default=lambda p: p, latency=0.02)
        gateway.register(spec, mock)
        threads = [
            threading.Thread(target=gateway.complete, args=("mock", ECHO, {"x": str(i)}))
            for i in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert mock.calls == 8
        assert mock.max_in_flight <= 2

    def test_token_bucket_paces_requests(self):
        clock = {"now": 0.0}
        sleeps = []

        def fake_sleep(seconds):
            sleeps.append(seconds)
            clock["now"] += seconds

        gateway = Gateway(cache=None, sleep=fake_sleep, clock=lambda: clock["now"])
        spec = BackendSpec(name="mock", requests_per_second=2.0)
        gateway.register(spec, mock_backend(default=lambda p: p))
        for i in range(4):
            gateway.complete("mock", ECHO, {"x": str(i)})
        # bucket starts with 2 tokens; two more calls wait 0.5s each
        assert sleeps == pytest.approx([0.5, 0.5])


class TestDeterministicRoles:
    def test_sampling_backend_rejected_for_grouping(self):
        gateway = no_sleep_gateway()
        spec = BackendSpec(name="warm", decode=DecodeParams(temperature=0.7))
        gateway.register(spec, mock_backend(default=lambda p: p, name="warm"))
        template = PromptTemplate("group", "1", "{labels}", "group")
        with pytest.raises(ConfigError):
            gateway.complete("warm", template, {"labels": "[]"})

    def test_unknown_backend(self):
        gateway = no_sleep_gateway()
        with pytest.raises(UnknownBackend):
            gateway.complete("ghost", ECHO, {"x": "hi"})


class _ChatHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        self.server.requests.append(
            {"auth": self.headers.get("Authorization"), "body": body}
        )
        mode = self.server.mode
        if mode == "ok":
            content = "served:" + body["messages"][0]["content"]
            payload = json.dumps({"choices": [{"message": {"content": content}}]})
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(payload.encode("utf-8"))
        else:
            status = 503 if mode == "busy" else 400
            self.send_response(status)
            self.end_headers()
            self.wfile.write(b"server says no")

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ChatHandler)
    server.mode = "ok"
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


class TestHttpTransport:
    def _spec(self, server, **kwargs):
        return BackendSpec(
            name="remote",
            endpoint_url=f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions",
            model_id="test-model",
            **kwargs,
        )

    def test_round_trip_and_auth_header(self, chat_server):
        environ = {api_key_env_var("remote"): "sk-test"}
        gateway = Gateway(cache=None, environ=environ)
        gateway.register(self._spec(chat_server))
        reply = gateway.complete("remote", ECHO, {"x": "hello"})
        assert reply == "served:echo:hello"
        request = chat_server.requests[0]
        assert request["auth"] == "Bearer sk-test"
        assert request["body"]["model"] == "test-model"
        assert request["body"]["temperature"] == 0.0

    def test_non_2xx_preserves_body(self, chat_server):
        chat_server.mode = "deny"
        gateway = no_sleep_gateway(cache=None)
        gateway.register(self._spec(chat_server))
        with pytest.raises(BackendRejected) as excinfo:
            gateway.complete("remote", ECHO, {"x": "hello"})
        assert excinfo.value.status == 400
        assert excinfo.value.body == "server says no"

    def test_busy_server_exhausts_retries(self, chat_server):
        chat_server.mode = "busy"
        gateway = no_sleep_gateway(cache=None)
        gateway.register(self._spec(chat_server, max_retries=1))
        with pytest.raises(RetriesExhausted) as excinfo:
            gateway.complete("remote", ECHO, {"x": "hello"})
        assert excinfo.value.attempts == 2
        assert len(chat_server.requests) == 2

    def test_connection_refused_retries_then_fails(self):
        gateway = no_sleep_gateway(cache=None)
        spec = BackendSpec(
            name="remote", endpoint_url="http://127.0.0.1:9/nothing", max_retries=1, timeout=1.0
        )
        gateway.register(spec)
        with pytest.raises(RetriesExhausted):
            gateway.complete("remote", ECHO, {"x": "hello"})


class TestBackendSpecFromConfig:
    def test_basic(self):
        spec = backend_spec_from_config(
            "salmonn",
            {"endpoint_url": "http://host/v1", "model_id": "salmonn-13b", "temperature": 0.0},
        )
        assert spec.name == "salmonn"
        assert spec.decode.temperature == 0.0

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as excinfo:
            backend_spec_from_config("x", {"temprature": 1.0})
        assert "temprature" in excinfo.value.key

    def test_decode_validation(self):
        with pytest.raises(ValueError):
            DecodeParams(temperature=-1)
        with pytest.raises(ValueError):
            DecodeParams(max_tokens=0)
