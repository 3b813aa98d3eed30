import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsaoi.errors import ConfigError, EndpointError
from spsaoi.llmopt import (
    SECTION_HEADERS,
    ConvergenceRule,
    DecisionRecord,
    LlmEndpointConfig,
    NeighborhoodMock,
    PromptBundle,
    ScriptedMock,
    build_prompt,
    default_exemplars,
    default_sections,
    llm_optimize,
    parse_proposals,
    quantize,
    query_model,
)
from spsaoi.optimize import Objective

BOUNDS = ((10, 100), (30, 120))
KEY = "sk-test-secret-123"
FAST = LlmEndpointConfig(samples_per_iter=3, backoff_s=0.0)


def no_sleep(_):
    pass


def records(n, start=0):
    return [DecisionRecord(10 + i, 50 + i, 100.0 - i % 7) for i in range(start, start + n)]


def bundle(history=(), exemplars=None, max_history=30):
    return PromptBundle(
        background="bg",
        objective="obj",
        main_task="task",
        output_format="fmt",
        exemplars=records(3) if exemplars is None else exemplars,
        history=list(history),
        max_history=max_history,
    )


def decision_lines(prompt):
    return [line for line in prompt.splitlines() if line.startswith("- rri_ms=")]


class TestPrompt:
    def test_deterministic(self):
        assert build_prompt(bundle(records(5))) == build_prompt(bundle(records(5)))

    def test_three_exemplars_no_history(self):
        p = build_prompt(bundle())
        assert len(decision_lines(p)) == 3
        assert "(none yet)" in p

    def test_section_order(self):
        p = build_prompt(bundle(records(2)))
        positions = [p.index(h) for h in SECTION_HEADERS]
        assert positions == sorted(positions)

    def test_truncation_keeps_best(self):
        hist = records(40)
        hist[2] = DecisionRecord(12, 52, 1.0)
        p = build_prompt(bundle(hist, max_history=30))
        lines = decision_lines(p.split(SECTION_HEADERS[5])[1])
        assert len(lines) == 30
        assert hist[2].line() in lines
        assert hist[-1].line() in lines

    def test_truncation_chronological(self):
        hist = records(10)
        lines = decision_lines(build_prompt(bundle(hist, max_history=4)).split(SECTION_HEADERS[5])[1])
        assert lines == [r.line() for r in hist[6:]]

    @pytest.mark.parametrize("field", ["background", "objective", "main_task", "output_format"])
    def test_empty_section(self, field):
        b = bundle()
        setattr(b, field, "  ")
        with pytest.raises(ConfigError):
            build_prompt(b)

    def test_needs_exemplars(self):
        with pytest.raises(ConfigError):
            build_prompt(bundle(exemplars=[]))

    def test_infeasible_line(self):
        assert DecisionRecord(10, 30, math.inf).line().endswith("aoi_ms=infeasible")

    def test_default_sections_mention_ranges(self):
        text = default_sections(Objective())["objective"]
        assert "[10, 100] ms" in text and "[30, 120] km/h" in text


class TestExemplars:
    def test_corners_with_nudge(self):
        obj = Objective()
        ex = default_exemplars(obj)
        assert [(r.rri, r.speed) for r in ex] == [(11, 30), (10, 120), (100, 30), (100, 120)]
        assert all(r.aoi == obj(r.speed, r.rri) for r in ex)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"samples_per_iter": 0}, {"timeout": 0}, {"max_retries": -1}])
    def test_endpoint_rejects(self, kw):
        with pytest.raises(ConfigError):
            LlmEndpointConfig(**kw)

    @pytest.mark.parametrize("kw", [{"patience": 0}, {"max_iters": 0}])
    def test_rule_rejects(self, kw):
        with pytest.raises(ConfigError):
            ConvergenceRule(**kw)


class TestQuery:
    def test_k_copies(self):
        mock = ScriptedMock(["fixed"])
        out = query_model("p", FAST, client=mock.client(), api_key=KEY)
        assert out == ["fixed"] * 3 and len(mock.requests) == 3

    def test_frozen_prompt_and_wire_shape(self):
        mock = ScriptedMock(["x"])
        query_model("the prompt", FAST, client=mock.client(), api_key=KEY)
        bodies = [json.loads(r.content) for r in mock.requests]
        assert all(b == bodies[0] for b in bodies)
        assert bodies[0]["messages"] == [{"role": "user", "content": "the prompt"}]
        assert bodies[0]["n"] == 1 and bodies[0]["temperature"] == 0.7
        assert str(mock.requests[0].url) == "http://localhost:8000/v1/chat/completions"

    def test_key_only_in_header(self):
        mock = ScriptedMock(["x"])
        query_model("p", FAST, client=mock.client(), api_key=KEY)
        for r in mock.requests:
            assert KEY.encode() not in r.content
            assert r.headers["authorization"] == f"Bearer {KEY}"

    def test_fail_twice_then_succeed(self):
        waits = []
        mock = ScriptedMock(["ok"], fail_first=2)
        cfg = LlmEndpointConfig(samples_per_iter=1, max_retries=3, backoff_s=0.5)
        assert query_model("p", cfg, client=mock.client(), api_key=KEY, sleep=waits.append) == ["ok"]
        assert waits == [0.5, 1.0]

    def test_no_retries_raises(self):
        mock = ScriptedMock(["ok"], fail_first=1)
        cfg = LlmEndpointConfig(samples_per_iter=1, max_retries=0)
        with pytest.raises(EndpointError):
            query_model("p", cfg, client=mock.client(), api_key=KEY, sleep=no_sleep)

    def test_retryable_status(self):
        replies = iter([httpx.Response(503), httpx.Response(200, json={"choices": [{"message": {"content": "y"}}]})])
        client = httpx.Client(transport=httpx.MockTransport(lambda req: next(replies)))
        cfg = LlmEndpointConfig(samples_per_iter=1)
        assert query_model("p", cfg, client=client, api_key=KEY, sleep=no_sleep) == ["y"]

    def test_client_error_not_retried(self):
        calls = []

        def handler(req):
            calls.append(req)
            return httpx.Response(401, text="bad key")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        with pytest.raises(EndpointError):
            query_model("p", FAST, client=client, api_key=KEY, sleep=no_sleep)
        assert len(calls) == 1

    def test_malformed_body(self):
        client = httpx.Client(transport=httpx.MockTransport(lambda req: httpx.Response(200, json={"oops": 1})))
        with pytest.raises(EndpointError):
            query_model("p", FAST, client=client, api_key=KEY)

    def test_missing_key_names_variable(self):
        cfg = LlmEndpointConfig(api_key_env="MY_SECRET_VAR")
        with pytest.raises(ConfigError, match="MY_SECRET_VAR"):
            query_model("p", cfg, client=ScriptedMock(["x"]).client())

    def test_key_from_environment(self, monkeypatch):
        monkeypatch.setenv("LLM_API_KEY", KEY)
        mock = ScriptedMock(["x"])
        query_model("p", FAST, client=mock.client())
        assert mock.requests[0].headers["authorization"] == f"Bearer {KEY}"


class _Handler(BaseHTTPRequestHandler):
    seen: list = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        self.seen.append((self.path, self.headers["Authorization"], json.loads(body)))
        payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": '{"rri_ms": 20, "speed_kmh": 90}'}}]})
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload.encode())

    def log_message(self, *args):
        pass


def test_real_socket_round_trip(monkeypatch):
    for var in ("HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY", "http_proxy", "https_proxy", "all_proxy"):
        monkeypatch.delenv(var, raising=False)
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        cfg = LlmEndpointConfig(base_url=f"http://127.0.0.1:{server.server_port}/v1/", samples_per_iter=2, timeout=5)
        out = query_model("hello", cfg, api_key=KEY)
    finally:
        server.shutdown()
    assert out == ['{"rri_ms": 20, "speed_kmh": 90}'] * 2
    path, auth, body = _Handler.seen[-1]
    assert path == "/v1/chat/completions" and auth == f"Bearer {KEY}"
    assert body["messages"][0]["content"] == "hello"


class TestParse:
    def test_single(self):
        assert [(p.rri, p.speed) for p in parse_proposals('{"rri_ms": 20, "speed_kmh": 90}')] == [(20, 90)]

    def test_prose(self):
        assert parse_proposals("I would pick a moderate RRI and a high speed.") == []

    def test_clamped(self):
        (p,) = parse_proposals('{"rri_ms": 5, "speed_kmh": 300}', *BOUNDS)
        assert (p.rri, p.speed, p.clamped) == (10, 120, True)

    def test_fenced_and_several(self):
        raw = 'Here:\n```json\n{"rri_ms": 30, "speed_kmh": 100}\n```\nand {"speed_kmh": 60.5, "rri_ms": 12}'
        out = parse_proposals(raw, *BOUNDS)
        assert [(p.rri, p.speed, p.clamped) for p in out] == [(30, 100, False), (12, 60.5, False)]

    @pytest.mark.parametrize(
        "raw", ['{"rri_ms": "fast", "speed_kmh": 1}', '{"rri_ms": 20}', "{not json}", '{"rri_ms": NaN, "speed_kmh": 50}', ""]
    )
    def test_malformed_skipped(self, raw):
        assert parse_proposals(raw, *BOUNDS) == []

    @given(st.text())
    def test_never_crashes(self, raw):
        for p in parse_proposals(raw, *BOUNDS):
            assert 10 <= p.rri <= 100 and 30 <= p.speed <= 120

    def test_quantize(self):
        assert quantize(20.4, 89.6) == (20, 90)


class TestLoop:
    def test_grid_optimum_in_first_iteration(self, grid_best, tmp_path):
        best_grid = grid_best[0]
        d = best_grid.decision
        mock = ScriptedMock([json.dumps({"rri_ms": d.rri, "speed_kmh": d.speed})])
        best, trace, _ = llm_optimize(Objective(), FAST, client=mock.client(), api_key=KEY, run_dir=tmp_path, sleep=no_sleep)
        assert trace.status == "converged"
        assert best.aoi == best_grid.aoi and best.decision == d
        assert (tmp_path / "iter_001_prompt.txt").exists()
        assert json.loads((tmp_path / "iter_001_responses.json").read_text())[0].startswith("{")

    def test_duplicates_stop_via_patience(self):
        mock = ScriptedMock(['{"rri_ms": 40, "speed_kmh": 80}\n{"rri_ms": 40.2, "speed_kmh": 79.8}'])
        rule = ConvergenceRule(patience=3, max_iters=50)
        _, trace, history = llm_optimize(Objective(), FAST, rule, client=mock.client(), api_key=KEY, sleep=no_sleep)
        assert trace.status == "converged" and len(trace.iterations) <= 4
        keys = [quantize(r.rri, r.speed) for r in history]
        assert len(keys) == len(set(keys)) == 1

    def test_unparsable_runs_to_max_iters(self):
        obj = Objective()
        mock = ScriptedMock(["no idea, sorry"])
        rule = ConvergenceRule(max_iters=6)
        best, trace, history = llm_optimize(obj, FAST, rule, client=mock.client(), api_key=KEY, sleep=no_sleep)
        assert trace.status == "max_iters" and len(trace.iterations) == 6
        assert best.aoi == min(r.aoi for r in default_exemplars(Objective()))
        assert history == []

    def test_endpoint_error_keeps_partial_trace(self):
        calls = {"n": 0}

        def handler(req):
            calls["n"] += 1
            if calls["n"] > 3:
                raise httpx.ConnectError("down", request=req)
            return httpx.Response(200, json={"choices": [{"message": {"content": '{"rri_ms": 30, "speed_kmh": 110}'}}]})

        client = httpx.Client(transport=httpx.MockTransport(handler))
        cfg = LlmEndpointConfig(samples_per_iter=3, max_retries=1, backoff_s=0.0)
        best, trace, history = llm_optimize(Objective(), cfg, client=client, api_key=KEY, sleep=no_sleep)
        assert trace.status == "endpoint_error"
        assert len(trace.iterations) == 1 and len(history) == 1
        assert best.aoi <= history[0].aoi

    def test_missing_key(self):
        with pytest.raises(ConfigError, match="LLM_API_KEY"):
            llm_optimize(Objective(), FAST, client=ScriptedMock(["x"]).client())

    @given(st.integers(0, 1000))
    @settings(max_examples=8)
    def test_monotone_and_unique_with_random_mock(self, seed):
        mock = NeighborhoodMock(seed)
        rule = ConvergenceRule(max_iters=8)
        _, trace, history = llm_optimize(Objective(), FAST, rule, client=mock.client(), api_key=KEY, sleep=no_sleep)
        b = trace.best_aoi
        assert all(x >= y for x, y in zip(b, b[1:]))
        keys = [quantize(r.rri, r.speed) for r in history]
        assert len(keys) == len(set(keys))

    def test_history_values_match_model(self):
        obj = Objective()
        mock = NeighborhoodMock(4)
        _, _, history = llm_optimize(obj, FAST, ConvergenceRule(max_iters=4), client=mock.client(), api_key=KEY, sleep=no_sleep)
        fresh = Objective()
        assert history and all(r.aoi == fresh(r.speed, r.rri) for r in history)

    def test_neighborhood_mock_reaches_grid(self, grid_best):
        mock = NeighborhoodMock(0)
        best, _, _ = llm_optimize(Objective(), LlmEndpointConfig(), client=mock.client(), api_key=KEY, sleep=no_sleep)
        assert best.aoi <= 1.01 * grid_best[0].aoi
