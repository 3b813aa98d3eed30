"""Language-model-in-the-loop optimizer for (RRI, speed).

Each iteration renders a five-section prompt (background, objective, main
task, output format, example and historical decisions), sends the same
frozen prompt ``K`` times to a chat-completions endpoint, parses the
proposed settings, evaluates them with the model and feeds the new,
non-duplicate records back as history. The loop stops when several
consecutive iterations bring no meaningful improvement.

The endpoint is any HTTP service speaking the chat-completions JSON shape.
:class:`ScriptedMock` and :class:`NeighborhoodMock` provide offline
stand-ins through ``httpx.MockTransport``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

from .errors import ConfigError, EndpointError
from .model import Decision
from .optimize import Candidate, Objective, OptimizerTrace, feasible_speed_interval

log = logging.getLogger(__name__)

SECTION_HEADERS = (
    "## Task background",
    "## Task objective",
    "## Main task",
    "## Output format",
    "## Example decisions",
    "## Historical decisions",
)

_RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class DecisionRecord:
    rri: float  # ms
    speed: float  # km/h
    aoi: float  # ms, inf when the model cannot evaluate the point

    def line(self) -> str:
        aoi = f"{self.aoi:.4f}" if math.isfinite(self.aoi) else "infeasible"
        return f"- rri_ms={self.rri:.4g}, speed_kmh={self.speed:.4g}, aoi_ms={aoi}"


@dataclass
class PromptBundle:
    background: str
    objective: str
    main_task: str
    output_format: str
    exemplars: list[DecisionRecord]
    history: list[DecisionRecord] = field(default_factory=list)
    max_history: int = 30


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "gpt-4o-mini"
    api_key_env: str = "LLM_API_KEY"
    temperature: float = 0.7
    samples_per_iter: int = 5
    max_history: int = 30
    timeout: float = 60.0
    max_retries: int = 3
    backoff_s: float = 1.0

    def __post_init__(self):
        if self.samples_per_iter < 1:
            raise ConfigError("samples_per_iter must be >= 1")
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0 or self.max_history < 1:
            raise ConfigError("max_retries must be >= 0 and max_history >= 1")


@dataclass(frozen=True)
class ConvergenceRule:
    min_improvement: float = 1e-3  # relative
    patience: int = 3
    max_iters: int = 50

    def __post_init__(self):
        if self.patience < 1 or self.max_iters < 1:
            raise ConfigError("patience and max_iters must be >= 1")


@dataclass(frozen=True)
class Proposal:
    rri: float
    speed: float
    clamped: bool = False


# -- prompt ------------------------------------------------------------------


def default_sections(objective: Objective) -> dict[str, str]:
    cfg = objective.scenario
    v_lo, v_hi = feasible_speed_interval(cfg)
    r_lo, r_hi = cfg.rri_bounds
    d_lo, d_hi = cfg.density_bounds
    return {
        "background": (
            "Vehicles on a two-way highway broadcast periodic status packets over a sidelink that uses "
            "semi-persistent scheduling. The age of information (AoI) of a packet is its queuing delay "
            f"plus its transmission delay. Traffic flow is fixed at {cfg.flow_q:g} vehicles per hour, so "
            "vehicle density equals flow divided by speed. Denser traffic puts more vehicles in contention "
            "for the resource blocks available in one resource reservation interval (RRI), which raises the "
            "collision probability. A longer RRI offers more resource blocks but every (re)transmission "
            "then waits longer. Faster vehicles see a larger Doppler shift, the fading channel decorrelates "
            "faster and more packets are lost, which triggers blind retransmissions and re-queuing."
        ),
        "objective": (
            "Minimise the system AoI in milliseconds by choosing the RRI and the vehicle speed. "
            f"Feasible ranges: RRI in [{r_lo:g}, {r_hi:g}] ms and speed in [{v_lo:g}, {v_hi:g}] km/h; "
            f"the implied density then lies in [{d_lo:g}, {d_hi:g}] vehicles per km."
        ),
        "main_task": (
            "Act as an optimisation algorithm. Study the example decisions and the historical decisions, "
            "infer which region of the parameter space yields lower AoI, and propose new (RRI, speed) "
            "settings that you expect to beat the best AoI listed so far. Do not repeat settings that "
            "already appear in either list."
        ),
        "output_format": (
            "Reply with one or more JSON objects, one per line, each exactly of the form "
            '{"rri_ms": <number>, "speed_kmh": <number>}. Any explanation must not contain JSON.'
        ),
    }


def _truncate_history(history, max_history):
    if len(history) <= max_history:
        return list(history)
    keep = set(range(len(history) - max_history, len(history)))
    best = min(range(len(history)), key=lambda i: (history[i].aoi, i))
    if best not in keep:
        keep.remove(min(keep))
        keep.add(best)
    return [history[i] for i in sorted(keep)]


def build_prompt(bundle: PromptBundle) -> str:
    """Render the prompt deterministically.

    Sections appear in the order of :data:`SECTION_HEADERS`. Exemplars keep
    their given order; history is chronological and limited to the most
    recent ``max_history`` records, with the best record always retained.
    """
    texts = (bundle.background, bundle.objective, bundle.main_task, bundle.output_format)
    for name, text in zip(("background", "objective", "main_task", "output_format"), texts):
        if not text or not text.strip():
            raise ConfigError(f"prompt section {name!r} is empty")
    if not bundle.exemplars:
        raise ConfigError("prompt needs at least one exemplar")
    if bundle.max_history < 1:
        raise ConfigError("max_history must be >= 1")
    history = _truncate_history(bundle.history, bundle.max_history)
    parts = []
    for header, text in zip(SECTION_HEADERS[:4], texts):
        parts += [header, text.strip(), ""]
    parts.append(SECTION_HEADERS[4])
    parts += [r.line() for r in bundle.exemplars]
    parts += ["", SECTION_HEADERS[5]]
    parts += [r.line() for r in history] if history else ["(none yet)"]
    return "\n".join(parts) + "\n"


# -- endpoint ------------------------------------------------------------------


def resolve_api_key(cfg: LlmEndpointConfig) -> str:
    key = os.environ.get(cfg.api_key_env)
    if not key:
        raise ConfigError(f"environment variable {cfg.api_key_env} holding the API key is not set")
    return key


def query_model(
    prompt: str,
    cfg: LlmEndpointConfig,
    *,
    client: httpx.Client | None = None,
    api_key: str | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[str]:
    """Send the same prompt ``samples_per_iter`` times; return the raw completions.

    Transport errors and retryable HTTP statuses are retried up to
    ``max_retries`` times with exponential backoff. The key travels only in
    the ``Authorization`` header.
    """
    key = api_key if api_key is not None else resolve_api_key(cfg)
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    body = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
        "n": 1,
    }
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    try:
        return [_post_with_retry(client, url, body, headers, cfg, sleep) for _ in range(cfg.samples_per_iter)]
    finally:
        if own:
            client.close()


def _post_with_retry(client, url, body, headers, cfg, sleep):
    last = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            sleep(cfg.backoff_s * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except httpx.TransportError as exc:
            last = f"{type(exc).__name__}: {exc}"
            log.warning("request to %s failed (%s), attempt %d", url, last, attempt + 1)
            continue
        if resp.status_code in _RETRY_STATUS:
            last = f"HTTP {resp.status_code}"
            log.warning("request to %s returned %s, attempt %d", url, last, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise EndpointError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed chat-completions response: {exc}") from exc
        log.debug("completion: %s", text)
        return text if isinstance(text, str) else ""
    raise EndpointError(f"endpoint unreachable after {cfg.max_retries + 1} attempts ({last})")


# -- parsing -------------------------------------------------------------------

_OBJECT_RE = re.compile(r"\{[^{}]*\}")


def parse_proposals(
    raw: str,
    rri_bounds: tuple[float, float] | None = None,
    speed_bounds: tuple[float, float] | None = None,
) -> list[Proposal]:
    """Extract ``{"rri_ms": x, "speed_kmh": y}`` objects from free text.

    Values outside the bounds are clamped and flagged. Text without any
    valid object yields an empty list.
    """
    out = []
    for match in _OBJECT_RE.finditer(raw or ""):
        try:
            obj = json.loads(match.group(0))
            rri = float(obj["rri_ms"])
            speed = float(obj["speed_kmh"])
        except (ValueError, KeyError, TypeError):
            continue
        if not (math.isfinite(rri) and math.isfinite(speed)):
            continue
        clamped = False
        if rri_bounds is not None:
            c = min(rri_bounds[1], max(rri_bounds[0], rri))
            clamped |= c != rri
            rri = c
        if speed_bounds is not None:
            c = min(speed_bounds[1], max(speed_bounds[0], speed))
            clamped |= c != speed
            speed = c
        out.append(Proposal(rri, speed, clamped))
    return out


# -- optimizer -------------------------------------------------------------------


def quantize(rri: float, speed: float) -> tuple[int, int]:
    return (int(round(rri)), int(round(speed)))


def default_exemplars(objective: Objective) -> list[DecisionRecord]:
    """AoI at the four corners of the feasible box.

    A corner where the resource pool is exhausted is moved up in RRI, 1 ms
    at a time, to the first point the model can evaluate.
    """
    v_lo, v_hi = feasible_speed_interval(objective.scenario)
    r_lo, r_hi = objective.scenario.rri_bounds
    out = []
    for rri, speed in ((r_lo, v_lo), (r_lo, v_hi), (r_hi, v_lo), (r_hi, v_hi)):
        value = objective(speed, rri)
        while not math.isfinite(value) and rri + 1.0 <= r_hi:
            rri += 1.0
            value = objective(speed, rri)
        out.append(DecisionRecord(rri, speed, value))
    return out


def llm_optimize(
    objective: Objective,
    endpoint: LlmEndpointConfig = LlmEndpointConfig(),
    rule: ConvergenceRule = ConvergenceRule(),
    *,
    client: httpx.Client | None = None,
    api_key: str | None = None,
    exemplars: list[DecisionRecord] | None = None,
    run_dir: str | Path | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[Candidate, OptimizerTrace, list[DecisionRecord]]:
    """Run the iterative loop; returns ``(best, trace, history)``.

    ``trace.status`` is ``"converged"`` (patience exhausted), ``"max_iters"``
    or ``"endpoint_error"`` (best-so-far and partial trace are still
    returned). Only iterations that produced at least one parsable proposal
    count towards patience.
    """
    cfg = objective.scenario
    rri_bounds = cfg.rri_bounds
    speed_bounds = feasible_speed_interval(cfg)
    exemplars = list(exemplars) if exemplars is not None else default_exemplars(objective)
    sections = default_sections(objective)
    if api_key is None:
        api_key = resolve_api_key(endpoint)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    seen = {quantize(r.rri, r.speed) for r in exemplars}
    history: list[DecisionRecord] = []
    start = min(exemplars, key=lambda r: r.aoi)
    best = Candidate(Decision(start.speed, start.rri), start.aoi)
    trace = OptimizerTrace("llm", status="max_iters")
    stagnant = 0
    for it in range(1, rule.max_iters + 1):
        bundle = PromptBundle(exemplars=exemplars, history=history, max_history=endpoint.max_history, **sections)
        prompt = build_prompt(bundle)
        log.debug("iteration %d prompt:\n%s", it, prompt)
        if run_dir is not None:
            (run_dir / f"iter_{it:03d}_prompt.txt").write_text(prompt)
        try:
            raws = query_model(prompt, endpoint, client=client, api_key=api_key, sleep=sleep)
        except EndpointError as exc:
            log.error("iteration %d aborted: %s", it, exc)
            trace.status = "endpoint_error"
            break
        if run_dir is not None:
            (run_dir / f"iter_{it:03d}_responses.json").write_text(json.dumps(raws, indent=1))

        proposals = [p for raw in raws for p in parse_proposals(raw, rri_bounds, speed_bounds)]
        prev = best.aoi
        current = math.inf
        evaluated = {}
        for p in proposals:
            if (p.rri, p.speed) in evaluated:
                continue
            value = objective(p.speed, p.rri)
            evaluated[(p.rri, p.speed)] = value
            current = min(current, value)
            if value < best.aoi:
                best = Candidate(Decision(p.speed, p.rri), value)
            key = quantize(p.rri, p.speed)
            if key not in seen:
                seen.add(key)
                history.append(DecisionRecord(p.rri, p.speed, value))
        trace.record(it, best, current)

        if proposals:
            gain = (prev - best.aoi) / prev if math.isfinite(prev) else (math.inf if math.isfinite(best.aoi) else 0.0)
            stagnant = stagnant + 1 if gain < rule.min_improvement else 0
            if stagnant >= rule.patience:
                trace.status = "converged"
                break
    trace.evaluations = objective.evaluations
    return best, trace, history


# -- offline endpoints -------------------------------------------------------------


def _completion(text: str) -> dict:
    return {
        "id": "mock",
        "object": "chat.completion",
        "model": "mock",
        "choices": [{"index": 0, "finish_reason": "stop", "message": {"role": "assistant", "content": text}}],
    }


class ScriptedMock:
    """In-process chat-completions endpoint returning scripted text.

    ``script`` is either a list of replies (used in call order, the last one
    repeating) or a callable ``(prompt, call_index) -> str``. The first
    ``fail_first`` calls raise a connection error; every request is kept in
    ``requests`` for inspection.
    """

    def __init__(self, script, *, fail_first: int = 0):
        self.script = script
        self.fail_first = fail_first
        self.calls = 0
        self.requests: list[httpx.Request] = []

    def reply(self, prompt: str, index: int) -> str:
        if callable(self.script):
            return self.script(prompt, index)
        return self.script[min(index, len(self.script) - 1)]

    def handler(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(request)
        n = self.calls
        self.calls += 1
        if n < self.fail_first:
            raise httpx.ConnectError("scripted failure", request=request)
        body = json.loads(request.content)
        prompt = body["messages"][-1]["content"]
        success_index = n - self.fail_first
        return httpx.Response(200, json=_completion(self.reply(prompt, success_index)))

    def client(self) -> httpx.Client:
        return httpx.Client(transport=httpx.MockTransport(self.handler))


_LINE_RE = re.compile(r"rri_ms=([-\d.eE+]+), speed_kmh=([-\d.eE+]+), aoi_ms=([-\d.eE+]+)")


class NeighborhoodMock(ScriptedMock):
    """Offline stand-in that behaves like a cautious local searcher.

    It reads every decision line from the prompt, takes the best one and
    proposes Gaussian perturbations around it, shrinking the step as the
    history grows. Deterministic for a given seed.
    """

    def __init__(self, seed: int = 0, proposals: int = 3, *, fail_first: int = 0):
        super().__init__(self._propose, fail_first=fail_first)
        self.rng = np.random.default_rng(seed)
        self.proposals = proposals

    def _propose(self, prompt: str, index: int) -> str:
        rows = [(float(a), float(b), float(c)) for a, b, c in _LINE_RE.findall(prompt)]
        if not rows:
            return "I could not find any decisions to learn from."
        rri, speed, _ = min(rows, key=lambda t: t[2])
        scale = 1.0 / math.sqrt(1.0 + len(rows) / 4)
        lines = []
        for _ in range(self.proposals):
            r = rri + self.rng.normal(0.0, 10.0 * scale)
            v = speed + self.rng.normal(0.0, 10.0 * scale)
            lines.append(json.dumps({"rri_ms": round(r, 1), "speed_kmh": round(v, 1)}))
        return "Proposed settings:\n" + "\n".join(lines)
