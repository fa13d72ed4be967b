"""Chat-completion and classifier backends: HTTP clients plus test doubles.

The HTTP chat client speaks the OpenAI-compatible chat-completions schema
since that is what most inference servers expose. The classifier wire
contract is defined by this project: POST <url> with {"context": str}
returning {"probability": float}.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

ENV_BACKEND_URL = "DISCUSSD_BACKEND_URL"
ENV_CLASSIFIER_URL = "DISCUSSD_CLASSIFIER_URL"
ENV_API_KEY = "DISCUSSD_API_KEY"


class BackendError(Exception):
    """Transport- or protocol-level failure talking to an inference backend."""


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str


@dataclass
class ChatRequest:
    messages: list[ChatMessage]
    temperature: float = 0.8
    max_tokens: int = 512
    seed: int | None = None
    want_logprobs: bool = False

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    logprob: float


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass
class ChatResponse:
    text: str
    token_logprobs: list[TokenLogprob] | None = None
    usage: Usage | None = None


@runtime_checkable
class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


@runtime_checkable
class ClassifierBackend(Protocol):
    def score(self, context: str) -> float: ...


# ---------------------------------------------------------------------------
# HTTP clients
# ---------------------------------------------------------------------------


def _post_json(url: str, payload: dict, api_key: str | None, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode("utf-8", "replace")[:500]
        raise BackendError(f"HTTP {exc.code} from {url}: {detail}") from exc
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise BackendError(f"cannot reach {url}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BackendError(f"non-JSON response from {url}") from exc


class HttpChatBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 120.0,
    ):
        base_url = base_url or os.environ.get(ENV_BACKEND_URL)
        if not base_url:
            raise BackendError(f"no backend URL given and {ENV_BACKEND_URL} unset")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        self.model = model
        self.timeout = timeout

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload: dict = {
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if self.model:
            payload["model"] = self.model
        if request.seed is not None:
            payload["seed"] = request.seed
        if request.want_logprobs:
            payload["logprobs"] = True
        data = _post_json(f"{self.base_url}/chat/completions", payload, self.api_key, self.timeout)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion response: {data!r}") from exc

        logprobs = None
        lp_block = (choice.get("logprobs") or {}).get("content")
        if lp_block:
            # clamp tiny positive values some servers emit for certain tokens
            logprobs = [TokenLogprob(e["token"], min(0.0, float(e["logprob"]))) for e in lp_block]
        usage = None
        if isinstance(data.get("usage"), dict):
            usage = Usage(
                prompt_tokens=int(data["usage"].get("prompt_tokens", 0)),
                completion_tokens=int(data["usage"].get("completion_tokens", 0)),
            )
        return ChatResponse(text=text, token_logprobs=logprobs, usage=usage)


class HttpClassifier:
    """Classifier client for the {"context"} -> {"probability"} wire contract."""

    def __init__(self, url: str | None = None, api_key: str | None = None, timeout: float = 30.0):
        url = url or os.environ.get(ENV_CLASSIFIER_URL)
        if not url:
            raise BackendError(f"no classifier URL given and {ENV_CLASSIFIER_URL} unset")
        self.url = url
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        self.timeout = timeout

    def score(self, context: str) -> float:
        data = _post_json(self.url, {"context": context}, self.api_key, self.timeout)
        try:
            p = float(data["probability"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed classifier response: {data!r}") from exc
        if not 0.0 <= p <= 1.0:
            raise BackendError(f"classifier probability out of range: {p}")
        return p


# ---------------------------------------------------------------------------
# Test doubles
# ---------------------------------------------------------------------------


class ScriptedChatBackend:
    """Replays a fixed sequence of responses; records every request."""

    def __init__(self, responses: Sequence[str | ChatResponse | Exception], delay_s: float = 0.0):
        self._queue = list(responses)
        self.delay_s = delay_s
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        if self.delay_s:
            time.sleep(self.delay_s)
        if not self._queue:
            raise BackendError("scripted backend exhausted")
        item = self._queue.pop(0)
        if isinstance(item, Exception):
            raise item
        if isinstance(item, ChatResponse):
            return item
        return ChatResponse(text=item)


class ScriptedClassifier:
    """Yields probabilities from a sequence, a constant, or a callable."""

    def __init__(self, probabilities: float | Sequence[float] | Callable[[str], float], delay_s: float = 0.0):
        self._source = probabilities
        self._i = 0
        self.delay_s = delay_s
        self.contexts: list[str] = []

    def score(self, context: str) -> float:
        self.contexts.append(context)
        if self.delay_s:
            time.sleep(self.delay_s)
        if callable(self._source):
            return self._source(context)
        if isinstance(self._source, (int, float)):
            return float(self._source)
        value = self._source[min(self._i, len(self._source) - 1)]
        self._i += 1
        return float(value)


_HUMAN_COUNT_RE = re.compile(r"feature (\d+) human participants")
_TOPIC_RE = re.compile(r"Topic(?: \(User's Question\))?: (.+)")
_CONTEXT_RE = re.compile(r"Context: (.+)")
_TYPE_RE = re.compile(r"AI Intervention Type: (.+)")

_STUB_NAMES = ["Ava", "Ben", "Cleo", "Dan", "Elif", "Femi", "Gita", "Hugo"]
_STUB_TYPES = [
    "Factual Correction",
    "Concept Definition",
    "Data Provision",
    "Source Identification",
    "Synthesis & Reframing",
]


@dataclass
class StubChatBackend:
    """Deterministic offline generator: output is a pure function of the prompt.

    Stage 1 prompts get a scenario object; stage 2 prompts get a valid
    transcript honoring the requested participant count. Useful for demos
    and for reproducible pipeline runs without an inference server.
    """

    seed: int = 0
    calls: int = field(default=0, init=False)

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        prompt = request.messages[-1].content
        rng = random.Random(hashlib.sha256(f"{self.seed}:{prompt}".encode()).digest())
        if "scenario writer" in prompt:
            return ChatResponse(text=self._scenario(prompt, rng))
        return ChatResponse(text=self._transcript(prompt, rng))

    @staticmethod
    def _first(pattern: re.Pattern, prompt: str, default: str) -> str:
        m = pattern.search(prompt)
        return m.group(1).strip() if m else default

    def _scenario(self, prompt: str, rng: random.Random) -> str:
        topic = self._first(_TOPIC_RE, prompt, "an unspecified question")
        kind = rng.choice(_STUB_TYPES)
        context = f"A small group of colleagues trading opinions about {topic.rstrip('?.! ').lower()}."
        return json.dumps(
            {"topic": topic, "context": context, "ai_intervention_type": kind},
            ensure_ascii=False,
        )

    def _transcript(self, prompt: str, rng: random.Random) -> str:
        count = int(self._first(_HUMAN_COUNT_RE, prompt, "3"))
        count = min(max(count, 2), 6)
        topic = self._first(_TOPIC_RE, prompt, "the question at hand")
        context = self._first(_CONTEXT_RE, prompt, "A group weighing in.")
        names = rng.sample(_STUB_NAMES, count)

        pre = rng.randint(max(2, count), count + 2)
        post = rng.randint(1, 2)
        speakers = names + [rng.choice(names) for _ in range(pre - count)]
        rng.shuffle(speakers)

        lines = ["[SCENARIO_SETUP]", f"Topic: {topic}", f"Context: {context}", "[/SCENARIO_SETUP]", "[DISCUSSION_START]"]
        openers = [
            f"So, about {topic.rstrip('?.! ')}. What do we actually know?",
            "I read something about this but I half remember it.",
            "My take is probably wrong, someone check me.",
            "Honestly I always assumed the obvious answer was true.",
            "Wait, I heard a completely different story about this.",
            "That can't be right, the dates do not even line up.",
        ]
        for i, name in enumerate(speakers):
            lines.append(f"{name}: {openers[i % len(openers)]} ({rng.randrange(1000):03d})")
        lines += [
            "[AI_APPEARED]",
            f"Nexus: Here is the missing piece: the record on this point is clearer than the thread suggests ({rng.randrange(1000):03d}).",
            "[/AI_DISAPPEARED]",
        ]
        for i in range(post):
            lines.append(f"{names[i % len(names)]}: Good catch, that settles it for me ({rng.randrange(1000):03d})")
        lines.append("[/DISCUSSION_END]")
        return "\n".join(lines)
