"""Chat-completion endpoints as debate agents.

The network is reached only through a :class:`Transport`. ``HttpxTransport``
speaks the OpenAI-compatible ``/chat/completions`` wire shape; tests use
:class:`FakeTransport`, which replays scripted replies and records requests.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from string import Template
from typing import Any, Callable, Optional, Protocol, Sequence

from .debate import AgentOutput, Response, Task, extract_judgment
from .errors import AgentFailure, AuthError, ConfigError, ExtractionError, TemplateError, TransportError

logger = logging.getLogger(__name__)

TASK_KINDS = ("pairwise-comparison", "claim-verification", "multiple-choice")
DELIMITER = "#" * 80

# --- templates -------------------------------------------------------------

_PAIRWISE_RULES = (
    "Avoid any position biases and ensure that the order in which the responses were presented "
    "does not influence your decision. Do not allow the length of the responses to influence your "
    "evaluation. Do not favor certain names of the assistants. Be as objective as possible. "
    "Be concise in your reasoning. \n"
)

_FORMAT_BLOCK = (
    "Answer in the following format:\n"
    "\n"
    "Reasoning:\n"
    "Step 1: first step of your reasoning\n"
    "Step 2: second step of your reasoning\n"
    "Step 3: third step of your reasoning\n"
    "...\n"
    "Final Answer: $label_choices\n"
    "\n"
    "Note that the 'Final Answer: ' MUST be placed at the end of your response, and the value must "
    "be only $label_quoted. Do not include any other text after $label_examples.\n"
    "\n"
)

_FOLLOWUP_HEAD = (
    "Several other judges have provided evaluations of $subject. Below are their evaluations: \n"
    f"{DELIMITER}\n"
    "$prior_judgments\n"
    f"{DELIMITER}\n"
)

_PAIRWISE_TASK = (
    "[User Question]\n"
    "$question\n"
    "$answers\n"
    "Which assistant provided the better response? 1 or 2?\n"
    "Your answer:"
)

_CLAIM_RULES = (
    "Judge only whether the claim is factually correct and answers the question. Do not let the "
    "length or style of the claim influence your decision. Be as objective as possible. "
    "Be concise in your reasoning. \n"
)

_CLAIM_TASK = (
    "[Question]\n"
    "$question\n"
    "[The Start of the Claim]\n"
    "$answers\n"
    "[The End of the Claim]\n"
    "Is the claim correct? $label_choices_text?\n"
    "Your answer:"
)

_MC_RULES = (
    "Consider every option before deciding. Do not let the position or the length of an option "
    "influence your decision. Be as objective as possible. Be concise in your reasoning. \n"
)

_MC_TASK = (
    "[Question]\n"
    "$question\n"
    "[Options]\n"
    "$answers\n"
    "Which option is correct? $label_choices_text?\n"
    "Your answer:"
)

_BODIES = {
    ("initial", "pairwise-comparison"): (
        "Please act as an impartial judge and evaluate the quality of the responses provided by two "
        "AI assistants to the user question displayed below. You should choose the assistant that "
        "follows the user's instructions and answers the user's question better. \n"
        + _PAIRWISE_RULES + _FORMAT_BLOCK + _PAIRWISE_TASK
    ),
    ("followup", "pairwise-comparison"): (
        _FOLLOWUP_HEAD
        + "Please act as an independent impartial judge and evaluate the quality of the responses "
        "provided by two AI assistants to the user question displayed below. Consider the previous "
        "judges' evaluations, but make your own assessment. You should choose the assistant that "
        "follows the user's instructions and answers the user's question better.\n"
        + _PAIRWISE_RULES + _FORMAT_BLOCK + _PAIRWISE_TASK
    ),
    ("initial", "claim-verification"): (
        "Please act as an impartial judge and decide whether the claim below correctly answers the "
        "question displayed below. \n" + _CLAIM_RULES + _FORMAT_BLOCK + _CLAIM_TASK
    ),
    ("followup", "claim-verification"): (
        _FOLLOWUP_HEAD
        + "Please act as an independent impartial judge and decide whether the claim below correctly "
        "answers the question displayed below. Consider the previous judges' evaluations, but make "
        "your own assessment.\n" + _CLAIM_RULES + _FORMAT_BLOCK + _CLAIM_TASK
    ),
    ("initial", "multiple-choice"): (
        "Please act as an impartial judge and choose the correct option for the question displayed "
        "below. \n" + _MC_RULES + _FORMAT_BLOCK + _MC_TASK
    ),
    ("followup", "multiple-choice"): (
        _FOLLOWUP_HEAD
        + "Please act as an independent impartial judge and choose the correct option for the "
        "question displayed below. Consider the previous judges' evaluations, but make your own "
        "assessment.\n" + _MC_RULES + _FORMAT_BLOCK + _MC_TASK
    ),
}

_SUBJECTS = {
    "pairwise-comparison": "two AI assistant responses to a user question",
    "claim-verification": "a claim answering a question",
    "multiple-choice": "the options of a multiple-choice question",
}


@dataclass(frozen=True)
class PromptTemplate:
    kind: str  # "initial" or "followup"
    task_kind: str
    body: str

    def __post_init__(self):
        if self.kind not in ("initial", "followup"):
            raise TemplateError(f"unknown template kind {self.kind!r}")
        if "Final Answer:" not in self.body:
            raise TemplateError("template must contain the 'Final Answer:' instruction block")


def default_templates(task_kind: str) -> tuple[PromptTemplate, PromptTemplate]:
    """(initial, followup) templates for a task kind."""
    if task_kind not in TASK_KINDS:
        raise TemplateError(f"unknown task kind {task_kind!r}")
    return (
        PromptTemplate("initial", task_kind, _BODIES[("initial", task_kind)]),
        PromptTemplate("followup", task_kind, _BODIES[("followup", task_kind)]),
    )


def _label_slots(labels: Sequence[str]) -> dict:
    labels = [str(x) for x in labels]
    quoted = [f"'{x}'" for x in labels]
    examples = [f"'Final Answer: {x}'" for x in labels]

    def join_or(items):
        return items[0] if len(items) == 1 else ", ".join(items[:-1]) + " or " + items[-1]

    return {
        "label_choices": "/".join(labels),
        "label_quoted": join_or(quoted),
        "label_examples": join_or(examples),
        "label_choices_text": join_or(labels),
    }


def _answers_block(task: Task) -> str:
    payload = task.prompt_payload
    try:
        if task.kind == "pairwise-comparison":
            answers = list(payload["answers"])
            if len(answers) != 2:
                raise TemplateError("pairwise comparison needs exactly two answers")
            return "\n".join(
                f"[The Start of Assistant {i}'s Answer]\n{a}\n[The End of Assistant {i}'s Answer]"
                for i, a in enumerate(answers, start=1)
            )
        if task.kind == "claim-verification":
            return str(payload["claim"])
        if task.kind == "multiple-choice":
            choices = list(payload["choices"])
            if len(choices) != len(task.answer_domain):
                raise TemplateError("one choice per answer label is required")
            return "\n".join(f"{label}. {c}" for label, c in zip(task.answer_domain, choices))
    except KeyError as exc:
        raise TemplateError(f"task payload is missing {exc.args[0]!r}") from None
    raise TemplateError(f"unknown task kind {task.kind!r}")


def render_prompt(
    template: PromptTemplate, task: Task, prior_round: Optional[Sequence[Response]] = None
) -> str:
    """Fill a template for ``task``. Follow-ups list each prior response as
    ``Judge k: <text>`` in the given order."""
    if template.task_kind != task.kind:
        raise TemplateError(f"template is for {template.task_kind}, task is {task.kind}")
    if "question" not in task.prompt_payload:
        raise TemplateError("task payload is missing 'question'")
    slots = {
        "question": str(task.prompt_payload["question"]),
        "answers": _answers_block(task),
        "subject": _SUBJECTS[task.kind],
        **_label_slots(task.answer_domain),
    }
    if template.kind == "followup":
        if not prior_round:
            raise TemplateError("a follow-up prompt needs at least one prior response")
        slots["prior_judgments"] = "\n".join(
            f"Judge {k}: {r.text}" for k, r in enumerate(prior_round, start=1)
        )
    try:
        return Template(template.body).substitute(slots)
    except (KeyError, ValueError) as exc:
        raise TemplateError(f"template slot could not be filled: {exc}") from None


# --- transport -------------------------------------------------------------


@dataclass(frozen=True)
class HttpReply:
    status: int
    body: Any  # decoded JSON, or raw text when decoding failed


class Transport(Protocol):
    def post(self, url: str, headers: dict, payload: dict, timeout: float) -> HttpReply: ...


class HttpxTransport:
    """Real HTTP via httpx. Timeouts and connection errors raise TransportError."""

    def __init__(self, client=None):
        import httpx

        self._httpx = httpx
        self._client = client or httpx.Client()

    def post(self, url, headers, payload, timeout):
        httpx = self._httpx
        try:
            resp = self._client.post(url, headers=headers, json=payload, timeout=timeout)
        except httpx.TimeoutException as exc:
            raise TransportError(f"request timed out: {type(exc).__name__}") from None
        except httpx.TransportError as exc:
            raise TransportError(f"connection failed: {type(exc).__name__}") from None
        try:
            body = resp.json()
        except ValueError:
            body = resp.text
        return HttpReply(resp.status_code, body)

    def close(self):
        self._client.close()


def chat_reply(text: str) -> HttpReply:
    """A 200 reply in chat-completions shape."""
    return HttpReply(200, {"choices": [{"message": {"role": "assistant", "content": text}}]})


class FakeTransport:
    """Scripted in-process transport.

    ``script`` items are HttpReply objects, strings (shorthand for a 200
    chat reply), exceptions (raised) or callables taking the request payload.
    The last item repeats once the script is exhausted.
    """

    def __init__(self, script: Sequence = (), responder: Optional[Callable[[dict], Any]] = None):
        if not script and responder is None:
            raise ValueError("FakeTransport needs a script or a responder")
        self._script = list(script)
        self._responder = responder
        self._lock = threading.Lock()
        self.requests: list[dict] = []

    def post(self, url, headers, payload, timeout):
        with self._lock:
            self.requests.append({"url": url, "headers": dict(headers), "payload": payload})
            if self._responder is not None:
                item = self._responder(payload)
            else:
                idx = min(len(self.requests) - 1, len(self._script) - 1)
                item = self._script[idx]
        if callable(item) and not isinstance(item, type):
            item = item(payload)
        if isinstance(item, BaseException):
            raise item
        if isinstance(item, str):
            return chat_reply(item)
        return item


# --- client ----------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env_var: Optional[str] = None
    temperature: float = 1.0
    max_tokens: int = 16000
    timeout: float = 120.0
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    concurrency: int = 4

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"


_SEMAPHORES: dict = {}
_SEMAPHORES_LOCK = threading.Lock()


def _endpoint_semaphore(cfg: EndpointConfig) -> threading.BoundedSemaphore:
    key = (cfg.url, cfg.model_name)
    with _SEMAPHORES_LOCK:
        sem = _SEMAPHORES.get(key)
        if sem is None:
            sem = _SEMAPHORES[key] = threading.BoundedSemaphore(cfg.concurrency)
        return sem


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


class ChatClient:
    """One endpoint: request shaping, auth, retries with exponential backoff,
    and a per-endpoint cap on concurrent requests."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: Optional[Transport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.transport = transport if transport is not None else HttpxTransport()
        self._sleep = sleep
        self._sem = _endpoint_semaphore(config)
        self._lock = threading.Lock()
        self.request_count = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        var = self.config.api_key_env_var
        if var:
            key = os.environ.get(var)
            if not key:
                raise AuthError(f"environment variable {var} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, prompt: str) -> dict:
        return {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }

    def backoff(self, attempt: int) -> float:
        return min(self.config.backoff_base * (2.0 ** attempt), self.config.backoff_max)

    def _send(self, headers: dict, payload: dict) -> HttpReply:
        with self._sem:
            with self._lock:
                self.request_count += 1
            return self.transport.post(self.config.url, headers, payload, self.config.timeout)

    def complete(self, prompt: str) -> str:
        """Return the assistant text, retrying transient failures.

        Raises AuthError at once on 401/403, and TransportError once retries
        are exhausted or on any other non-success status.
        """
        headers = self._headers()
        payload = self._payload(prompt)
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.backoff(attempt - 1))
            try:
                reply = self._send(headers, payload)
            except TransportError as exc:
                last = exc
                logger.warning("request to %s failed (attempt %d): %s", self.config.model_name, attempt + 1, exc)
                continue
            if reply.status in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {reply.status})")
            if _retryable(reply.status):
                last = TransportError(f"HTTP {reply.status}")
                logger.warning("%s returned HTTP %d (attempt %d)", self.config.model_name, reply.status, attempt + 1)
                continue
            if reply.status != 200:
                raise TransportError(f"HTTP {reply.status}: {str(reply.body)[:200]}")
            try:
                return str(reply.body["choices"][0]["message"]["content"] or "")
            except (KeyError, IndexError, TypeError):
                last = TransportError("reply is not in chat-completions shape")
        raise TransportError(f"retries exhausted: {last}")


@dataclass
class LlmAgent:
    """Debate agent backed by a chat endpoint.

    Malformed answers (no legal ``Final Answer:``) are re-requested up to
    ``config.max_retries`` times; after that the text is returned without a
    judgment and the engine records an abstention. Transport failures raise
    AgentFailure.
    """

    client: ChatClient
    task_kind: str = "pairwise-comparison"
    include_self: bool = False
    strict: bool = False
    templates: tuple = field(default=())

    def __post_init__(self):
        if not self.templates:
            self.templates = default_templates(self.task_kind)

    def prompt_for(self, task: Task, agent_id: int, round_index: int, observed: Sequence[Response]) -> str:
        initial, followup = self.templates
        others = [r for r in observed if r.text and (self.include_self or r.agent_id != agent_id)]
        if round_index == 0 or not others:
            return render_prompt(initial, task)
        return render_prompt(followup, task, others)

    def respond(self, task: Task, agent_id: int, round_index: int, observed: Sequence[Response]) -> AgentOutput:
        prompt = self.prompt_for(task, agent_id, round_index, observed)
        text = ""
        for attempt in range(self.client.config.max_retries + 1):
            try:
                text = self.client.complete(prompt)
            except AuthError:
                raise
            except TransportError as exc:
                raise AgentFailure(f"agent {agent_id}: {exc}") from None
            try:
                return AgentOutput(text, extract_judgment(text, task.answer_domain, self.strict))
            except ExtractionError as exc:
                logger.info("agent %d gave a malformed answer (attempt %d): %s", agent_id, attempt + 1, exc)
        return AgentOutput(text, None)


def make_llm_agents(
    config: EndpointConfig,
    n: int,
    task_kind: str = "pairwise-comparison",
    transport: Optional[Transport] = None,
    include_self: bool = False,
    strict: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> list[LlmAgent]:
    """n agents sharing one endpoint; they differ only through sampling."""
    client = ChatClient(config, transport, sleep)
    return [LlmAgent(client, task_kind, include_self, strict) for _ in range(n)]
