"""Multi-agent debate engine.

Round 0: every agent answers the task alone. Rounds 1..T: every agent answers
again after seeing the previous round (optionally diversity-pruned, or the
whole history). After each round t >= 1 the engine returns early on
consensus, or when the stop hook fires; otherwise the majority vote of
round T is returned.

Agents are any objects with a ``respond(task, agent_id, round_index,
observed)`` method returning an :class:`AgentOutput` (or a plain string to
be parsed for a ``Final Answer:`` marker).
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Hashable, Mapping, Optional, Protocol, Sequence

from .errors import AuthError, ContractError, ExtractionError

logger = logging.getLogger(__name__)

Label = Hashable

FINAL_ANSWER_MARKER = "Final Answer:"
_MARKER_RE = re.compile(re.escape(FINAL_ANSWER_MARKER))
_LENIENT_STRIP = " \t\r\n*`'\".,;:!)]}"


@dataclass(frozen=True)
class Task:
    id: str
    prompt_payload: Mapping[str, Any]
    answer_domain: tuple
    ground_truth: Optional[Label] = None
    kind: str = "pairwise-comparison"

    def __post_init__(self):
        object.__setattr__(self, "answer_domain", tuple(self.answer_domain))
        if not self.answer_domain:
            raise ContractError("answer_domain must be nonempty")
        if self.ground_truth is not None and self.ground_truth not in self.answer_domain:
            raise ContractError(f"ground truth {self.ground_truth!r} is not in the answer domain")


@dataclass(frozen=True)
class Response:
    agent_id: int
    round: int
    text: str
    judgment: Optional[Label]  # None marks an abstention
    payload: Any = field(default=None, compare=False, repr=False)
    error: Optional[str] = field(default=None, compare=False)

    @property
    def abstained(self) -> bool:
        return self.judgment is None


Round = tuple  # tuple[Response, ...], ordered by agent_id


@dataclass(frozen=True)
class AgentOutput:
    text: str
    judgment: Optional[Label] = None
    payload: Any = None


class Agent(Protocol):
    def respond(
        self, task: Task, agent_id: int, round_index: int, observed: Sequence[Response]
    ) -> AgentOutput | str: ...


class OutcomeKind(str, Enum):
    CONSENSUS = "Consensus"
    MAJORITY_AT_T = "MajorityAtT"
    MAJORITY_AT_STOP = "MajorityAtStop"


@dataclass
class Transcript:
    task_id: str
    rounds: list
    outcome: Optional[Label]
    outcome_kind: OutcomeKind
    rounds_executed: int

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "rounds": [
                {
                    "t": t,
                    "responses": [
                        {"agent": r.agent_id, "judgment": r.judgment, "text": r.text}
                        for r in rnd
                    ],
                }
                for t, rnd in enumerate(self.rounds)
            ],
            "outcome": self.outcome,
            "outcome_kind": self.outcome_kind.value,
            "rounds_executed": self.rounds_executed,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Transcript":
        rounds = [
            tuple(
                Response(r["agent"], rnd["t"], r["text"], r["judgment"]) for r in rnd["responses"]
            )
            for rnd in d["rounds"]
        ]
        return cls(
            d["task_id"],
            rounds,
            d["outcome"],
            OutcomeKind(d["outcome_kind"]),
            int(d["rounds_executed"]),
        )


def extract_judgment(text: str, answer_domain: Sequence[Label], strict: bool = False) -> Label:
    """Parse the judgment after the last ``Final Answer:`` marker.

    Lenient mode reads the first token after the marker, ignoring markdown
    emphasis and trailing punctuation. Strict mode requires the remainder of
    the text to be exactly one legal label.
    """
    matches = list(_MARKER_RE.finditer(text or ""))
    if not matches:
        raise ExtractionError("no 'Final Answer:' marker found")
    tail = text[matches[-1].end():]
    by_text = {str(label): label for label in answer_domain}
    if strict:
        candidate = tail.strip()
    else:
        parts = tail.strip(_LENIENT_STRIP).split()
        candidate = parts[0].strip(_LENIENT_STRIP) if parts else ""
    if candidate not in by_text:
        raise ExtractionError(f"illegal or missing label after marker: {candidate[:40]!r}")
    return by_text[candidate]


def consensus(judgments: Sequence[Optional[Label]], n_agents: Optional[int] = None) -> Optional[Label]:
    """The shared label if all (non-abstaining) judgments agree, else None.

    With ``n_agents`` given, at least ceil(n/2) agents must have answered.
    """
    votes = [j for j in judgments if j is not None]
    if not votes:
        return None
    if n_agents is not None and len(votes) < math.ceil(n_agents / 2):
        return None
    first = votes[0]
    return first if all(v == first for v in votes) else None


def majority_vote(judgments: Sequence[Optional[Label]]) -> Label:
    """Most frequent label; ties go to the tied label answered by the
    lowest-indexed agent. Abstentions (None) are skipped."""
    votes = [j for j in judgments if j is not None]
    if not votes:
        raise ContractError("majority_vote needs at least one judgment")
    counts = Counter(votes)
    top = max(counts.values())
    for v in votes:
        if counts[v] == top:
            return v
    raise AssertionError("unreachable")  # pragma: no cover


def diversity_prune(responses: Sequence[Response], target: int = 5) -> Round:
    """Keep ``target`` responses covering as many distinct judgments as
    possible; leftover slots go to the lowest agent indices."""
    ordered = sorted(responses, key=lambda r: r.agent_id)
    if target > len(ordered):
        raise ContractError(f"cannot keep {target} of {len(ordered)} responses")
    chosen: list[Response] = []
    covered: set = set()
    for r in ordered:
        if len(chosen) == target:
            break
        if r.judgment is not None and r.judgment not in covered:
            chosen.append(r)
            covered.add(r.judgment)
    picked = {r.agent_id for r in chosen}
    for r in ordered:
        if len(chosen) == target:
            break
        if r.agent_id not in picked:
            chosen.append(r)
            picked.add(r.agent_id)
    return tuple(sorted(chosen, key=lambda r: r.agent_id))


@dataclass(frozen=True)
class DebateConfig:
    max_rounds: int = 10
    pruning: bool = False
    prune_target: int = 5
    full_history: bool = False
    strict_extraction: bool = False
    agent_retries: int = 0
    # None: one worker per agent; 1: call agents sequentially
    max_workers: Optional[int] = None
    stop_hook: Optional[Callable[[int, Round], bool]] = None

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ContractError("max_rounds must be >= 1")
        if self.prune_target < 1:
            raise ContractError("prune_target must be >= 1")


class Debate:
    """One debate, advanced a round at a time.

    ``run_debate`` drives this to completion; the batch harness steps many
    debates in lockstep so that per-round scores can be pooled.
    """

    def __init__(
        self,
        task: Task,
        agents: Sequence[Agent],
        config: Optional[DebateConfig] = None,
        executor: Optional[ThreadPoolExecutor] = None,
    ):
        if not agents:
            raise ContractError("a debate needs at least one agent")
        self.task = task
        self.agents = list(agents)
        self.config = config or DebateConfig()
        self._executor = executor
        self.rounds: list[Round] = []
        self.outcome: Optional[Label] = None
        self.outcome_kind: Optional[OutcomeKind] = None
        self.calls = 0

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def done(self) -> bool:
        return self.outcome_kind is not None

    @property
    def next_round(self) -> int:
        return len(self.rounds)

    def _observed(self) -> tuple:
        if not self.rounds:
            return ()
        cfg = self.config
        prev_rounds = self.rounds if cfg.full_history else self.rounds[-1:]
        out: list[Response] = []
        for rnd in prev_rounds:
            if cfg.pruning and len(rnd) > cfg.prune_target:
                rnd = diversity_prune(rnd, cfg.prune_target)
            out.extend(rnd)
        return tuple(out)

    def _call_agent(self, idx: int, t: int, observed: tuple) -> Response:
        agent_id = idx + 1
        agent = self.agents[idx]
        last_error = None
        for attempt in range(self.config.agent_retries + 1):
            try:
                out = agent.respond(self.task, agent_id, t, observed)
                break
            except AuthError:
                raise
            except Exception as exc:  # agent failures become abstentions
                last_error = exc
                logger.warning("agent %d failed in round %d (attempt %d): %r", agent_id, t, attempt + 1, exc)
        else:
            return Response(agent_id, t, "", None, error=f"agent failure: {last_error!r}")
        if isinstance(out, str):
            out = AgentOutput(out)
        judgment = out.judgment
        error = None
        if judgment is None:
            try:
                judgment = extract_judgment(out.text, self.task.answer_domain, self.config.strict_extraction)
            except ExtractionError as exc:
                error = f"extraction: {exc}"
        elif judgment not in self.task.answer_domain:
            error = f"illegal judgment {judgment!r}"
            judgment = None
        return Response(agent_id, t, out.text, judgment, payload=out.payload, error=error)

    def step(self) -> Round:
        """Run the next round and apply the termination rules."""
        if self.done:
            raise ContractError("debate already finished")
        t = self.next_round
        observed = self._observed()
        workers = self.config.max_workers
        if workers == 1 or self.n == 1:
            responses = [self._call_agent(i, t, observed) for i in range(self.n)]
        elif self._executor is not None:
            futures = [self._executor.submit(self._call_agent, i, t, observed) for i in range(self.n)]
            responses = [f.result() for f in futures]
        else:
            with ThreadPoolExecutor(max_workers=workers or self.n) as pool:
                responses = list(pool.map(lambda i: self._call_agent(i, t, observed), range(self.n)))
        self.calls += self.n
        rnd: Round = tuple(sorted(responses, key=lambda r: r.agent_id))
        self.rounds.append(rnd)
        if t >= 1:
            judgments = [r.judgment for r in rnd]
            agreed = consensus(judgments, self.n)
            if agreed is not None:
                self._finish(agreed, OutcomeKind.CONSENSUS)
            elif self.config.stop_hook is not None and self.config.stop_hook(t, rnd):
                self._finish(self.majority_at(t), OutcomeKind.MAJORITY_AT_STOP)
            elif t >= self.config.max_rounds:
                self._finish(self.majority_at(t), OutcomeKind.MAJORITY_AT_T)
        return rnd

    def majority_at(self, t: int) -> Optional[Label]:
        """Majority of round t, or of the latest earlier round with any votes."""
        for rnd in reversed(self.rounds[: t + 1]):
            judgments = [r.judgment for r in rnd]
            if any(j is not None for j in judgments):
                return majority_vote(judgments)
        return None

    def _finish(self, outcome, kind: OutcomeKind):
        self.outcome = outcome
        self.outcome_kind = kind

    def stop_now(self):
        """Finalize at the latest round by majority vote (external stop)."""
        if not self.done:
            self._finish(self.majority_at(len(self.rounds) - 1), OutcomeKind.MAJORITY_AT_STOP)

    def transcript(self) -> Transcript:
        if not self.done:
            raise ContractError("debate has not finished")
        return Transcript(
            self.task.id,
            list(self.rounds),
            self.outcome,
            self.outcome_kind,
            len(self.rounds) - 1,
        )


def run_debate(
    task: Task,
    agents: Sequence[Agent],
    config: Optional[DebateConfig] = None,
    executor: Optional[ThreadPoolExecutor] = None,
) -> Transcript:
    debate = Debate(task, agents, config, executor)
    while not debate.done:
        debate.step()
    return debate.transcript()


def outcome_at(transcript: Transcript, t: int) -> tuple[Optional[Label], OutcomeKind]:
    """The outcome the debate would have had if stopped after round t.

    Consensus reached at or before t is kept; otherwise the majority of
    round t (or of the last executed round, if the debate ended earlier).
    """
    if transcript.outcome_kind is OutcomeKind.CONSENSUS and transcript.rounds_executed <= t:
        return transcript.outcome, OutcomeKind.CONSENSUS
    if t >= transcript.rounds_executed:
        return transcript.outcome, transcript.outcome_kind
    for rnd in reversed(transcript.rounds[: t + 1]):
        judgments = [r.judgment for r in rnd]
        if any(j is not None for j in judgments):
            return majority_vote(judgments), OutcomeKind.MAJORITY_AT_STOP
    return None, OutcomeKind.MAJORITY_AT_STOP
