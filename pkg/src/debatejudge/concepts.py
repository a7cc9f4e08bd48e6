"""Synthetic latent-concept world with Bayesian debating agents.

Each agent holds a prior over M discrete concepts. To answer, it forms the
posterior

    P(theta | x, Z) ∝ P(theta) P(x | theta) prod_j L[theta][kappa_j]

from the task likelihood and the response types kappa_j it has observed,
samples a concept from it, expresses a response type kappa ~ L[theta] and
answers correctly with probability accuracy[theta].

A response type kappa is "strong" for the true concept when column kappa of
L is maximized uniquely at the true concept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .debate import AgentOutput, Response, Task
from .errors import ConfigError, ContractError, DomainError


def _prob_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a nonempty vector")
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} entries must be strictly positive")
    if abs(arr.sum() - 1.0) > 1e-9:
        raise DomainError(f"{name} must sum to 1, got {arr.sum()!r}")
    return arr / arr.sum()


@dataclass(frozen=True)
class ConceptWorld:
    """World parameters. ``task_likelihood`` and ``answer_accuracy`` are
    per-concept probabilities, not distributions, so they need not sum to 1.

    With ``enforce_assumptions`` (the default) the true concept must be
    strictly the most accurate and strictly the most likely to generate the
    task; pass False to build worlds that break those on purpose.
    """

    task_likelihood: tuple
    answer_accuracy: tuple
    response_likelihood: tuple
    true_index: int = 0
    concepts: tuple = ()
    enforce_assumptions: bool = True

    def __post_init__(self):
        tl = tuple(float(v) for v in self.task_likelihood)
        acc = tuple(float(v) for v in self.answer_accuracy)
        rows = tuple(tuple(float(v) for v in row) for row in self.response_likelihood)
        m = len(tl)
        if m < 2:
            raise DomainError("a world needs at least two concepts")
        if len(acc) != m or len(rows) != m or any(len(r) != m for r in rows):
            raise DomainError("task_likelihood, answer_accuracy and response_likelihood must all have size M")
        if not 0 <= self.true_index < m:
            raise DomainError(f"true_index must lie in [0, {m})")
        if any(not (0.0 < v <= 1.0) for v in tl):
            raise DomainError("task_likelihood entries must lie in (0, 1]")
        if any(not (0.0 <= v <= 1.0) for v in acc):
            raise DomainError("answer_accuracy entries must lie in [0, 1]")
        for r in rows:
            _prob_vector(r, "response_likelihood row")
        names = tuple(self.concepts) or tuple(f"c{i}" for i in range(m))
        if len(names) != m:
            raise DomainError("concepts must name every concept")
        object.__setattr__(self, "task_likelihood", tl)
        object.__setattr__(self, "answer_accuracy", acc)
        object.__setattr__(self, "response_likelihood", rows)
        object.__setattr__(self, "concepts", names)
        if self.enforce_assumptions:
            checks = self.assumption_checks()
            failed = [name for name, ok in checks.items() if not ok]
            if failed:
                raise ConfigError(f"world violates: {', '.join(failed)}")

    @property
    def m(self) -> int:
        return len(self.task_likelihood)

    @property
    def L(self) -> np.ndarray:
        return np.array(self.response_likelihood)

    def assumption_checks(self) -> dict:
        star = self.true_index
        others = [i for i in range(self.m) if i != star]
        return {
            "true concept most accurate": all(
                self.answer_accuracy[star] > self.answer_accuracy[i] for i in others
            ),
            "true concept most likely to generate the task": all(
                self.task_likelihood[star] > self.task_likelihood[i] for i in others
            ),
        }

    def is_strong(self, kappa: int) -> bool:
        """True iff L[true][kappa] > L[theta][kappa] for every other theta."""
        col = [row[kappa] for row in self.response_likelihood]
        star = self.true_index
        return all(col[star] > col[i] for i in range(self.m) if i != star)

    def strong_types(self) -> tuple:
        return tuple(k for k in range(self.m) if self.is_strong(k))

    def to_dict(self) -> dict:
        return {
            "concepts": list(self.concepts),
            "true_index": self.true_index,
            "task_likelihood": list(self.task_likelihood),
            "answer_accuracy": list(self.answer_accuracy),
            "response_likelihood": [list(r) for r in self.response_likelihood],
        }

    @classmethod
    def from_dict(cls, d: dict, enforce_assumptions: bool = True) -> "ConceptWorld":
        try:
            return cls(
                task_likelihood=d["task_likelihood"],
                answer_accuracy=d["answer_accuracy"],
                response_likelihood=d["response_likelihood"],
                true_index=int(d.get("true_index", 0)),
                concepts=tuple(d.get("concepts", ())),
                enforce_assumptions=enforce_assumptions,
            )
        except KeyError as exc:
            raise ConfigError(f"world config is missing {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path, enforce_assumptions: bool = True) -> "ConceptWorld":
        return cls.from_dict(json.loads(Path(path).read_text()), enforce_assumptions)


def default_world() -> ConceptWorld:
    return ConceptWorld(
        task_likelihood=(0.5, 0.3, 0.2),
        answer_accuracy=(0.9, 0.4, 0.3),
        response_likelihood=(
            (0.8, 0.1, 0.1),
            (0.15, 0.7, 0.15),
            (0.15, 0.15, 0.7),
        ),
        true_index=0,
        concepts=("true", "distractor-a", "distractor-b"),
    )


@dataclass(frozen=True)
class AgentBelief:
    prior: tuple
    posterior: tuple

    def __post_init__(self):
        p = _prob_vector(self.prior, "prior")
        q = _prob_vector(self.posterior, "posterior")
        if p.size != q.size:
            raise DomainError("prior and posterior sizes differ")
        object.__setattr__(self, "prior", tuple(p.tolist()))
        object.__setattr__(self, "posterior", tuple(q.tolist()))

    @classmethod
    def from_prior(cls, prior) -> "AgentBelief":
        return cls(tuple(prior), tuple(prior))


@dataclass(frozen=True)
class SimResponse:
    expressed_concept: int
    correct: bool
    strongly_consistent: bool
    # concept actually sampled; diagnostic only, invisible to other agents
    sampled_concept: int = field(default=-1, compare=False)


def posterior_update(
    belief: AgentBelief, world: ConceptWorld, observed: Sequence[SimResponse]
) -> AgentBelief:
    """Posterior from the prior, the task likelihood and observed response types."""
    m = world.m
    if len(belief.prior) != m:
        raise DomainError("belief and world sizes differ")
    logp = np.log(np.asarray(belief.prior)) + np.log(np.asarray(world.task_likelihood))
    if observed:
        kappas = np.fromiter((r.expressed_concept for r in observed), dtype=np.int64)
        if kappas.min() < 0 or kappas.max() >= m:
            raise DomainError("observed response type out of range")
        logp = logp + _log_L(world)[:, kappas].sum(axis=1)
    logp -= logp.max()
    post = np.exp(logp)
    total = post.sum()
    assert total > 0.0 and np.all(post > 0.0), "posterior mass vanished"
    return AgentBelief(belief.prior, tuple((post / total).tolist()))


_LOG_L_CACHE: dict = {}


def _log_L(world: ConceptWorld) -> np.ndarray:
    key = world.response_likelihood
    out = _LOG_L_CACHE.get(key)
    if out is None:
        out = np.log(np.array(key))
        _LOG_L_CACHE[key] = out
    return out


def _draw(probs: Sequence[float], u: float) -> int:
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


def correctness_probability(belief: AgentBelief, world: ConceptWorld) -> float:
    """sum_theta posterior[theta] * accuracy[theta]."""
    return float(np.dot(belief.posterior, world.answer_accuracy))


def generate_response(
    belief: AgentBelief,
    world: ConceptWorld,
    rng: np.random.Generator,
    force_concept: Optional[int] = None,
    force_strong: bool = False,
) -> SimResponse:
    """theta ~ posterior, kappa ~ L[theta], correct ~ Bernoulli(accuracy[theta]).

    ``force_concept`` replaces the posterior draw; ``force_strong`` restricts
    kappa to strong types (renormalized L[theta] over them).
    """
    u = rng.random(3)
    theta = _draw(belief.posterior, u[0]) if force_concept is None else int(force_concept)
    row = world.response_likelihood[theta]
    if force_strong:
        strong = world.strong_types()
        if not strong:
            raise ConfigError("world has no strong response type")
        mass = sum(row[k] for k in strong)
        kappa = strong[_draw([row[k] / mass for k in strong], u[1])]
    else:
        kappa = _draw(row, u[1])
    correct = bool(u[2] < world.answer_accuracy[theta])
    return SimResponse(kappa, correct, world.is_strong(kappa), theta)


@dataclass(frozen=True)
class PriorFamily:
    """How agent priors are drawn.

    kind: "uniform"; "dirichlet" (symmetric, ``concentration``); or
    "off_true" (``true_mass`` on the true concept, the rest spread evenly).
    """

    kind: str = "uniform"
    concentration: float = 1.0
    true_mass: float = 0.1

    def __post_init__(self):
        if self.kind not in ("uniform", "dirichlet", "off_true"):
            raise ConfigError(f"unknown prior family {self.kind!r}")
        if self.kind == "off_true" and not 0.0 < self.true_mass < 1.0:
            raise ConfigError("true_mass must lie in (0, 1)")
        if self.kind == "dirichlet" and self.concentration <= 0:
            raise ConfigError("concentration must be positive")

    def draw(self, world: ConceptWorld, rng: np.random.Generator) -> tuple:
        m = world.m
        if self.kind == "uniform":
            p = np.full(m, 1.0 / m)
        elif self.kind == "dirichlet":
            p = rng.dirichlet(np.full(m, self.concentration))
            p = np.maximum(p, 1e-9)
        else:
            p = np.full(m, (1.0 - self.true_mass) / (m - 1))
            p[world.true_index] = self.true_mass
        return tuple((p / p.sum()).tolist())


def _label_pair(task: Task):
    if task.ground_truth is None:
        raise ContractError("simulated agents need a task with ground truth")
    wrong = next((a for a in task.answer_domain if a != task.ground_truth), None)
    if wrong is None:
        raise ContractError("answer domain needs a wrong label")
    return task.ground_truth, wrong


class SimAgent:
    """A debate agent backed by the concept world.

    Each call draws from the agent's own generator, so results do not depend
    on the order in which a round's agents run.
    """

    def __init__(
        self,
        world: ConceptWorld,
        prior: Sequence[float],
        rng: np.random.Generator,
        seed_round0: bool = False,
    ):
        self.world = world
        self.belief = AgentBelief.from_prior(prior)
        self.rng = rng
        self.seed_round0 = seed_round0

    def respond(self, task: Task, agent_id: int, round_index: int, observed: Sequence[Response]) -> AgentOutput:
        seen = [r.payload for r in observed if isinstance(r.payload, SimResponse)]
        self.belief = posterior_update(self.belief, self.world, seen)
        if self.seed_round0 and round_index == 0:
            z = generate_response(
                self.belief, self.world, self.rng, force_concept=self.world.true_index, force_strong=True
            )
        else:
            z = generate_response(self.belief, self.world, self.rng)
        right, wrong = _label_pair(task)
        label = right if z.correct else wrong
        text = f"Reasoning along concept {self.world.concepts[z.expressed_concept]}.\nFinal Answer: {label}"
        return AgentOutput(text, label, z)


def make_sim_agents(
    world: ConceptWorld,
    n: int,
    seed,
    seed_assumption: bool = False,
    prior_family: Optional[PriorFamily] = None,
) -> list[SimAgent]:
    """n agents with independent seeded streams; with ``seed_assumption``
    agent 1's round-0 answer comes from the true concept and a strong type."""
    if n < 1:
        raise ContractError("n must be >= 1")
    prior_family = prior_family or PriorFamily()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(n + 1)
    prior_rng = np.random.default_rng(children[0])
    agents = []
    for i in range(n):
        prior = prior_family.draw(world, prior_rng)
        agents.append(SimAgent(world, prior, np.random.default_rng(children[i + 1]), seed_assumption and i == 0))
    return agents


def sim_task(task_id: str, rng: np.random.Generator, labels: tuple = ("1", "2")) -> Task:
    """A binary task whose correct label is drawn uniformly."""
    truth = labels[int(rng.integers(len(labels)))]
    return Task(task_id, {"synthetic": True}, labels, truth, kind="synthetic")


def paired_history_trials(
    world: ConceptWorld,
    trials: int,
    n: int,
    seed,
    prior_family: Optional[PriorFamily] = None,
    exact: bool = True,
) -> np.ndarray:
    """Paired next-round correctness for histories with and without a strong response.

    Each trial draws a history Z_B of n responses from uniform-posterior
    agents, keeping only draws with no strong response (rejection), and builds
    Z_A by turning one uniformly chosen slot into a strong response. A fresh
    agent (prior from ``prior_family``) then conditions on each history.

    Returns an array (trials, 2) of [after Z_A, after Z_B]: the agent's
    correctness probability when ``exact``, otherwise one sampled answer per
    history drawn with common random numbers.
    """
    prior_family = prior_family or PriorFamily()
    rng = np.random.default_rng(seed)
    strong = world.strong_types()
    if not strong:
        raise ConfigError("world has no strong response type")
    if len(strong) == world.m:
        raise ConfigError("world has no non-strong response type")
    out = np.zeros((trials, 2), dtype=np.float64)
    flat = AgentBelief.from_prior(np.full(world.m, 1.0 / world.m))
    for t in range(trials):
        hist_b = []
        while len(hist_b) < n:
            z = generate_response(flat, world, rng)
            if not z.strongly_consistent:
                hist_b.append(z)
        slot = int(rng.integers(n))
        kappa = strong[int(rng.integers(len(strong)))]
        hist_a = list(hist_b)
        hist_a[slot] = SimResponse(kappa, hist_b[slot].correct, True, hist_b[slot].sampled_concept)
        prior = AgentBelief.from_prior(prior_family.draw(world, rng))
        post_a = posterior_update(prior, world, hist_a)
        post_b = posterior_update(prior, world, hist_b)
        if exact:
            out[t] = correctness_probability(post_a, world), correctness_probability(post_b, world)
        else:
            state = rng.bit_generator.state
            out[t, 0] = generate_response(post_a, world, rng).correct
            rng.bit_generator.state = state
            out[t, 1] = generate_response(post_b, world, rng).correct
    return out
