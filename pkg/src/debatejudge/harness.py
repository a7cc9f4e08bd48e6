"""Batch runner: debates over many items, pooled per-round scores, the
stopping controller, metrics and on-disk artifacts.

All items advance one round at a time. After each debate round t >= 1 the
batch's correct counts form one RoundScores sample for the stopping
controller. Items that ended early by consensus keep contributing their final
round. By default every debate still runs to T, so the stopped outcome
(transcripts truncated at the stop round) and the full-T outcome come from
the same transcripts.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import platform
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .concepts import ConceptWorld, PriorFamily, default_world, make_sim_agents, sim_task
from .debate import Debate, DebateConfig, Task, Transcript, majority_vote, outcome_at
from .errors import ConfigError, ContractError, DebateJudgeError
from .mixture import EmConfig, RoundScores
from .stability import StopConfig, StopState, observe_round, round_records

logger = logging.getLogger(__name__)

SCORE_HEADER = ("round", "item_id", "correct_count", "k")
ABLATION_THRESHOLDS = (0.01, 0.02, 0.03, 0.05, 0.08, 0.10, 0.15, 0.20)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "simulate"
    n_agents: int = 7
    T: int = 10
    ks_threshold: float = 0.05
    m: int = 2
    pruning: bool = False
    prune_target: int = 5
    full_history: bool = False
    strict_extraction: bool = False
    items: int = 1000
    seed: int = 0
    seed_assumption: bool = True
    prior: str = "uniform"
    prior_true_mass: float = 0.1
    prior_concentration: float = 1.0
    world: Optional[str] = None  # path to a world JSON; default world when absent
    tasks: Optional[str] = None  # JSONL of tasks (llm mode)
    endpoint: Optional[dict] = None
    workers: int = 1
    halt_on_stop: bool = False
    stopping: bool = True
    em_tol: float = 1e-6
    em_max_iter: int = 100
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("simulate", "llm", "fit", "stop", "sweep"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_agents < 1 or self.T < 1 or self.items < 1 or self.m < 1 or self.workers < 1:
            raise ConfigError("n_agents, T, items, m and workers must be >= 1")
        if not 0.0 <= self.ks_threshold <= 1.0:
            raise ConfigError("ks_threshold must lie in [0, 1]")
        if self.pruning and self.prune_target > self.n_agents:
            raise ConfigError("prune_target cannot exceed n_agents")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def debate_config(self, stop_hook=None) -> DebateConfig:
        return DebateConfig(
            max_rounds=self.T,
            pruning=self.pruning,
            prune_target=self.prune_target,
            full_history=self.full_history,
            strict_extraction=self.strict_extraction,
            max_workers=1 if self.mode == "simulate" else None,
            stop_hook=stop_hook,
        )

    def stop_config(self) -> StopConfig:
        return StopConfig(ks_threshold=self.ks_threshold, stability_rounds=self.m, max_rounds=self.T)

    def em_config(self) -> EmConfig:
        return EmConfig(tol=self.em_tol, max_iter=self.em_max_iter)

    def prior_family(self) -> PriorFamily:
        return PriorFamily(self.prior, self.prior_concentration, self.prior_true_mass)


# --- metrics ---------------------------------------------------------------


def accuracy_with_stderr(outcomes: Iterable[tuple]) -> tuple[float, float]:
    """(accuracy, sqrt(p(1-p)/N)) over (predicted, truth) pairs."""
    pairs = list(outcomes)
    if not pairs:
        raise ContractError("accuracy needs at least one outcome")
    p = sum(1 for pred, truth in pairs if pred == truth) / len(pairs)
    return p, math.sqrt(p * (1.0 - p) / len(pairs))


def correct_count(round_responses, truth) -> int:
    return sum(1 for r in round_responses if r.judgment is not None and r.judgment == truth)


def score_rows(transcripts: Sequence[Transcript], truths: dict, k: int, T: int) -> list[tuple]:
    """(round, item_id, correct_count, k) for rounds 0..T. Items that ended
    before T repeat their last recorded round."""
    rows = []
    for t in range(T + 1):
        for tr in transcripts:
            rnd = tr.rounds[min(t, len(tr.rounds) - 1)]
            rows.append((t, tr.task_id, correct_count(rnd, truths[tr.task_id]), k))
    return rows


def emit_round_histograms(transcripts: Sequence[Transcript], truths: dict, k: int, T: Optional[int] = None) -> list[list[int]]:
    """hist[t][s] = number of items with s correct agents at round t."""
    if T is None:
        T = max(len(tr.rounds) for tr in transcripts) - 1
    hist = [[0] * (k + 1) for _ in range(T + 1)]
    for t, _, s, _ in score_rows(transcripts, truths, k, T):
        hist[t][s] += 1
    return hist


def extreme_mass(hist_row: Sequence[int]) -> float:
    """Share of items with all agents wrong or all agents right."""
    total = sum(hist_row)
    return (hist_row[0] + hist_row[-1]) / total if total else 0.0


# --- score CSV -------------------------------------------------------------


def write_scores_csv(path, rows: Iterable[tuple]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        w.writerows(rows)


def read_scores_csv(path) -> dict:
    """{round: RoundScores} from a score CSV; rows are grouped by round."""
    by_round: dict = {}
    ks: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_HEADER:
            raise ConfigError(f"score CSV header must be {','.join(SCORE_HEADER)}")
        for line, row in enumerate(reader, start=2):
            try:
                t, s, k = int(row["round"]), int(row["correct_count"]), int(row["k"])
            except (TypeError, ValueError):
                raise ConfigError(f"line {line}: round, correct_count and k must be integers") from None
            by_round.setdefault(t, []).append(s)
            ks.setdefault(t, set()).add(k)
    if not by_round:
        raise ConfigError("score CSV has no rows")
    rounds = sorted(by_round)
    if rounds != list(range(rounds[0], rounds[0] + len(rounds))) or rounds[0] not in (0, 1):
        raise ConfigError("rounds must be contiguous starting at 0 or 1")
    out = {}
    for t in rounds:
        if len(ks[t]) != 1:
            raise ConfigError(f"round {t} mixes ensemble sizes")
        out[t] = RoundScores(ks[t].pop(), tuple(by_round[t]))
    return out


# --- batch run -------------------------------------------------------------


@dataclass
class BatchResult:
    transcripts: list
    tasks: list
    report: dict
    score_rows: list
    stop_state: Optional[StopState] = None


def _stop_records(state: Optional[StopState]) -> list:
    return round_records(state) if state is not None else []


def run_batch(
    config: ExperimentConfig,
    tasks: Optional[Sequence[Task]] = None,
    agent_factory: Optional[Callable[[Task, int], Sequence]] = None,
) -> BatchResult:
    """Run debates for a batch and evaluate adaptive stopping on it.

    In simulate mode tasks and agents come from the concept world; otherwise
    both ``tasks`` and ``agent_factory(task, index)`` must be supplied.
    """
    n = config.n_agents
    if config.mode == "simulate" and tasks is None:
        world = ConceptWorld.load(config.world) if config.world else default_world()
        root = np.random.SeedSequence(config.seed)
        item_seeds = root.spawn(config.items)
        tasks = [sim_task(f"item-{i:05d}", np.random.default_rng(s.spawn(1)[0])) for i, s in enumerate(item_seeds)]
        family = config.prior_family()

        def agent_factory(task, i):
            return make_sim_agents(world, n, item_seeds[i], config.seed_assumption, family)

    if tasks is None or agent_factory is None:
        raise ConfigError("tasks and an agent factory are required outside simulate mode")
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("no tasks to run")
    if len({t.id for t in tasks}) != len(tasks):
        raise ConfigError("task ids must be unique")
    labelled = all(t.ground_truth is not None for t in tasks)
    stopping = config.stopping and labelled
    if config.stopping and not labelled:
        if config.halt_on_stop:
            raise ConfigError("adaptive stopping needs ground truth for every item")
        logger.warning("items lack ground truth; adaptive stopping disabled")

    debate_cfg = config.debate_config()
    debates = [Debate(task, agent_factory(task, i), debate_cfg) for i, task in enumerate(tasks)]
    truths = {t.id: t.ground_truth for t in tasks}
    stop_cfg = config.stop_config()
    em_cfg = config.em_config()
    state: Optional[StopState] = StopState() if stopping else None
    stop_round = None
    stop_error = None
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for t in range(config.T + 1):
            active = [d for d in debates if not d.done]
            if not active:
                break
            if pool is None:
                for d in active:
                    d.step()
            else:
                list(pool.map(lambda d: d.step(), active))
            if state is None or state.stopped or t == 0:
                continue
            scores = RoundScores(n, tuple(correct_count(d.rounds[-1], truths[d.task.id]) for d in debates))
            try:
                state, _ = observe_round(state, scores, em_cfg, stop_cfg)
            except DebateJudgeError as exc:
                stop_error = f"{type(exc).__name__}: {exc}"
                logger.warning("stopping disabled after round %d: %s", t, stop_error)
                state = None
                continue
            if state.stopped:
                stop_round = t
                logger.info("stability reached after debate round %d", t)
                if config.halt_on_stop:
                    for d in debates:
                        d.stop_now()
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    transcripts = [d.transcript() for d in debates]
    rows = score_rows(transcripts, truths, n, max(len(tr.rounds) for tr in transcripts) - 1) if labelled else []
    report = build_report(config, tasks, transcripts, state, stop_round, stop_error)
    report["agent_calls"] = sum(d.calls for d in debates)
    return BatchResult(transcripts, tasks, report, rows, state)


def build_report(
    config: ExperimentConfig,
    tasks: Sequence[Task],
    transcripts: Sequence[Transcript],
    state: Optional[StopState],
    stop_round: Optional[int],
    stop_error: Optional[str] = None,
) -> dict:
    truths = {t.id: t.ground_truth for t in tasks}
    labelled = all(v is not None for v in truths.values())
    n = config.n_agents
    kinds = Counter(tr.outcome_kind.value for tr in transcripts)
    executed = Counter(tr.rounds_executed for tr in transcripts)
    report: dict[str, Any] = {
        "items": len(transcripts),
        "n_agents": n,
        "T": config.T,
        "outcome_kinds": dict(sorted(kinds.items())),
        "rounds_executed_histogram": {str(r): c for r, c in sorted(executed.items())},
        "accuracy": None,
        "standard_error": None,
        "round0_majority_accuracy": None,
        "round_histograms": None,
        "stopping": {
            "ks_threshold": config.ks_threshold,
            "m": config.m,
            "stopped": stop_round is not None,
            "stop_round": stop_round,
            "ks_history": list(state.ks_history) if state is not None else [],
            "records": _stop_records(state),
            "error": stop_error,
            "accuracy_at_stop": None,
            "accuracy_full": None,
            "accuracy_diff": None,
        },
    }
    if not labelled:
        return report
    acc, se = accuracy_with_stderr((tr.outcome, truths[tr.task_id]) for tr in transcripts)
    report["accuracy"], report["standard_error"] = acc, se
    report["round0_majority_accuracy"] = accuracy_with_stderr(
        (majority_vote([r.judgment for r in tr.rounds[0]]) if any(r.judgment is not None for r in tr.rounds[0]) else None,
         truths[tr.task_id])
        for tr in transcripts
    )[0]
    T_run = max(len(tr.rounds) for tr in transcripts) - 1
    report["round_histograms"] = emit_round_histograms(transcripts, truths, n, T_run)
    if stop_round is not None:
        stopped = accuracy_with_stderr((outcome_at(tr, stop_round)[0], truths[tr.task_id]) for tr in transcripts)[0]
        report["stopping"]["accuracy_at_stop"] = stopped
        if not config.halt_on_stop:
            report["stopping"]["accuracy_full"] = acc
            report["stopping"]["accuracy_diff"] = stopped - acc
    return report


# --- persistence -----------------------------------------------------------


def _safe_name(item_id: str) -> str:
    name = re.sub(r"[^A-Za-z0-9._-]+", "_", item_id).strip("._")
    return name or "item"


def manifest(config: ExperimentConfig, argv: Optional[Sequence[str]] = None) -> dict:
    import scipy

    return {
        "config": config.to_dict(),
        "seed": config.seed,
        "argv": list(argv) if argv is not None else None,
        "versions": {
            "debatejudge": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def task_to_dict(task: Task) -> dict:
    return {
        "id": task.id,
        "kind": task.kind,
        "payload": dict(task.prompt_payload),
        "answer_domain": list(task.answer_domain),
        "ground_truth": task.ground_truth,
    }


def task_from_dict(d: dict) -> Task:
    """Task from a JSON record. Payload fields may sit under "payload" or at
    top level (question, answers, claim, choices)."""
    try:
        payload = dict(d.get("payload") or {k: d[k] for k in ("question", "answers", "claim", "choices") if k in d})
        return Task(
            str(d["id"]),
            payload,
            tuple(d.get("answer_domain") or ("1", "2")),
            d.get("ground_truth"),
            kind=d.get("kind", "pairwise-comparison"),
        )
    except KeyError as exc:
        raise ConfigError(f"task record is missing {exc.args[0]!r}") from None


def load_tasks(path) -> list[Task]:
    """Tasks from a JSONL file (one JSON object per line) or a JSON list."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    try:
        if stripped.startswith("["):
            records = json.loads(text)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse tasks file: {exc}") from None
    return [task_from_dict(r) for r in records]


def write_artifacts(result: BatchResult, config: ExperimentConfig, out_dir, argv=None) -> Path:
    out = Path(out_dir)
    (out / "transcripts").mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest(config, argv), indent=2) + "\n")
    with open(out / "items.jsonl", "w", encoding="utf-8") as fh:
        for task in result.tasks:
            fh.write(json.dumps(task_to_dict(task)) + "\n")
    used = set()
    for tr in result.transcripts:
        name = _safe_name(tr.task_id)
        while name in used:
            name += "_"
        used.add(name)
        (out / "transcripts" / f"{name}.json").write_text(tr.to_json(indent=1) + "\n")
    if result.score_rows:
        write_scores_csv(out / "scores.csv", result.score_rows)
    (out / "summary.json").write_text(json.dumps(result.report, indent=2) + "\n")
    return out


def load_run(run_dir) -> tuple[ExperimentConfig, list, list]:
    """(config, tasks, transcripts) from a directory written by write_artifacts."""
    run = Path(run_dir)
    try:
        man = json.loads((run / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"{run} has no manifest.json") from None
    config = ExperimentConfig.from_dict(man["config"])
    tasks = load_tasks(run / "items.jsonl")
    transcripts = []
    by_id = {}
    for p in sorted((run / "transcripts").glob("*.json")):
        tr = Transcript.from_dict(json.loads(p.read_text()))
        by_id[tr.task_id] = tr
    for t in tasks:
        if t.id not in by_id:
            raise ConfigError(f"transcript for {t.id!r} is missing")
        transcripts.append(by_id[t.id])
    return config, tasks, transcripts


def replay_stopping(config: ExperimentConfig, tasks, transcripts) -> tuple[Optional[StopState], Optional[int]]:
    """Re-run the controller on stored transcripts (same scores as the run)."""
    truths = {t.id: t.ground_truth for t in tasks}
    T_run = max(len(tr.rounds) for tr in transcripts) - 1
    rows = score_rows(transcripts, truths, config.n_agents, T_run)
    state = StopState()
    for t in range(1, T_run + 1):
        scores = RoundScores(config.n_agents, tuple(s for (r, _, s, _) in rows if r == t))
        state, _ = observe_round(state, scores, config.em_config(), config.stop_config())
        if state.stopped:
            return state, t
    return state, None


def report_from_run(run_dir) -> dict:
    config, tasks, transcripts = load_run(run_dir)
    state, stop_round = None, None
    labelled = all(t.ground_truth is not None for t in tasks)
    if labelled and config.stopping:
        state, stop_round = replay_stopping(config, tasks, transcripts)
    report = build_report(config, tasks, transcripts, state, stop_round)
    return report


def histograms_csv(hist: Sequence[Sequence[int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "correct_count", "items"))
    for t, row in enumerate(hist):
        for s, c in enumerate(row):
            w.writerow((t, s, c))
    return buf.getvalue()
