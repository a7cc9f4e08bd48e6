"""Command-line entry point: ``debatejudge <subcommand> ...``.

Results go to stdout as JSON. Failures print ``{"error": ..., "message": ...}``
to stderr and exit nonzero (2 for bad input or configuration, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DebateJudgeError, DomainError, TemplateError
from .harness import (
    ABLATION_THRESHOLDS,
    ExperimentConfig,
    histograms_csv,
    load_tasks,
    read_scores_csv,
    report_from_run,
    run_batch,
    write_artifacts,
)
from .mixture import fit
from .stability import StopConfig, StopState, observe_round, round_records, threshold_sweep

# flag name -> ExperimentConfig field, for flags that override a --config file
_OVERRIDES = {
    "items": "items",
    "seed": "seed",
    "n_agents": "n_agents",
    "rounds": "T",
    "ks_threshold": "ks_threshold",
    "m": "m",
    "pruning": "pruning",
    "prune_target": "prune_target",
    "full_history": "full_history",
    "strict": "strict_extraction",
    "seed_assumption": "seed_assumption",
    "prior": "prior",
    "prior_true_mass": "prior_true_mass",
    "world": "world",
    "tasks": "tasks",
    "workers": "workers",
    "halt_on_stop": "halt_on_stop",
    "stopping": "stopping",
    "out": "output_dir",
}


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _add_debate_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--n-agents", type=int, help="ensemble size (default 7)")
    p.add_argument("--rounds", type=int, help="maximum debate rounds T (default 10)")
    p.add_argument("--ks-threshold", type=float, help="KS stability threshold (default 0.05)")
    p.add_argument("--m", type=int, help="consecutive stable rounds required (default 2)")
    p.add_argument("--pruning", action="store_true", default=None, help="show agents a diversity-pruned round")
    p.add_argument("--prune-target", type=int, help="responses kept by pruning (default 5)")
    p.add_argument("--full-history", action="store_true", default=None, help="show all previous rounds")
    p.add_argument("--strict", action="store_true", default=None, help="strict-tail answer parsing")
    p.add_argument("--halt-on-stop", action="store_true", default=None,
                   help="stop running debates once stable (no full-T comparison)")
    p.add_argument("--no-stopping", dest="stopping", action="store_false", default=None,
                   help="do not run the stability controller")
    p.add_argument("--workers", type=int, help="items stepped concurrently (default 1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for manifest, transcripts, scores and summary")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debatejudge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="debates among simulated Bayesian agents")
    _add_debate_flags(p)
    p.add_argument("--items", type=int, help="number of tasks (default 1000)")
    p.add_argument("--world", help="world JSON; default 3-concept world when absent")
    p.add_argument("--no-seed-assumption", dest="seed_assumption", action="store_false", default=None,
                   help="do not force agent 1's first answer from the true concept")
    p.add_argument("--prior", choices=("uniform", "dirichlet", "off_true"))
    p.add_argument("--prior-true-mass", type=float, help="prior mass on the true concept for off_true")

    p = sub.add_parser("debate", help="debates among chat-completion endpoints")
    _add_debate_flags(p)
    p.add_argument("--tasks", help="tasks as JSONL or a JSON list")
    p.add_argument("--base-url")
    p.add_argument("--model")
    p.add_argument("--api-key-env", help="name of the environment variable holding the API key")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-tokens", type=int, default=16000)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--concurrency", type=int, default=4, help="concurrent requests per endpoint")
    p.add_argument("--include-self", action="store_true", help="list the agent's own previous answer too")
    p.add_argument("--fake-reply", action="append", metavar="TEXT",
                   help="offline run: reply with TEXT instead of calling the endpoint (repeatable, cycles)")

    p = sub.add_parser("fit", help="fit the Beta-Binomial mixture to each round of a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--round", type=int, help="only this round")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)

    for name, text in (("stop", "run the stopping rule over a score CSV"),
                       ("sweep", "replay the stopping rule for several KS thresholds")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--scores", required=True)
        p.add_argument("--m", type=int, default=2)
        p.add_argument("--from-round", type=int, default=1, help="first round fed to the controller (default 1)")
        p.add_argument("--max-rounds", type=int, default=10)
        if name == "stop":
            p.add_argument("--ks-threshold", type=float, default=0.05)
        else:
            p.add_argument("--thresholds", type=float, nargs="+", default=list(ABLATION_THRESHOLDS))

    p = sub.add_parser("report", help="metrics and histograms from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--histograms-csv", help="also write per-round histograms as CSV here")
    return parser


def _experiment_config(args, mode: str) -> ExperimentConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    base["mode"] = mode
    for flag, fname in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[fname] = val
    return ExperimentConfig.from_dict(base)


def _cmd_simulate(args, argv):
    config = _experiment_config(args, "simulate")
    result = run_batch(config)
    if config.output_dir:
        write_artifacts(result, config, config.output_dir, argv)
    _emit(result.report)


def _cmd_debate(args, argv):
    from .gateway import EndpointConfig, FakeTransport, make_llm_agents

    config = _experiment_config(args, "llm")
    endpoint = dict(config.endpoint or {})
    for flag, key in (("base_url", "base_url"), ("model", "model_name"), ("api_key_env", "api_key_env_var")):
        if getattr(args, flag):
            endpoint[key] = getattr(args, flag)
    endpoint.setdefault("temperature", args.temperature)
    endpoint.setdefault("max_tokens", args.max_tokens)
    endpoint.setdefault("timeout", args.timeout)
    endpoint.setdefault("max_retries", args.max_retries)
    endpoint.setdefault("concurrency", args.concurrency)
    if args.fake_reply:
        endpoint.setdefault("base_url", "http://offline.invalid/v1")
        endpoint.setdefault("model_name", "offline")
    if "base_url" not in endpoint or "model_name" not in endpoint:
        raise ConfigError("debate needs --base-url and --model (or an endpoint block in --config)")
    if not config.tasks:
        raise ConfigError("debate needs --tasks")
    config = replace(config, endpoint=endpoint)
    ep = EndpointConfig(**endpoint)
    tasks = load_tasks(config.tasks)
    transport = None
    if args.fake_reply:
        replies = list(args.fake_reply)
        counter = iter(range(10**12))
        transport = FakeTransport(responder=lambda payload: replies[next(counter) % len(replies)])

    def factory(task, i):
        return make_llm_agents(ep, config.n_agents, task.kind, transport, args.include_self, config.strict_extraction)

    result = run_batch(config, tasks, factory)
    if config.output_dir:
        write_artifacts(result, config, config.output_dir, argv)
    _emit(result.report)


def _cmd_fit(args, argv):
    from .mixture import EmConfig

    rounds = read_scores_csv(args.scores)
    if args.round is not None:
        if args.round not in rounds:
            raise ConfigError(f"round {args.round} is not in the score file")
        rounds = {args.round: rounds[args.round]}
    cfg = EmConfig(tol=args.tol, max_iter=args.max_iter)
    out = []
    for t, data in rounds.items():
        trace = fit(data, cfg)
        out.append(
            {
                "round": t,
                "n": data.n,
                **trace.final.as_dict(),
                "iterations": trace.iterations,
                "converged": trace.converged,
                "degenerate": trace.degenerate,
                "log_likelihood": trace.log_likelihood_history[-1],
            }
        )
    _emit(out)


def _stream(args):
    rounds = read_scores_csv(args.scores)
    seq = [rounds[t] for t in sorted(rounds) if t >= args.from_round]
    if not seq:
        raise ConfigError(f"no rounds at or after {args.from_round}")
    return seq[: args.max_rounds]


def _cmd_stop(args, argv):
    seq = _stream(args)
    cfg = StopConfig(ks_threshold=args.ks_threshold, stability_rounds=args.m, max_rounds=args.max_rounds)
    state = StopState()
    for data in seq:
        state, _ = observe_round(state, data, stop_config=cfg)
        if state.stopped:
            break
    _emit(
        {
            "ks_threshold": cfg.ks_threshold,
            "m": cfg.stability_rounds,
            "stopped": state.stopped,
            "stop_round": state.stop_round,
            "rounds_processed": state.round_index,
            "records": round_records(state),
        }
    )


def _cmd_sweep(args, argv):
    seq = _stream(args)
    cfg = StopConfig(stability_rounds=args.m, max_rounds=args.max_rounds)
    rows = threshold_sweep(seq, args.thresholds, stop_config=cfg)
    _emit([r.as_dict() for r in rows])


def _cmd_report(args, argv):
    report = report_from_run(args.run)
    if args.histograms_csv and report.get("round_histograms"):
        Path(args.histograms_csv).write_text(histograms_csv(report["round_histograms"]))
    _emit(report)


_COMMANDS = {
    "simulate": _cmd_simulate,
    "debate": _cmd_debate,
    "fit": _cmd_fit,
    "stop": _cmd_stop,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _COMMANDS[args.command](args, argv)
    except (ConfigError, DomainError, TemplateError, FileNotFoundError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except DebateJudgeError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
