"""Round-to-round stability of the fitted judge-accuracy distribution.

Each round's correct-count sample is fitted with a two-component
Beta-Binomial mixture; the implied Beta mixture over per-judge accuracy is
compared with the previous round's by the Kolmogorov-Smirnov distance

    D_t = sup_psi |F_t(psi) - F_{t-1}(psi)|

evaluated on a uniform interior grid. The controller stops after ``m``
consecutive rounds with D_t below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError
from .mixture import BetaBinomMixture, EmConfig, RoundScores, fit
from .numerics import mixture_cdf


class Decision(str, Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass(frozen=True)
class StopConfig:
    ks_threshold: float = 0.05
    stability_rounds: int = 2
    grid_points: int = 1001
    max_rounds: int = 10

    def __post_init__(self):
        if not 0.0 <= self.ks_threshold <= 1.0:
            raise DomainError(f"ks_threshold must lie in [0, 1], got {self.ks_threshold}")
        if self.stability_rounds < 1:
            raise DomainError("stability_rounds must be >= 1")
        if self.grid_points < 101:
            raise DomainError("grid_points must be >= 101")


@dataclass(frozen=True)
class StopState:
    """Immutable controller state; ``observe_round`` returns a new one.

    ``round_index`` counts observed rounds (1-based after the first
    observation); ``stop_round`` is the round index at which the controller
    stopped.
    """

    round_index: int = 0
    previous_mixture: Optional[BetaBinomMixture] = None
    ks_history: tuple = ()
    consecutive_below: int = 0
    stopped: bool = False
    stop_round: Optional[int] = None
    k: Optional[int] = None
    mixtures: tuple = ()
    degenerate_rounds: tuple = ()
    counter_history: tuple = ()


def interior_grid(grid_points: int) -> np.ndarray:
    """psi_i = i / (G + 1), i = 1..G (endpoints excluded)."""
    return np.arange(1, grid_points + 1, dtype=np.float64) / (grid_points + 1)


def ks_distance(prev: BetaBinomMixture, curr: BetaBinomMixture, grid_points: int = 1001) -> float:
    """Largest absolute CDF gap between two Beta mixtures on an interior grid."""
    if prev == curr:
        return 0.0
    grid = interior_grid(grid_points)
    gap = np.abs(mixture_cdf(grid, curr) - mixture_cdf(grid, prev))
    return float(min(gap.max(), 1.0))


def advance(state: StopState, ks: Optional[float], config: StopConfig) -> StopState:
    """Apply one step of the counter rule to an already-computed KS value.

    ``ks`` is None for the first observed round, which has no predecessor.
    """
    if state.stopped:
        raise ContractError("controller has already stopped")
    t = state.round_index + 1
    if ks is None:
        return replace(state, round_index=t)
    c = state.consecutive_below + 1 if ks < config.ks_threshold else 0
    stopped = c >= config.stability_rounds
    return replace(
        state,
        round_index=t,
        ks_history=state.ks_history + (float(ks),),
        consecutive_below=c,
        counter_history=state.counter_history + (c,),
        stopped=stopped,
        stop_round=t if stopped else None,
    )


def replay_ks(ks_sequence: Sequence[float], config: StopConfig) -> StopState:
    """Run the counter rule over a KS sequence (one value per round after the first)."""
    state = advance(StopState(), None, config)
    for ks in ks_sequence:
        state = advance(state, ks, config)
        if state.stopped:
            break
    return state


def observe_round(
    state: StopState,
    data: RoundScores,
    em_config: Optional[EmConfig] = None,
    stop_config: Optional[StopConfig] = None,
    mixture: Optional[BetaBinomMixture] = None,
) -> tuple[StopState, Decision]:
    """Fit this round's mixture and update the controller.

    A precomputed ``mixture`` may be supplied to skip the fit. Fit errors
    propagate and leave ``state`` untouched (it is immutable anyway).
    """
    stop_config = stop_config or StopConfig()
    if state.stopped:
        raise ContractError("controller has already stopped")
    if state.k is not None and data.k != state.k:
        raise ContractError(f"ensemble size changed from {state.k} to {data.k}")
    degenerate = False
    if mixture is None:
        trace = fit(data, em_config)
        mixture, degenerate = trace.final, trace.degenerate
    ks = None
    if state.previous_mixture is not None:
        ks = ks_distance(state.previous_mixture, mixture, stop_config.grid_points)
    new = advance(state, ks, stop_config)
    new = replace(
        new,
        previous_mixture=mixture,
        k=data.k,
        mixtures=state.mixtures + (mixture,),
        degenerate_rounds=state.degenerate_rounds + ((new.round_index,) if degenerate else ()),
    )
    return new, Decision.STOP if new.stopped else Decision.CONTINUE


def round_records(state: StopState) -> list[dict]:
    """Per-round JSON records {round, w, alpha1, beta1, alpha2, beta2, ks, c, stopped}."""
    out = []
    for i, mix in enumerate(state.mixtures):
        t = i + 1
        ks = state.ks_history[i - 1] if i >= 1 else None
        c = state.counter_history[i - 1] if i >= 1 else 0
        out.append(
            {
                "round": t,
                "w": mix.weight,
                "alpha1": mix.comp1.alpha,
                "beta1": mix.comp1.beta,
                "alpha2": mix.comp2.alpha,
                "beta2": mix.comp2.beta,
                "ks": ks,
                "c": c,
                "stopped": bool(state.stopped and state.stop_round == t),
                "degenerate": t in state.degenerate_rounds,
            }
        )
    return out


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    rounds_processed: int
    stopped_early: bool
    final_ks: Optional[float]

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rounds_processed": self.rounds_processed,
            "stopped_early": self.stopped_early,
            "final_ks": self.final_ks,
        }


def sweep_ks_sequence(
    ks_sequence: Sequence[float], thresholds: Sequence[float], stop_config: StopConfig
) -> list[SweepRow]:
    rows = []
    for eps in thresholds:
        cfg = replace(stop_config, ks_threshold=float(eps))
        state = replay_ks(ks_sequence, cfg)
        final = state.ks_history[-1] if state.ks_history else None
        rows.append(SweepRow(float(eps), state.round_index, state.stopped, final))
    return rows


def fit_round_mixtures(
    rounds: Sequence[RoundScores], em_config: Optional[EmConfig] = None
) -> list[BetaBinomMixture]:
    k = rounds[0].k
    if any(r.k != k for r in rounds):
        raise ContractError("all rounds must share the same ensemble size")
    return [fit(r, em_config).final for r in rounds]


def threshold_sweep(
    rounds: Sequence[RoundScores],
    thresholds: Sequence[float],
    em_config: Optional[EmConfig] = None,
    stop_config: Optional[StopConfig] = None,
) -> list[SweepRow]:
    """Replay the stopping rule for several thresholds on one fitted sequence.

    Mixtures are fitted once; every threshold sees the same KS sequence.
    """
    stop_config = stop_config or StopConfig()
    if len(rounds) < 2:
        raise ContractError("threshold_sweep needs at least two rounds")
    rounds = list(rounds)[: stop_config.max_rounds]
    mixtures = fit_round_mixtures(rounds, em_config)
    ks_seq = [
        ks_distance(a, b, stop_config.grid_points) for a, b in zip(mixtures, mixtures[1:])
    ]
    return sweep_ks_sequence(ks_seq, thresholds, stop_config)
