"""Online exit-threshold selection as a UCB bandit over a threshold grid.

Each token is one bandit round: pick a threshold, run the exit rule,
observe a reward that trades confidence gain over layer 1 against a
per-layer latency cost, and update the chosen arm's running mean.
Pseudo-regret is accounted against a Monte-Carlo oracle that evaluates
every arm on a common set of sampled traces.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .cascade import (
    DEFAULT_EOS_ID,
    DEFAULT_MAX_CAPTION_LENGTH,
    CaptionRun,
    ExitDecision,
    TokenTrace,
    decide_exit,
)

STATE_FORMAT = "exitsim-bandit-state"
STATE_VERSION = 1

# The oracle has its own fixed default seed: its verdict on which arm is
# best is a property of the model, not of any particular run's seed.
ORACLE_SEED = 1000003


class BanditError(RuntimeError):
    """Bandit state misuse: uninitialized selection or exhausted init source."""


@dataclass(frozen=True)
class ActionSet:
    """Strictly increasing grid of candidate exit thresholds in [0, 1]."""

    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.thresholds:
            raise ValueError("action set must contain at least one threshold")
        for a in self.thresholds:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"threshold {a!r} outside [0, 1]")
        for lo, hi in zip(self.thresholds, self.thresholds[1:]):
            if lo >= hi:
                raise ValueError(
                    f"thresholds must be strictly increasing, got {lo!r} "
                    f"before {hi!r}"
                )

    @classmethod
    def default_grid(cls) -> "ActionSet":
        return cls(tuple(i / 10 for i in range(1, 11)))

    def __len__(self) -> int:
        return len(self.thresholds)

    def index(self, alpha: float) -> int:
        try:
            return self.thresholds.index(alpha)
        except ValueError:
            raise ValueError(
                f"threshold {alpha!r} is not in the action set {self.thresholds}"
            ) from None


@dataclass(frozen=True)
class RewardParams:
    """Reward shape: confidence gain minus mu times the exit layer's latency.

    The latency schedule defaults to 0 for layer 1 and lam * i for every
    deeper layer i, so with mu = 1/N and lam = 1 rewards live in [-2, 1].
    """

    n_layers: int
    mu: float | None = None
    lam: float = 1.0
    latency: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.mu is None:
            object.__setattr__(self, "mu", 1.0 / self.n_layers)
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.latency is None:
            schedule = (0.0,) + tuple(
                self.lam * i for i in range(2, self.n_layers + 1)
            )
            object.__setattr__(self, "latency", schedule)
        if len(self.latency) != self.n_layers:
            raise ValueError(
                f"latency schedule has {len(self.latency)} entries for "
                f"{self.n_layers} layers"
            )
        if self.latency[0] != 0.0:
            raise ValueError(
                f"layer 1 latency must be 0, got {self.latency[0]!r}"
            )
        for lo, hi in zip(self.latency, self.latency[1:]):
            if hi < lo:
                raise ValueError("latency schedule must be nondecreasing")

    def bounds(self) -> tuple[float, float]:
        """Hard reward range [-1 - mu * o_N, 1]."""
        return (-1.0 - self.mu * self.latency[-1], 1.0)


def reward(decision: ExitDecision, params: RewardParams) -> float:
    """Confidence gain over layer 1 minus the scaled latency of the exit."""
    i = decision.exit_layer
    if not 1 <= i <= params.n_layers:
        raise ValueError(
            f"exit layer {i} outside [1, {params.n_layers}]"
        )
    gain = decision.confidence - decision.first_layer_confidence
    return gain - params.mu * params.latency[i - 1]


@dataclass
class BanditState:
    """Per-arm running means and pull counts plus the round counter."""

    actions: ActionSet
    q: list[float]
    pulls: list[int]
    t: int
    gamma: float

    def __post_init__(self) -> None:
        k = len(self.actions)
        if len(self.q) != k or len(self.pulls) != k:
            raise ValueError(
                f"state arrays must match the {k}-arm action set"
            )
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.t < 0 or any(n < 0 for n in self.pulls):
            raise ValueError("counters must be nonnegative")

    @classmethod
    def fresh(cls, actions: ActionSet, gamma: float = 1.0) -> "BanditState":
        k = len(actions)
        return cls(actions, [0.0] * k, [0] * k, 0, gamma)

    @property
    def initialized(self) -> bool:
        return all(n >= 1 for n in self.pulls)

    def to_snapshot(self) -> dict:
        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "thresholds": list(self.actions.thresholds),
            "q": list(self.q),
            "pulls": list(self.pulls),
            "t": self.t,
            "gamma": self.gamma,
        }

    @classmethod
    def from_snapshot(cls, snapshot: dict) -> "BanditState":
        if snapshot.get("format") != STATE_FORMAT:
            raise ValueError(
                f"not a bandit state snapshot: format "
                f"{snapshot.get('format')!r}"
            )
        if snapshot.get("version") != STATE_VERSION:
            raise ValueError(
                f"unsupported bandit state version {snapshot.get('version')!r} "
                f"(this reader handles version {STATE_VERSION})"
            )
        return cls(
            actions=ActionSet(tuple(float(a) for a in snapshot["thresholds"])),
            q=[float(x) for x in snapshot["q"]],
            pulls=[int(n) for n in snapshot["pulls"]],
            t=int(snapshot["t"]),
            gamma=float(snapshot["gamma"]),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            json.dump(self.to_snapshot(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "BanditState":
        with open(path, "r", encoding="ascii") as fh:
            return cls.from_snapshot(json.load(fh))


def ucb_select(state: BanditState) -> float:
    """Arm with the largest Q + gamma * sqrt(ln t / pulls); ties go to the
    smallest threshold."""
    if not state.initialized:
        raise BanditError(
            "bandit state has unplayed arms: call initialize() before "
            "ucb_select()"
        )
    log_t = math.log(state.t)
    best_index = 0
    best_value = -math.inf
    for k in range(len(state.actions)):
        value = state.q[k] + state.gamma * math.sqrt(log_t / state.pulls[k])
        if value > best_value:
            best_value = value
            best_index = k
    return state.actions.thresholds[best_index]


def update(state: BanditState, alpha: float, observed_reward: float) -> None:
    """Fold one observed reward into the chosen arm's running mean."""
    k = state.actions.index(alpha)
    state.pulls[k] += 1
    state.q[k] += (observed_reward - state.q[k]) / state.pulls[k]
    state.t += 1


@dataclass
class BanditLog:
    """Per-round record of (t, arm, exit layer, reward)."""

    rounds: list[int] = field(default_factory=list)
    arms: list[float] = field(default_factory=list)
    exit_layers: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)

    def append(self, t: int, arm: float, exit_layer: int, reward_value: float) -> None:
        if self.rounds and t <= self.rounds[-1]:
            raise ValueError(
                f"round counter must increase: got {t} after {self.rounds[-1]}"
            )
        self.rounds.append(t)
        self.arms.append(arm)
        self.exit_layers.append(exit_layer)
        self.rewards.append(reward_value)

    def __len__(self) -> int:
        return len(self.rounds)

    def arm_counts(self, last: int | None = None) -> dict[float, int]:
        window = self.arms if last is None else self.arms[-last:]
        counts: dict[float, int] = {}
        for arm in window:
            counts[arm] = counts.get(arm, 0) + 1
        return counts

    def to_csv(
        self,
        path: str,
        oracle: "OracleEstimate",
        preamble: Sequence[str] = (),
    ) -> None:
        """Write the log with a cumulative pseudo-regret column.

        ``preamble`` lines are emitted as '#' comments before the header
        so run configuration can ride along with the data.
        """
        regret = regret_curve(self, oracle)
        with open(path, "w", encoding="ascii", newline="") as fh:
            for line in preamble:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["t", "arm", "exit_layer", "reward", "cumulative_pseudo_regret"]
            )
            for i in range(len(self.rounds)):
                writer.writerow(
                    [
                        self.rounds[i],
                        repr(self.arms[i]),
                        self.exit_layers[i],
                        repr(self.rewards[i]),
                        repr(float(regret[i])),
                    ]
                )


def initialize(
    actions: ActionSet,
    trace_source: Iterable[TokenTrace],
    params: RewardParams,
    gamma: float = 1.0,
    log: BanditLog | None = None,
) -> BanditState:
    """Play every arm exactly once on consecutive traces.

    After this the round counter equals the arm count and every arm's Q
    is its single observed reward, which is what the selection rule
    needs before its first real round.
    """
    state = BanditState.fresh(actions, gamma)
    source = iter(trace_source)
    for alpha in actions.thresholds:
        trace = next(source, None)
        if trace is None:
            raise BanditError(
                f"trace source exhausted during initialization: needed "
                f"{len(actions)} traces"
            )
        decision = decide_exit(trace, alpha)
        r = reward(decision, params)
        update(state, alpha, r)
        if log is not None:
            log.append(state.t, alpha, decision.exit_layer, r)
    return state


@dataclass
class AdaptiveRun:
    """Everything a threshold-adaptation run produced."""

    captions: list[CaptionRun]
    log: BanditLog
    state: BanditState


def _image_parts(
    item: object, fallback_id: int
) -> tuple[int | str, Sequence[TokenTrace]]:
    traces = getattr(item, "traces", None)
    if traces is not None:
        return getattr(item, "image_id", fallback_id), traces
    return fallback_id, item  # plain sequence of traces


def run_adaptive_captioning(
    images: Iterable,
    actions: ActionSet,
    params: RewardParams,
    gamma: float = 1.0,
    max_caption_length: int = DEFAULT_MAX_CAPTION_LENGTH,
    eos_id: int = DEFAULT_EOS_ID,
    max_tokens: int | None = None,
    state: BanditState | None = None,
    log: BanditLog | None = None,
) -> AdaptiveRun:
    """Caption an image stream while adapting the exit threshold online.

    Each image is either an ImageTraces-like object or a plain sequence
    of TokenTrace.  When no prior state is given, the first image is
    spent playing every arm once and produces no caption.  Passing the
    state and log of an earlier run resumes it: counters keep rising and
    the same object is returned updated.  ``max_tokens`` caps the total
    round counter; a caption cut off by the cap is flagged truncated.
    """
    if log is None:
        log = BanditLog()
    image_iter = iter(images)
    next_id = 0
    if state is None:
        try:
            first = next(image_iter)
        except StopIteration:
            raise BanditError("image stream is empty: nothing to initialize on")
        _, init_traces = _image_parts(first, next_id)
        next_id += 1
        state = initialize(actions, init_traces, params, gamma, log)
    elif not state.initialized:
        raise BanditError(
            "resumed state has unplayed arms: run initialize() first"
        )
    captions: list[CaptionRun] = []
    budget_spent = max_tokens is not None and state.t >= max_tokens
    for item in image_iter:
        if budget_spent:
            break
        image_id, traces = _image_parts(item, next_id)
        next_id += 1
        source = iter(traces)
        decisions: list[ExitDecision] = []
        terminated = False
        truncated = False
        while len(decisions) < max_caption_length:
            if max_tokens is not None and state.t >= max_tokens:
                budget_spent = True
                truncated = True
                break
            trace = next(source, None)
            if trace is None:
                truncated = True
                break
            alpha = ucb_select(state)
            decision = decide_exit(trace, alpha)
            r = reward(decision, params)
            update(state, alpha, r)
            log.append(state.t, alpha, decision.exit_layer, r)
            decisions.append(decision)
            if decision.token_id == eos_id:
                terminated = True
                break
        if decisions:
            captions.append(
                CaptionRun(
                    image_id=image_id,
                    tokens=tuple(decisions),
                    terminated_by_eos=terminated,
                    truncated=truncated,
                )
            )
    return AdaptiveRun(captions=captions, log=log, state=state)


@dataclass(frozen=True)
class OracleEstimate:
    """Per-arm expected rewards estimated on one shared trace sample."""

    thresholds: tuple[float, ...]
    expected_rewards: tuple[float, ...]
    samples: int

    @property
    def best_index(self) -> int:
        best = 0
        for k in range(1, len(self.thresholds)):
            if self.expected_rewards[k] > self.expected_rewards[best]:
                best = k
        return best

    @property
    def best_threshold(self) -> float:
        return self.thresholds[self.best_index]

    @property
    def gaps(self) -> tuple[float, ...]:
        top = self.expected_rewards[self.best_index]
        return tuple(top - e for e in self.expected_rewards)

    def expected(self, alpha: float) -> float:
        return self.expected_rewards[self._index(alpha)]

    def gap(self, alpha: float) -> float:
        return self.gaps[self._index(alpha)]

    def _index(self, alpha: float) -> int:
        try:
            return self.thresholds.index(alpha)
        except ValueError:
            raise ValueError(
                f"arm {alpha!r} is not covered by this oracle"
            ) from None


def exit_layer_indices(confidences: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorized exit rule: 0-based exit layer per row of confidences."""
    early = confidences[:, :-1] >= alpha
    has_early = early.any(axis=1)
    first = early.argmax(axis=1)
    return np.where(has_early, first, confidences.shape[1] - 1)


def expected_reward_oracle(
    model,
    actions: ActionSet,
    params: RewardParams,
    samples: int = 200_000,
    seed: int = ORACLE_SEED,
) -> OracleEstimate:
    """Monte-Carlo estimate of every arm's expected reward.

    ``model`` needs a ``confidence_matrix(n, rng)`` method.  All arms are
    evaluated on the same sampled traces (common random numbers), so arm
    comparisons are paired and the argmax is stable at moderate sample
    counts.  The seed is deliberately independent of run seeds.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    conf = model.confidence_matrix(samples, rng)
    if conf.shape[1] != params.n_layers:
        raise ValueError(
            f"model emits {conf.shape[1]} layers, reward params expect "
            f"{params.n_layers}"
        )
    latency = np.asarray(params.latency)
    first = conf[:, 0]
    expected = []
    for alpha in actions.thresholds:
        idx = exit_layer_indices(conf, alpha)
        exit_conf = conf[np.arange(conf.shape[0]), idx]
        rewards = (exit_conf - first) - params.mu * latency[idx]
        expected.append(float(rewards.mean()))
    return OracleEstimate(
        thresholds=actions.thresholds,
        expected_rewards=tuple(expected),
        samples=samples,
    )


def regret_curve(log: BanditLog, oracle: OracleEstimate) -> np.ndarray:
    """Cumulative pseudo-regret: running sum of the chosen arms' gaps."""
    gap_of = dict(zip(oracle.thresholds, oracle.gaps))
    gaps = np.empty(len(log))
    for i, arm in enumerate(log.arms):
        try:
            gaps[i] = gap_of[arm]
        except KeyError:
            raise ValueError(
                f"round {log.rounds[i]}: arm {arm!r} is not covered by the "
                f"oracle"
            ) from None
    return np.cumsum(gaps)


def regret_bound(oracle: OracleEstimate, horizon: int, gamma: float) -> float:
    """Logarithmic pseudo-regret bound for the UCB rule at a horizon.

    4 * gamma * sum over suboptimal arms of ln(T) / gap, plus
    (pi^2 / 3 + 1) times the sum of the gaps.  Arms whose estimated gap
    is exactly zero are treated as co-optimal and contribute nothing.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    log_t = math.log(horizon)
    exploration = sum(
        log_t / g for k, g in enumerate(oracle.gaps)
        if k != oracle.best_index and g > 0.0
    )
    slack = sum(
        g for k, g in enumerate(oracle.gaps)
        if k != oracle.best_index
    )
    return 4.0 * gamma * exploration + (math.pi ** 2 / 3.0 + 1.0) * slack
