"""Task-weighting strategies: EW, RLW, DWA and GradNorm.

After every update the weights are positive and sum to K, the number of
active tasks, so equal weighting is the reference point of every strategy.
"""
from __future__ import annotations

import abc
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
import logging
from typing import Any, ClassVar

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidConfig, StrategyNotApplicable

logger = logging.getLogger("Balancer")

Array = NDArray[np.float64]

STRATEGIES = ("ew", "rlw", "dwa", "gradnorm")
STRATEGY_LABELS = {"ew": "EW", "rlw": "RLW", "dwa": "DWA", "gradnorm": "GradNorm"}


def parse_strategy(name: str) -> str:
    key = name.strip().lower()
    if key not in STRATEGIES:
        raise InvalidConfig(f"unknown weighting strategy {name!r}; use one of {', '.join(STRATEGY_LABELS.values())}")
    return key


@dataclass(frozen=True)
class BalancerConfig:
    #: DWA softmax temperature.
    temperature: float = 2.0
    #: GradNorm asymmetry.
    alpha: float = 1.5
    #: GradNorm weight learning rate.
    lr_w: float = 0.025
    min_weight: float = 1e-4

    def __post_init__(self) -> None:
        if not (self.temperature > 0 and self.lr_w > 0 and self.min_weight > 0 and self.alpha >= 0):
            raise InvalidConfig(f"invalid balancer settings {self}")

    def as_dict(self) -> dict[str, float]:
        return {"temperature": self.temperature, "alpha": self.alpha, "lr_w": self.lr_w, "min_weight": self.min_weight}


@dataclass
class WeightState:
    tasks: tuple[str, ...]
    strategy: str
    weights: Array
    #: Epoch-mean losses, oldest first; only the last two are kept.
    history: list[Array] = field(default_factory=list)
    #: GradNorm's first-iteration losses.
    initial_losses: Array | None = None
    temperature: float = 2.0
    alpha: float = 1.5

    @property
    def K(self) -> int:
        return len(self.tasks)

    def record_epoch(self, mean_losses: ArrayLike) -> None:
        self.history = (self.history + [np.asarray(mean_losses, dtype=np.float64)])[-2:]

    def snapshot(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "weights": dict(zip(self.tasks, (float(w) for w in self.weights))),
        }


def ew_weights(K: int) -> Array:
    if K < 1:
        raise InvalidConfig(f"need at least one task, got K={K}")
    return np.ones(K)


def _softmax_times_k(logits: Array) -> Array:
    shifted = np.exp(logits - logits.max())
    return len(logits) * shifted / shifted.sum()


def rlw_weights(K: int, rng: np.random.Generator) -> Array:
    """K standard normal draws through a softmax, scaled to sum to K."""
    if K < 1:
        raise InvalidConfig(f"need at least one task, got K={K}")
    return _softmax_times_k(rng.standard_normal(K))


def dwa_weights(state: WeightState, epoch: int) -> Array:
    """Softmax of the last two epochs' loss ratios; all ones for the first two epochs."""
    if epoch < 2 or len(state.history) < 2:
        return ew_weights(state.K)
    older, previous = state.history[-2], state.history[-1]
    neutral = (older == 0) | (previous == 0)
    if neutral.any():
        logger.warning(
            "DWA epoch %d: zero loss for %s; using a neutral ratio",
            epoch, [t for t, n in zip(state.tasks, neutral) if n],
        )
    ratio = np.divide(previous, older, out=np.ones(state.K), where=~neutral)
    return _softmax_times_k(ratio / state.temperature)


def gradnorm_objective(weights: Array, norms: Array, targets: Array) -> tuple[float, Array]:
    """``sum |w_i n_i - target_i|`` and its gradient in ``w`` with targets held fixed.

    Differences within rounding of the target count as zero, so a balanced
    state is an exact fixed point.
    """
    difference = weights * norms - targets
    difference = np.where(np.abs(difference) <= 1e-12 * np.maximum(1.0, np.abs(targets)), 0.0, difference)
    return float(np.abs(difference).sum()), np.sign(difference) * norms


def gradnorm_step(
    shared_gradients: Mapping[str, ArrayLike],
    losses: Mapping[str, float],
    state: WeightState,
    lr_w: float = 0.025,
    alpha: float | None = None,
    min_weight: float = 1e-4,
) -> Array:
    """One GradNorm update of ``state.weights``.

    ``shared_gradients[task]`` is the unweighted gradient of that task's loss
    with respect to the shared layer, from a backward pass of that task alone.
    """
    if state.K < 2:
        raise StrategyNotApplicable(f"GradNorm needs at least two tasks, got {''.join(state.tasks)!r}")
    alpha = state.alpha if alpha is None else alpha
    current = np.array([losses[t] for t in state.tasks], dtype=np.float64)
    if state.initial_losses is None:
        state.initial_losses = current.copy()
        logger.debug("GradNorm initial losses %s", dict(zip(state.tasks, current.tolist())))
    norms = np.array([np.linalg.norm(np.asarray(shared_gradients[t])) for t in state.tasks])
    G = state.weights * norms
    relative = current / np.maximum(state.initial_losses, np.finfo(np.float64).tiny)
    mean_relative = relative.mean()
    r = relative / mean_relative if mean_relative > 0 else np.ones(state.K)
    targets = G.mean() * r ** alpha
    _, gradient = gradnorm_objective(state.weights, norms, targets)
    weights = np.maximum(state.weights - lr_w * gradient, min_weight)
    state.weights = state.K * weights / weights.sum()
    return state.weights


class Balancer(abc.ABC):
    """Owns a :class:`WeightState` for one trainer."""
    strategy: ClassVar[str]
    #: When the weights change: "fixed", "iteration" or "epoch".
    cadence: ClassVar[str]
    #: True when the trainer must supply per-task gradients after each backward pass.
    needs_task_gradients: ClassVar[bool] = False

    def __init__(self, tasks: Sequence[str], config: BalancerConfig, rng: np.random.Generator) -> None:
        self.logger = logging.getLogger(self.__class__.__qualname__)
        self.config = config
        self.rng = rng
        self.state = WeightState(
            tasks=tuple(tasks), strategy=self.strategy, weights=ew_weights(len(tasks)),
            temperature=config.temperature, alpha=config.alpha,
        )

    def begin_epoch(self, epoch: int) -> None:
        pass

    def iteration_weights(self) -> Array:
        return self.state.weights

    def after_backward(self, shared_gradients: Mapping[str, ArrayLike], losses: Mapping[str, float]) -> None:
        pass

    def end_epoch(self, mean_losses: Mapping[str, float]) -> None:
        self.state.record_epoch([mean_losses[t] for t in self.state.tasks])

    def metadata(self) -> dict[str, Any]:
        return {"strategy": self.strategy, "cadence": self.cadence} | self.config.as_dict()


class EqualWeighting(Balancer):
    strategy = "ew"
    cadence = "fixed"


class RandomLossWeighting(Balancer):
    strategy = "rlw"
    cadence = "iteration"

    def iteration_weights(self) -> Array:
        self.state.weights = rlw_weights(self.state.K, self.rng)
        return self.state.weights


class DynamicWeightAverage(Balancer):
    strategy = "dwa"
    cadence = "epoch"

    def begin_epoch(self, epoch: int) -> None:
        self.state.weights = dwa_weights(self.state, epoch)


class GradNormBalancer(Balancer):
    strategy = "gradnorm"
    cadence = "iteration"
    needs_task_gradients = True

    def __init__(self, tasks: Sequence[str], config: BalancerConfig, rng: np.random.Generator) -> None:
        if len(tasks) < 2:
            raise StrategyNotApplicable(f"GradNorm needs at least two tasks, got {''.join(tasks)!r}")
        super().__init__(tasks, config, rng)

    def after_backward(self, shared_gradients: Mapping[str, ArrayLike], losses: Mapping[str, float]) -> None:
        gradnorm_step(
            shared_gradients, losses, self.state,
            lr_w=self.config.lr_w, alpha=self.config.alpha, min_weight=self.config.min_weight,
        )


BALANCERS: dict[str, type[Balancer]] = {
    cls.strategy: cls for cls in (EqualWeighting, RandomLossWeighting, DynamicWeightAverage, GradNormBalancer)
}


def make_balancer(
    strategy: str, tasks: Sequence[str], config: BalancerConfig | None = None, rng: np.random.Generator | None = None,
) -> Balancer:
    return BALANCERS[parse_strategy(strategy)](tasks, config or BalancerConfig(), rng or np.random.default_rng(0))
