"""Per-subroutine bandit state with Boltzmann sampling over explored prompts.

Every subroutine keeps a growing set of explored arms (system prompts that
have been pulled at least once) plus a persistent exploration arm standing in
for all prompts never tried. The exploration arm's loss estimate is the
unweighted mean of the explored arms' mean losses; sampling weight for an arm
with mean loss L is exp(-beta * L), normalized over explored arms plus the
exploration arm.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

import numpy as np

EXPLORE = "__explore__"

DEFAULT_EXPLORE_PRIOR = 0.5

_MEAN_TOL = 1e-9


@dataclass(frozen=True)
class ArmStats:
    """Pull count and running loss for one explored arm."""

    arm_id: str
    pull_count: int
    loss_sum: float

    def __post_init__(self) -> None:
        if self.pull_count < 1:
            raise ValueError(f"explored arm must have pull_count >= 1, got {self.pull_count}")
        if not (-_MEAN_TOL <= self.loss_sum <= self.pull_count + _MEAN_TOL):
            raise ValueError(
                f"loss_sum {self.loss_sum} inconsistent with pull_count {self.pull_count}"
            )

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.pull_count


@dataclass(frozen=True)
class BanditState:
    """All explored arms of one subroutine plus the sampling temperature."""

    subroutine_id: str
    arms: tuple[ArmStats, ...] = ()
    trial_index: int = 0
    beta: float = 0.0

    def __post_init__(self) -> None:
        ids = [a.arm_id for a in self.arms]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate arm ids: {ids}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    def arm(self, arm_id: str) -> ArmStats:
        for a in self.arms:
            if a.arm_id == arm_id:
                return a
        raise KeyError(arm_id)


@dataclass(frozen=True)
class BetaSchedule:
    """Linear ramp of the inverse temperature, clamped after the ramp."""

    kind: str = "linear"
    start_value: float = 0.0
    end_value: float = 1.0
    ramp_trials: int = 100

    def __post_init__(self) -> None:
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule kind: {self.kind!r}")
        if self.start_value < 0 or self.end_value < 0:
            raise ValueError("schedule values must be >= 0")
        if self.ramp_trials < 1:
            raise ValueError("ramp_trials must be positive")


def beta_at(schedule: BetaSchedule, trial_index: int) -> float:
    """Inverse temperature at a trial index: linear ramp, then clamped."""
    if trial_index < 0:
        raise ValueError(f"trial_index must be >= 0, got {trial_index}")
    frac = min(trial_index / schedule.ramp_trials, 1.0)
    return schedule.start_value + (schedule.end_value - schedule.start_value) * frac


def explore_loss(arms: tuple[ArmStats, ...] | list[ArmStats], prior: float = DEFAULT_EXPLORE_PRIOR) -> float:
    """Estimated loss of the exploration arm: mean of explored mean losses.

    With no explored arms the configured prior is returned; the sampling
    distribution degenerates to the exploration arm in that case anyway, so
    the prior only matters for expected-loss reporting.
    """
    if not arms:
        return prior
    return sum(a.mean_loss for a in arms) / len(arms)


def sample_distribution(
    state: BanditState, prior: float = DEFAULT_EXPLORE_PRIOR
) -> dict[str, float]:
    """Sampling probability for each explored arm plus the exploration arm.

    Weight of an arm with mean loss L is exp(-beta * L); the exploration arm
    uses the explored-mean estimate. Computed with a max-subtracted softmax so
    large beta stays well conditioned; probabilities sum to 1 within 1e-12 and
    are all strictly positive for finite beta.
    """
    losses = np.array([a.mean_loss for a in state.arms] + [explore_loss(state.arms, prior)])
    logits = -state.beta * losses
    logits -= logits.max()
    weights = np.exp(logits)
    probs = weights / weights.sum()
    keys = [a.arm_id for a in state.arms] + [EXPLORE]
    return dict(zip(keys, probs.tolist()))


def draw(state: BanditState, rng: random.Random | int) -> str:
    """One categorical draw from the sampling distribution.

    Deterministic given the rng seed. Returns an arm id or ``EXPLORE``.
    """
    if isinstance(rng, int):
        rng = random.Random(rng)
    dist = sample_distribution(state)
    u = rng.random()
    acc = 0.0
    keys = list(dist)
    for key in keys:
        acc += dist[key]
        if u < acc:
            return key
    return keys[-1]  # guard against accumulated float error


def record_loss(state: BanditState, arm_id: str, loss: float) -> BanditState:
    """Record one loss observation for an arm, returning the updated state.

    The pull count increments and the running mean moves accordingly; other
    arms are untouched. Losses must already lie in [0, 1] (clamping out-of
    range signals is the caller's job at the API boundary).
    """
    if not (0.0 <= loss <= 1.0):
        raise ValueError(f"loss must lie in [0, 1], got {loss}")
    ids = [a.arm_id for a in state.arms]
    if arm_id not in ids:
        raise KeyError(f"unknown arm: {arm_id!r}")
    arms = tuple(
        replace(a, pull_count=a.pull_count + 1, loss_sum=a.loss_sum + loss)
        if a.arm_id == arm_id
        else a
        for a in state.arms
    )
    return replace(state, arms=arms, trial_index=state.trial_index + 1)


def expected_loss(state: BanditState, prior: float = DEFAULT_EXPLORE_PRIOR) -> float:
    """Expected loss of the next pull under the sampling distribution."""
    dist = sample_distribution(state, prior)
    total = dist[EXPLORE] * explore_loss(state.arms, prior)
    for a in state.arms:
        total += dist[a.arm_id] * a.mean_loss
    return total
