"""Per-epoch learning-rate schedules and early stopping, as pure functions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class StepDecaySchedule:
    lr0: float
    factor: float = 0.5
    period: int = 2

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.period < 1:
            raise ValueError("period must be >= 1")

    def lr_at(self, epoch: float) -> float:
        return self.lr0 * self.factor ** math.floor(epoch / self.period)


@dataclass(frozen=True)
class CosineWarmRestartSchedule:
    """Cosine decay from ``lr0`` to ``eta_min`` over cycles of length T0, T0*Tmult, ...

    Cycles are half-open: at the exact end of a cycle the next one has begun,
    so the rate is back at ``lr0``.
    """

    lr0: float
    eta_min: float | None = None
    T0: float = 2
    Tmult: float = 2

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.eta_min is None:
            object.__setattr__(self, "eta_min", self.lr0 / 100)
        if not 0 <= self.eta_min < self.lr0:
            raise ValueError("eta_min must satisfy 0 <= eta_min < lr0")
        if self.T0 < 1 or self.Tmult < 1:
            raise ValueError("T0 and Tmult must be >= 1")

    def cycle_position(self, epoch: float) -> tuple[int, float, float]:
        """(cycle index, elapsed within cycle, cycle length)."""
        if self.Tmult == 1:
            i = math.floor(epoch / self.T0)
            return i, epoch - i * self.T0, self.T0
        start, length, i = 0.0, float(self.T0), 0
        while epoch >= start + length:
            start += length
            length *= self.Tmult
            i += 1
        return i, epoch - start, length

    def in_cycle(self, elapsed: float, length: float) -> float:
        return self.eta_min + 0.5 * (self.lr0 - self.eta_min) * (1 + math.cos(math.pi * elapsed / length))

    def lr_at(self, epoch: float) -> float:
        _, elapsed, length = self.cycle_position(epoch)
        return self.in_cycle(elapsed, length)


Schedule = StepDecaySchedule | CosineWarmRestartSchedule


def lr_at(schedule: Schedule, epoch_progress: float) -> float:
    if epoch_progress < 0:
        raise ValueError("epoch_progress must be nonnegative")
    return schedule.lr_at(epoch_progress)


def make_schedule(kind: str, lr0: float, **kwargs) -> Schedule:
    if kind == "step":
        return StepDecaySchedule(lr0, **kwargs)
    if kind == "cosine":
        return CosineWarmRestartSchedule(lr0, **kwargs)
    raise ValueError(f"unknown scheduler {kind!r}; choose 'step' or 'cosine'")


def schedule_to_dict(schedule: Schedule) -> dict:
    kind = "step" if isinstance(schedule, StepDecaySchedule) else "cosine"
    return {"kind": kind, **asdict(schedule)}


def schedule_from_dict(d: dict) -> Schedule:
    d = dict(d)
    kind = d.pop("kind")
    lr0 = d.pop("lr0")
    return make_schedule(kind, lr0, **d)


@dataclass(frozen=True)
class EarlyStopState:
    patience: int = 5
    best_metric: float | None = None
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    best_tiebreak: float | None = None
    last_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


def early_stop_update(state: EarlyStopState, epoch: int, val_metric: float, mode: str = "maximize",
                      tiebreak: float | None = None) -> tuple[EarlyStopState, bool]:
    """Fold one validation result into the stopping state.

    Improvement is strict.  When ``tiebreak`` (lower is better, e.g. validation
    loss) is given, an equal metric with a strictly lower tiebreak also counts.
    Returns the new state and whether training should stop now.
    """
    if mode not in ("maximize", "minimize"):
        raise ValueError(f"unknown mode {mode!r}")
    if val_metric is None or math.isnan(val_metric):
        raise ValueError(f"validation metric is NaN at epoch {epoch}")
    if epoch <= state.last_epoch:
        raise ValueError(f"epoch {epoch} observed after epoch {state.last_epoch}")

    best = state.best_metric
    if best is None:
        improved = True
    elif mode == "maximize":
        improved = val_metric > best
    else:
        improved = val_metric < best
    if (not improved and best is not None and val_metric == best and tiebreak is not None
            and state.best_tiebreak is not None and tiebreak < state.best_tiebreak):
        improved = True

    if improved:
        new = replace(state, best_metric=val_metric, best_epoch=epoch, epochs_since_improvement=0,
                      best_tiebreak=tiebreak, last_epoch=epoch)
    else:
        new = replace(state, epochs_since_improvement=state.epochs_since_improvement + 1,
                      last_epoch=epoch)
    return new, new.epochs_since_improvement >= new.patience
