"""Fixed-time two-phase signal (green, yellow, red) with a yellow policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import SignalSpec

GREEN, YELLOW, RED = "green", "yellow", "red"


@dataclass(frozen=True)
class SignalSchedule:
    """Cyclic phase plan anchored at ``offset``.

    ``yellow_policy`` only affects :meth:`is_red` / :meth:`is_admissible`, i.e. how the
    macroscopic model and the controller treat yellow; :meth:`phase_at` always reports
    the physical phase.
    """

    position: float
    phases: tuple[tuple[str, float], ...] = ((GREEN, 20.0), (YELLOW, 2.0), (RED, 20.0))
    offset: float = 0.0
    yellow_policy: str = "part_of_red"

    def __post_init__(self) -> None:
        if not self.phases:
            raise ValueError("signal needs at least one phase")
        for state, dur in self.phases:
            if state not in (GREEN, YELLOW, RED):
                raise ValueError(f"unknown phase {state!r}")
            if not dur > 0:
                raise ValueError("phase durations must be positive")
        if self.yellow_policy not in ("part_of_green", "part_of_red"):
            raise ValueError(f"unknown yellow policy {self.yellow_policy!r}")

    @classmethod
    def from_spec(cls, spec: SignalSpec, position: float) -> "SignalSchedule":
        if not spec.enabled:
            return cls.always_green(position)
        return cls(position, ((GREEN, spec.green), (YELLOW, spec.yellow), (RED, spec.red)),
                   spec.offset, spec.yellow_policy)

    @classmethod
    def always_green(cls, position: float) -> "SignalSchedule":
        return cls(position, ((GREEN, math.inf),))

    @property
    def cycle(self) -> float:
        return sum(d for _, d in self.phases)

    @property
    def has_red(self) -> bool:
        return any(s != GREEN for s, _ in self.phases)

    def phase_at(self, t: float) -> str:
        if not self.has_red:
            return GREEN
        tc = (t - self.offset) % self.cycle
        acc = 0.0
        for state, dur in self.phases:
            acc += dur
            if tc < acc - 1e-9:
                return state
        return self.phases[0][0]

    def is_red(self, t: float) -> bool:
        """Red for modelling purposes (yellow folded in per the policy)."""
        state = self.phase_at(t)
        if state == YELLOW:
            return self.yellow_policy == "part_of_red"
        return state == RED

    def is_admissible(self, t: float) -> bool:
        return not self.is_red(t)

    def admissible_windows(self, t_now: float, span: float) -> list[tuple[float, float]]:
        """Maximal admissible intervals intersecting ``[t_now, t_now + span]``.

        The first window may start before ``t_now`` (currently admissible).  The end of
        the last window is reported in full even if it extends beyond the span.
        """
        if not self.has_red:
            return [(-math.inf, math.inf)]
        cyc = self.cycle
        k0 = math.floor((t_now - self.offset) / cyc) - 1
        segments: list[tuple[float, float, bool]] = []
        k = k0
        while True:
            base = self.offset + k * cyc
            if base > t_now + span + cyc:
                break
            acc = base
            for state, dur in self.phases:
                ok = state == GREEN or (state == YELLOW and self.yellow_policy == "part_of_green")
                segments.append((acc, acc + dur, ok))
                acc += dur
            k += 1
        merged: list[tuple[float, float]] = []
        for start, end, ok in segments:
            if not ok:
                continue
            if merged and abs(merged[-1][1] - start) < 1e-9:
                merged[-1] = (merged[-1][0], end)
            else:
                merged.append((start, end))
        return [(s, e) for s, e in merged if e > t_now + 1e-9 and s <= t_now + span]
