"""Suturing phases, skills and the seven scored (phase, skill) domains."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .errors import RoutingError


class Phase(enum.Enum):
    NeedleHandling = "Needle Handling"
    NeedleDriving = "Needle Driving"
    NeedleWithdrawal = "Needle Withdrawal"


class Skill(enum.Enum):
    NumberOfRepositions = "Number of Repositions"
    NeedleHoldDepth = "Needle Hold Depth"
    NeedleHoldRatio = "Needle Hold Ratio"
    NeedleHoldAngle = "Needle Hold Angle"
    DrivingSmoothness = "Driving Smoothness"
    WristRotation = "Wrist Rotation"


_VALID = (
    (Phase.NeedleHandling, Skill.NumberOfRepositions),
    (Phase.NeedleHandling, Skill.NeedleHoldDepth),
    (Phase.NeedleHandling, Skill.NeedleHoldRatio),
    (Phase.NeedleHandling, Skill.NeedleHoldAngle),
    (Phase.NeedleDriving, Skill.DrivingSmoothness),
    (Phase.NeedleDriving, Skill.WristRotation),
    (Phase.NeedleWithdrawal, Skill.WristRotation),
)


def _slug(text: str) -> str:
    return re.sub(r"[^a-z]", "", text.lower())


@dataclass(frozen=True, order=False)
class DomainKey:
    phase: Phase
    skill: Skill

    def __post_init__(self):
        if (self.phase, self.skill) not in _VALID:
            raise RoutingError(
                f"invalid domain ({self.phase.value}, {self.skill.value})",
                valid=[f"{p.value}: {s.value}" for p, s in _VALID],
            )

    @property
    def canonical(self) -> str:
        return f"{self.phase.value}: {self.skill.value}"

    def __str__(self):
        return self.canonical

    @classmethod
    def parse(cls, text: "str | DomainKey") -> "DomainKey":
        """Accept the canonical ``"Phase: Skill"`` label or a case/space-insensitive variant
        such as ``NeedleHandling:NumberOfRepositions``."""
        if isinstance(text, DomainKey):
            return text
        if ":" not in text:
            raise RoutingError(f"domain {text!r} is not of the form 'Phase: Skill'", valid=canonical_names())
        left, right = (_slug(part) for part in text.split(":", 1))
        phase = next((p for p in Phase if _slug(p.value) == left or _slug(p.name) == left), None)
        skill = next((s for s in Skill if _slug(s.value) == right or _slug(s.name) == right), None)
        if phase is None or skill is None:
            raise RoutingError(f"unknown domain {text!r}", valid=canonical_names())
        return cls(phase, skill)


ALL_DOMAINS = tuple(DomainKey(p, s) for p, s in _VALID)


def canonical_names() -> list[str]:
    return [d.canonical for d in ALL_DOMAINS]


def is_valid(phase: Phase, skill: Skill) -> bool:
    return (phase, skill) in _VALID
