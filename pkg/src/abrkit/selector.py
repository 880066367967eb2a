"""Discounted-UCB choice of the next training trace, rewarded by policy entropy."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable

from .errors import EmptyPool, UnknownArm


@dataclass(frozen=True)
class BanditConfig:
    gamma: float = 0.999
    b: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.b < 0:
            raise ValueError("exploration constant must be >= 0")


@dataclass
class ArmState:
    disc_sum: float = 0.0
    disc_count: float = 0.0
    pulls: int = 0

    @property
    def mean(self) -> float:
        return self.disc_sum / self.disc_count if self.disc_count > 0 else 0.0


@dataclass(frozen=True)
class ArmValue:
    trace_id: str
    value: float
    mean: float
    bonus: float


class DiscountedUcb:
    """Streaming form of the discounted sums: every record decays all arms by gamma first."""

    def __init__(self, arms: Iterable[str], cfg: BanditConfig = BanditConfig()) -> None:
        self.cfg = cfg
        self.arms: dict[str, ArmState] = {a: ArmState() for a in sorted(set(arms))}

    def record(self, arm: str, reward: float, epoch: int | None = None) -> None:
        if arm not in self.arms:
            raise UnknownArm(arm)
        if not math.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        g = self.cfg.gamma
        for st in self.arms.values():
            st.disc_sum *= g
            st.disc_count *= g
        st = self.arms[arm]
        st.disc_sum += reward
        st.disc_count += 1.0
        st.pulls += 1

    def evaluate(self, arm: str, epoch: int) -> ArmValue:
        if arm not in self.arms:
            raise UnknownArm(arm)
        if epoch < 1:
            raise ValueError("epochs are counted from 1")
        st = self.arms[arm]
        if st.pulls == 0:
            return ArmValue(arm, math.inf, 0.0, math.inf)
        bonus = math.sqrt(self.cfg.b * math.log(epoch) / st.pulls)
        return ArmValue(arm, st.mean + bonus, st.mean, bonus)

    def value(self, arm: str, epoch: int) -> float:
        return self.evaluate(arm, epoch).value

    def select(self, epoch: int) -> ArmValue:
        """Highest value; ties go to the least-pulled arm, then the smallest id."""
        if not self.arms:
            raise EmptyPool("no traces to select from")
        vals = [self.evaluate(a, epoch) for a in self.arms]
        return max(vals, key=lambda v: (v.value, -self.arms[v.trace_id].pulls,
                                        _reverse_key(v.trace_id)))

    def to_dict(self) -> dict:
        return {"config": asdict(self.cfg), "arms": {a: asdict(s) for a, s in self.arms.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscountedUcb":
        sel = cls(d["arms"], BanditConfig(**d["config"]))
        for a, s in d["arms"].items():
            sel.arms[a] = ArmState(float(s["disc_sum"]), float(s["disc_count"]), int(s["pulls"]))
        return sel

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class _reverse_key:
    """Orders strings descending so ``max`` prefers the lexicographically smallest id."""

    __slots__ = ("s",)

    def __init__(self, s: str) -> None:
        self.s = s

    def __lt__(self, other: "_reverse_key") -> bool:
        return self.s > other.s

    def __eq__(self, other: object) -> bool:
        return isinstance(other, _reverse_key) and self.s == other.s
