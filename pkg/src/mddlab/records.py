from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class MetricsRecord:
    run_id: str
    epoch: int
    phase: str  # "pretrain" | "adapt"
    dice_per_class: list[float] = field(default_factory=list)
    dice_mean: float = float("nan")
    loss_c: float = float("nan")
    loss_a_src: float = float("nan")
    stopped: bool = False
    dice_source: float = float("nan")

    def __post_init__(self):
        if self.phase not in ("pretrain", "adapt"):
            raise ValueError(f"unknown phase {self.phase!r}")
        for d in self.dice_per_class:
            if not (d != d or 0.0 <= d <= 1.0):
                raise ValueError(f"dice value {d} outside [0, 1]")
