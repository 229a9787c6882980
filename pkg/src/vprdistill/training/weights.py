"""Per-pair distillation weights computed from recall rankings.

Every kernel is a function of the seg-branch rank ``x`` and the rgb-branch
rank ``y`` of a (query, positive) pair and is clamped at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..dataset.mining import SamplePair
from ..errors import ConfigError
from ..partition import Group, PartitionConfig, PartitionTable, assign_group

KINDS = ("eq4", "eq7_gps", "constants", "prototype", "all_ones", "all", "none")

_ALIASES = {"eq7": "eq7_gps", "proto": "prototype", "ones": "all_ones", "gps": "eq7_gps"}


@dataclass(frozen=True)
class WeightScheme:
    """Which kernel to use and its parameters.

    ``eq4``: log-rank kernel over D1-D3, zero on D4.
    ``eq7_gps``: seg-only variant, ``1 + 1/(4 ln(1+x))`` on S1, zero on S2;
    the seg rank ``x`` stands in for the single-branch rank.
    ``constants``: one fixed weight per group D1-D4.
    ``prototype``: ``eq4`` with ``ln(1+x)`` replaced by ``x``.
    ``all_ones``: 1 on S1, 0 on S2.  ``all``: 1 everywhere.  ``none``: 0 everywhere.
    """

    kind: str = "eq4"
    constants: tuple[float, float, float, float] | None = None
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    # denominators scaling the D1, D2 and D3 kernels
    denominators: tuple[float, float, float] = (4.0, 5.0, 4.0)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown weight scheme {self.kind!r}; choose from {KINDS}")
        if kind == "constants":
            if self.constants is None or len(self.constants) != 4:
                raise ConfigError("constants scheme needs four weights (D1, D2, D3, D4)")
            if any(w < 0 for w in self.constants):
                raise ConfigError(f"constant weights must be nonnegative, got {self.constants}")
            object.__setattr__(self, "constants", tuple(float(w) for w in self.constants))
        if any(d <= 0 for d in self.denominators):
            raise ConfigError("kernel denominators must be > 0")

    @classmethod
    def parse(cls, text: str, partition: PartitionConfig = PartitionConfig()) -> "WeightScheme":
        """Parse ``eq4 | eq7 | const:w1,w2,w3,w4 | proto | ones | all | none``."""
        text = text.strip()
        if text.startswith("const:"):
            try:
                values = tuple(float(v) for v in text[len("const:") :].split(","))
            except ValueError:
                raise ConfigError(f"bad constant weights in {text!r}") from None
            return cls("constants", values, partition)
        return cls(text, None, partition)

    @property
    def label(self) -> str:
        if self.kind == "constants":
            return "const:" + ",".join(f"{w:g}" for w in self.constants)
        return self.kind


def weight_phi(x: int, y: int, scheme: WeightScheme) -> float:
    if x < 1 or y < 1:
        raise ConfigError(f"ranks start at 1, got x={x}, y={y}")
    kind = scheme.kind
    if kind == "none":
        return 0.0
    cfg = scheme.partition
    group = assign_group(x, y, cfg)
    if kind == "all":
        return 1.0
    if kind == "constants":
        return scheme.constants[int(group.value[1]) - 1]
    if group is Group.D4:
        return 0.0
    if kind == "all_ones":
        return 1.0
    if kind == "eq7_gps":
        return 1.0 + 1.0 / (4.0 * math.log1p(x))
    scale = math.log1p(x) if kind == "eq4" else float(x)
    a, b, c = scheme.denominators
    if group is Group.D1:
        phi = 1.0 + (min(cfg.n_m, y) - x) / (a * scale)
    elif group is Group.D2:
        phi = 1.0 + (y - x) / (b * scale)
    else:
        phi = 1.0 + (y - x) / (c * scale)
    return max(phi, 0.0)


def weight_table(table: PartitionTable, scheme: WeightScheme) -> dict[SamplePair, float]:
    if scheme.partition != table.config:
        raise ConfigError(f"scheme thresholds {scheme.partition} differ from the partition's {table.config}")
    return {row.pair: weight_phi(row.x, row.y, scheme) for row in table.rows}
