"""Ten learning-rate choices and the parameter-to-choice mapping.

Choice 0 governs the embedding tables, choices 1..8 partition the encoder
layers, choice 9 governs the classification head. Layer norm gains/shifts
and biases inherit the choice of their enclosing group.

With more than eight layers the surplus goes to the even choices first
(2, 4, 6, 8), then the odd ones, and each choice governs a contiguous
block of layers. Twelve layers therefore map as 1:{1} 2:{2,3} 3:{4}
4:{5,6} 5:{7} 6:{8,9} 7:{10} 8:{11,12}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import ModelConfig, param_names

NUM_CHOICES = 10
EMBEDDINGS_CHOICE = 0
HEAD_CHOICE = 9

# searchable box for a single rate, in log10 decades [-7, -3]
LR_MIN = 1e-7
LR_MAX = 1e-3

_EXTRA_ORDER = (2, 4, 6, 8, 1, 3, 5, 7)


def layer_choice_map(n_layers: int) -> dict[int, int]:
    """Map each 1-based encoder layer index to its choice in 1..8."""
    if n_layers < 1:
        raise ValueError("n_layers must be positive")
    base, extra = divmod(n_layers, 8)
    counts = {c: base for c in range(1, 9)}
    for c in _EXTRA_ORDER[:extra]:
        counts[c] += 1
    mapping: dict[int, int] = {}
    layer = 1
    for c in range(1, 9):
        for _ in range(counts[c]):
            mapping[layer] = c
            layer += 1
    return mapping


def choice_of_param(name: str, layer_map: dict[int, int]) -> int:
    if name.startswith("embeddings."):
        return EMBEDDINGS_CHOICE
    if name.startswith("head."):
        return HEAD_CHOICE
    if name.startswith("layer_"):
        index = int(name.split(".", 1)[0][len("layer_") :])
        return layer_map[index]
    raise ValueError(f"no learning-rate choice for parameter {name!r}")


def param_choices(cfg: ModelConfig) -> dict[str, int]:
    """Choice index for every parameter of a model described by `cfg`."""
    layer_map = layer_choice_map(cfg.n_layers)
    return {name: choice_of_param(name, layer_map) for name in param_names(cfg)}


@dataclass(frozen=True)
class LrDistribution:
    """One peak learning rate per choice; all rates strictly positive."""

    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        rates = tuple(float(r) for r in self.rates)
        if len(rates) != NUM_CHOICES:
            raise ValueError(
                f"a distribution needs {NUM_CHOICES} rates, got {len(rates)}"
            )
        for i, r in enumerate(rates):
            if not math.isfinite(r) or r <= 0.0:
                raise ValueError(f"rate for choice {i} must be finite and > 0, got {r}")
        object.__setattr__(self, "rates", rates)

    @classmethod
    def flat(cls, rate: float) -> "LrDistribution":
        return cls((rate,) * NUM_CHOICES)

    def __getitem__(self, choice: int) -> float:
        return self.rates[choice]

    def param_rates(self, cfg: ModelConfig) -> dict[str, float]:
        """Peak rate per parameter name under this distribution."""
        return {
            name: self.rates[choice] for name, choice in param_choices(cfg).items()
        }
