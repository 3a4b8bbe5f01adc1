"""Masked-token generation on time-frequency grids, steered by a control branch.

A bidirectional transformer predicts discrete tokens on an F (frequency) by
T (time) grid.  Generation is iterative parallel decoding: start fully
masked, reveal a scheduled number of high-confidence tokens per step.
Temporal steering comes from a trainable copy of the first half of the
(frozen) backbone, fed a frequency-replicated projection of 1-D temporal
features and wired back through zero-initialized connectors, sampled with a
two-condition classifier-free guidance rule.

Everything runs on synthetic event data in float64 on one CPU core, so the
whole pipeline (data, two training phases, sampling, metrics) is exercised
end to end in minutes.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FormatError,
    GenerationError,
    GeometryError,
    NumericError,
    ShapeError,
    StateError,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "GenerationError",
    "GeometryError",
    "NumericError",
    "ShapeError",
    "StateError",
]
