"""Metric distance <-> normalised regression target.

Linear mode: y = d / d_max.  Log mode: y = log(d + eps) / log(d_max + eps),
inverted as d = exp(y * log(d_max + eps)) - eps.

Values above d_max are clamped to y = 1 and counted in a caller-owned
:class:`ClampTally`.  In log mode distances below 1 m map to negative y; the
natural lower end of the log range is ``log(eps) / log(d_max + eps)`` (d = 0)
and round trips stay exact down to d = 0, so only the upper end is clamped.
Callers that feed a sigmoid head clamp targets to [0, 1] themselves
(see :func:`omnidist.toy_model.distance_targets`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

# Per-dataset maximum distances (upper bin edges of the published binnings).
DATASET_D_MAX = {"loaf": 36.0, "ulm360": 12.0, "boat360": 300.0}


@dataclass(frozen=True)
class NormalizationSpec:
    mode: str = "linear"
    d_max: float = 36.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("linear", "log"):
            raise ConfigError(f"unknown normalization mode {self.mode!r}")
        if not self.d_max > 0:
            raise ConfigError("d_max must be positive")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.mode == "log" and self.d_max + self.epsilon <= 1:
            raise ConfigError("log mode needs d_max + epsilon > 1")

    @property
    def y_min(self) -> float:
        """Normalised value of d = 0."""
        if self.mode == "linear":
            return 0.0
        return math.log(self.epsilon) / math.log(self.d_max + self.epsilon)


@dataclass
class ClampTally:
    count: int = 0


def normalize(spec: NormalizationSpec, d, tally: ClampTally | None = None):
    d_arr = np.asarray(d, dtype=float)
    if np.any(~np.isfinite(d_arr)) or np.any(d_arr < 0):
        raise DomainError("distances must be finite and non-negative")
    if spec.mode == "linear":
        y = d_arr / spec.d_max
    else:
        y = np.log(d_arr + spec.epsilon) / math.log(spec.d_max + spec.epsilon)
    over = d_arr >= spec.d_max
    if tally is not None:
        tally.count += int(np.count_nonzero(d_arr > spec.d_max))
    y = np.where(over, 1.0, y)
    return float(y) if y.ndim == 0 else y


def denormalize(spec: NormalizationSpec, y):
    y_arr = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(y_arr)) or np.any(y_arr > 1.0) or np.any(y_arr < spec.y_min):
        raise DomainError(f"normalised value outside [{spec.y_min:g}, 1]")
    if spec.mode == "linear":
        d = y_arr * spec.d_max
    else:
        d = np.exp(y_arr * math.log(spec.d_max + spec.epsilon)) - spec.epsilon
        d = np.maximum(d, 0.0)
    return float(d) if d.ndim == 0 else d
