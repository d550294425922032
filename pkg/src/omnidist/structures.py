"""Small record types passed between modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, centre + extents.

    ``wraps`` marks equirectangular boxes whose hull crosses the azimuth seam;
    their centre may then lie outside [0, width).
    """

    cx: float
    cy: float
    w: float
    h: float
    wraps: bool = False

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if not all(math.isfinite(x) for x in (self.cx, self.cy, self.w, self.h)):
            raise DomainError("box values must be finite")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1, wraps=False) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, wraps)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    bbox: BBox
    distance_m: float


@dataclass(frozen=True)
class Detection:
    class_id: int
    bbox: BBox
    confidence: float
    distance_m: float | None = None
