from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import GsaError, InvalidStride
from .kernels import KernelTiling

VARIANTS = ("plain", "hybrid")


@dataclass(frozen=True)
class GsaParams:
    """Runtime knobs of a GSA layer.

    ``scale=None`` means 1/sqrt(head dim), resolved by :meth:`resolved_scale`.
    ``top_k`` larger than the window count is clamped, not rejected.
    """

    window_s: int = 4
    top_k: int = 32
    scale: float | None = None
    variant: str = "plain"
    ref_stride: int = 100
    tiling: KernelTiling = field(default_factory=KernelTiling)

    def __post_init__(self):
        if self.top_k < 1:
            raise GsaError(f"top_k must be >= 1, got {self.top_k}")
        if self.scale is not None and not self.scale > 0:
            raise GsaError(f"scale must be > 0, got {self.scale}")
        if self.variant not in VARIANTS:
            raise GsaError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "hybrid" and self.ref_stride < 1:
            raise InvalidStride(f"hybrid selection needs ref_stride >= 1, got {self.ref_stride}")

    def resolved_scale(self, dim: int) -> float:
        return 1.0 / math.sqrt(dim) if self.scale is None else float(self.scale)
