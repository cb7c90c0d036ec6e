"""Fault descriptions shared by ingestion, injection and reporting"""

from enum import Enum
from typing import Optional, Tuple

from pydantic import BaseModel, Field, model_validator

FAULT_SEGMENT_LENGTH = 20

NOISE_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
SHORT_GRID = (1.5, 2.0, 3.0, 5.0, 7.0, 10.0)
FIXED_GRID = (150.0, 300.0, 500.0)

MIXED_R = 1.5
MIXED_F = 1.5
MIXED_G = 300.0


class FaultKind(str, Enum):
    """Fault families injected into the temperature channel"""
    NOISE = "noise"
    SHORT = "short"
    FIXED = "fixed"
    MIXED = "mixed"


class FaultSpec(BaseModel):
    """
    One fault to inject.

    ``r`` scales the noise std, ``f`` is the short-term amplitude multiplier,
    ``G`` the stuck value. Mixed faults carry their two single components in
    application order.
    """
    kind: FaultKind
    w: int = Field(default=FAULT_SEGMENT_LENGTH, ge=1, le=64)
    r: Optional[float] = None
    f: Optional[float] = None
    G: Optional[float] = None
    seed: Optional[int] = None
    components: Optional[Tuple["FaultSpec", "FaultSpec"]] = None

    @model_validator(mode="after")
    def _check_parameters(self) -> "FaultSpec":
        if self.kind == FaultKind.NOISE and (self.r is None or self.r <= 0):
            raise ValueError("noise faults need r > 0")
        if self.kind == FaultKind.SHORT and (self.f is None or self.f <= 0):
            raise ValueError("short faults need f > 0")
        if self.kind == FaultKind.FIXED and self.G is None:
            raise ValueError("fixed faults need G")
        if self.kind == FaultKind.MIXED:
            if self.components is None:
                raise ValueError("mixed faults need two components")
            a, b = self.components
            if FaultKind.MIXED in (a.kind, b.kind):
                raise ValueError("mixed faults combine single kinds only")
            if a.kind == b.kind:
                raise ValueError("mixed faults combine two distinct kinds")
        elif self.components is not None:
            raise ValueError("only mixed faults have components")
        return self

    @classmethod
    def noise(cls, r: float, w: int = FAULT_SEGMENT_LENGTH) -> "FaultSpec":
        return cls(kind=FaultKind.NOISE, r=r, w=w)

    @classmethod
    def short(cls, f: float, w: int = FAULT_SEGMENT_LENGTH) -> "FaultSpec":
        return cls(kind=FaultKind.SHORT, f=f, w=w)

    @classmethod
    def fixed(cls, G: float, w: int = FAULT_SEGMENT_LENGTH) -> "FaultSpec":
        return cls(kind=FaultKind.FIXED, G=G, w=w)

    @classmethod
    def mixed(cls, a: "FaultSpec", b: "FaultSpec", w: int = FAULT_SEGMENT_LENGTH) -> "FaultSpec":
        return cls(kind=FaultKind.MIXED, w=w, components=(a, b))

    @classmethod
    def single(cls, kind: FaultKind, intensity: float, w: int = FAULT_SEGMENT_LENGTH) -> "FaultSpec":
        """Build a single-kind spec from its grid intensity."""
        builders = {FaultKind.NOISE: cls.noise, FaultKind.SHORT: cls.short, FaultKind.FIXED: cls.fixed}
        if kind not in builders:
            raise ValueError(f"{kind.value} is not a single fault kind")
        return builders[kind](intensity, w)

    @property
    def intensity(self) -> Optional[float]:
        """Grid intensity of a single fault (r, f or G)"""
        return {FaultKind.NOISE: self.r, FaultKind.SHORT: self.f, FaultKind.FIXED: self.G}.get(self.kind)

    @property
    def involves_noise(self) -> bool:
        if self.kind == FaultKind.MIXED:
            return any(c.kind == FaultKind.NOISE for c in self.components)
        return self.kind == FaultKind.NOISE

    @property
    def label(self) -> str:
        """Short name used in reports and filenames, e.g. ``noise+fixed``"""
        if self.kind == FaultKind.MIXED:
            return "+".join(c.kind.value for c in self.components)
        return self.kind.value

    @property
    def intensity_label(self) -> str:
        if self.kind == FaultKind.MIXED:
            return ",".join(c.intensity_label for c in self.components)
        symbol = {FaultKind.NOISE: "r", FaultKind.SHORT: "f", FaultKind.FIXED: "G"}[self.kind]
        return f"{symbol}={self.intensity:g}"


def mixed_suite_specs(
    r: float = MIXED_R, f: float = MIXED_F, G: float = MIXED_G, w: int = FAULT_SEGMENT_LENGTH
) -> Tuple[FaultSpec, FaultSpec, FaultSpec]:
    """The three mixed combinations: noise+fixed, noise+short, short+fixed."""
    noise, short, fixed = FaultSpec.noise(r, w), FaultSpec.short(f, w), FaultSpec.fixed(G, w)
    return (
        FaultSpec.mixed(noise, fixed, w),
        FaultSpec.mixed(noise, short, w),
        FaultSpec.mixed(short, fixed, w),
    )


FaultSpec.model_rebuild()
