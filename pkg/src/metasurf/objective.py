"""Normalized two-outlet objective J = w J1 - (1 - w) J2."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .macro import MacroSolution


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    """``gamma_min`` is the outlet whose power is reduced, ``gamma_max`` the
    one whose power is increased. Normalizers are captured once."""

    w: float = 0.5
    gamma_min: str = "out2"
    gamma_max: str = "out1"
    norm_min: float | None = None
    norm_max: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ObjectiveError("w must lie in [0, 1]")
        for n in (self.norm_min, self.norm_max):
            if n is not None and not n > 0:
                raise ObjectiveError("normalization constants must be positive")

    @property
    def captured(self) -> bool:
        return self.norm_min is not None and self.norm_max is not None

    def capture(self, sol: MacroSolution) -> "ObjectiveSpec":
        if self.captured:
            return self
        a = sol.boundary_norm(self.gamma_min)
        b = sol.boundary_norm(self.gamma_max)
        if not (a > 0 and b > 0):
            raise ObjectiveError(f"degenerate initial field: norms {a:.3e} on {self.gamma_min}, "
                                 f"{b:.3e} on {self.gamma_max}")
        return replace(self, norm_min=a, norm_max=b)

    def weights(self) -> dict:
        """Coefficient of int |P-|^2 over each tag in J."""
        if not self.captured:
            raise ObjectiveError("normalizers not captured")
        out = {self.gamma_min: self.w / self.norm_min}
        out[self.gamma_max] = out.get(self.gamma_max, 0.0) - (1.0 - self.w) / self.norm_max
        return out

    @classmethod
    def case(cls, n: int, w: float = 0.5) -> "ObjectiveSpec":
        """Case 1 steers energy to out1, case 2 to out2."""
        if n == 1:
            return cls(w, "out2", "out1")
        if n == 2:
            return cls(w, "out1", "out2")
        raise ObjectiveError(f"unknown case {n}")


def evaluate_objective(sol: MacroSolution, spec: ObjectiveSpec):
    """Returns (J, J1, J2, spec), capturing the normalizers on first use."""
    for t in (spec.gamma_min, spec.gamma_max):
        if t not in sol.cfg.outlet_tags:
            raise ObjectiveError(f"objective boundary {t!r} is not an outlet of this geometry")
    spec = spec.capture(sol)
    J1 = sol.boundary_norm(spec.gamma_min) / spec.norm_min
    J2 = sol.boundary_norm(spec.gamma_max) / spec.norm_max
    return spec.w * J1 - (1.0 - spec.w) * J2, J1, J2, spec
