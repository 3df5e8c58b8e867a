"""A fully specified lattice model: region, dynamics, hull parameters and coupling."""

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np

from .lattice_algebra import (BandedMatrix, SimpleRegion, hamiltonian_from_potential,
                              potential_values)
from .torus_model import (GOLDEN, ShiftSystem, ThetaField, TorusPoint, cube_indices,
                          hull_values_exact, orbit)

__all__ = ["ModelSpec", "dc1"]


@dataclass(frozen=True)
class ModelSpec:
    region: SimpleRegion
    system: ShiftSystem
    omega: TorusPoint
    eps: float
    master_seed: int
    n_max: int = 12
    decay_b: float = 1.0
    constant_theta: Optional[float] = None

    def theta(self, seed: Optional[int] = None) -> ThetaField:
        return ThetaField(self.master_seed if seed is None else seed, self.n_max,
                          self.decay_b, (), self.constant_theta)

    def with_seed(self, seed: int) -> "ModelSpec":
        return replace(self, master_seed=seed)

    def with_eps(self, eps: float) -> "ModelSpec":
        return replace(self, eps=eps)

    def orbit_coords(self) -> np.ndarray:
        return orbit(self.system, self.region.sites, self.omega)

    def potential(self, theta: Optional[ThetaField] = None) -> np.ndarray:
        theta = self.theta() if theta is None else theta
        return potential_values(self.region, self.system, self.omega, theta, self.n_max)

    def exact_potential(self, theta: Optional[ThetaField] = None) -> Tuple[Fraction, ...]:
        theta = self.theta() if theta is None else theta
        return tuple(hull_values_exact(theta, self.orbit_coords(), self.n_max))

    def hamiltonian(self, theta: Optional[ThetaField] = None, shift: float = 0.0,
                    exact_potential: Optional[Sequence[Fraction]] = None) -> BandedMatrix:
        if exact_potential is None:
            exact_potential = self.exact_potential(theta)
        if shift:
            exact_potential = [v + Fraction(shift) for v in exact_potential]
        return hamiltonian_from_potential(self.eps, self.region, exact_potential)

    def sites_in_cube(self, n: int, k: int) -> np.ndarray:
        """Region indices whose orbit point lies in the level-n cube with flat index k."""
        return np.nonzero(cube_indices(n, self.orbit_coords()) == k)[0]


def dc1(eps: float = 1e-3, master_seed: int = 42) -> ModelSpec:
    """The canonical desk configuration: golden-mean shift on the segment [-32, 31]."""
    return ModelSpec(region=SimpleRegion.segment(-32, 31), system=ShiftSystem.golden(2, 4),
                     omega=TorusPoint((0.0,)), eps=eps, master_seed=master_seed,
                     n_max=12, decay_b=1.0)
