"""Walker-level domain types: simulation cell, particle configurations, amplitudes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AmplitudeDegenerateError(Exception):
    """The wavefunction amplitude vanishes (or underflows) at a configuration."""


@dataclass(frozen=True)
class Cell:
    """Periodic rectangular simulation cell `[0, Lx) x [0, Ly)`."""

    lengths: np.ndarray  # shape (2,), float64

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64).reshape(2)
        if not np.all(lengths > 0):
            raise ValueError(f"cell lengths must be positive, got {lengths}")
        lengths.flags.writeable = False
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def square(cls, box_length: float) -> "Cell":
        return cls(np.array([box_length, box_length]))

    @property
    def area(self) -> float:
        return float(self.lengths[0] * self.lengths[1])

    @property
    def reciprocal(self) -> np.ndarray:
        """Smallest reciprocal vectors (2*pi/Lx, 2*pi/Ly) along each axis."""
        return 2.0 * np.pi / self.lengths

    def wrap(self, positions: np.ndarray) -> np.ndarray:
        """Map positions of shape (..., 2) into the primary cell."""
        return np.mod(positions, self.lengths)

    def min_image(self, displacements: np.ndarray) -> np.ndarray:
        """Minimum-image convention for displacement vectors of shape (..., 2)."""
        return displacements - self.lengths * np.round(displacements / self.lengths)


@dataclass(frozen=True)
class ParticleConfiguration:
    """Positions and spins of all electrons of one walker.

    Positions are stored wrapped into the primary cell; spins are +1/-1.
    Arrays are frozen after construction and treated as immutable.
    """

    positions: np.ndarray  # (n_electrons, 2) float64, wrapped
    spins: np.ndarray  # (n_electrons,) int8, values in {+1, -1}
    cell: Cell

    def __post_init__(self):
        pos = self.cell.wrap(np.array(self.positions, dtype=np.float64))
        spins = np.array(self.spins, dtype=np.int8)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError(f"positions must have shape (N, 2), got {pos.shape}")
        if spins.shape != (pos.shape[0],):
            raise ValueError(
                f"spins shape {spins.shape} does not match {pos.shape[0]} electrons"
            )
        if not np.all(np.abs(spins) == 1):
            raise ValueError("spins must be +1 or -1")
        pos.flags.writeable = False
        spins.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "spins", spins)

    @property
    def n_electrons(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions: np.ndarray) -> "ParticleConfiguration":
        return ParticleConfiguration(positions, self.spins, self.cell)

    def with_spins(self, spins: np.ndarray) -> "ParticleConfiguration":
        return ParticleConfiguration(self.positions, spins, self.cell)

    def with_spin_flipped(self, i: int) -> "ParticleConfiguration":
        spins = np.array(self.spins)
        spins[i] = -spins[i]
        return self.with_spins(spins)

    def swapped(self, i: int, j: int) -> "ParticleConfiguration":
        """Exchange the full generalized coordinates (position and spin) of i and j."""
        pos = np.array(self.positions)
        spins = np.array(self.spins)
        pos[[i, j]] = pos[[j, i]]
        spins[[i, j]] = spins[[j, i]]
        return ParticleConfiguration(pos, spins, self.cell)


@dataclass(frozen=True)
class LogAmplitude:
    """Complex logarithm of the wavefunction, as (log|psi|, phase).

    A vanishing amplitude is represented by ``log_abs = -inf``; callers must
    check :attr:`is_degenerate` before using the phase.
    """

    log_abs: float
    phase: float

    @property
    def is_degenerate(self) -> bool:
        return not np.isfinite(self.log_abs)

    @property
    def as_complex(self) -> complex:
        return complex(self.log_abs, self.phase)


@dataclass
class AmplitudeBatch:
    """Batched (log|psi|, phase) arrays; degenerate entries have log_abs = -inf."""

    log_abs: np.ndarray  # (B,)
    phase: np.ndarray  # (B,)

    def __getitem__(self, b) -> LogAmplitude:
        return LogAmplitude(float(self.log_abs[b]), float(self.phase[b]))

    @property
    def degenerate(self) -> np.ndarray:
        return ~np.isfinite(self.log_abs)


@dataclass
class DerivativeBundle:
    """Value, per-coordinate gradient, and Laplacian of log(psi).

    ``spatial_grad`` has length 2N ordered (e0x, e0y, e1x, e1y, ...);
    ``laplacian`` is the trace of the Hessian over all 2N coordinates.
    """

    value: complex
    spatial_grad: np.ndarray  # (2N,) complex
    laplacian: complex


@dataclass
class DerivativeBatch:
    """Batched derivative bundles; rows with ``degenerate`` True are invalid."""

    value: np.ndarray  # (B,) complex
    spatial_grad: np.ndarray  # (B, 2N) complex
    laplacian: np.ndarray  # (B,) complex
    degenerate: np.ndarray  # (B,) bool

    def __getitem__(self, b) -> DerivativeBundle:
        if self.degenerate[b]:
            raise AmplitudeDegenerateError(f"walker {b} has a vanishing amplitude")
        return DerivativeBundle(
            complex(self.value[b]),
            np.array(self.spatial_grad[b]),
            complex(self.laplacian[b]),
        )
