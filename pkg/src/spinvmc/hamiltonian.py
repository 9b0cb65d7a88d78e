"""Hamiltonians and per-walker local energies.

Four model systems on a periodic 2D cell: the free electron gas, a winding
Zeeman (spin-spiral) field, linear spin-momentum coupling of Rashba type, and
a honeycomb superlattice potential with periodic Coulomb repulsion.

Local energies are assembled from log-domain derivatives of the wavefunction:

    kinetic = -1/2 sum_i (lap_i log psi + (grad_i log psi)^2)

Spin terms are off-diagonal in the spin configuration; each Pauli x/y entry
needs one amplitude (and, for spin-momentum coupling, one first-derivative)
evaluation at a single-spin-flipped configuration. Amplitude ratios are formed
in the log domain. A flipped amplitude that vanishes contributes exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ewald import Ewald2D
from .state import Cell, ParticleConfiguration


@dataclass(frozen=True)
class FreeGas:
    cell: Cell

    interacting = False


@dataclass(frozen=True)
class SpinSpiral:
    """H = p^2/2 - J S(r).sigma with S = (cos q.r, sin q.r, 0)."""

    cell: Cell
    coupling: float = 1.0
    wavevector: tuple[float, float] = (0.0, 0.0)

    interacting = False

    def __post_init__(self):
        q = np.asarray(self.wavevector, dtype=float)
        frac = q * self.cell.lengths / (2 * np.pi)
        if np.max(np.abs(frac - np.round(frac))) > 1e-9:
            raise ValueError(
                f"spiral wavevector {q} is not commensurate with the cell"
            )
        object.__setattr__(self, "wavevector", (float(q[0]), float(q[1])))

    def field(self, positions: np.ndarray) -> np.ndarray:
        """Zeeman field B(r) = -J (cos q.r, sin q.r, 0), shape (..., N, 3)."""
        q = np.asarray(self.wavevector)
        phase = positions @ q
        b = np.zeros(positions.shape[:-1] + (3,))
        b[..., 0] = -self.coupling * np.cos(phase)
        b[..., 1] = -self.coupling * np.sin(phase)
        return b


@dataclass(frozen=True)
class Rashba:
    """H = p^2/2 + sum_{mu nu} kappa[mu, nu] p_nu sigma_mu."""

    cell: Cell
    kappa: tuple = ((0.0, -1.0), (1.0, 0.0))

    interacting = False

    def kappa_matrix(self) -> np.ndarray:
        return np.asarray(self.kappa, dtype=float)


@dataclass(frozen=True)
class HoneycombMoire:
    """Honeycomb superlattice potential with periodic Coulomb repulsion.

    V(r) = -2 V0 sum_{j=1..3} cos(g_j . r + phi) with the g_j at 120 degrees
    from each other; phi = pi puts two potential minima (the honeycomb sites)
    in each triangular cell. The rectangular simulation cell spans
    (cells_x * sqrt(3) * a, cells_y * a) and holds 2 * cells_x * cells_y
    triangular cells.
    """

    lattice_constant: float
    cells_x: int = 1
    cells_y: int = 1
    v0: float = 10.0
    phi: float = np.pi
    r_s: float = 10.0

    interacting = True

    @property
    def cell(self) -> Cell:
        a = self.lattice_constant
        return Cell(np.array([self.cells_x * np.sqrt(3.0) * a, self.cells_y * a]))

    @property
    def n_triangular_cells(self) -> int:
        return 2 * self.cells_x * self.cells_y

    def g_vectors(self) -> np.ndarray:
        g = 4 * np.pi / (np.sqrt(3.0) * self.lattice_constant)
        j = np.arange(1, 4)
        return g * np.stack([np.cos(2 * np.pi * j / 3), np.sin(2 * np.pi * j / 3)], 1)

    def lattice_vectors(self) -> np.ndarray:
        a = self.lattice_constant
        return np.array([[np.sqrt(3.0) / 2 * a, a / 2], [0.0, a]])

    def site_positions(self) -> np.ndarray:
        """The two potential minima (honeycomb sites) of each triangular cell
        inside the rectangular simulation cell, shape (n_sites, 2)."""
        a1, a2 = self.lattice_vectors()
        sites = []
        for i in range(2 * self.cells_x):
            for j in range(-self.cells_x, 2 * self.cells_y + self.cells_x):
                origin = i * a1 + j * a2
                for frac in (1.0 / 3.0, 2.0 / 3.0):
                    sites.append(origin + frac * (a1 + a2))
        sites = self.cell.wrap(np.array(sites))
        # deduplicate wrapped copies; the modulus maps rounding at the far
        # cell edge back onto the origin
        key = np.round(sites / self.cell.lengths * 1e9).astype(np.int64) % int(1e9)
        _, idx = np.unique(key, axis=0, return_index=True)
        return sites[np.sort(idx)]

    def potential(self, positions: np.ndarray) -> np.ndarray:
        """External potential summed over electrons; positions (..., N, 2)."""
        phases = positions @ self.g_vectors().T + self.phi
        return (-2.0 * self.v0) * np.cos(phases).sum(axis=(-2, -1))


HamiltonianSpec = FreeGas | SpinSpiral | Rashba | HoneycombMoire


@dataclass
class LocalEnergyBreakdown:
    """Per-walker energy contributions; imaginary parts are diagnostics."""

    kinetic: complex
    potential_external: float
    potential_interaction: float
    spin: complex

    @property
    def total(self) -> complex:
        return (
            self.kinetic
            + self.potential_external
            + self.potential_interaction
            + self.spin
        )


@dataclass
class LocalEnergyBatch:
    kinetic: np.ndarray  # (B,) complex
    potential_external: np.ndarray  # (B,)
    potential_interaction: np.ndarray  # (B,)
    spin: np.ndarray  # (B,) complex
    degenerate: np.ndarray  # (B,) bool, walkers to exclude upstream
    n_flip_degenerate: int = 0  # diagnostic: vanishing flipped amplitudes seen

    @property
    def total(self) -> np.ndarray:
        return (
            self.kinetic
            + self.potential_external
            + self.potential_interaction
            + self.spin
        )

    def __getitem__(self, b) -> LocalEnergyBreakdown:
        return LocalEnergyBreakdown(
            complex(self.kinetic[b]),
            float(self.potential_external[b]),
            float(self.potential_interaction[b]),
            complex(self.spin[b]),
        )


# -- building blocks ---------------------------------------------------------


def kinetic_batch(psi, positions, spins):
    """-1/2 sum_i (lap_i + grad_i^2) of log psi; returns (values, degenerate)."""
    bundle = psi.derivative_batch(positions, spins, need_laplacian=True)
    ekin = -0.5 * (bundle.laplacian + (bundle.spatial_grad**2).sum(axis=1))
    return ekin, bundle.degenerate


def _flipped_configs(positions, spins):
    """All single-spin-flip copies, stacked as (B*N, ...); flip index varies
    fastest over electrons."""
    b, n = spins.shape
    pos_rep = np.repeat(positions, n, axis=0)
    spins_rep = np.repeat(spins, n, axis=0)
    idx = np.tile(np.arange(n), b)
    spins_rep[np.arange(b * n), idx] = -spins_rep[np.arange(b * n), idx]
    return pos_rep, spins_rep, idx


def _log_ratios(base, flip_log_abs, flip_phase, n):
    """exp(log psi_flip - log psi) as (B, N) complex; zero where psi_flip = 0."""
    b = base.log_abs.shape[0]
    dlog = flip_log_abs.reshape(b, n) - base.log_abs[:, None]
    dphase = flip_phase.reshape(b, n) - base.phase[:, None]
    flip_dead = ~np.isfinite(flip_log_abs.reshape(b, n))
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(dlog + 1j * dphase)
    ratio = np.where(flip_dead, 0.0, ratio)
    return ratio, int(flip_dead.sum())


def zeeman_batch(psi, positions, spins, field_fn, base_amp):
    """sum_i B(r_i).sigma_i local term.

    sigma_z is diagonal; sigma_x/sigma_y need one flipped-spin amplitude per
    electron, evaluated in one batched pass. With a field along z only, no
    extra amplitude evaluations happen at all.
    """
    b, n = spins.shape
    bfield = field_fn(positions)  # (B, N, 3)
    espin = (spins * bfield[..., 2]).sum(axis=1).astype(complex)
    n_dead = 0
    if np.any(bfield[..., 0]) or np.any(bfield[..., 1]):
        pos_f, spins_f, _ = _flipped_configs(positions, spins)
        amp_f = psi.log_amplitude_batch(pos_f, spins_f)
        ratio, n_dead = _log_ratios(base_amp, amp_f.log_abs, amp_f.phase, n)
        coeff = bfield[..., 0] - 1j * spins * bfield[..., 1]
        espin = espin + (coeff * ratio).sum(axis=1)
    return espin, n_dead


def soc_batch(psi, positions, spins, kappa, base_amp):
    """sum_{i, mu, nu} kappa[mu, nu] p_nu sigma_mu local term, p = -i grad.

    Every term is spin-off-diagonal: each electron needs the gradient of
    log psi w.r.t. its own two coordinates at the flipped configuration, all
    batched into one derivative pass restricted to those coordinates.
    """
    kappa = np.asarray(kappa, dtype=float)
    b, n = spins.shape
    if not np.any(kappa):
        return np.zeros(b, dtype=complex), 0
    pos_f, spins_f, idx = _flipped_configs(positions, spins)
    coords = np.stack([2 * idx, 2 * idx + 1], axis=1)  # (B*N, 2)
    bundle = psi.derivative_batch(
        pos_f, spins_f, need_laplacian=False, coords=coords
    )
    ratio, n_dead = _log_ratios(
        base_amp, bundle.value.real, bundle.value.imag, n
    )
    gflip = np.where(
        np.isfinite(bundle.value.real)[:, None], bundle.spatial_grad, 0.0
    ).reshape(b, n, 2)
    # (kappa_x,nu - i s kappa_y,nu) sigma-structure with the -i of p-hat
    coeff = kappa[0][None, None, :] - 1j * spins[..., None] * kappa[1][None, None, :]
    return (-1j) * (coeff * ratio[..., None] * gflip).sum(axis=(1, 2)), n_dead


def local_energy_batch(psi, positions, spins, spec: HamiltonianSpec,
                       ewald: Ewald2D | None = None) -> LocalEnergyBatch:
    """Dispatch the full local energy for one walker batch."""
    b = positions.shape[0]
    ekin, degenerate = kinetic_batch(psi, positions, spins)
    ext = np.zeros(b)
    inter = np.zeros(b)
    espin = np.zeros(b, dtype=complex)
    n_dead = 0

    if isinstance(spec, (SpinSpiral, Rashba)):
        base_amp = psi.log_amplitude_batch(positions, spins)
        if isinstance(spec, SpinSpiral):
            espin, n_dead = zeeman_batch(psi, positions, spins, spec.field, base_amp)
        else:
            espin, n_dead = soc_batch(
                psi, positions, spins, spec.kappa_matrix(), base_amp
            )
    elif isinstance(spec, HoneycombMoire):
        ext = spec.potential(positions)
        if ewald is None:
            ewald = Ewald2D(spec.cell)
        inter = ewald.interaction_energy(positions, spec.r_s)
        degenerate = degenerate | ~np.isfinite(inter)

    ekin = np.where(degenerate, np.nan, ekin)
    return LocalEnergyBatch(ekin, ext, inter, espin, degenerate, n_dead)


# -- single-configuration entry points ---------------------------------------


def kinetic_local(psi, config: ParticleConfiguration) -> complex:
    val, degenerate = kinetic_batch(psi, config.positions[None], config.spins[None])
    if degenerate[0]:
        from .state import AmplitudeDegenerateError

        raise AmplitudeDegenerateError("amplitude vanishes; walker must be rejected")
    return complex(val[0])


def external_potential(config: ParticleConfiguration, spec: HoneycombMoire) -> float:
    return float(spec.potential(config.positions[None])[0])


def interaction_potential(
    config: ParticleConfiguration, spec: HoneycombMoire, ewald: Ewald2D | None = None
) -> float:
    if ewald is None:
        ewald = Ewald2D(spec.cell)
    return float(ewald.interaction_energy(config.positions[None], spec.r_s)[0])


def zeeman_local(psi, config: ParticleConfiguration, field_fn) -> complex:
    base = psi.log_amplitude_batch(config.positions[None], config.spins[None])
    val, _ = zeeman_batch(
        psi, config.positions[None], config.spins[None], field_fn, base
    )
    return complex(val[0])


def soc_local(psi, config: ParticleConfiguration, kappa) -> complex:
    base = psi.log_amplitude_batch(config.positions[None], config.spins[None])
    val, _ = soc_batch(psi, config.positions[None], config.spins[None], kappa, base)
    return complex(val[0])


def local_energy(
    psi, config: ParticleConfiguration, spec: HamiltonianSpec
) -> LocalEnergyBreakdown:
    batch = local_energy_batch(
        psi, config.positions[None], config.spins[None], spec
    )
    if batch.degenerate[0]:
        from .state import AmplitudeDegenerateError

        raise AmplitudeDegenerateError("amplitude vanishes; walker must be rejected")
    return batch[0]
