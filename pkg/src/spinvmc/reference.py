"""Exact ground-state energies of the noninteracting models.

The single-particle Hamiltonian is built in a periodic plane-wave (x) spin
basis on the simulation cell and diagonalized; the ground energy of N
electrons is the sum of the N lowest levels. The momentum cutoff is raised
until the filled-level sum is stable, so spiral-type momentum coupling is
handled by the diagonalization itself rather than by filling a closed-form
dispersion on a grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hamiltonian import FreeGas, HamiltonianSpec, Rashba, SpinSpiral


class ReferenceUnsupportedError(ValueError):
    """Exact reference energies exist only for the noninteracting models."""


@dataclass
class ReferenceResult:
    energy: float
    levels: np.ndarray  # the filled single-particle energies
    cutoff: int  # plane-wave index cutoff reached
    history: list[tuple[int, float]]  # (cutoff, energy) per increment

    @property
    def converged_to(self) -> float:
        if len(self.history) < 2:
            return np.inf
        return abs(self.history[-1][1] - self.history[-2][1])


def _single_particle_levels(spec: HamiltonianSpec, n_max: int) -> np.ndarray:
    cell = spec.cell
    ns = np.arange(-n_max, n_max + 1)
    nx, ny = np.meshgrid(ns, ns, indexing="ij")
    ks = np.stack([nx.ravel(), ny.ravel()], 1) * cell.reciprocal
    kinetic = 0.5 * (ks**2).sum(axis=1)

    if isinstance(spec, FreeGas):
        return np.sort(np.repeat(kinetic, 2))

    if isinstance(spec, Rashba):
        kappa = spec.kappa_matrix()
        b_eff = ks @ kappa.T  # rows: (B_x, B_y) at each k
        coupling = np.abs(b_eff[:, 0] - 1j * b_eff[:, 1])
        levels = np.concatenate([kinetic - coupling, kinetic + coupling])
        return np.sort(levels)

    if isinstance(spec, SpinSpiral):
        q = np.asarray(spec.wavevector)
        n_k = len(ks)
        dim = 2 * n_k
        h = np.zeros((dim, dim))
        h[np.arange(n_k), np.arange(n_k)] = kinetic  # spin-up block
        h[n_k + np.arange(n_k), n_k + np.arange(n_k)] = kinetic  # spin-down
        # -J (e^{iq.r} sigma^- + h.c.): couples |k, up> to |k+q, down>
        index = {
            (int(i), int(j)): a
            for a, (i, j) in enumerate(zip(nx.ravel(), ny.ravel()))
        }
        dq = np.round(q * cell.lengths / (2 * np.pi)).astype(int)
        for a, (i, j) in enumerate(zip(nx.ravel(), ny.ravel())):
            partner = index.get((i + dq[0], j + dq[1]))
            if partner is not None:
                h[n_k + partner, a] = -spec.coupling
                h[a, n_k + partner] = -spec.coupling
        return np.linalg.eigvalsh(h)

    raise ReferenceUnsupportedError(
        f"no exact reference for {type(spec).__name__}"
    )


def exact_reference_energy(
    spec: HamiltonianSpec,
    n_electrons: int,
    tol: float = 1e-8,
    max_cutoff: int = 16,
) -> ReferenceResult:
    """Exact noninteracting ground energy by filling diagonalized levels.

    Raises if the energy still shifts by more than ``tol`` when the cutoff is
    raised to ``max_cutoff``.
    """
    if getattr(spec, "interacting", False):
        raise ReferenceUnsupportedError(
            "interacting Hamiltonians have no exact reference energy"
        )
    history = []
    last = None
    for n_max in range(4, max_cutoff + 1, 2):
        levels = _single_particle_levels(spec, n_max)
        if len(levels) < n_electrons:
            continue
        energy = float(levels[:n_electrons].sum())
        history.append((n_max, energy))
        if last is not None and abs(energy - last) <= tol:
            return ReferenceResult(energy, levels[:n_electrons], n_max, history)
        last = energy
    raise RuntimeError(
        f"reference energy did not converge to {tol} by cutoff {max_cutoff}: "
        f"{history}"
    )
