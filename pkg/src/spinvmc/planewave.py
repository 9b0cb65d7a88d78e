"""Analytic Slater-determinant amplitudes built from spinor plane waves.

These fixed (parameter-free) wavefunctions provide exact eigenstates of the
noninteracting Hamiltonians. They expose the same batched evaluation API as
the neural ansatz, so they can be dropped into the sampler and local-energy
pipeline for zero-variance checks and sampler goodness-of-fit tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import AmplitudeBatch, Cell, DerivativeBatch


@dataclass(frozen=True)
class SpinorOrbital:
    """phi(r, s) = c_up e^{i k_up.r} [s=+1] + c_down e^{i k_down.r} [s=-1].

    Momenta must be reciprocal vectors of the cell for a periodic state.
    """

    k_up: tuple[float, float]
    k_down: tuple[float, float]
    c_up: complex
    c_down: complex


class PlaneWaveSlater:
    """Single Slater determinant of spinor plane-wave orbitals."""

    def __init__(self, orbitals: list[SpinorOrbital], cell: Cell):
        self.orbitals = list(orbitals)
        self.cell = cell
        n = len(orbitals)
        # per-orbital momentum and coefficient, indexed by spin channel
        self._k = np.zeros((2, n, 2))  # (spin channel, orbital, xy)
        self._c = np.zeros((2, n), dtype=complex)
        for j, orb in enumerate(orbitals):
            self._k[0, j] = orb.k_up
            self._k[1, j] = orb.k_down
            self._c[0, j] = orb.c_up
            self._c[1, j] = orb.c_down

    @property
    def n_electrons(self) -> int:
        return len(self.orbitals)

    def _matrix(self, positions, spins):
        """M[b, i, j] = phi_j(r_i, s_i) plus the per-entry momenta K[b,i,j,:]."""
        chan = (np.asarray(spins) < 0).astype(int)  # 0 for up, 1 for down
        k = self._k[chan]  # (B, N, N_orb, 2)
        c = self._c[chan]  # (B, N, N_orb)
        phase = np.einsum("bijx,bix->bij", k, positions)
        return c * np.exp(1j * phase), k

    def log_amplitude_batch(self, positions, spins) -> AmplitudeBatch:
        m, _ = self._matrix(np.asarray(positions, dtype=float), spins)
        sign, logabs = np.linalg.slogdet(m)
        bad = (sign == 0) | ~np.isfinite(logabs)
        logabs = np.where(bad, -np.inf, logabs)
        return AmplitudeBatch(logabs, np.angle(sign))

    def derivative_batch(
        self, positions, spins, need_laplacian: bool = True, coords=None
    ) -> DerivativeBatch:
        """Analytic derivatives of log det via tr(M^-1 dM) row identities.

        ``coords``: optional (B, K) coordinate indices restricting the
        gradient, matching the neural engine's subset API.
        """
        positions = np.asarray(positions, dtype=float)
        b, n = positions.shape[:2]
        m, k = self._matrix(positions, spins)
        sign, logabs = np.linalg.slogdet(m)
        degenerate = (sign == 0) | ~np.isfinite(logabs)
        value = np.where(degenerate, -np.inf, logabs) + 1j * np.angle(sign)

        m_safe = np.where(degenerate[:, None, None], np.eye(n)[None], m)
        minv = np.linalg.inv(m_safe)
        # grad[(i, nu)] = sum_j Minv[j, i] * i k[i, j, nu] * M[i, j]
        km = k * m[..., None]
        grad_in = 1j * np.einsum("bji,bijx->bix", minv, km)  # (B, N, 2)
        grad = grad_in.reshape(b, 2 * n)

        lap = None
        if need_laplacian:
            k2m = (k * k) * m[..., None]
            a_in = np.einsum("bji,bijx->bix", minv, k2m)
            lap = (-a_in.reshape(b, 2 * n) - grad * grad).sum(axis=1)
            lap = np.where(degenerate, np.nan, lap)

        if coords is not None:
            grad = np.take_along_axis(grad, coords, axis=1)
        grad = np.where(degenerate[:, None], np.nan, grad)
        return DerivativeBatch(value, grad, lap, degenerate)


# -- exact eigenstate builders ------------------------------------------------


def _k_grid(cell: Cell, n_max: int) -> np.ndarray:
    ns = np.arange(-n_max, n_max + 1)
    nx, ny = np.meshgrid(ns, ns, indexing="ij")
    return np.stack([nx.ravel(), ny.ravel()], axis=1) * cell.reciprocal


def free_gas_orbitals(cell: Cell, n_electrons: int, n_max: int = 6):
    """Lowest plane-wave levels of the free gas, spin-degenerate filling."""
    ks = _k_grid(cell, n_max)
    e = 0.5 * (ks**2).sum(axis=1)
    levels = []
    for kvec, energy in zip(ks, e):
        for spin in (1, -1):
            levels.append((energy, tuple(kvec), spin))
    levels.sort(key=lambda t: (t[0], t[1], -t[2]))
    orbitals = []
    for energy, kvec, spin in levels[:n_electrons]:
        if spin == 1:
            orbitals.append(SpinorOrbital(kvec, kvec, 1.0, 0.0))
        else:
            orbitals.append(SpinorOrbital(kvec, kvec, 0.0, 1.0))
    energies = np.array([lv[0] for lv in levels[:n_electrons]])
    return orbitals, energies


def spiral_orbitals(cell: Cell, n_electrons: int, j_coupling: float, q, n_max: int = 6):
    """Exact eigen-spinors of the winding Zeeman Hamiltonian.

    The field couples |k, up> to |k+q, down>; each pair diagonalizes as a
    2x2 block, giving orbitals whose spin components carry different momenta.
    """
    q = np.asarray(q, dtype=float)
    ks = _k_grid(cell, n_max)
    levels = []
    for kvec in ks:
        kq = kvec + q
        block = np.array(
            [
                [0.5 * kvec @ kvec, -j_coupling],
                [-j_coupling, 0.5 * kq @ kq],
            ]
        )
        evals, evecs = np.linalg.eigh(block)
        for branch in range(2):
            levels.append(
                (
                    evals[branch],
                    tuple(kvec),
                    tuple(kq),
                    complex(evecs[0, branch]),
                    complex(evecs[1, branch]),
                )
            )
    levels.sort(key=lambda t: (t[0], t[1], t[2]))
    orbitals = [
        SpinorOrbital(lv[1], lv[2], lv[3], lv[4]) for lv in levels[:n_electrons]
    ]
    energies = np.array([lv[0] for lv in levels[:n_electrons]])
    return orbitals, energies


def rashba_orbitals(cell: Cell, n_electrons: int, kappa, n_max: int = 6):
    """Exact eigen-spinors of the linear spin-momentum coupling Hamiltonian."""
    kappa = np.asarray(kappa, dtype=float)
    ks = _k_grid(cell, n_max)
    levels = []
    for kvec in ks:
        b_eff = kappa @ kvec  # (B_x, B_y) coefficient of (sigma_x, sigma_y)
        block = np.array(
            [
                [0.5 * kvec @ kvec, b_eff[0] - 1j * b_eff[1]],
                [b_eff[0] + 1j * b_eff[1], 0.5 * kvec @ kvec],
            ]
        )
        evals, evecs = np.linalg.eigh(block)
        for branch in range(2):
            levels.append(
                (
                    evals[branch],
                    tuple(kvec),
                    complex(evecs[0, branch]),
                    complex(evecs[1, branch]),
                )
            )
    levels.sort(key=lambda t: (t[0], t[1]))
    orbitals = [
        SpinorOrbital(lv[1], lv[1], lv[2], lv[3]) for lv in levels[:n_electrons]
    ]
    energies = np.array([lv[0] for lv in levels[:n_electrons]])
    return orbitals, energies
