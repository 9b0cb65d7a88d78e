"""Fast built-in invariant suite backing the `check` CLI subcommand.

Each check exercises one structural property end to end at small scale:
antisymmetry of the ansatz, derivative consistency against finite
differences, splitting-parameter independence of the periodic Coulomb sum,
the zero-variance property on an injected eigenstate, and exact magnetization
conservation of sector-preserving spin updates.
"""

from __future__ import annotations

import numpy as np

from . import perf


def run_invariant_checks(quiet: bool = True) -> list[tuple[str, bool, str]]:
    perf.enable_heap_reuse()
    from .ewald import Ewald2D
    from .hamiltonian import FreeGas, local_energy_batch
    from .mcmc import propose_sector_swaps
    from .network import ModelGeometry, TransformerWavefunction, featurize
    from .planewave import PlaneWaveSlater, free_gas_orbitals
    from .state import Cell, ParticleConfiguration

    rng = np.random.default_rng(20240817)
    cell = Cell.square(6.0)
    geo = ModelGeometry(
        4, cell, d_model=16, d_attn=8, d_attn_vals=8, n_heads=2,
        n_layers=2, n_mlp_per_layer=1, n_det=2,
    )
    psi = TransformerWavefunction.create(geo, seed=7)
    results = []

    # antisymmetry under full pair exchange
    pos = rng.uniform(0, 6, (64, 4, 2))
    spins = rng.choice([1, -1], (64, 4)).astype(np.int8)
    amp = psi.log_amplitude_batch(pos, spins)
    pos2, spins2 = pos.copy(), spins.copy()
    pos2[:, [0, 2]] = pos2[:, [2, 0]]
    spins2[:, [0, 2]] = spins2[:, [2, 0]]
    amp2 = psi.log_amplitude_batch(pos2, spins2)
    err_mod = np.max(np.abs(amp2.log_abs - amp.log_abs))
    err_ph = np.max(np.abs(((amp2.phase - amp.phase) % (2 * np.pi)) - np.pi))
    ok = err_mod < 1e-10 and err_ph < 1e-10
    results.append(("antisymmetry", ok, f"|d log|psi|| = {err_mod:.2e}, "
                    f"phase offset error = {err_ph:.2e}"))

    # spatial gradient vs central finite differences
    bundle = psi.derivative_batch(pos[:1], spins[:1])
    h = 1e-4
    fd = np.zeros(8, dtype=complex)
    for c in range(8):
        i, ax = divmod(c, 2)
        dp = np.zeros_like(pos[:1])
        dp[0, i, ax] = h
        ap = psi.log_amplitude_batch(pos[:1] + dp, spins[:1])
        am = psi.log_amplitude_batch(pos[:1] - dp, spins[:1])
        dr = ap.log_abs[0] - am.log_abs[0]
        dp_ = ((ap.phase[0] - am.phase[0]) + np.pi) % (2 * np.pi) - np.pi
        fd[c] = (dr + 1j * dp_) / (2 * h)
    err = np.max(np.abs(fd - bundle.spatial_grad[0])) / np.max(np.abs(fd))
    results.append(("finite-difference gradient", err < 1e-6, f"rel err {err:.2e}"))

    # Ewald splitting-parameter independence
    d = rng.uniform(-3, 3, (8, 2))
    v1 = Ewald2D(cell, alpha=0.8).pair_potential(d)
    v2 = Ewald2D(cell, alpha=3.2).pair_potential(d)
    err = np.max(np.abs(v1 - v2))
    results.append(("ewald alpha independence", err < 1e-8, f"spread {err:.2e}"))

    # zero variance of an injected free-gas eigenstate
    orbs, levels = free_gas_orbitals(cell, 3)
    pw = PlaneWaveSlater(orbs, cell)
    pos3 = rng.uniform(0, 6, (200, 3, 2))
    spins3 = np.array([[1, -1, 1]] * 200, dtype=np.int8)
    le = local_energy_batch(pw, pos3, spins3, FreeGas(cell))
    tot = le.total[~le.degenerate]
    spread = float(np.abs(tot - levels.sum()).max())
    results.append(
        ("zero-variance eigenstate", spread < 1e-8 * abs(levels.sum()),
         f"max |E_loc - E| = {spread:.2e}")
    )

    # sector-preserving updates conserve magnetization exactly
    config = ParticleConfiguration(
        rng.uniform(0, 6, (6, 2)), np.array([1, 1, 1, -1, -1, -1]), cell
    )
    gen = np.random.default_rng(3)
    conserved = all(
        propose_sector_swaps(config, 0.5, gen).spins.sum() == config.spins.sum()
        for _ in range(2000)
    )
    results.append(("sector-swap conservation", conserved, "sum(s) invariant"))

    # feature-map periodicity
    p = rng.uniform(0, 6, (16, 4, 2))
    f1 = featurize(p, spins[:16], cell)
    f2 = featurize(p + np.array([6.0, 0.0]), spins[:16], cell)
    err = np.max(np.abs(f1 - f2))
    results.append(("feature periodicity", err < 1e-12, f"max diff {err:.2e}"))

    return results
