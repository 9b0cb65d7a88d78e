"""Metropolis sampling of walker batches from |psi|^2.

Each step runs two sub-steps whose acceptance is decided separately: a
Gaussian move of all electron coordinates, then a discrete spin update. Spin
updates come in two flavors: independent per-electron flips (which change the
total magnetization) and sector-preserving swaps that exchange the spin states
of randomly chosen electron pairs, conserving sum_i s_i exactly.

Every walker owns a counter-based RNG stream spawned from the master seed, so
a walker's trajectory depends only on its own stream and start configuration,
not on the batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .state import AmplitudeBatch, Cell, LogAmplitude, ParticleConfiguration

SPIN_MODES = ("none", "flips", "sector_preserving")


@dataclass
class ProposalParams:
    sigma: float = 0.5
    p_flip: float = 0.1
    p_swap: float = 0.03
    spin_mode: str = "flips"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.p_flip <= 1 or not 0 <= self.p_swap <= 1:
            raise ValueError("flip/swap probabilities must be in [0, 1]")
        if self.spin_mode not in SPIN_MODES:
            raise ValueError(f"spin_mode must be one of {SPIN_MODES}")


@dataclass
class ChainStats:
    coord_proposed: int = 0
    coord_accepted: int = 0
    spin_proposed: int = 0
    spin_accepted: int = 0
    steps: int = 0

    @property
    def coord_rate(self) -> float:
        return self.coord_accepted / max(self.coord_proposed, 1)

    @property
    def spin_rate(self) -> float:
        return self.spin_accepted / max(self.spin_proposed, 1)

    def reset(self) -> None:
        self.coord_proposed = self.coord_accepted = 0
        self.spin_proposed = self.spin_accepted = 0
        self.steps = 0


# -- single-configuration proposal kernels ------------------------------------


def propose_coordinates(
    config: ParticleConfiguration, sigma: float, rng: np.random.Generator
) -> ParticleConfiguration:
    """Symmetric Gaussian move of every coordinate, wrapped into the cell."""
    step = rng.normal(0.0, sigma, size=config.positions.shape)
    return config.with_positions(config.positions + step)


def propose_spin_flips(
    config: ParticleConfiguration, p_flip: float, rng: np.random.Generator
) -> ParticleConfiguration:
    """Independently flip each spin with probability p_flip."""
    mask = rng.uniform(size=config.spins.shape) < p_flip
    spins = np.where(mask, -config.spins, config.spins)
    return config.with_spins(spins)


def propose_sector_swaps(
    config: ParticleConfiguration, p_swap: float, rng: np.random.Generator
) -> ParticleConfiguration:
    """Swap the spin states of m uniformly chosen pairs, m ~ Poisson(lambda).

    lambda = p_swap * N_e / 2; the total magnetization is conserved exactly.
    """
    n = config.n_electrons
    m = rng.poisson(p_swap * n / 2.0)
    spins = np.array(config.spins)
    for _ in range(m):
        i, j = rng.choice(n, size=2, replace=False)
        spins[i], spins[j] = spins[j], spins[i]
    return config.with_spins(spins)


def metropolis_accept(
    old: LogAmplitude, new: LogAmplitude, rng: np.random.Generator
) -> bool:
    """Accept with probability min(1, |psi'/psi|^2); vanishing psi' rejects."""
    if new.is_degenerate:
        rng.uniform()  # keep the stream advancing uniformly
        return False
    log_ratio = 2.0 * (new.log_abs - old.log_abs)
    return rng.uniform() < np.exp(min(log_ratio, 0.0))


def adapt_sigma(sigma: float, coord_rate: float, target: float = 0.5) -> float:
    """Multiplicative step-size adjustment toward the target acceptance.

    The factor is clipped to [0.9, 1.1] per adjustment; intended for burn-in
    only, so the production chain keeps a fixed kernel.
    """
    return sigma * float(np.clip(coord_rate / target, 0.9, 1.1))


# -- batched walker population -------------------------------------------------


@dataclass
class WalkerBatch:
    positions: np.ndarray  # (B, N, 2), wrapped
    spins: np.ndarray  # (B, N) int8
    amp: AmplitudeBatch
    rngs: list
    cell: Cell
    stats: ChainStats = field(default_factory=ChainStats)

    @property
    def n_walkers(self) -> int:
        return self.positions.shape[0]

    @property
    def n_electrons(self) -> int:
        return self.positions.shape[1]

    def config(self, b: int) -> ParticleConfiguration:
        return ParticleConfiguration(self.positions[b], self.spins[b], self.cell)

    @classmethod
    def initialize(
        cls,
        psi,
        n_walkers: int,
        seed: int,
        spin_init: str = "balanced",
        max_retries: int = 100,
    ) -> "WalkerBatch":
        """Uniform positions; spins balanced (shuffled) or uniformly random.

        Walkers that land on a vanishing amplitude are redrawn.
        """
        n = psi.n_electrons
        cell = psi.cell
        seq = np.random.SeedSequence(seed)
        rngs = [np.random.Generator(np.random.Philox(c)) for c in seq.spawn(n_walkers)]
        positions = np.empty((n_walkers, n, 2))
        spins = np.empty((n_walkers, n), dtype=np.int8)
        base = np.array([1, -1] * ((n + 1) // 2))[:n].astype(np.int8)
        for b, rng in enumerate(rngs):
            positions[b] = rng.uniform(0.0, 1.0, (n, 2)) * cell.lengths
            if spin_init == "balanced":
                spins[b] = rng.permutation(base)
            else:
                spins[b] = rng.choice(np.array([1, -1], dtype=np.int8), size=n)
        amp = psi.log_amplitude_batch(positions, spins)
        for _ in range(max_retries):
            bad = np.flatnonzero(amp.degenerate)
            if not len(bad):
                break
            for b in bad:
                positions[b] = rngs[b].uniform(0.0, 1.0, (n, 2)) * cell.lengths
            redo = psi.log_amplitude_batch(positions[bad], spins[bad])
            amp.log_abs[bad] = redo.log_abs
            amp.phase[bad] = redo.phase
        if amp.degenerate.any():
            raise RuntimeError("could not find non-degenerate start configurations")
        return cls(positions, spins, amp, rngs, cell)


def _accept_subset(batch, cand_pos, cand_spins, psi, changed=None):
    """Evaluate candidates (optionally only `changed` rows) and accept/reject.

    Returns the acceptance mask. Acceptance uniforms are drawn from every
    walker's stream regardless, keeping streams aligned across sub-steps.
    """
    b = batch.n_walkers
    new_log_abs = batch.amp.log_abs.copy()
    new_phase = batch.amp.phase.copy()
    if changed is None:
        changed = np.ones(b, dtype=bool)
    idx = np.flatnonzero(changed)
    if len(idx):
        amp = psi.log_amplitude_batch(cand_pos[idx], cand_spins[idx])
        new_log_abs[idx] = amp.log_abs
        new_phase[idx] = amp.phase

    us = np.array([rng.uniform() for rng in batch.rngs])
    with np.errstate(invalid="ignore"):
        log_ratio = 2.0 * (new_log_abs - batch.amp.log_abs)
    accept = us < np.exp(np.minimum(log_ratio, 0.0))
    accept &= np.isfinite(new_log_abs)  # vanishing candidate amplitude rejects

    batch.positions[accept] = cand_pos[accept]
    batch.spins[accept] = cand_spins[accept]
    batch.amp.log_abs[accept] = new_log_abs[accept]
    batch.amp.phase[accept] = new_phase[accept]
    return accept


def step(batch: WalkerBatch, psi, proposal: ProposalParams) -> WalkerBatch:
    """One Metropolis step: a coordinate sub-step, then a spin sub-step."""
    b, n = batch.n_walkers, batch.n_electrons

    # coordinate sub-step
    deltas = np.stack(
        [rng.normal(0.0, proposal.sigma, (n, 2)) for rng in batch.rngs]
    )
    cand_pos = batch.cell.wrap(batch.positions + deltas)
    accepted = _accept_subset(batch, cand_pos, batch.spins, psi)
    batch.stats.coord_proposed += b
    batch.stats.coord_accepted += int(accepted.sum())

    # spin sub-step, accepted separately
    if proposal.spin_mode != "none":
        if proposal.spin_mode == "flips":
            masks = np.stack(
                [rng.uniform(size=n) < proposal.p_flip for rng in batch.rngs]
            )
            cand_spins = np.where(masks, -batch.spins, batch.spins).astype(np.int8)
        else:
            cand_spins = batch.spins.copy()
            lam = proposal.p_swap * n / 2.0
            for wi, rng in enumerate(batch.rngs):
                for _ in range(rng.poisson(lam)):
                    i, j = rng.choice(n, size=2, replace=False)
                    cand_spins[wi, i], cand_spins[wi, j] = (
                        cand_spins[wi, j],
                        cand_spins[wi, i],
                    )
        changed = (cand_spins != batch.spins).any(axis=1)
        accepted = _accept_subset(batch, batch.positions, cand_spins, psi, changed)
        batch.stats.spin_proposed += b
        batch.stats.spin_accepted += int(accepted.sum())

    batch.stats.steps += 1
    return batch


def run_steps(batch: WalkerBatch, psi, proposal: ProposalParams, n_steps: int):
    for _ in range(n_steps):
        step(batch, psi, proposal)
    return batch
