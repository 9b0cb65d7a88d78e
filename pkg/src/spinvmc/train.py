"""Training-loop orchestration: sampling phases alternating with optimizer
steps, CSV energy logging, binary checkpoints, and density accumulation."""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import mcmc, perf
from .config import ConfigError, RunConfig, serialize_config
from .ewald import Ewald2D
from .hamiltonian import HoneycombMoire, local_energy_batch
from .network import TransformerWavefunction, init_params
from .observables import SpinDensityGrid, moving_average
from .optimizer import (
    KfacState,
    NonFiniteUpdateError,
    apply_update,
    energy_and_gradient,
    lr_schedule,
    sr_precondition,
)
from .reference import exact_reference_energy
from .state import Cell

ENERGY_COLUMNS = (
    "step", "energy_mean", "energy_stderr", "variance",
    "acceptance_coord", "acceptance_spin", "learning_rate", "wall_ms",
)

# honeycomb runs beyond this many iterations are gated behind --long-run
LONG_RUN_GATE = 5000


@dataclass
class RunArtifacts:
    out_dir: str
    energy_csv: str
    density_csv: str
    final_checkpoint: str
    final_energy: float  # moving average over the configured window
    steps_run: int


def _log(quiet, msg):
    if not quiet:
        print(msg, file=sys.stderr, flush=True)


def _truncate_log(path, start_step):
    """Keep the header and rows below start_step so appended rows continue
    the sequence without duplicates."""
    lines = [",".join(ENERGY_COLUMNS) + "\n"]
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh.readlines()[1:]:
                try:
                    if int(line.split(",", 1)[0]) < start_step:
                        lines.append(line)
                except ValueError:
                    continue
    with open(path, "w") as fh:
        fh.writelines(lines)


def _walker_arrays(batch):
    return {
        "walk:positions": batch.positions,
        "walk:spins": batch.spins,
        "walk:log_abs": batch.amp.log_abs,
        "walk:phase": batch.amp.phase,
    }


def _save_state(path, cfg, step, params, batch, sigma, kfac_state):
    arrays = {f"param:{k}": v for k, v in params.items()}
    arrays.update(_walker_arrays(batch))
    meta = {
        "config": serialize_config(cfg),
        "sigma": sigma,
        "rng_states": [ckpt.rng_state_to_json(r) for r in batch.rngs],
        "kfac_weight": kfac_state.weight if kfac_state else 0.0,
        "n_electrons": batch.n_electrons,
    }
    if kfac_state is not None:
        arrays.update(kfac_state.state_arrays())
    ckpt.save_checkpoint(path, step=step, meta=meta, arrays=arrays)


def load_params(path, geometry):
    """Parameters (and geometry sanity check) from a checkpoint file."""
    step, meta, arrays = ckpt.load_checkpoint(path)
    params = {
        k[len("param:"):]: v for k, v in arrays.items() if k.startswith("param:")
    }
    for key, shape in geometry.param_shapes().items():
        if key not in params or params[key].shape != shape:
            raise ckpt.CheckpointError(
                f"checkpoint parameters do not match the configured geometry "
                f"({key}: {params.get(key, np.empty(0)).shape} vs {shape})"
            )
    return step, meta, params, arrays


def _restore(cfg, geometry, path):
    step, meta, params, arrays = load_params(path, geometry)
    rngs = [ckpt.rng_from_json(s) for s in meta["rng_states"]]
    from .state import AmplitudeBatch

    batch = mcmc.WalkerBatch(
        arrays["walk:positions"],
        arrays["walk:spins"].astype(np.int8),
        AmplitudeBatch(arrays["walk:log_abs"], arrays["walk:phase"]),
        rngs,
        geometry.cell,
    )
    kfac_state = None
    if any(k.startswith("kfacA:") for k in arrays):
        kfac_state = KfacState.from_arrays(
            {k: v for k, v in arrays.items() if k.startswith(("kfacA:", "kfacG:"))},
            ema=cfg.kfac_ema,
            weight=meta["kfac_weight"],
        )
    return step, params, batch, float(meta["sigma"]), kfac_state


def train(cfg: RunConfig, long_run: bool = False, quiet: bool = False) -> RunArtifacts:
    """Run the optimization loop described by ``cfg``; returns artifact paths."""
    perf.enable_heap_reuse()
    cfg.validate()
    if (
        cfg.hamiltonian == "honeycomb_moire"
        and cfg.iterations > LONG_RUN_GATE
        and not long_run
    ):
        raise ConfigError(
            f"honeycomb runs beyond {LONG_RUN_GATE} iterations require --long-run"
        )

    geometry = cfg.geometry()
    spec = cfg.hamiltonian_spec()
    proposal = cfg.proposal()
    opt_cfg = cfg.optimizer()
    ewald = Ewald2D(spec.cell) if isinstance(spec, HoneycombMoire) else None

    os.makedirs(cfg.out_dir, exist_ok=True)
    energy_csv = os.path.join(cfg.out_dir, "energy.csv")
    density_csv = os.path.join(cfg.out_dir, "density.csv")
    final_ckpt = os.path.join(cfg.out_dir, "final.ckpt")
    with open(os.path.join(cfg.out_dir, "config.cfg"), "w") as fh:
        fh.write(serialize_config(cfg))

    if cfg.resume:
        start_step, params, batch, sigma, kfac_state = _restore(
            cfg, geometry, cfg.resume
        )
        psi = TransformerWavefunction(geometry, params)
        if kfac_state is None and opt_cfg.method == "kfac":
            kfac_state = KfacState(ema=opt_cfg.kfac_ema)
        _log(quiet, f"resumed from {cfg.resume} at step {start_step}")
        _truncate_log(energy_csv, start_step)
        mode = "a"
    else:
        start_step = 0
        params = init_params(geometry, cfg.seed)
        psi = TransformerWavefunction(geometry, params)
        batch = mcmc.WalkerBatch.initialize(
            psi, cfg.batch_size, cfg.seed + 1, spin_init=cfg.spin_init
        )
        kfac_state = KfacState(ema=opt_cfg.kfac_ema) if opt_cfg.method == "kfac" else None
        sigma = cfg.sigma
        # burn in, adapting the step size toward 50% coordinate acceptance
        adapt_every = 25
        for i in range(cfg.burn_in):
            mcmc.step(batch, psi, mcmc.ProposalParams(
                sigma, proposal.p_flip, proposal.p_swap, proposal.spin_mode))
            if (i + 1) % adapt_every == 0:
                sigma = mcmc.adapt_sigma(sigma, batch.stats.coord_rate)
                batch.stats.reset()
        batch.stats.reset()
        _log(quiet, f"burn-in done ({cfg.burn_in} steps), sigma = {sigma:.4f}")
        mode = "w"

    proposal = mcmc.ProposalParams(
        sigma, proposal.p_flip, proposal.p_swap, proposal.spin_mode
    )
    energies = []
    report_every = max(1, cfg.iterations // 20)

    with open(energy_csv, mode) as log_fh:
        if mode == "w":
            log_fh.write(",".join(ENERGY_COLUMNS) + "\n")
        for t in range(start_step, cfg.iterations):
            t_start = time.perf_counter()
            batch.stats.reset()
            mcmc.run_steps(batch, psi, proposal, cfg.steps_per_update)

            le = local_energy_batch(
                psi, batch.positions, batch.spins, spec, ewald=ewald
            )
            estimate = energy_and_gradient(
                psi, batch.positions, batch.spins, le.total, le.degenerate,
                opt_cfg.rho,
            )
            eta = lr_schedule(opt_cfg.eta0, opt_cfg.t0, t)
            if estimate.aborted:
                _log(quiet, f"step {t}: aborted ({estimate.diagnostics})")
            else:
                try:
                    direction = _step_direction(
                        psi, batch, estimate, opt_cfg, geometry, kfac_state, eta
                    )
                    params = apply_update(params, direction, eta)
                    psi = psi.with_params(params)
                except NonFiniteUpdateError as exc:
                    _log(quiet, f"step {t}: update skipped ({exc})")

            wall_ms = (time.perf_counter() - t_start) * 1e3
            energies.append(estimate.energy_mean)
            log_fh.write(
                f"{t},{estimate.energy_mean:.10g},{estimate.energy_stderr:.6g},"
                f"{estimate.variance:.6g},{batch.stats.coord_rate:.4f},"
                f"{batch.stats.spin_rate:.4f},{eta:.6g},{wall_ms:.1f}\n"
            )
            if (t + 1) % report_every == 0:
                log_fh.flush()
                recent = moving_average(energies, cfg.ma_window)[-1]
                _log(
                    quiet,
                    f"step {t + 1}/{cfg.iterations}: E = {recent:.6f} "
                    f"(acc {batch.stats.coord_rate:.2f}/{batch.stats.spin_rate:.2f})",
                )
            if (t + 1) % cfg.checkpoint_every == 0 and t + 1 < cfg.iterations:
                path = os.path.join(cfg.out_dir, f"step{t + 1:08d}.ckpt")
                _save_state(path, cfg, t + 1, params, batch, sigma, kfac_state)

    _save_state(final_ckpt, cfg, cfg.iterations, params, batch, sigma, kfac_state)

    grid = SpinDensityGrid(geometry.cell, cfg.density_grid)
    for _ in range(cfg.density_steps):
        mcmc.step(batch, psi, proposal)
        grid.accumulate(batch.positions, batch.spins)
    grid.write_csv(density_csv)

    final_energy = (
        float(moving_average(energies, cfg.ma_window)[-1]) if energies else np.nan
    )
    return RunArtifacts(
        cfg.out_dir, energy_csv, density_csv, final_ckpt, final_energy,
        cfg.iterations - start_step,
    )


def _step_direction(psi, batch, estimate, opt_cfg, geometry, kfac_state, eta):
    if opt_cfg.method == "sgd":
        return estimate.grad_dict
    if opt_cfg.method == "sr":
        o_mat, degenerate = psi.param_gradient_batch(batch.positions, batch.spins)
        flat = sr_precondition(
            o_mat[~degenerate],
            estimate.grad,
            opt_cfg.damping,
            tol=opt_cfg.sr_tol,
            max_iter=opt_cfg.sr_max_iter,
        )
        from .network import unflatten_params

        return unflatten_params(flat, geometry)
    kfac_state.update(estimate.kfac_stats)
    # the trust region bounds the applied step eta*delta, following the
    # optimizer lineage these hyperparameters were tuned in
    return kfac_state.precondition(
        estimate.grad_dict, geometry, opt_cfg.damping,
        opt_cfg.norm_constraint / eta**2,
    )


def reference_report(cfg: RunConfig) -> dict:
    """Exact filled-level energy for the configured noninteracting model."""
    spec = cfg.hamiltonian_spec()
    n = cfg.resolved_n_electrons()
    result = exact_reference_energy(spec, n)
    return {
        "hamiltonian": cfg.hamiltonian,
        "n_electrons": n,
        "energy": result.energy,
        "levels": result.levels.tolist(),
        "cutoff": result.cutoff,
        "history": result.history,
        "converged_to": result.converged_to,
    }


def compute_density(
    checkpoint_path: str, cfg: RunConfig, out_path: str | None = None,
    quiet: bool = False,
) -> str:
    """Sample |psi|^2 for the checkpointed parameters and write the
    spin-resolved density grid."""
    perf.enable_heap_reuse()
    geometry = cfg.geometry()
    _, params, batch, sigma, _ = _restore(cfg, geometry, checkpoint_path)
    psi = TransformerWavefunction(geometry, params)
    proposal = mcmc.ProposalParams(sigma, cfg.p_flip, cfg.p_swap, cfg.spin_mode)
    grid = SpinDensityGrid(geometry.cell, cfg.density_grid)
    for _ in range(max(cfg.density_steps, 1)):
        mcmc.step(batch, psi, proposal)
        grid.accumulate(batch.positions, batch.spins)
    out_path = out_path or os.path.join(
        os.path.dirname(checkpoint_path) or ".", "density.csv"
    )
    grid.write_csv(out_path)
    _log(quiet, f"density written to {out_path} ({grid.n_samples} samples)")
    return out_path
