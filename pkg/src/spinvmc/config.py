"""Run configuration: a flat key = value text format mirroring RunConfig.

Every key has a default; unknown keys are hard errors so that a config file
is always a complete, auditable record of a run's hyperparameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .hamiltonian import (
    FreeGas,
    HamiltonianSpec,
    HoneycombMoire,
    Rashba,
    SpinSpiral,
)
from .mcmc import ProposalParams
from .network import ModelGeometry
from .optimizer import OptimizerConfig
from .state import Cell

HAMILTONIANS = ("free_gas", "spin_spiral", "rashba", "honeycomb_moire")

# moire cell area = pi at this default lattice constant
_DEFAULT_MOIRE_A = float(np.sqrt(2 * np.pi / np.sqrt(3.0)))


class ConfigError(ValueError):
    """Malformed configuration file or inconsistent settings."""


@dataclass
class RunConfig:
    # hamiltonian
    hamiltonian: str = "free_gas"
    n_electrons: int = 0  # 0 = automatic (3, or honeycomb filling)
    box_length: float = 6.0
    spiral_j: float = 1.0
    spiral_qnx: int = 1  # spiral wavevector in units of 2*pi/box_length
    spiral_qny: int = 0
    rashba_kxx: float = 0.0
    rashba_kxy: float = -1.0
    rashba_kyx: float = 1.0
    rashba_kyy: float = 0.0
    moire_v0: float = 10.0
    moire_phi: float = float(np.pi)
    moire_a: float = _DEFAULT_MOIRE_A
    moire_rs: float = 10.0
    moire_cells_x: int = 1
    moire_cells_y: int = 1
    # network
    d_model: int = 64
    d_attn: int = 16
    d_attn_vals: int = 16
    n_heads: int = 4
    n_layers: int = 4
    n_mlp_per_layer: int = 1
    n_det: int = 4
    # sampling
    batch_size: int = 1024
    steps_per_update: int = 10
    burn_in: int = 1000
    sigma: float = 0.5
    p_flip: float = 0.1
    p_swap: float = 0.03
    spin_mode: str = "flips"
    spin_init: str = "balanced"
    # optimizer
    method: str = "kfac"
    eta0: float = 0.01
    t0: float = 1e5
    rho: float = 5.0
    damping: float = 1e-3
    norm_constraint: float = 1e-3
    kfac_ema: float = 0.95
    sr_tol: float = 1e-8
    sr_max_iter: int = 250
    # run control
    iterations: int = 1000
    seed: int = 0
    out_dir: str = "runs/out"
    density_grid: int = 64
    density_steps: int = 200
    ma_window: int = 20
    checkpoint_every: int = 1000
    resume: str = ""

    def validate(self) -> None:
        if self.hamiltonian not in HAMILTONIANS:
            raise ConfigError(
                f"hamiltonian must be one of {HAMILTONIANS}, got {self.hamiltonian!r}"
            )
        positive = (
            "box_length", "d_model", "d_attn", "d_attn_vals", "n_heads",
            "n_layers", "n_mlp_per_layer", "n_det", "batch_size",
            "steps_per_update", "sigma", "density_grid", "ma_window",
            "checkpoint_every", "moire_cells_x", "moire_cells_y", "moire_a",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("iterations", "burn_in", "n_electrons", "density_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        try:
            self.proposal()
            self.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived objects -----------------------------------------------------

    def cell(self) -> Cell:
        if self.hamiltonian == "honeycomb_moire":
            return self.hamiltonian_spec().cell
        return Cell.square(self.box_length)

    def resolved_n_electrons(self) -> int:
        if self.n_electrons > 0:
            return self.n_electrons
        if self.hamiltonian == "honeycomb_moire":
            return 2 * self.hamiltonian_spec().n_triangular_cells
        return 3

    def hamiltonian_spec(self) -> HamiltonianSpec:
        if self.hamiltonian == "free_gas":
            return FreeGas(Cell.square(self.box_length))
        if self.hamiltonian == "spin_spiral":
            q = 2 * np.pi / self.box_length
            return SpinSpiral(
                Cell.square(self.box_length),
                self.spiral_j,
                (self.spiral_qnx * q, self.spiral_qny * q),
            )
        if self.hamiltonian == "rashba":
            return Rashba(
                Cell.square(self.box_length),
                (
                    (self.rashba_kxx, self.rashba_kxy),
                    (self.rashba_kyx, self.rashba_kyy),
                ),
            )
        return HoneycombMoire(
            lattice_constant=self.moire_a,
            cells_x=self.moire_cells_x,
            cells_y=self.moire_cells_y,
            v0=self.moire_v0,
            phi=self.moire_phi,
            r_s=self.moire_rs,
        )

    def geometry(self) -> ModelGeometry:
        return ModelGeometry(
            n_electrons=self.resolved_n_electrons(),
            cell=self.cell(),
            d_model=self.d_model,
            d_attn=self.d_attn,
            d_attn_vals=self.d_attn_vals,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            n_mlp_per_layer=self.n_mlp_per_layer,
            n_det=self.n_det,
        )

    def proposal(self) -> ProposalParams:
        return ProposalParams(self.sigma, self.p_flip, self.p_swap, self.spin_mode)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            method=self.method,
            eta0=self.eta0,
            t0=self.t0,
            rho=self.rho,
            damping=self.damping,
            norm_constraint=self.norm_constraint,
            kfac_ema=self.kfac_ema,
            sr_tol=self.sr_tol,
            sr_max_iter=self.sr_max_iter,
        )


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = _FIELDS[key]
        try:
            if kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        val = getattr(cfg, f.name)
        if f.type == "float":
            lines.append(f"{f.name} = {val!r}")
        else:
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
