"""Attention-based wavefunction for spinful electrons in a periodic 2D cell.

Each electron enters as one token carrying periodic position features and its
spin. Tokens pass through residual self-attention + perceptron layers; the
final streams are projected onto complex orbitals whose determinants are
summed to produce an antisymmetric amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import derivatives
from .state import (
    AmplitudeBatch,
    Cell,
    DerivativeBatch,
    DerivativeBundle,
    LogAmplitude,
    ParticleConfiguration,
)

N_FEATURES = 5  # cos/sin of both coordinates plus the spin value

PARAM_KEYS = (
    "embed",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_w",
    "mlp_b",
    "orb_re",
    "orb_im",
)


@dataclass(frozen=True)
class ModelGeometry:
    """Static shape information of the ansatz and its simulation cell."""

    n_electrons: int
    cell: Cell
    d_model: int = 64
    d_attn: int = 16
    d_attn_vals: int = 16
    n_heads: int = 4
    n_layers: int = 4
    n_mlp_per_layer: int = 1
    n_det: int = 4

    def __post_init__(self):
        for name in (
            "n_electrons",
            "d_model",
            "d_attn",
            "d_attn_vals",
            "n_heads",
            "n_layers",
            "n_mlp_per_layer",
            "n_det",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_coords(self) -> int:
        return 2 * self.n_electrons

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        n, d = self.n_electrons, self.d_model
        return {
            "embed": (d, N_FEATURES),
            "wq": (self.n_layers, self.n_heads, self.d_attn, d),
            "wk": (self.n_layers, self.n_heads, self.d_attn, d),
            "wv": (self.n_layers, self.n_heads, self.d_attn_vals, d),
            "wo": (self.n_layers, d, self.n_heads * self.d_attn_vals),
            "mlp_w": (self.n_layers, self.n_mlp_per_layer, d, d),
            "mlp_b": (self.n_layers, self.n_mlp_per_layer, d),
            "orb_re": (self.n_det, n, d),
            "orb_im": (self.n_det, n, d),
        }

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def param_index_map(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Stable bijection of parameter names onto flat-vector offsets."""
        index = {}
        offset = 0
        for key, shape in self.param_shapes().items():
            index[key] = (offset, shape)
            offset += int(np.prod(shape))
        return index


def init_params(geometry: ModelGeometry, seed: int) -> dict[str, np.ndarray]:
    """Draw initial parameters: Gaussians with variance 1/fan_in, zero biases."""
    rng = np.random.default_rng(seed)
    shapes = geometry.param_shapes()
    fan_in = {
        "embed": N_FEATURES,
        "wq": geometry.d_model,
        "wk": geometry.d_model,
        "wv": geometry.d_model,
        "wo": geometry.n_heads * geometry.d_attn_vals,
        "mlp_w": geometry.d_model,
        "orb_re": geometry.d_model,
        "orb_im": geometry.d_model,
    }
    params = {}
    for key, shape in shapes.items():
        if key == "mlp_b":
            params[key] = np.zeros(shape)
        else:
            params[key] = rng.standard_normal(shape) / np.sqrt(fan_in[key])
    return params


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(params[k]).ravel() for k in PARAM_KEYS])


def unflatten_params(
    flat: np.ndarray, geometry: ModelGeometry
) -> dict[str, np.ndarray]:
    out = {}
    for key, (offset, shape) in geometry.param_index_map().items():
        size = int(np.prod(shape))
        out[key] = flat[offset : offset + size].reshape(shape).copy()
    return out


def featurize(
    positions: np.ndarray, spins: np.ndarray, cell: Cell
) -> np.ndarray:
    """Periodic per-electron features (cos tx, sin tx, cos ty, sin ty, s).

    ``positions`` has shape (..., N, 2) and ``spins`` (..., N); the result is
    (..., N, 5). Invariant under shifting any position by a cell vector.
    """
    theta = cell.wrap(positions) * cell.reciprocal
    tx, ty = theta[..., 0], theta[..., 1]
    return np.stack(
        [np.cos(tx), np.sin(tx), np.cos(ty), np.sin(ty),
         np.asarray(spins, dtype=np.float64)],
        axis=-1,
    )


def featurize_with_derivatives(
    positions: np.ndarray, spins: np.ndarray, cell: Cell
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features plus their Jacobian and Laplacian w.r.t. electron coordinates.

    For a batch (B, N, 2) the Jacobian has shape (B, 2N, N, 5) with coordinate
    index c = 2*i + axis, and the Laplacian trace (B, N, 5).
    """
    positions = np.asarray(positions, dtype=np.float64)
    b, n = positions.shape[0], positions.shape[1]
    feats = featurize(positions, spins, cell)
    kx, ky = cell.reciprocal
    cos_tx, sin_tx = feats[..., 0], feats[..., 1]
    cos_ty, sin_ty = feats[..., 2], feats[..., 3]

    jac = np.zeros((b, 2 * n, n, N_FEATURES))
    idx = np.arange(n)
    jac[:, 2 * idx, idx, 0] = -kx * sin_tx
    jac[:, 2 * idx, idx, 1] = kx * cos_tx
    jac[:, 2 * idx + 1, idx, 2] = -ky * sin_ty
    jac[:, 2 * idx + 1, idx, 3] = ky * cos_ty

    lap = np.zeros((b, n, N_FEATURES))
    lap[..., 0] = -(kx**2) * cos_tx
    lap[..., 1] = -(kx**2) * sin_tx
    lap[..., 2] = -(ky**2) * cos_ty
    lap[..., 3] = -(ky**2) * sin_ty
    return feats, jac, lap


class TransformerWavefunction:
    """Ansatz bound to a fixed geometry and one parameter set.

    All heavy entry points are batched over walkers; the single-configuration
    methods wrap them. Evaluation is pure: the instance never mutates its
    parameters, and `with_params` produces a rebound copy.
    """

    def __init__(self, geometry: ModelGeometry, params: dict[str, np.ndarray]):
        self.geometry = geometry
        self.params = params

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, geometry: ModelGeometry, seed: int) -> "TransformerWavefunction":
        return cls(geometry, init_params(geometry, seed))

    def with_params(self, params: dict[str, np.ndarray]) -> "TransformerWavefunction":
        return TransformerWavefunction(self.geometry, params)

    @property
    def n_electrons(self) -> int:
        return self.geometry.n_electrons

    @property
    def cell(self) -> Cell:
        return self.geometry.cell

    # -- batched evaluation ------------------------------------------------

    def log_amplitude_batch(
        self, positions: np.ndarray, spins: np.ndarray
    ) -> AmplitudeBatch:
        feats = featurize(positions, spins, self.geometry.cell)
        value = derivatives.forward_log_amplitude(self.params, feats)
        return AmplitudeBatch(value.real.copy(), value.imag.copy())

    def derivative_batch(
        self,
        positions: np.ndarray,
        spins: np.ndarray,
        need_laplacian: bool = True,
        coords: np.ndarray | None = None,
    ) -> DerivativeBatch:
        """Log-amplitude derivatives for a batch of configurations.

        ``coords`` is an optional (B, K) array of coordinate indices; when
        given, only those directions are propagated (gradient-only mode), and
        ``spatial_grad`` has K columns in matching order.
        """
        feats, jac, lap = featurize_with_derivatives(
            positions, spins, self.geometry.cell
        )
        if coords is not None:
            if need_laplacian:
                raise ValueError("the Laplacian needs all coordinates")
            jac = jac[np.arange(jac.shape[0])[:, None], coords]
        return derivatives.forward_with_derivatives(
            self.params, feats, jac, lap, need_laplacian=need_laplacian
        )

    def param_gradient_batch(
        self, positions: np.ndarray, spins: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-walker d(log psi)/d(theta), shape (B, P) complex, plus degenerate mask."""
        feats = featurize(positions, spins, self.geometry.cell)
        return derivatives.per_sample_param_gradients(self.params, feats)

    def weighted_param_gradient(
        self, positions: np.ndarray, spins: np.ndarray, weights: np.ndarray
    ) -> tuple[np.ndarray, dict]:
        """sum_b w_b * d(log|psi_b|)/d(theta) as a flat real vector, plus KFAC stats."""
        feats = featurize(positions, spins, self.geometry.cell)
        return derivatives.weighted_param_gradient(self.params, feats, weights)

    # -- single-configuration API -------------------------------------------

    def _check(self, config: ParticleConfiguration):
        if config.n_electrons != self.geometry.n_electrons:
            raise ValueError(
                f"configuration has {config.n_electrons} electrons, "
                f"model expects {self.geometry.n_electrons}"
            )

    def log_psi(self, config: ParticleConfiguration) -> LogAmplitude:
        self._check(config)
        amp = self.log_amplitude_batch(config.positions[None], config.spins[None])
        return amp[0]

    def derivatives(self, config: ParticleConfiguration) -> DerivativeBundle:
        self._check(config)
        return self.derivative_batch(config.positions[None], config.spins[None])[0]

    def param_gradient(self, config: ParticleConfiguration) -> np.ndarray:
        self._check(config)
        grads, degenerate = self.param_gradient_batch(
            config.positions[None], config.spins[None]
        )
        if degenerate[0]:
            from .state import AmplitudeDegenerateError

            raise AmplitudeDegenerateError("amplitude vanishes at this configuration")
        return grads[0]


# Spec-level functional entry points -----------------------------------------


def eval_log_psi(
    params: dict[str, np.ndarray],
    config: ParticleConfiguration,
    geometry: ModelGeometry,
) -> LogAmplitude:
    return TransformerWavefunction(geometry, params).log_psi(config)


def eval_spatial_derivatives(
    params: dict[str, np.ndarray],
    config: ParticleConfiguration,
    geometry: ModelGeometry,
) -> DerivativeBundle:
    return TransformerWavefunction(geometry, params).derivatives(config)


def eval_param_gradient(
    params: dict[str, np.ndarray],
    config: ParticleConfiguration,
    geometry: ModelGeometry,
) -> np.ndarray:
    return TransformerWavefunction(geometry, params).param_gradient(config)


def geometry_with_cell(geometry: ModelGeometry, cell: Cell) -> ModelGeometry:
    return replace(geometry, cell=cell)
