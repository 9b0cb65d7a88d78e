"""Energy-gradient estimation and natural-gradient preconditioning.

The gradient estimator is the standard first-order form

    grad_k = 2/B sum_b (E_b - Ebar) Re d(log psi_b)/d(theta_k)

with local energies robust-clipped around their median before use. Two
curvature treatments are provided: exact stochastic reconfiguration (solving
the damped overlap-matrix system by conjugate gradient in sample space) and a
Kronecker-factored block approximation of the Fisher matrix with a trust
region on the preconditioned step. All learnable parameters are real.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .network import ModelGeometry, flatten_params


class NonFiniteUpdateError(RuntimeError):
    """The proposed parameter update contains non-finite entries."""


@dataclass
class OptimizerConfig:
    method: str = "kfac"  # kfac | sr | sgd
    eta0: float = 0.01
    t0: float = 1e5
    rho: float = 5.0  # local-energy clipping width, in median-MAD units
    damping: float = 1e-3
    norm_constraint: float = 1e-3
    kfac_ema: float = 0.95
    sr_tol: float = 1e-8
    sr_max_iter: int = 250

    def __post_init__(self):
        if self.method not in ("kfac", "sr", "sgd"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        for name in ("eta0", "t0", "rho", "damping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class GradientEstimate:
    energy_mean: float
    energy_stderr: float
    variance: float
    grad: np.ndarray | None  # flat, real
    grad_dict: dict | None
    n_samples: int
    kfac_stats: dict | None = None
    aborted: bool = False
    diagnostics: str = ""


def lr_schedule(eta0: float, t0: float, t: float) -> float:
    """Hyperbolic decay eta0 / (1 + t/t0)."""
    return eta0 / (1.0 + t / t0)


def clip_local_energies(values: np.ndarray, rho: float) -> np.ndarray:
    """Clip to [median - rho*D, median + rho*D], D the mean |deviation|."""
    values = np.asarray(values, dtype=float)
    med = np.median(values)
    width = rho * np.abs(values - med).mean()
    return np.clip(values, med - width, med + width)


def energy_and_gradient(
    psi, positions, spins, local_energies, degenerate, rho: float
) -> GradientEstimate:
    """Batch energy estimate and parameter gradient with clipped energies.

    Flagged walkers (vanishing amplitude, non-finite local energy) are
    excluded; if more than 10% are flagged the step is aborted. Imaginary
    parts of the local energies never enter the gradient.
    """
    local_energies = np.asarray(local_energies)
    ok = ~np.asarray(degenerate) & np.isfinite(local_energies.real)
    n_ok = int(ok.sum())
    b = len(local_energies)
    if n_ok < b * 0.9 or n_ok < 2:
        return GradientEstimate(
            np.nan, np.nan, np.nan, None, None, n_ok,
            aborted=True,
            diagnostics=f"{b - n_ok}/{b} walkers flagged",
        )

    clipped = clip_local_energies(local_energies.real[ok], rho)
    mean = float(clipped.mean())
    eps = np.zeros(b)
    eps[ok] = (clipped - mean) * (2.0 / n_ok)
    grad_dict, kfac_stats = psi.weighted_param_gradient(positions, spins, eps)
    return GradientEstimate(
        mean,
        float(clipped.std(ddof=1) / np.sqrt(n_ok)),
        float(clipped.var()),
        flatten_params(grad_dict),
        grad_dict,
        n_ok,
        kfac_stats,
    )


# -- stochastic reconfiguration ------------------------------------------------


def sr_precondition(
    o_matrix: np.ndarray,
    grad: np.ndarray,
    damping: float,
    tol: float = 1e-8,
    max_iter: int = 250,
) -> np.ndarray:
    """Solve (S + damping I) delta = grad with the centered overlap matrix

        S_kl = Re<O_k* O_l> - Re(<O_k>* <O_l>),   O_k = d log psi / d theta_k,

    by conjugate gradient using matrix-free sample-space products. Falls back
    to the bare gradient if CG fails to converge.
    """
    b = o_matrix.shape[0]
    centered = o_matrix - o_matrix.mean(axis=0)

    def matvec(x):
        return (centered.conj().T @ (centered @ x)).real / b + damping * x

    x = np.zeros_like(grad)
    r = grad - matvec(x)
    p = r.copy()
    rs = r @ r
    norm_b = np.sqrt(grad @ grad)
    if norm_b == 0:
        return x
    for _ in range(max_iter):
        ap = matvec(p)
        alpha = rs / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= tol * norm_b:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    warnings.warn(
        f"SR conjugate gradient did not reach {tol} in {max_iter} iterations; "
        "falling back to the bare gradient"
    )
    return grad.copy()


# -- Kronecker-factored curvature blocks ---------------------------------------


def _block_names(geometry: ModelGeometry) -> list[str]:
    names = ["embed"]
    for layer in range(geometry.n_layers):
        for proj in ("wq", "wk", "wv"):
            names += [f"{proj}{layer}h{h}" for h in range(geometry.n_heads)]
        names.append(f"wo{layer}")
        names += [f"mlp{layer}p{p}" for p in range(geometry.n_mlp_per_layer)]
    names += [f"orb{m}" for m in range(geometry.n_det)]
    return names


def _get_block(grads: dict, name: str) -> np.ndarray:
    if name == "embed":
        return grads["embed"]
    if name.startswith(("wq", "wk", "wv")):
        proj = name[:2]
        layer, head = name[2:].split("h")
        return grads[proj][int(layer), int(head)]
    if name.startswith("wo"):
        return grads["wo"][int(name[2:])]
    if name.startswith("mlp"):
        layer, p = name[3:].split("p")
        layer, p = int(layer), int(p)
        return np.concatenate(
            [grads["mlp_w"][layer, p], grads["mlp_b"][layer, p][:, None]], axis=1
        )
    if name.startswith("orb"):
        m = int(name[3:])
        return np.concatenate([grads["orb_re"][m], grads["orb_im"][m]], axis=0)
    raise KeyError(name)


def _set_block(out: dict, name: str, value: np.ndarray) -> None:
    if name == "embed":
        out["embed"] = value
    elif name.startswith(("wq", "wk", "wv")):
        proj = name[:2]
        layer, head = name[2:].split("h")
        out[proj][int(layer), int(head)] = value
    elif name.startswith("wo"):
        out["wo"][int(name[2:])] = value
    elif name.startswith("mlp"):
        layer, p = name[3:].split("p")
        layer, p = int(layer), int(p)
        out["mlp_w"][layer, p] = value[:, :-1]
        out["mlp_b"][layer, p] = value[:, -1]
    elif name.startswith("orb"):
        m = int(name[3:])
        n_orb = value.shape[0] // 2
        out["orb_re"][m] = value[:n_orb]
        out["orb_im"][m] = value[n_orb:]
    else:
        raise KeyError(name)


def _floored_inverse_apply(factor: np.ndarray, shift: float):
    """Return x -> (factor + shift I)^-1 x with eigenvalues floored at 1e-10."""
    evals, evecs = np.linalg.eigh(factor)
    evals = np.maximum(evals + shift, 1e-10)
    return evecs, evals


@dataclass
class KfacState:
    """Running Kronecker factors per block: input second moments A and
    log-density-sensitivity second moments G, with debiased EMA."""

    ema: float = 0.95
    blocks: dict = field(default_factory=dict)
    weight: float = 0.0

    def update(self, stats: dict) -> None:
        w = 1.0 - self.ema
        for name, (a_new, g_new) in stats.items():
            if name not in self.blocks:
                self.blocks[name] = [np.zeros_like(a_new), np.zeros_like(g_new)]
            acc = self.blocks[name]
            acc[0] = self.ema * acc[0] + w * a_new
            acc[1] = self.ema * acc[1] + w * g_new
        self.weight = self.ema * self.weight + w

    def precondition(
        self,
        grad_dict: dict,
        geometry: ModelGeometry,
        damping: float,
        norm_constraint: float | None,
    ) -> dict:
        """delta = (A+aI)^-1 grad (G+gI)^-1 per block (Kronecker inverse),
        then rescaled so that delta^T F_hat delta <= norm_constraint."""
        if self.weight == 0:
            raise RuntimeError("KFAC factors have not been updated yet")
        out = {key: np.zeros_like(val) for key, val in grad_dict.items()}
        sqrt_damp = np.sqrt(damping)
        deltas = {}
        sq_norm = 0.0
        for name in _block_names(geometry):
            v = _get_block(grad_dict, name)
            a_fac, g_fac = self.blocks[name]
            a_fac = a_fac / self.weight
            g_fac = g_fac / self.weight
            tr_a = np.trace(a_fac) / a_fac.shape[0]
            tr_g = np.trace(g_fac) / g_fac.shape[0]
            pi = np.sqrt(tr_a / tr_g) if tr_a > 0 and tr_g > 0 else 1.0
            ua, wa = _floored_inverse_apply(a_fac, pi * sqrt_damp)
            ug, wg = _floored_inverse_apply(g_fac, sqrt_damp / pi)
            # delta = G_d^-1 V A_d^-1 for the layer map out = W @ in
            tmp = ug.T @ v @ ua
            delta = ug @ (tmp / (wg[:, None] * wa[None, :])) @ ua.T
            deltas[name] = delta
            # delta^T F_hat delta with the damped factors
            t = ug @ ((ug.T @ delta @ ua) * (wg[:, None] * wa[None, :])) @ ua.T
            sq_norm += float(np.sum(delta * t))

        scale = 1.0
        if norm_constraint is not None and sq_norm > norm_constraint:
            scale = np.sqrt(norm_constraint / sq_norm)
        for name, delta in deltas.items():
            _set_block(out, name, delta * scale)
        return out

    def state_arrays(self) -> dict:
        arrays = {}
        for name, (a_fac, g_fac) in self.blocks.items():
            arrays[f"kfacA:{name}"] = a_fac
            arrays[f"kfacG:{name}"] = g_fac
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict, ema: float, weight: float) -> "KfacState":
        state = cls(ema=ema, weight=weight)
        for key, val in arrays.items():
            if key.startswith("kfacA:"):
                name = key[len("kfacA:"):]
                state.blocks.setdefault(name, [None, None])[0] = val
            elif key.startswith("kfacG:"):
                name = key[len("kfacG:"):]
                state.blocks.setdefault(name, [None, None])[1] = val
        return state


def apply_update(params: dict, direction: dict, eta: float) -> dict:
    """theta' = theta - eta * delta, functionally; rejects non-finite steps."""
    new = {}
    for key, theta in params.items():
        delta = direction[key]
        if not np.all(np.isfinite(delta)):
            raise NonFiniteUpdateError(f"non-finite update direction in {key}")
        new[key] = theta - eta * delta
    return new
