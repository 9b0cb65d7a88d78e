"""Accumulated observables and series analysis for training runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .state import Cell


@dataclass
class SpinDensityGrid:
    """Spin-resolved histogram of electron positions over the cell.

    Counters accumulate by wrapped position; polarization and totals are
    derived on demand. Bin (i, j) covers [i, i+1) x [j, j+1) in units of
    cell_length / resolution.
    """

    cell: Cell
    resolution: int = 64
    counts_up: np.ndarray = field(default=None)
    counts_down: np.ndarray = field(default=None)
    n_samples: int = 0  # electron samples accumulated (all spins)

    def __post_init__(self):
        shape = (self.resolution, self.resolution)
        if self.counts_up is None:
            self.counts_up = np.zeros(shape)
        if self.counts_down is None:
            self.counts_down = np.zeros(shape)

    def accumulate(self, positions: np.ndarray, spins: np.ndarray) -> None:
        """positions (B, N, 2), spins (B, N)."""
        pos = self.cell.wrap(positions).reshape(-1, 2)
        s = np.asarray(spins).reshape(-1)
        idx = np.minimum(
            (pos / self.cell.lengths * self.resolution).astype(int),
            self.resolution - 1,
        )
        up = s > 0
        np.add.at(self.counts_up, (idx[up, 0], idx[up, 1]), 1.0)
        np.add.at(self.counts_down, (idx[~up, 0], idx[~up, 1]), 1.0)
        self.n_samples += len(s)

    @property
    def total(self) -> np.ndarray:
        return self.counts_up + self.counts_down

    @property
    def polarization(self) -> np.ndarray:
        """(n_up - n_down) / (n_up + n_down), zero where the cell is empty."""
        tot = self.total
        with np.errstate(invalid="ignore", divide="ignore"):
            pol = (self.counts_up - self.counts_down) / tot
        return np.where(tot > 0, pol, 0.0)

    def bin_centers(self) -> tuple[np.ndarray, np.ndarray]:
        lx, ly = self.cell.lengths
        xs = (np.arange(self.resolution) + 0.5) * lx / self.resolution
        ys = (np.arange(self.resolution) + 0.5) * ly / self.resolution
        return xs, ys

    def write_csv(self, path) -> None:
        xs, ys = self.bin_centers()
        with open(path, "w") as fh:
            fh.write("x,y,n_up,n_down\n")
            for i, x in enumerate(xs):
                for j, y in enumerate(ys):
                    fh.write(
                        f"{x:.8g},{y:.8g},{self.counts_up[i, j]:.8g},"
                        f"{self.counts_down[i, j]:.8g}\n"
                    )

    def polarization_at(self, points: np.ndarray, radius: float) -> np.ndarray:
        """Density-weighted polarization within ``radius`` of each point."""
        xs, ys = self.bin_centers()
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        centers = np.stack([gx, gy], axis=-1)
        out = []
        for point in np.atleast_2d(points):
            d = self.cell.min_image(centers - point)
            mask = (d**2).sum(-1) <= radius**2
            weight = self.total[mask].sum()
            if weight == 0:
                out.append(0.0)
            else:
                up = self.counts_up[mask].sum()
                down = self.counts_down[mask].sum()
                out.append((up - down) / weight)
        return np.array(out)


def moving_average(series, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` points; shorter prefixes use
    however many points exist."""
    series = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    csum = np.concatenate([[0.0], np.cumsum(series)])
    n = len(series)
    idx = np.arange(n)
    lo = np.maximum(idx - window + 1, 0)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def plateau_arrival_step(
    energies, smooth_window: int = 50, tail_fraction: float = 0.2
) -> int:
    """First step after which the smoothed energy stays at its final plateau.

    The plateau value is the mean of the smoothed series over the trailing
    ``tail_fraction``; the tolerance band is 5 tail standard deviations
    (floored at 1e-12 |plateau|). Returns the first index from which the
    smoothed series never leaves the band again.
    """
    ma = moving_average(energies, smooth_window)
    n_tail = max(int(len(ma) * tail_fraction), 1)
    tail = ma[-n_tail:]
    plateau = tail.mean()
    tol = max(5.0 * tail.std(), 1e-12 * abs(plateau))
    outside = np.abs(ma - plateau) > tol
    if not outside.any():
        return 0
    return int(np.flatnonzero(outside)[-1]) + 1
