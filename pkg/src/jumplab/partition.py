"""Partition of the complement of a ball into boundary caps, exterior shell
sectors and a far-field atom.  Shared by the Monte-Carlo and grid exit laws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as beta_dist

from .geometry import BallDomain


@dataclass(frozen=True, eq=False)
class ExitPartition:
    """Cells of the exit space of ``domain``.

    Caps: ``n_bands`` bands in u_1 = (y - x0)_1/|y - x0| with equal solid angle
    times ``n_sectors`` sectors in the angle of (u_2, u_3).  Jump landings with
    |y - x0| < r_ext fall into ``n_shells`` radial shells over the same caps;
    everything farther is the far-field atom.
    """

    domain: BallDomain
    n_bands: int = 3
    n_sectors: int = 4
    r_ext: float | None = None
    n_shells: int = 2

    def __post_init__(self):
        if self.r_ext is None:
            object.__setattr__(self, "r_ext", 3.0 * self.domain.radius)
        if not self.r_ext > self.domain.radius:
            raise ValueError("r_ext must exceed the ball radius")
        a = (self.domain.d - 1) / 2.0
        q = beta_dist.ppf(np.arange(1, self.n_bands) / self.n_bands, a, a)
        object.__setattr__(self, "_band_edges", 2.0 * q - 1.0)

    @property
    def n_caps(self) -> int:
        return self.n_bands * self.n_sectors

    @property
    def n_cells(self) -> int:
        return self.n_caps * (1 + self.n_shells) + 1

    @property
    def far_index(self) -> int:
        return self.n_cells - 1

    def cap_of_direction(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        u = u / np.linalg.norm(u, axis=1, keepdims=True)
        band = np.searchsorted(self._band_edges, u[:, 0], side="right")
        ang = np.arctan2(u[:, 2], u[:, 1]) if u.shape[1] > 2 else np.zeros(u.shape[0])
        sec = np.floor((ang + np.pi) / (2 * np.pi) * self.n_sectors).astype(int)
        sec = np.clip(sec, 0, self.n_sectors - 1)
        return band * self.n_sectors + sec

    def classify(self, y, via_jump) -> np.ndarray:
        """Cell index of each exit point; continuous exits go to caps."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        via_jump = np.broadcast_to(np.asarray(via_jump, dtype=bool), (y.shape[0],))
        rel = y - self.domain.center
        cap = self.cap_of_direction(rel)
        r = np.linalg.norm(rel, axis=1) / self.domain.radius
        out = cap.copy()
        edges = np.linspace(1.0, self.r_ext / self.domain.radius, self.n_shells + 1)
        shell = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, self.n_shells - 1)
        jump_idx = self.n_caps * (1 + shell) + cap
        far = r >= edges[-1]
        out = np.where(via_jump, np.where(far, self.far_index, jump_idx), cap)
        return out

    def cap_solid_fraction(self) -> np.ndarray:
        return np.full(self.n_caps, 1.0 / self.n_caps)

    def labels(self) -> list[str]:
        out = [f"cap{c}" for c in range(self.n_caps)]
        for s in range(self.n_shells):
            out += [f"shell{s}_cap{c}" for c in range(self.n_caps)]
        out.append("far")
        return out

    def cap_centers(self) -> np.ndarray:
        """A representative unit direction per cap (band and sector midpoints)."""
        a = (self.domain.d - 1) / 2.0
        mids = 2.0 * beta_dist.ppf((np.arange(self.n_bands) + 0.5) / self.n_bands, a, a) - 1.0
        out = []
        d = self.domain.d
        for b in range(self.n_bands):
            for s in range(self.n_sectors):
                ang = -np.pi + (s + 0.5) * 2 * np.pi / self.n_sectors
                u = np.zeros(d)
                u[0] = mids[b]
                rho = np.sqrt(max(1.0 - mids[b] ** 2, 0.0))
                u[1] = rho * np.cos(ang)
                if d > 2:
                    u[2] = rho * np.sin(ang)
                out.append(u)
        return np.array(out)
