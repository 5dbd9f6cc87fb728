"""Windowed Anderson mixing for fixed-point iterations.

Given a fixed-point map x -> g(x), plain (Picard) iteration converges at the
rate of the map's spectral radius, which approaches one for transport sweeps
in the diffusive regime.  Anderson mixing recombines the last ``window``
iterates so that the extrapolated residual is minimized in least squares,
which typically turns hundreds of sweeps into a few dozen.

Usage: call :meth:`AndersonAccelerator.mix` with the pair (x_k, g(x_k)); the
return value is the next iterate x_{k+1}.
"""

from __future__ import annotations

from collections import deque

import numpy as np

__all__ = ["AndersonAccelerator"]


class AndersonAccelerator:
    """Least-squares residual recombination over a sliding window."""

    def __init__(self, window: int, regularization: float = 1e-12):
        if window < 1:
            raise ValueError("window must be at least 1")
        self.window = int(window)
        self.regularization = float(regularization)
        self._x = deque(maxlen=window + 1)
        self._r = deque(maxlen=window + 1)

    def reset(self) -> None:
        self._x.clear()
        self._r.clear()

    def mix(self, x: np.ndarray, gx: np.ndarray) -> np.ndarray:
        """Next iterate from the current pair (x, g(x))."""
        x = np.asarray(x, dtype=float).ravel()
        gx = np.asarray(gx, dtype=float).ravel()
        r = gx - x
        self._x.append(x.copy())
        self._r.append(r.copy())
        m = len(self._r) - 1
        if m == 0:
            return gx
        # minimize |r_k + sum_i gamma_i (r_{k-i} - r_k)| over the window
        dR = np.stack([self._r[i] - self._r[-1] for i in range(m)], axis=1)
        dX = np.stack([self._x[i] - self._x[-1] for i in range(m)], axis=1)
        gram = dR.T @ dR
        lhs = gram + self.regularization * (np.trace(gram) / m + 1e-300) * np.eye(m)
        gamma = np.linalg.solve(lhs, -dR.T @ self._r[-1])
        return gx + (dX + dR) @ gamma
