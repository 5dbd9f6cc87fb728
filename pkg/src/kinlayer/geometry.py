"""Convex planar domains in polar form and boundary-layer coordinates.

A domain Omega is described by its boundary radius r(theta), a finite Fourier
cosine series, so r', r'' are exact and the curve is smooth.  The module
implements the coordinate substitutions between Cartesian phase space (x, w)
and boundary-layer coordinates (eta, tau, phi):

* ``mu``      -- distance from x to the boundary along the inward normal,
                 so ``x = x0(theta) - mu * n(theta)``;
* ``eta``     -- the stretched normal coordinate ``mu / epsilon``;
* ``tau``     -- the angle of the outward normal, ``n = (cos tau, sin tau)``
                 (the Gauss map); strictly monotone in theta for strictly
                 convex curves, with ``d tau / d theta = kappa * |x0'|``;
* ``xi``      -- the velocity angle, ``w = (-sin xi, -cos xi)``;
* ``phi``     -- ``tau + xi``; the inflow condition ``w . n < 0`` is exactly
                 ``sin phi > 0``.

All operations are pure functions over immutable :class:`ConvexBoundary`
values and are safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NoConvergenceError, NonConvexBoundaryError, PointOutsideTubeError

__all__ = [
    "ConvexBoundary",
    "LocalFrame",
    "BoundaryLayerCoords",
    "curvature",
    "local_frame",
    "to_boundary_layer",
    "from_boundary_layer",
    "wrap_angle",
]


def wrap_angle(a):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class LocalFrame:
    """Boundary frame at a single boundary point.

    ``normal`` is the outward unit normal; ``tau`` is its angle, so
    ``normal = (cos tau, sin tau)``; ``radius_of_curvature = 1 / curvature``.
    """

    theta: float
    tau: float
    normal: np.ndarray
    curvature: float
    radius_of_curvature: float


@dataclass(frozen=True)
class BoundaryLayerCoords:
    """Boundary-layer coordinates of one phase point.

    ``eta >= 0`` with equality exactly on the boundary; ``phi`` lies in
    [-pi, pi); ``epsilon`` is the Knudsen number used for the stretching
    ``eta = mu / epsilon``.
    """

    eta: float
    tau: float
    phi: float
    epsilon: float

    @property
    def mu(self) -> float:
        """Physical distance to the boundary along the inward normal."""
        return self.eta * self.epsilon


@dataclass(frozen=True)
class ConvexBoundary:
    """Smooth strictly convex boundary given by a Fourier cosine radius.

    ``r(theta) = sum_k cosine_coefficients[k] * cos(k * theta)``.

    Construction validates positivity of ``r`` and of the curvature on a
    dense sample and rejects non-convex coefficient sets.
    """

    cosine_coefficients: tuple
    n_theta_samples: int = 4096

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.cosine_coefficients)
        if len(coeffs) == 0:
            raise NonConvexBoundaryError("at least one cosine coefficient is required")
        object.__setattr__(self, "cosine_coefficients", coeffs)
        if self.n_theta_samples < 16:
            raise NonConvexBoundaryError("n_theta_samples must be at least 16")
        theta = self._dense_theta
        r = self.radius(theta)
        if np.min(r) <= 0.0:
            raise NonConvexBoundaryError("boundary radius must be positive everywhere")
        kappa = self.curvature(theta)
        if np.min(kappa) <= 0.0:
            raise NonConvexBoundaryError(
                "boundary curvature must be positive everywhere (strict convexity)"
            )

    # ------------------------------------------------------------------
    # radius and its exact derivatives
    # ------------------------------------------------------------------

    @property
    def _dense_theta(self) -> np.ndarray:
        return np.linspace(-np.pi, np.pi, self.n_theta_samples, endpoint=False)

    def radius(self, theta, order: int = 0):
        """r(theta) or its exact derivative of the given order (0..2)."""
        theta = np.asarray(theta, dtype=float)
        out = np.zeros_like(theta)
        for k, c in enumerate(self.cosine_coefficients):
            if order == 0:
                out += c * np.cos(k * theta)
            elif order == 1:
                out += -c * k * np.sin(k * theta)
            elif order == 2:
                out += -c * k * k * np.cos(k * theta)
            else:
                raise ValueError("radius derivatives available for order 0..2")
        return out

    # ------------------------------------------------------------------
    # pointwise geometry
    # ------------------------------------------------------------------

    def curvature(self, theta):
        """Curvature kappa = (r^2 + 2 r'^2 - r r'') / (r^2 + r'^2)^(3/2)."""
        r = self.radius(theta)
        r1 = self.radius(theta, 1)
        r2 = self.radius(theta, 2)
        return (r * r + 2.0 * r1 * r1 - r * r2) / (r * r + r1 * r1) ** 1.5

    def boundary_point(self, theta):
        """Boundary point x0(theta) = r(theta) (cos theta, sin theta)."""
        theta = np.asarray(theta, dtype=float)
        r = self.radius(theta)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    def boundary_tangent(self, theta):
        """dx0/dtheta (not normalized)."""
        theta = np.asarray(theta, dtype=float)
        r = self.radius(theta)
        r1 = self.radius(theta, 1)
        c, s = np.cos(theta), np.sin(theta)
        return np.stack([r1 * c - r * s, r1 * s + r * c], axis=-1)

    def _boundary_second(self, theta):
        """d^2 x0 / d theta^2."""
        theta = np.asarray(theta, dtype=float)
        r = self.radius(theta)
        r1 = self.radius(theta, 1)
        r2 = self.radius(theta, 2)
        c, s = np.cos(theta), np.sin(theta)
        return np.stack(
            [(r2 - r) * c - 2.0 * r1 * s, (r2 - r) * s + 2.0 * r1 * c], axis=-1
        )

    def outward_normal(self, theta):
        """Outward unit normal from the polar representation."""
        theta = np.asarray(theta, dtype=float)
        r = self.radius(theta)
        r1 = self.radius(theta, 1)
        norm = np.sqrt(r * r + r1 * r1)
        c, s = np.cos(theta), np.sin(theta)
        return np.stack([(r * c + r1 * s) / norm, (r * s - r1 * c) / norm], axis=-1)

    def tau_of_theta(self, theta):
        """Unwrapped normal angle tau(theta) = theta + atan2(-r', r).

        Monotone increasing for strictly convex curves, with
        tau(theta + 2 pi) = tau(theta) + 2 pi.
        """
        theta = np.asarray(theta, dtype=float)
        r = self.radius(theta)
        r1 = self.radius(theta, 1)
        return theta + np.arctan2(-r1, r)

    def dtau_dtheta(self, theta):
        """d tau / d theta = kappa * sqrt(r^2 + r'^2) > 0."""
        r = self.radius(theta)
        r1 = self.radius(theta, 1)
        return self.curvature(theta) * np.sqrt(r * r + r1 * r1)

    def theta_of_tau(self, tau):
        """Invert the monotone map tau(theta); accepts any real tau."""
        tau = np.asarray(tau, dtype=float)
        table_theta, table_tau = self._tau_table
        # reduce into the principal branch of the table
        shift = np.floor((tau - table_tau[0]) / (2.0 * np.pi))
        tau_red = tau - 2.0 * np.pi * shift
        theta = np.interp(tau_red, table_tau, table_theta)
        for _ in range(4):
            theta = theta - (self.tau_of_theta(theta) - tau_red) / self.dtau_dtheta(theta)
        return theta + 2.0 * np.pi * shift

    @cached_property
    def _tau_table(self):
        theta = np.linspace(-np.pi, np.pi, self.n_theta_samples + 1)
        return theta, self.tau_of_theta(theta)

    @cached_property
    def r_min(self) -> float:
        """Smallest boundary radius (used by the star-shaped mesh)."""
        return float(np.min(self.radius(self._dense_theta)))

    @cached_property
    def r_max(self) -> float:
        return float(np.max(self.radius(self._dense_theta)))

    @cached_property
    def R_min(self) -> float:
        """Smallest radius of curvature; validity radius of the tubular chart."""
        return float(np.min(1.0 / self.curvature(self._dense_theta)))

    @property
    def is_disk(self) -> bool:
        """True when the boundary is a circle centered at the origin."""
        return all(abs(c) == 0.0 for c in self.cosine_coefficients[1:])

    # ------------------------------------------------------------------
    # foot-point solve (theta from x)
    # ------------------------------------------------------------------

    def foot_point(self, x):
        """Per-point foot of the normal through x.

        Parameters
        ----------
        x : array (..., 2)
            Points in the closed domain (within the tubular neighborhood).

        Returns
        -------
        theta, mu : arrays
            Boundary parameter of the foot point and normal depth, so that
            ``x = x0(theta) - mu * n(theta)``.  ``mu`` may come out slightly
            negative (up to roundoff) for points on the boundary; callers
            clamp as appropriate.
        """
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 2)
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        scale = max(self.r_max, 1.0)
        f = self._normal_residual(theta, pts)
        for _ in range(60):
            fp = self._normal_residual_deriv(theta, pts)
            step = -f / fp
            # damped update: halve the step while the residual grows
            new_theta = theta + step
            new_f = self._normal_residual(new_theta, pts)
            for _ in range(20):
                worse = np.abs(new_f) > np.abs(f)
                if not np.any(worse):
                    break
                step = np.where(worse, 0.5 * step, step)
                new_theta = theta + step
                new_f = self._normal_residual(new_theta, pts)
            theta, f = new_theta, new_f
            if np.max(np.abs(step)) < 1e-14 * (1.0 + np.max(np.abs(theta))):
                break
        else:
            raise NoConvergenceError(
                "foot-point solve did not converge", iterations=60,
                residual=float(np.max(np.abs(f))),
            )
        if np.max(np.abs(f)) > 1e-9 * scale * scale:
            raise NoConvergenceError(
                "foot-point solve stalled", iterations=60,
                residual=float(np.max(np.abs(f))),
            )
        x0 = self.boundary_point(theta)
        n = self.outward_normal(theta)
        mu = np.einsum("ij,ij->i", x0 - pts, n)
        out_shape = x.shape[:-1]
        return theta.reshape(out_shape), mu.reshape(out_shape)

    def _normal_residual(self, theta, pts):
        x0 = self.boundary_point(theta)
        t = self.boundary_tangent(theta)
        return np.einsum("ij,ij->i", pts - x0, t)

    def _normal_residual_deriv(self, theta, pts):
        x0 = self.boundary_point(theta)
        t = self.boundary_tangent(theta)
        t2 = self._boundary_second(theta)
        return -np.einsum("ij,ij->i", t, t) + np.einsum("ij,ij->i", pts - x0, t2)


# ----------------------------------------------------------------------
# module-level operations
# ----------------------------------------------------------------------


def curvature(boundary: ConvexBoundary, theta):
    """Curvature of the boundary curve at angle(s) theta."""
    return boundary.curvature(theta)


def local_frame(boundary: ConvexBoundary, theta: float) -> LocalFrame:
    """Outward normal, normal angle tau, and curvature data at one theta."""
    theta = float(theta)
    kappa = float(boundary.curvature(theta))
    return LocalFrame(
        theta=theta,
        tau=float(wrap_angle(boundary.tau_of_theta(theta))),
        normal=boundary.outward_normal(theta),
        curvature=kappa,
        radius_of_curvature=1.0 / kappa,
    )


def velocity_angle(w):
    """Angle xi with w = (-sin xi, -cos xi)."""
    w = np.asarray(w, dtype=float)
    return np.arctan2(-w[..., 0], -w[..., 1])


def velocity_from_angle(xi):
    """Unit velocity w = (-sin xi, -cos xi)."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([-np.sin(xi), -np.cos(xi)], axis=-1)


def to_boundary_layer(
    boundary: ConvexBoundary, x, w, epsilon: float
) -> BoundaryLayerCoords:
    """Map one phase point (x, w) to boundary-layer coordinates.

    Raises :class:`PointOutsideTubeError` when the normal depth mu is not in
    [0, R_min) or when x lies outside the closed domain.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    theta, mu = boundary.foot_point(x)
    theta, mu = float(theta), float(mu)
    tol = 1e-9 * max(boundary.r_max, 1.0)
    if mu < -tol:
        raise PointOutsideTubeError("point lies outside the closed domain")
    mu = max(mu, 0.0)
    if mu >= boundary.R_min:
        raise PointOutsideTubeError(
            "normal depth exceeds the minimum radius of curvature"
        )
    tau = float(wrap_angle(boundary.tau_of_theta(theta)))
    xi = float(velocity_angle(w))
    phi = float(wrap_angle(tau + xi))
    return BoundaryLayerCoords(eta=mu / epsilon, tau=tau, phi=phi, epsilon=epsilon)


def from_boundary_layer(boundary: ConvexBoundary, c: BoundaryLayerCoords):
    """Inverse of :func:`to_boundary_layer` (phase point from coordinates)."""
    theta = float(boundary.theta_of_tau(c.tau))
    x0 = boundary.boundary_point(theta)
    n = boundary.outward_normal(theta)
    x = x0 - c.mu * n
    xi = c.phi - c.tau
    w = velocity_from_angle(xi)
    return x, w


def to_boundary_layer_batch(boundary: ConvexBoundary, x, w, epsilon: float):
    """Vectorized coordinate map for layer evaluation.

    Returns ``(eta, tau, phi, inside)`` where ``inside`` flags points whose
    normal depth lies in [0, R_min); coordinates of outside points are
    returned clamped but flagged False instead of raising.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    theta, mu = boundary.foot_point(x)
    inside = (mu > -1e-9 * max(boundary.r_max, 1.0)) & (mu < boundary.R_min)
    mu = np.clip(mu, 0.0, None)
    tau = wrap_angle(boundary.tau_of_theta(theta))
    xi = np.arctan2(-w[..., 0], -w[..., 1])
    phi = wrap_angle(tau + xi)
    return mu / epsilon, tau, phi, inside
