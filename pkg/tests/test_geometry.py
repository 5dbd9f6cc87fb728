"""Boundary curves, local frames, and the boundary-layer coordinate map."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from kinlayer.errors import NonConvexBoundaryError, PointOutsideTubeError
from kinlayer.geometry import (
    BoundaryLayerCoords,
    ConvexBoundary,
    from_boundary_layer,
    local_frame,
    to_boundary_layer,
    to_boundary_layer_batch,
    velocity_angle,
    velocity_from_angle,
    wrap_angle,
)


def _fd_curvature(boundary, theta, h=1e-4):
    """Independent curvature via centered differences of the curve x0(theta)."""
    thetas = theta + np.array([-h, 0.0, h])
    pts = np.stack([boundary.boundary_point(t) for t in thetas])
    d1 = (pts[2] - pts[0]) / (2.0 * h)
    d2 = (pts[2] - 2.0 * pts[1] + pts[0]) / (h * h)
    return (d1[0] * d2[1] - d1[1] * d2[0]) / np.hypot(d1[0], d1[1]) ** 3


class TestCurvature:
    def test_unit_disk_is_one_everywhere(self, disk):
        thetas = np.linspace(-np.pi, np.pi, 17)
        assert_allclose(disk.curvature(thetas), np.ones(17), atol=1e-14)

    def test_cos2theta_closed_form(self, perturbed):
        # r = 1 + 0.1 cos(2 theta): kappa = (r^2 + 2 r'^2 - r r'') / (...)^(3/2)
        assert perturbed.curvature(0.0) == pytest.approx(1.65 / 1.1**3, rel=1e-12)
        assert perturbed.curvature(np.pi / 2) == pytest.approx(
            0.45 / 0.9**3, rel=1e-12
        )

    def test_cos2theta_matches_finite_differences(self, perturbed):
        for theta in (0.0, 0.3, np.pi / 2, 2.0, -1.1):
            assert perturbed.curvature(theta) == pytest.approx(
                _fd_curvature(perturbed, theta), rel=1e-6
            )

    def test_nonconvex_coefficients_rejected(self):
        with pytest.raises(NonConvexBoundaryError):
            ConvexBoundary(cosine_coefficients=(1.0, 0.0, 0.3))

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(NonConvexBoundaryError):
            ConvexBoundary(cosine_coefficients=(1.0, 1.5))


class TestNormals:
    def test_disk_normal_is_radial(self, disk):
        for theta in (0.0, 1.0, -2.5):
            assert_allclose(
                disk.outward_normal(theta),
                [np.cos(theta), np.sin(theta)],
                atol=1e-14,
            )

    def test_perturbed_normal_unit_and_perpendicular(self, perturbed):
        h = 1e-6
        for theta in np.linspace(-np.pi, np.pi, 11):
            n = perturbed.outward_normal(theta)
            tangent = (
                perturbed.boundary_point(theta + h)
                - perturbed.boundary_point(theta - h)
            ) / (2.0 * h)
            assert np.hypot(*n) == pytest.approx(1.0, abs=1e-12)
            assert abs(n @ tangent) / np.hypot(*tangent) < 1e-6
            # outward: positive projection on the radial direction
            assert n @ perturbed.boundary_point(theta) > 0.0

    def test_local_frame_consistency(self, perturbed):
        frame = local_frame(perturbed, 0.7)
        assert_allclose(
            frame.normal, [np.cos(frame.tau), np.sin(frame.tau)], atol=1e-12
        )
        assert frame.curvature == pytest.approx(perturbed.curvature(0.7))
        assert frame.radius_of_curvature == pytest.approx(1.0 / frame.curvature)


class TestVelocityAngle:
    def test_roundtrip(self):
        xis = np.linspace(-np.pi, np.pi, 9, endpoint=False)
        assert_allclose(velocity_angle(velocity_from_angle(xis)), xis, atol=1e-12)

    def test_convention(self):
        # xi = 0 points along -e2, xi = pi/2 along -e1
        assert_allclose(velocity_from_angle(0.0), [0.0, -1.0], atol=1e-15)
        assert_allclose(velocity_from_angle(np.pi / 2), [-1.0, 0.0], atol=1e-15)


class TestBoundaryLayerMap:
    def test_unit_depth_point_on_disk(self, disk):
        c = to_boundary_layer(disk, [1.0 - 0.1, 0.0], [-1.0, 0.0], 0.1)
        assert c.eta == pytest.approx(1.0, abs=1e-12)
        assert c.tau == pytest.approx(0.0, abs=1e-12)
        # w = (-1, 0) heads inward along the normal at tau = 0: phi = pi/2
        assert c.phi == pytest.approx(np.pi / 2, abs=1e-12)
        assert c.mu == pytest.approx(0.1, abs=1e-13)

    def test_inflow_point_from_coordinates(self, disk):
        c = BoundaryLayerCoords(eta=0.0, tau=0.0, phi=np.pi / 2, epsilon=0.1)
        x, w = from_boundary_layer(disk, c)
        assert_allclose(x, [1.0, 0.0], atol=1e-12)
        n = disk.outward_normal(0.0)
        assert w @ n == pytest.approx(-1.0, abs=1e-12)  # w.n = -sin(phi)

    def test_wn_equals_minus_sin_phi(self, perturbed, rng):
        for _ in range(50):
            theta = rng.uniform(-np.pi, np.pi)
            x0 = perturbed.boundary_point(theta)
            w = velocity_from_angle(rng.uniform(-np.pi, np.pi))
            c = to_boundary_layer(perturbed, x0, w, 0.1)
            n = perturbed.outward_normal(theta)
            assert w @ n == pytest.approx(-np.sin(c.phi), abs=1e-9)

    def test_roundtrip_disk(self, disk, rng):
        for _ in range(100):
            r = rng.uniform(0.05, 0.95)
            ang = rng.uniform(-np.pi, np.pi)
            x = r * np.array([np.cos(ang), np.sin(ang)])
            w = velocity_from_angle(rng.uniform(-np.pi, np.pi))
            c = to_boundary_layer(disk, x, w, 0.2)
            x2, w2 = from_boundary_layer(disk, c)
            assert_allclose(x2, x, atol=1e-10)
            assert_allclose(w2, w, atol=1e-10)

    def test_roundtrip_perturbed_newton(self, perturbed, rng):
        for _ in range(100):
            eta = rng.uniform(0.0, 3.0)
            tau = rng.uniform(-np.pi, np.pi)
            phi = rng.uniform(-np.pi, np.pi)
            c = BoundaryLayerCoords(eta=eta, tau=tau, phi=phi, epsilon=0.1)
            x, w = from_boundary_layer(perturbed, c)
            back = to_boundary_layer(perturbed, x, w, 0.1)
            assert back.eta == pytest.approx(eta, abs=1e-9)
            assert wrap_angle(back.tau - tau) == pytest.approx(0.0, abs=1e-9)
            assert wrap_angle(back.phi - phi) == pytest.approx(0.0, abs=1e-9)

    def test_batch_agrees_with_scalar(self, perturbed, rng):
        xs, ws = [], []
        for _ in range(20):
            r = rng.uniform(0.1, 0.85)
            ang = rng.uniform(-np.pi, np.pi)
            xs.append(r * perturbed.boundary_point(ang) / np.hypot(
                *perturbed.boundary_point(ang)
            ))
            ws.append(velocity_from_angle(rng.uniform(-np.pi, np.pi)))
        xs, ws = np.array(xs), np.array(ws)
        eta, tau, phi, inside = to_boundary_layer_batch(perturbed, xs, ws, 0.1)
        for i in range(20):
            if not inside[i]:
                continue
            c = to_boundary_layer(perturbed, xs[i], ws[i], 0.1)
            assert eta[i] == pytest.approx(c.eta, abs=1e-9)
            assert wrap_angle(tau[i] - c.tau) == pytest.approx(0.0, abs=1e-9)
            assert wrap_angle(phi[i] - c.phi) == pytest.approx(0.0, abs=1e-9)

    def test_outside_domain_raises(self, disk):
        with pytest.raises(PointOutsideTubeError):
            to_boundary_layer(disk, [1.5, 0.0], [-1.0, 0.0], 0.1)


class TestAngles:
    @given(st.floats(-50.0, 50.0))
    def test_wrap_angle_range_and_congruence(self, a):
        w = float(wrap_angle(a))
        assert -np.pi <= w < np.pi
        assert np.cos(w) == pytest.approx(np.cos(a), abs=1e-9)
        assert np.sin(w) == pytest.approx(np.sin(a), abs=1e-9)

    @given(st.floats(-np.pi, np.pi, exclude_max=True))
    def test_tau_theta_inverse(self, theta):
        perturbed = ConvexBoundary(cosine_coefficients=(1.0, 0.0, 0.1))
        tau = perturbed.tau_of_theta(theta)
        assert wrap_angle(perturbed.theta_of_tau(tau) - theta) == pytest.approx(
            0.0, abs=1e-9
        )
