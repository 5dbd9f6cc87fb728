"""Discrete norms, remainder assembly, sweeps, and inequality diagnostics.

The phase-space measure is dx dw on Omega x S^1 (node areas times ordinate
weights); boundary norms use the kinetic measure d(gamma) = |w . n| dw dl
restricted to the in-flow or out-flow side.  On top of the plain norms the
module assembles the expansion remainder

    R = u^eps - sum_k eps^k U_k - sum_k eps^k UB_k - UF_0,

runs epsilon sweeps with per-run self-convergence checks, fits convergence
orders by least squares in log-log, and evaluates the a-priori bracket that
bounds ||u||_inf in terms of weighted data norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .decomposition import decompose
from .discretization import Ordinates, SpatialMesh, make_mesh, make_ordinates
from .errors import ConfigError, UnresolvedRunError
from .expansion import ExpansionBundle, build_expansion, evaluate_layer
from .geometry import ConvexBoundary
from .transport2d import PhaseField, solve_transport

__all__ = [
    "NormReport",
    "RemainderBundle",
    "ConvergenceStudy",
    "phase_norm",
    "boundary_norm",
    "norm_report",
    "assemble_remainder",
    "fit_order",
    "convergence_study",
    "apriori_check",
]

# self-convergence acceptance band: the L2 difference between consecutive
# mesh doublings must shrink by half, give or take 50 percent
_SELF_CONV_BAND = (0.25, 0.75)


# ----------------------------------------------------------------------
# plain norms
# ----------------------------------------------------------------------


def _lp(values: np.ndarray, weights: np.ndarray, p) -> float:
    if np.isinf(p):
        return float(np.max(np.abs(values))) if values.size else 0.0
    p = float(p)
    return float((weights * np.abs(values) ** p).sum() ** (1.0 / p))


def phase_norm(field: PhaseField, p) -> float:
    """Discrete L^p(Omega x S^1) norm of a phase field (p may be inf)."""
    w = field.mesh.node_areas[:, None] * field.ordinates.weights[None, :]
    return _lp(field.values, w, p)


def _boundary_quadrature(mesh: SpatialMesh, ordinates: Ordinates, side: str):
    """(trace indices, |w.n| d(gamma) weights, side mask) on the wall ring."""
    bidx = mesh.boundary_index
    normals = mesh.boundary.outward_normal(mesh.theta_nodes)
    wn = normals @ ordinates.directions.T  # (n_boundary, n_ordinates)
    if side == "minus":
        mask = wn < 0.0
    elif side == "plus":
        mask = wn > 0.0
    else:
        raise ValueError("side must be 'minus' or 'plus'")
    weights = (
        mesh.boundary_arc_weights[:, None]
        * ordinates.weights[None, :]
        * np.abs(wn)
        * mask
    )
    return bidx, weights, mask


def boundary_norm(field: PhaseField, p, side: str = "minus") -> float:
    """Discrete L^p(Gamma) norm of the wall trace with the |w.n| measure."""
    bidx, weights, mask = _boundary_quadrature(field.mesh, field.ordinates, side)
    trace = field.values[bidx]
    if np.isinf(p):
        vals = np.abs(trace)[mask]
        return float(vals.max()) if vals.size else 0.0
    return _lp(trace, weights, p)


def norm_report(field: PhaseField, m: int = 6) -> "NormReport":
    """All paper norms of one phase field in a single record."""
    if int(m) != m or m < 2:
        raise ConfigError("m must be an integer >= 2", key="m")
    return NormReport(
        epsilon=field.epsilon,
        l2=phase_norm(field, 2),
        l_inf=phase_norm(field, np.inf),
        l_2m=phase_norm(field, 2 * int(m)),
        m=int(m),
        gamma_minus_l2=boundary_norm(field, 2, side="minus"),
        gamma_minus_l_inf=boundary_norm(field, np.inf, side="minus"),
    )


@dataclass
class NormReport:
    """Interior and in-flow boundary norms of one field at one epsilon."""

    epsilon: float
    l2: float
    l_inf: float
    l_2m: float
    m: int
    gamma_minus_l2: float
    gamma_minus_l_inf: float


# ----------------------------------------------------------------------
# remainder assembly
# ----------------------------------------------------------------------


@dataclass
class RemainderBundle:
    """Expansion remainder R on the grid of a solved phase field.

    ``values`` satisfies R + (interior) + (regular layers) + (singular
    layer) = u^eps exactly at every node by construction.  ``sup_all``
    takes the maximum over every node; ``sup_trimmed`` drops, on the wall
    ring only, the one ordinate cell containing each grazing direction,
    where the discrete field carries its largest quadrature error.
    """

    epsilon: float
    order: int
    values: np.ndarray
    field: PhaseField
    components: dict
    sup_all: float
    sup_trimmed: float
    l2: float


def _grazing_trim_mask(mesh: SpatialMesh, ordinates: Ordinates) -> np.ndarray:
    """True where a node/ordinate pair survives the grazing-cell trim."""
    keep = np.ones((mesh.n_nodes, ordinates.n), dtype=bool)
    normals = mesh.boundary.outward_normal(mesh.theta_nodes)
    wn = normals @ ordinates.directions.T
    keep[mesh.boundary_index] = np.abs(wn) >= np.sin(np.pi / ordinates.n)
    return keep


def assemble_remainder(
    u_eps: PhaseField, bundle: ExpansionBundle, order: int = 2
) -> RemainderBundle:
    """Nodewise R = u^eps - interior - layers at the requested order.

    ``order=0`` keeps only U_0 + UB_0 + UF_0 (the leading-order remainder
    R_0 of the diffusive-limit study); higher orders add the eps-weighted
    corrections.
    """
    mesh, ordinates = u_eps.mesh, u_eps.ordinates
    pts = mesh.nodes
    eps = bundle.epsilon
    n = mesh.n_nodes
    shape = (n, ordinates.n)
    interior = np.empty(shape)
    regular = np.empty(shape)
    singular = np.empty(shape)
    for j in range(ordinates.n):
        wj = np.tile(ordinates.directions[j], (n, 1))
        interior[:, j] = bundle.interior_values(pts, wj, order=order)
        reg = evaluate_layer(bundle.ub0, pts, wj, bundle.boundary, eps)
        if order >= 1:
            reg = reg + eps * evaluate_layer(
                bundle.ub1, pts, wj, bundle.boundary, eps
            )
        regular[:, j] = reg
        singular[:, j] = evaluate_layer(bundle.uf0, pts, wj, bundle.boundary, eps)

    values = u_eps.values - interior - regular - singular
    w_phase = mesh.node_areas[:, None] * ordinates.weights[None, :]
    keep = _grazing_trim_mask(mesh, ordinates)

    def _pair(v):
        return {"l2": _lp(v, w_phase, 2), "l_inf": float(np.max(np.abs(v)))}

    return RemainderBundle(
        epsilon=eps,
        order=order,
        values=values,
        field=u_eps,
        components={
            "interior": _pair(interior),
            "regular_layer": _pair(regular),
            "singular_layer": _pair(singular),
        },
        sup_all=float(np.max(np.abs(values))),
        sup_trimmed=float(np.max(np.abs(values)[keep])),
        l2=_lp(values, w_phase, 2),
    )


# ----------------------------------------------------------------------
# epsilon sweeps and rate fitting
# ----------------------------------------------------------------------


def fit_order(epsilons: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(value) against log(epsilon).

    A decay value ~ eps^p returns p exactly; all points enter with equal
    weight and no extrapolation is attempted.
    """
    eps = np.asarray(epsilons, dtype=float)
    val = np.asarray(values, dtype=float)
    if eps.size < 2:
        raise ValueError("need at least two epsilon values to fit a rate")
    if np.any(val <= 0.0):
        raise ValueError("rate fit requires positive values")
    A = np.vstack([np.log(eps), np.ones(eps.size)]).T
    slope, _ = np.linalg.lstsq(A, np.log(val), rcond=None)[0]
    return float(slope)


@dataclass
class ConvergenceStudy:
    """Leading-order remainder norms across an epsilon sweep."""

    epsilons: list
    r0_sup: list
    r0_l2: list
    fitted_order: float
    components: dict
    self_convergence: list


def _field_l2_difference(fine: PhaseField, coarse: PhaseField) -> float:
    """L2 distance between two solves, coarse interpolated to fine nodes."""
    idx, wts = coarse.mesh.locate(fine.mesh.nodes)
    coarse_vals = np.einsum("mkj,mk->mj", coarse.values[idx], wts)
    d = fine.values - coarse_vals
    w = fine.mesh.node_areas[:, None] * fine.ordinates.weights[None, :]
    return _lp(d, w, 2)


def _self_convergence_ratio(
    boundary: ConvexBoundary,
    h: Callable,
    epsilon: float,
    mesh_resolution: int,
    ordinates: Ordinates,
    fine: PhaseField,
    tol: float,
) -> float:
    """d(res/2 -> res) over d(res/4 -> res/2) for one production solve."""
    if mesh_resolution % 4 != 0 or mesh_resolution < 16:
        raise ConfigError(
            "self-convergence checks need mesh_resolution divisible by 4 "
            "and at least 16",
            key="grids.mesh_resolution",
        )
    half = solve_transport(
        boundary,
        h,
        epsilon=epsilon,
        mesh=make_mesh(boundary, mesh_resolution // 2, epsilon),
        ordinates=ordinates,
        tol=tol,
    )
    quarter = solve_transport(
        boundary,
        h,
        epsilon=epsilon,
        mesh=make_mesh(boundary, mesh_resolution // 4, epsilon),
        ordinates=ordinates,
        tol=tol,
    )
    return _field_l2_difference(fine, half) / _field_l2_difference(half, quarter)


def convergence_study(
    boundary: ConvexBoundary,
    g: Callable,
    epsilons: Sequence[float],
    alpha: float = 0.5,
    mesh_resolution: int = 24,
    n_ordinates: int = 192,
    n_tau: int = 32,
    tol: float = 1e-9,
    self_check: bool = True,
) -> ConvergenceStudy:
    """Solve, expand, and measure R_0 for every epsilon; fit the decay order.

    Each epsilon is solved at the production resolution and, when
    ``self_check`` is on, at the halved and quartered resolutions; the run
    is rejected with :class:`UnresolvedRunError` unless the L2 difference
    between doublings shrinks inside the band (0.25, 0.75).
    """
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 3:
        raise ConfigError("a convergence study needs at least 3 epsilon values",
                          key="epsilons")
    ordinates = make_ordinates(n_ordinates)
    r0_sup, r0_l2, per_eps, ratios = [], [], [], []
    for eps in epsilons:
        datum = decompose(g, boundary, eps, alpha=alpha)
        bundle = build_expansion(datum, boundary, eps, n_tau=n_tau)
        mesh = make_mesh(boundary, mesh_resolution, eps)
        field = solve_transport(
            boundary, g, epsilon=eps, mesh=mesh, ordinates=ordinates, tol=tol
        )
        if self_check:
            ratio = _self_convergence_ratio(
                boundary, g, eps, mesh_resolution, ordinates, field, tol
            )
            if not (_SELF_CONV_BAND[0] <= ratio <= _SELF_CONV_BAND[1]):
                raise UnresolvedRunError(
                    f"self-convergence ratio {ratio:.3f} outside "
                    f"{_SELF_CONV_BAND} at epsilon = {eps}"
                )
        else:
            ratio = float("nan")
        ratios.append(ratio)
        rem = assemble_remainder(field, bundle, order=0)
        r0_sup.append(rem.sup_all)
        r0_l2.append(rem.l2)
        per_eps.append(
            {
                "epsilon": eps,
                "sup_trimmed": rem.sup_trimmed,
                "self_convergence_ratio": ratio,
                **{k: v["l_inf"] for k, v in rem.components.items()},
            }
        )
    return ConvergenceStudy(
        epsilons=epsilons,
        r0_sup=r0_sup,
        r0_l2=r0_l2,
        fitted_order=fit_order(epsilons, r0_sup),
        components={"per_epsilon": per_eps},
        self_convergence=ratios,
    )


# ----------------------------------------------------------------------
# a-priori inequality diagnostics
# ----------------------------------------------------------------------


def apriori_check(
    u: PhaseField,
    f: Optional[Callable],
    h: Callable,
    epsilon: float,
    m: int = 6,
) -> dict:
    """Ratio of ||u||_inf to the weighted data bracket of the L^inf bound.

    The second-round bracket is

        eps^(-1-1/m) ||f||_2 + eps^(-2-1/m) ||f||_{2m/(2m-1)} + ||f||_inf
        + eps^(-1/2-1/m) ||h||_{L2(Gamma-)} + eps^(-1/m) ||h||_{Lm(Gamma-)}
        + ||h||_inf;

    the first-round variant replaces the two weighted f terms by the single
    cruder eps^(-3) ||f||_2.  The returned ratio uses the second round.
    """
    if int(m) != m or m < 2:
        raise ConfigError("m must be an integer >= 2", key="m")
    m = int(m)
    mesh, ordinates = u.mesh, u.ordinates
    if f is not None:
        fv = np.stack(
            [
                np.asarray(f(mesh.nodes, ordinates.directions[j]), dtype=float)
                for j in range(ordinates.n)
            ],
            axis=1,
        )
    else:
        fv = np.zeros((mesh.n_nodes, ordinates.n))
    w_phase = mesh.node_areas[:, None] * ordinates.weights[None, :]
    f_l2 = _lp(fv, w_phase, 2)
    f_dual = _lp(fv, w_phase, 2.0 * m / (2.0 * m - 1.0))
    f_sup = float(np.max(np.abs(fv)))

    bidx, bw, mask = _boundary_quadrature(mesh, ordinates, side="minus")
    taus = np.arctan2(
        np.sin(mesh.boundary.tau_of_theta(mesh.theta_nodes)),
        np.cos(mesh.boundary.tau_of_theta(mesh.theta_nodes)),
    )
    xi = np.arctan2(-ordinates.directions[:, 0], -ordinates.directions[:, 1])
    phi = np.arctan2(
        np.sin(taus[:, None] + xi[None, :]), np.cos(taus[:, None] + xi[None, :])
    )
    hv = np.asarray(
        h(np.broadcast_to(taus[:, None], phi.shape), phi), dtype=float
    )
    h_l2 = _lp(hv, bw, 2)
    h_lm = _lp(hv, bw, m)
    h_sup = float(np.max(np.abs(hv)[mask])) if np.any(mask) else 0.0

    u_sup = phase_norm(u, np.inf)
    terms = {
        "f_l2": f_l2,
        "f_dual": f_dual,
        "f_sup": f_sup,
        "h_l2": h_l2,
        "h_lm": h_lm,
        "h_sup": h_sup,
    }
    data_terms = (
        epsilon ** (-0.5 - 1.0 / m) * h_l2 + epsilon ** (-1.0 / m) * h_lm + h_sup
    )
    bracket = (
        epsilon ** (-1.0 - 1.0 / m) * f_l2
        + epsilon ** (-2.0 - 1.0 / m) * f_dual
        + f_sup
        + data_terms
    )
    bracket_first_round = epsilon ** (-3.0) * f_l2 + f_sup + data_terms
    return {
        "u_sup": u_sup,
        "bracket": bracket,
        "bracket_first_round": bracket_first_round,
        "ratio": u_sup / bracket,
        "terms": terms,
    }
