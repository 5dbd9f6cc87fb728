"""Command-line orchestration: subcommands, artifacts, and exit codes.

Subcommands ``milne | flat-milne | decompose | expand | transport |
limit-study | verify`` each write their artifact files plus a
``manifest.json`` echoing the config, library versions, and wall-clock
timings.  Configuration merges preset defaults, an optional JSON file, and
command-line flags, in that order of precedence.

Exit codes: 0 success, 1 failed verification, 2 config validation error,
3 solver non-convergence.  Failures print a one-object JSON report so
callers never have to parse prose.

numpy is imported inside the handlers, after ``--threads`` has seeded the
BLAS/OpenMP environment variables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import RunConfig, config_echo, load_config
from .errors import ConfigError, KinlayerError, NoConvergenceError, UnresolvedRunError

__all__ = ["main", "data_functions"]

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def data_functions(name: str):
    """Boundary datum g(tau, phi) and volumetric source f(x, w) by preset."""
    import numpy as np

    shaped = lambda tau, phi: np.broadcast_arrays(
        np.asarray(tau, dtype=float), np.asarray(phi, dtype=float)
    )
    if name == "constant":
        return (lambda tau, phi: np.ones_like(shaped(tau, phi)[0])), None
    if name == "one_plus_half_sin_phi":
        def g(tau, phi):
            tau, phi = shaped(tau, phi)
            return 1.0 + 0.5 * np.sin(phi)
        return g, None
    if name == "sin_phi_cos_tau":
        def g(tau, phi):
            tau, phi = shaped(tau, phi)
            return np.sin(phi) * np.cos(tau)
        return g, None
    if name == "manufactured":
        def g(tau, phi):
            tau, phi = shaped(tau, phi)
            return 0.5 * np.cos(tau)

        def f(pts, w_dir):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
            return (1.0 - r2) * (1.0 + 0.5 * float(w_dir[0]))

        return g, f
    raise ConfigError(f"unknown data preset '{name}'", key="data.kind")


# ----------------------------------------------------------------------
# artifact writers
# ----------------------------------------------------------------------


def _write_csv(path: Path, header: str, columns) -> None:
    """CSV with 17 significant digits, '.' decimal separator, LF endings."""
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{float(v):.17g}" for v in row) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _boundary(config: RunConfig):
    from .geometry import ConvexBoundary

    return ConvexBoundary(config.domain_coefficients)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def _cmd_milne(config: RunConfig, out: Path, geometric: bool = True) -> dict:
    import numpy as np

    from .discretization import make_eta_grid, make_phi_grid
    from .milne import MilneProblem, solve_milne

    boundary = _boundary(config)
    eps = config.epsilon
    L = eps ** -0.5
    theta0 = boundary.theta_of_tau(0.0)
    R_kappa = 1.0 / float(boundary.curvature(theta0))
    g, _ = data_functions(config.data)
    problem = MilneProblem(
        epsilon=eps,
        R_kappa=R_kappa,
        inflow=lambda phi: np.asarray(g(np.zeros_like(phi), phi), dtype=float),
        L=L,
        geometric_correction=geometric,
    )
    eta_grid = make_eta_grid(config.n_eta, L, first_cell=eps * L / (config.n_eta - 1))
    phi_grid = make_phi_grid(config.n_phi, clustered=config.clustering)
    solution = solve_milne(
        problem, eta_grid, phi_grid, tol=config.milne_tol, max_iter=config.max_iter
    )
    eta_col = np.repeat(eta_grid.nodes, phi_grid.n)
    phi_col = np.tile(phi_grid.nodes, eta_grid.n)
    _write_csv(out / "milne_solution.csv", "eta,phi,f",
               (eta_col, phi_col, solution.f.ravel()))
    _write_json(
        out / "milne_meta.json",
        {
            "epsilon": eps,
            "R_kappa": R_kappa,
            "L": L,
            "f_L": solution.f_L,
            "iterations": solution.iterations,
            "residual": solution.residual,
        },
    )
    return {"f_L": solution.f_L, "iterations": solution.iterations}


def _cmd_decompose(config: RunConfig, out: Path) -> dict:
    import numpy as np

    from .decomposition import decompose
    from .discretization import make_phi_grid

    boundary = _boundary(config)
    g, _ = data_functions(config.data)
    datum = decompose(
        g,
        boundary,
        config.epsilon,
        alpha=config.alpha,
        n_tau=config.n_tau,
        milne_tol=config.milne_tol,
    )
    phis = make_phi_grid(config.n_phi, clustered=config.clustering).nodes
    tau_col = np.repeat(datum.tau_samples, phis.size)
    phi_col = np.tile(phis, datum.tau_samples.size)
    _write_csv(
        out / "decomposition.csv",
        "tau,phi,g,g_flat,g_sharp",
        (
            tau_col,
            phi_col,
            np.asarray(datum.g(tau_col, phi_col), dtype=float),
            np.asarray(datum.g_flat(tau_col, phi_col), dtype=float),
            np.asarray(datum.g_sharp(tau_col, phi_col), dtype=float),
        ),
    )
    return {
        "lambda_range": [float(datum.lambda_table.min()),
                         float(datum.lambda_table.max())],
        "degenerate": datum.degenerate,
    }


def _cmd_expand(config: RunConfig, out: Path) -> dict:
    import numpy as np

    from .decomposition import decompose
    from .expansion import build_expansion

    boundary = _boundary(config)
    g, _ = data_functions(config.data)
    eps = config.epsilon
    datum = decompose(g, boundary, eps, alpha=config.alpha, n_tau=config.n_tau,
                      milne_tol=config.milne_tol)
    bundle = build_expansion(datum, boundary, eps, n_tau=config.n_tau,
                             tol=config.milne_tol, max_iter=config.max_iter)
    families = {
        "regular_0": bundle.ub0,
        "singular_0": bundle.uf0,
        "regular_1": bundle.ub1,
    }
    meta = {
        "epsilon": eps,
        "alpha": config.alpha,
        "tau_samples": {
            name: np.asarray(fam.tau_samples, dtype=float).tolist()
            for name, fam in families.items()
        },
        "f_L": {
            name: [float(s.f_L) for s in fam.solutions]
            for name, fam in families.items()
        },
        "piece_sup_norms": {
            name: float(fam.sup_norm()) for name, fam in families.items()
        },
        "interior_poisson_rhs": bundle.rhs_report,
    }
    _write_json(out / "expansion_meta.json", meta)
    if config.layer_tables:
        for k, fam in enumerate(families.values()):
            sol = fam.solutions[0]
            eta_col = np.repeat(sol.eta_grid.nodes, sol.phi_grid.n)
            phi_col = np.tile(sol.phi_grid.nodes, sol.eta_grid.n)
            _write_csv(out / f"layer_{k}.csv", "eta,phi,value",
                       (eta_col, phi_col, (sol.f - sol.f_L).ravel()))
    return {"piece_sup_norms": meta["piece_sup_norms"]}


def _cmd_transport(config: RunConfig, out: Path) -> dict:
    import numpy as np

    from .discretization import make_mesh, make_ordinates
    from .transport2d import solve_transport

    boundary = _boundary(config)
    g, f = data_functions(config.data)
    eps = config.epsilon
    mesh = make_mesh(boundary, config.mesh_resolution, eps)
    ordinates = make_ordinates(config.n_ordinates)
    field = solve_transport(
        boundary,
        g,
        f=f,
        epsilon=eps,
        mesh=mesh,
        ordinates=ordinates,
        tol=config.transport_tol,
        max_iter=config.max_iter,
    )
    x1 = np.repeat(mesh.nodes[:, 0], ordinates.n)
    x2 = np.repeat(mesh.nodes[:, 1], ordinates.n)
    psi = np.tile(ordinates.angles, mesh.n_nodes)
    _write_csv(out / "transport_field.csv", "x1,x2,psi,u",
               (x1, x2, psi, field.values.ravel()))
    _write_json(
        out / "transport_meta.json",
        {
            "epsilon": eps,
            "n_nodes": mesh.n_nodes,
            "n_ordinates": ordinates.n,
            "mesh_resolution": config.mesh_resolution,
            "iterations": field.iterations,
            "residual": field.residual,
        },
    )
    return {"iterations": field.iterations, "residual": field.residual}


def _cmd_limit_study(config: RunConfig, out: Path) -> dict:
    from .norms import convergence_study

    boundary = _boundary(config)
    g, _ = data_functions(config.data)
    study = convergence_study(
        boundary,
        g,
        config.epsilons,
        alpha=config.alpha,
        mesh_resolution=config.mesh_resolution,
        n_ordinates=config.n_ordinates,
        n_tau=config.n_tau,
        tol=config.transport_tol,
    )
    payload = {
        "epsilons": study.epsilons,
        "r0_sup": study.r0_sup,
        "r0_l2": study.r0_l2,
        "fitted_order": study.fitted_order,
        "components": study.components,
    }
    _write_json(out / "limit_study.json", payload)
    rows = study.components["per_epsilon"]
    _write_csv(
        out / "limit_study.csv",
        "epsilon,r0_sup,r0_l2,sup_trimmed,self_convergence_ratio",
        (
            study.epsilons,
            study.r0_sup,
            study.r0_l2,
            [r["sup_trimmed"] for r in rows],
            [r["self_convergence_ratio"] for r in rows],
        ),
    )
    return {"fitted_order": study.fitted_order}


def _cmd_verify(config: RunConfig, out: Path) -> dict:
    from .acceptance import run_all

    report = run_all()
    _write_json(out / "verify_report.json", report)
    for row in report["criteria"]:
        status = "pass" if row["passed"] else "FAIL"
        print(f"[{status}] {row['name']} ({row['elapsed']:.1f}s)")
    return {"all_passed": report["all_passed"]}


_COMMANDS = {
    "milne": lambda cfg, out: _cmd_milne(cfg, out, geometric=True),
    "flat-milne": lambda cfg, out: _cmd_milne(cfg, out, geometric=False),
    "decompose": _cmd_decompose,
    "expand": _cmd_expand,
    "transport": _cmd_transport,
    "limit-study": _cmd_limit_study,
    "verify": _cmd_verify,
}


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="path to a JSON run configuration")
    shared.add_argument("--out", help="output directory (overrides config)")
    shared.add_argument("--threads", type=int,
                        help="BLAS/OpenMP thread count for this run")
    shared.add_argument("--preset", help="named preset supplying defaults")
    parser = argparse.ArgumentParser(
        prog="kinlayer",
        description="Kinetic boundary-layer studies for steady transport "
        "in convex planar domains.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[shared])
    return parser


def _error_json(exc: KinlayerError) -> str:
    payload = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("key", "iterations", "residual"):
        if hasattr(exc, attr):
            payload[attr] = getattr(exc, attr)
    return json.dumps({"error": payload})


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
    started = time.time()
    try:
        config = load_config(
            args.config,
            preset=args.preset,
            overrides={"out_dir": args.out, "threads": args.threads},
        )
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = _COMMANDS[args.subcommand](config, out)
        import kinlayer
        import numpy
        import scipy

        _write_json(
            out / "manifest.json",
            {
                "subcommand": args.subcommand,
                "config": config_echo(config),
                "versions": {
                    "kinlayer": kinlayer.__version__,
                    "python": sys.version.split()[0],
                    "numpy": numpy.__version__,
                    "scipy": scipy.__version__,
                },
                "timings": {"total_seconds": time.time() - started},
                "summary": summary,
            },
        )
    except ConfigError as exc:
        print(_error_json(exc))
        return 2
    except (NoConvergenceError, UnresolvedRunError) as exc:
        print(_error_json(exc))
        return 3
    if args.subcommand == "verify" and not summary["all_passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
