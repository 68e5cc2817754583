"""Verification and experiment harness.

Includes the coarse-component projection of a multiscale field, the discrete
identity report, the Galerkin vs Petrov-Galerkin sweep, and the
homogenization check for layered media.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from msfemlab.errors import InvalidArgumentError
from msfemlab.fem import (
    DEFAULT_QUAD,
    DIRECT,
    GAUSS3,
    CoefficientField,
    FeFunction,
    SourceField,
    assemble,
    h1_norm_diff,
    h1_seminorm_diff,
    solve_sparse,
    triangle_tensors,
)
from msfemlab.mesh import build_global_fine, build_structured_coarse
from msfemlab.offline import run_offline, verify_expansion
from msfemlab.solvers import (
    galerkin_stiffness,
    nonintrusive_stiffness,
    petrov_galerkin_stiffness,
    prolongate,
    solve_msfem_galerkin,
    solve_msfem_pg,
    solve_nonintrusive,
    solve_p1,
    solve_reference,
)

logger = logging.getLogger(__name__)

# thresholds applied to an identity report by its consumers
IDENTITY_THRESHOLDS = {
    "stiffness_galerkin_vs_effective_rel_dev": 1e-10,
    "stiffness_pg_vs_galerkin_rel_dev": 1e-10,
    "solution_pg_vs_nonintrusive_max_dev": 1e-9,
    "expansion_max_dev": 1e-10,
}
MARGIN_TOLERANCES = {
    "tensor_lower_margin": 1e-8,
    "tensor_upper_margin": 1e-6,
    "probe_lower_margin": 1e-8,
    "probe_upper_margin": 1e-6,
}


def coarse_component(v_fine, offline):
    """Coarse P1 field v_H with a_Abar(v_H, w_H) = a_eps(v_fine, w_H) for every coarse w_H.

    ``v_fine`` lives on ``offline.global_fine``; the right-hand side pairs it
    with the coarse hats on fine triangles using the offline quadrature.
    """
    gf = offline.global_fine
    if v_fine.mesh is not gf:
        raise InvalidArgumentError("field must live on the offline global fine mesh")
    mesh = offline.mesh
    tensors = triangle_tensors(gf.triangle_coords, offline.coeff, offline.quad)
    flux = np.einsum("t,tij,tj->ti", gf.areas, tensors, v_fine.gradients())
    per_element = flux.reshape(mesh.n_triangles, gf.triangles_per_element, 2).sum(axis=1)
    local = np.einsum("kad,kd->ka", mesh.gradients, per_element)
    rhs = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    system = assemble(mesh, offline.tensors)
    U = solve_sparse((system.matrix, rhs[system.dof_map]))
    return FeFunction.from_dofs(mesh, U, system.dof_map)


def _rel_max(A, B):
    denom = abs(B).max()
    diff = A - B
    num = abs(diff).max() if diff.nnz else 0.0
    return float(num / denom) if denom > 0 else float(num)


def identity_report(mesh, coeff, r, f=None, quad=DEFAULT_QUAD, workers=1, seed=0, offline=None):
    """Deviations of the discrete identities on one configuration, as a flat dict.

    Thresholds are not applied here; see :data:`IDENTITY_THRESHOLDS`.
    """
    f = SourceField.paper_source() if f is None else f
    if offline is None:
        offline = run_offline(mesh, coeff, r, quad=quad, with_basis=True, workers=workers, settings=DIRECT)
    AG = galerkin_stiffness(offline)
    APG = petrov_galerkin_stiffness(offline)
    AP1 = nonintrusive_stiffness(offline)
    pg = solve_msfem_pg(mesh, coeff, f, r, offline=offline, quad=quad)
    ni = solve_nonintrusive(mesh, coeff, f, r, offline=offline, quad=quad)
    expansion = 0.0
    for K in range(mesh.n_triangles):
        dev = verify_expansion(
            offline.basis.for_element(K), offline.correctors.for_element(K), mesh.gradients[K]
        )
        expansion = max(expansion, dev)
    m, M = coeff.bounds
    lower, upper = offline.tensors.bound_margins(m, M)
    plower, pupper = offline.tensors.probe_bounds(m, M, np.random.default_rng(seed))
    sym = offline.tensors.values - offline.tensors.values.transpose(0, 2, 1)
    return {
        "stiffness_galerkin_vs_effective_rel_dev": _rel_max(AG, AP1),
        "stiffness_pg_vs_galerkin_rel_dev": _rel_max(APG, AG),
        "solution_pg_vs_nonintrusive_max_dev": float(np.abs(pg.coarse.values - ni.coarse.values).max()),
        "expansion_max_dev": expansion,
        "tensor_lower_margin": lower,
        "tensor_upper_margin": upper,
        "probe_lower_margin": plower,
        "probe_upper_margin": pupper,
        "tensor_asymmetry": float(np.abs(sym).max()),
        "m": float(m),
        "M": float(M),
    }


def identity_failures(report):
    """Names of report entries that violate their thresholds."""
    bad = [k for k, tol in IDENTITY_THRESHOLDS.items() if not report[k] <= tol]
    bad += [k for k, tol in MARGIN_TOLERANCES.items() if not report[k] >= -tol]
    return bad


@dataclass(frozen=True)
class ErrorRow:
    H_over_eps: float
    err_G_vs_ref: float
    err_G_vs_PG: float
    err_PG_vs_ref: float
    err_P1_vs_ref: float


CSV_COLUMNS = ("H_over_eps", "err_G_ref", "err_G_PG", "err_PG_ref", "err_P1_ref")


@dataclass
class SweepReport:
    rows: list
    H: list
    eps: float
    fitted_slopes: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([getattr(row, name) for row in self.rows])


def fit_slope(H, err):
    """Least-squares slope of log(err) against log(H); nan if any error vanishes."""
    H, err = np.asarray(H, float), np.asarray(err, float)
    if len(H) < 2 or np.any(err <= 0):
        return math.nan
    return float(np.polyfit(np.log(H), np.log(err), 1)[0])


def compare_configuration(coeff, f, n, r, n_ref, reference=None, quad=DEFAULT_QUAD, settings=DIRECT, workers=1):
    """One ErrorRow for coarse n x n with level-r local meshes against an n_ref reference.

    The reference mesh must be nested in, or equal to, the MsFEM global fine
    mesh: n * 2^r has to divide n_ref with a power-of-two quotient.
    """
    fine_n = n * 2**r
    if n_ref % fine_n or (n_ref // fine_n) & (n_ref // fine_n - 1):
        raise InvalidArgumentError(
            f"reference divisions {n_ref} not nested with n={n}, r={r} (n*2^r={fine_n})"
        )
    if reference is None:
        ref_mesh = build_global_fine(build_structured_coarse(n_ref), 0)
        reference = solve_reference(ref_mesh, coeff, f, quad, settings)
    ref_mesh = reference.mesh
    mesh = build_structured_coarse(n)
    off = run_offline(mesh, coeff, r, quad=quad, with_basis=True, workers=workers, settings=settings)
    g = solve_msfem_galerkin(mesh, coeff, f, r, offline=off, quad=quad, settings=settings)
    pg = solve_msfem_pg(mesh, coeff, f, r, offline=off, quad=quad, settings=settings)
    p1 = solve_p1(mesh, coeff, f, quad, settings)
    gf, pgf, p1f = (prolongate(u, ref_mesh) for u in (g.fine, pg.fine, p1))
    eps = coeff.epsilon or math.nan
    row = ErrorRow(
        H_over_eps=(1.0 / n) / eps,
        err_G_vs_ref=h1_norm_diff(gf, reference),
        err_G_vs_PG=h1_norm_diff(gf, pgf),
        err_PG_vs_ref=h1_norm_diff(pgf, reference),
        err_P1_vs_ref=h1_norm_diff(p1f, reference),
    )
    return row, {"galerkin": g, "petrov-galerkin": pg, "p1": p1, "reference": reference, "offline": off}


def gap_sweep(coeff, f, H_list, n_ref, r_rule=None, quad=DEFAULT_QUAD, settings=DIRECT, workers=1):
    """Galerkin vs Petrov-Galerkin vs reference errors for several coarse sizes H = 1/n.

    ``r_rule(n)`` gives the local refinement level; by default each coarse
    element is refined down to the reference spacing 1/n_ref.
    """
    ns = []
    for H in H_list:
        n = round(1.0 / H)
        if n < 2 or abs(n * H - 1.0) > 1e-9:
            raise InvalidArgumentError(f"H={H} is not 1/n for an integer n >= 2")
        ns.append(n)
    if r_rule is None:
        def r_rule(n):
            q = n_ref // n
            if n_ref % n or q & (q - 1):
                raise InvalidArgumentError(f"n={n} does not divide n_ref={n_ref} by a power of two")
            return q.bit_length() - 1
    order = np.argsort(ns, kind="stable")  # increasing n = decreasing H
    ns = [ns[i] for i in order]
    ref_mesh = build_global_fine(build_structured_coarse(n_ref), 0)
    reference = solve_reference(ref_mesh, coeff, f, quad, settings)
    rows = []
    for n in ns:
        row, _ = compare_configuration(coeff, f, n, r_rule(n), n_ref, reference, quad, settings, workers)
        logger.info("n=%d: %s", n, row)
        rows.append(row)
    Hs = [1.0 / n for n in ns]
    report = SweepReport(rows=rows, H=Hs, eps=coeff.epsilon)
    for name in ("err_G_vs_ref", "err_G_vs_PG", "err_PG_vs_ref", "err_P1_vs_ref"):
        report.fitted_slopes[name] = fit_slope(Hs, report.column(name))
    _check_monotone(report)
    return report


def _check_monotone(report):
    eps = report.eps
    if not eps:
        return
    resolved = [(H, row.err_G_vs_ref) for H, row in zip(report.H, report.rows) if H >= 4 * eps]
    for (_, e0), (H1, e1) in zip(resolved, resolved[1:]):
        if e1 > e0:
            warnings.warn(f"Galerkin error increased to {e1:.3e} at H={H1:.4g}", RuntimeWarning, stacklevel=3)


def homogenization_check(a_minus, a_plus, eps_list, n=4, quad=GAUSS3, workers=1, interior_only=True):
    """Effective tensors of a layered medium against the closed-form homogenized matrix.

    Each epsilon gets the smallest refinement level with h <= eps/4. The
    default rule samples the coefficient away from triangle edges because
    the layer interfaces sit on fine mesh lines.
    """
    mesh = build_structured_coarse(n)
    keep = np.arange(mesh.n_triangles)
    if interior_only:
        keep = np.flatnonzero(~mesh.on_domain_boundary[mesh.triangles].any(axis=1))
    rows = []
    for eps in eps_list:
        coeff = CoefficientField.layered(eps, a_minus, a_plus)
        target = coeff.homogenized()
        r = max(0, math.ceil(math.log2(4.0 * mesh.spacing / eps) - 1e-12))
        off = run_offline(mesh, coeff, r, quad=quad, workers=workers)
        T = off.tensors.values[keep]
        dev = np.abs(T - target).max(axis=(1, 2))
        worst = int(np.argmax(dev))
        rel = np.abs(T - target) / np.diag(target).min()
        rel[:, 0, 0] = np.abs(T[:, 0, 0] - target[0, 0]) / target[0, 0]
        rel[:, 1, 1] = np.abs(T[:, 1, 1] - target[1, 1]) / target[1, 1]
        rows.append(
            {
                "epsilon": eps,
                "H_over_eps": mesh.spacing / eps,
                "r": r,
                "a11": T[worst, 0, 0],
                "a12": T[worst, 0, 1],
                "a21": T[worst, 1, 0],
                "a22": T[worst, 1, 1],
                "target_a11": target[0, 0],
                "target_a22": target[1, 1],
                "max_deviation": float(dev.max()),
                "max_rel_deviation": float(rel.max()),
            }
        )
    return rows


def energy_ratio(v_fine, v_coarse):
    """||grad v_H|| / ||grad v_fine||, bounded by M/m."""
    den = h1_seminorm_diff(v_fine)
    return h1_seminorm_diff(v_coarse) / den if den > 0 else 0.0


def row_dict(row):
    d = asdict(row)
    return dict(zip(CSV_COLUMNS, d.values()))
