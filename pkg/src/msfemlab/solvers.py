"""Global solve paths: Galerkin MsFEM, non-intrusive MsFEM, Petrov-Galerkin MsFEM, fine reference.

The non-intrusive path only hands a piecewise constant tensor to an ordinary
coarse P1 assembly and post-processes the result with the correctors. The
Galerkin path assembles the multiscale stiffness and load directly from the
fine-mesh basis functions, so comparing the two is a genuine check rather
than the same computation twice.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from msfemlab.errors import InvalidArgumentError
from msfemlab.fem import (
    DEFAULT_QUAD,
    DIRECT,
    FeFunction,
    assemble,
    check_resolution,
    load_batch,
    load_vector,
    restrict,
    scatter_matrix,
    solve_sparse,
)
from msfemlab.mesh import vertex_map
from msfemlab.offline import run_offline

VARIANTS = ("galerkin", "petrov-galerkin", "nonintrusive", "reference", "p1")


@dataclass(frozen=True, eq=False)
class MsfemSolution:
    coarse: FeFunction | None
    fine: FeFunction
    variant: str
    diagnostics: dict = field(default_factory=dict)


def _residual(A, x, b):
    bn = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return float(r / bn) if bn > 0 else float(r)


def merge_local(global_fine, local):
    """Global fine field from per-element values (nK, n_local).

    A vertex shared by several elements takes its value from the lowest
    element id.
    """
    inj = global_fine.element_injections.ravel()
    ids, first = np.unique(inj, return_index=True)
    if len(ids) != global_fine.n_vertices:
        raise InvalidArgumentError("element injections do not cover the global fine mesh")
    values = np.empty(global_fine.n_vertices)
    values[ids] = np.asarray(local).ravel()[first]
    return FeFunction(global_fine, values)


def reconstruct(coarse, correctors, mesh, global_fine):
    """Oscillatory field u_H + sum_a (d_a u_H)|_K V_K^a on the global fine mesh."""
    if coarse.mesh is not mesh or global_fine.coarse is not mesh:
        raise InvalidArgumentError("coarse field, coarse mesh and global fine mesh do not match")
    V = correctors.stacked() if hasattr(correctors, "stacked") else np.asarray(correctors)
    bary = np.asarray(global_fine.fine_mesh(0).barycentric_coords)
    if V.shape[:2] != global_fine.element_injections.shape:
        raise InvalidArgumentError("correctors do not match the global fine mesh")
    grad = coarse.gradients()
    local = np.einsum("la,ka->kl", bary, coarse.values[mesh.triangles])
    local += np.einsum("kld,kd->kl", V, grad)
    return merge_local(global_fine, local)


def _element_matrices(offline, test):
    """Per-element 3x3 matrices test^T S basis, from the stored fine stiffness."""
    out = np.empty((len(offline.elements), 3, 3))
    for K, e in enumerate(offline.elements):
        left = e.basis if test == "basis" else np.asarray(e.fine.barycentric_coords)
        out[K] = left.T @ (e.stiffness @ e.basis)
    return out


def _coarse_matrix(mesh, local):
    return restrict(scatter_matrix(mesh.triangles, local, mesh.n_vertices), mesh.interior_vertex_ids)


def galerkin_stiffness(offline):
    """Matrix a(phi_i, phi_j) over coarse interior vertices, from fine basis gradients."""
    return _coarse_matrix(offline.mesh, _element_matrices(offline, "basis"))


def petrov_galerkin_stiffness(offline):
    """Matrix a(phi_i, hat_j): multiscale trial, P1 test."""
    return _coarse_matrix(offline.mesh, _element_matrices(offline, "hat"))


def nonintrusive_stiffness(offline):
    """Plain P1 stiffness with the effective tensor."""
    return assemble(offline.mesh, offline.tensors).matrix


def galerkin_load(offline, f, quad=DEFAULT_QUAD):
    """F(phi_j) with the composite rule on the fine triangles of every element."""
    mesh = offline.mesh
    local = np.empty((mesh.n_triangles, 3))
    for K, e in enumerate(offline.elements):
        fine = e.fine
        b = load_batch(fine.triangle_coords, fine.areas, f, quad)
        L = np.bincount(fine.triangles.ravel(), weights=b.ravel(), minlength=fine.n_vertices)
        local[K] = e.basis.T @ L
    full = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return full[mesh.interior_vertex_ids]


def p1_load(mesh, f, quad=DEFAULT_QUAD):
    """F(hat_j) with the rule applied on coarse triangles only."""
    return load_vector(mesh, f, quad)[mesh.interior_vertex_ids]


def _offline_for(mesh, coeff, r, offline, with_basis, quad, settings, workers):
    if offline is not None:
        if offline.mesh is not mesh or offline.r != r:
            raise InvalidArgumentError("offline data computed for a different mesh or level")
        if with_basis and not offline.has_basis:
            raise InvalidArgumentError("offline data lacks the multiscale basis")
        return offline, 0.0
    t0 = time.perf_counter()
    off = run_offline(mesh, coeff, r, quad=quad, with_basis=with_basis, workers=workers, settings=settings)
    return off, time.perf_counter() - t0


def _solve(A, b, settings):
    t0 = time.perf_counter()
    x = solve_sparse((A, b), settings)
    return x, _residual(A, x, b), time.perf_counter() - t0


def solve_msfem_galerkin(mesh, coeff, f, r, offline=None, quad=DEFAULT_QUAD, settings=DIRECT, workers=1):
    """Classical MsFEM: multiscale trial and test functions."""
    off, t_off = _offline_for(mesh, coeff, r, offline, True, quad, settings, workers)
    t0 = time.perf_counter()
    A = galerkin_stiffness(off)
    b = galerkin_load(off, f, quad)
    t_asm = time.perf_counter() - t0
    U, res, t_solve = _solve(A, b, settings)
    coarse = FeFunction.from_dofs(mesh, U)
    t0 = time.perf_counter()
    basis = off.basis.stacked()  # (nK, n_local, 3)
    local = np.einsum("kla,ka->kl", basis, coarse.values[mesh.triangles])
    fine = merge_local(off.global_fine, local)
    diag = {
        "residual": res,
        "time_offline": t_off,
        "time_assemble": t_asm,
        "time_solve": t_solve,
        "time_reconstruct": time.perf_counter() - t0,
    }
    return MsfemSolution(coarse, fine, "galerkin", diag)


def solve_nonintrusive(mesh, coeff, f, r, offline=None, quad=DEFAULT_QUAD, settings=DIRECT, workers=1):
    """Effective-tensor P1 solve on the coarse mesh followed by corrector post-processing."""
    off, t_off = _offline_for(mesh, coeff, r, offline, False, quad, settings, workers)
    t0 = time.perf_counter()
    system = assemble(mesh, off.tensors, f, quad)
    t_asm = time.perf_counter() - t0
    U, res, t_solve = _solve(system.matrix, system.rhs, settings)
    coarse = FeFunction.from_dofs(mesh, U, system.dof_map)
    t0 = time.perf_counter()
    fine = reconstruct(coarse, off.correctors, mesh, off.global_fine)
    diag = {
        "residual": res,
        "time_offline": t_off,
        "time_assemble": t_asm,
        "time_solve": t_solve,
        "time_reconstruct": time.perf_counter() - t0,
    }
    return MsfemSolution(coarse, fine, "nonintrusive", diag)


def solve_msfem_pg(mesh, coeff, f, r, offline=None, quad=DEFAULT_QUAD, settings=DIRECT, workers=1):
    """Petrov-Galerkin MsFEM: multiscale trial functions, P1 test functions."""
    off, t_off = _offline_for(mesh, coeff, r, offline, True, quad, settings, workers)
    t0 = time.perf_counter()
    A = petrov_galerkin_stiffness(off)
    b = p1_load(mesh, f, quad)
    t_asm = time.perf_counter() - t0
    U, res, t_solve = _solve(A, b, settings)
    coarse = FeFunction.from_dofs(mesh, U)
    t0 = time.perf_counter()
    fine = reconstruct(coarse, off.correctors, mesh, off.global_fine)
    diag = {
        "residual": res,
        "time_offline": t_off,
        "time_assemble": t_asm,
        "time_solve": t_solve,
        "time_reconstruct": time.perf_counter() - t0,
    }
    return MsfemSolution(coarse, fine, "petrov-galerkin", diag)


def solve_reference(global_fine, coeff, f, quad=DEFAULT_QUAD, settings=DIRECT):
    """Standard P1 solve on the global fine mesh."""
    check_resolution(global_fine.h, coeff)
    system = assemble(global_fine, coeff, f, quad)
    U = solve_sparse(system, settings)
    return FeFunction.from_dofs(global_fine, U, system.dof_map)


def solve_p1(mesh, coeff, f, quad=DEFAULT_QUAD, settings=DIRECT):
    """Naive P1 solve with the oscillatory coefficient sampled at coarse quadrature points."""
    system = assemble(mesh, coeff, f, quad)
    return FeFunction.from_dofs(mesh, solve_sparse(system, settings), system.dof_map)


def prolongate(u, target):
    """Express a P1 field on a nested finer (or identical) mesh ``target``.

    Nodal evaluation is exact because every target triangle lies inside one
    source triangle.
    """
    if u.mesh is target:
        return u
    if u.mesh.n_vertices == target.n_vertices:
        try:
            return FeFunction(target, u.values[vertex_map(target, u.mesh)])
        except InvalidArgumentError:
            pass
    return FeFunction(target, u.evaluate_many(target.vertices))
