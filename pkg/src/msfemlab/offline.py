"""Per-element fine-scale problems: correctors, effective tensors, multiscale basis.

Every coarse element K is refined into its own fine mesh. On it we solve,
with zero trace on the boundary of K,

    find V_a:  a_K(V_a, w) = -a_K(x_a, w)   for all interior fine hats w,

for a = 1, 2, and optionally the discrete harmonic extensions of the three
coarse hat functions. All right-hand sides share one factorization of the
local interior stiffness matrix. Elements are independent and may be
processed concurrently; results are keyed by element id, so the output does
not depend on the number of workers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from msfemlab.errors import MsfemError, SolverFailure
from msfemlab.fem import (
    DEFAULT_QUAD,
    DIRECT,
    FeFunction,
    check_resolution,
    factorize,
    scatter_matrix,
    scatter_vector,
    solve_sparse,
    stiffness_batch,
    triangle_tensors,
)
from msfemlab.mesh import build_global_fine, refine_element

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EffectiveTensor:
    """Piecewise constant 2x2 tensor, one matrix per coarse element."""

    values: np.ndarray

    def __getitem__(self, K):
        return self.values[K]

    def __len__(self):
        return len(self.values)

    def lower_eigenvalues(self):
        sym = 0.5 * (self.values + self.values.transpose(0, 2, 1))
        return np.linalg.eigvalsh(sym)[:, 0]

    def max_singular_values(self):
        return np.linalg.norm(self.values, ord=2, axis=(1, 2))

    def bound_margins(self, m, M):
        """(min over K of lambda_min(sym A_K) - m, M(1 + M/m) - max over K of |A_K|_2).

        Both margins are non-negative when the uniform bounds hold.
        """
        lower = float(self.lower_eigenvalues().min() - m)
        upper = float(M * (1.0 + M / m) - self.max_singular_values().max())
        return lower, upper

    def probe_bounds(self, m, M, rng, n_probes=100):
        """Check the bounds on random unit vectors; returns the worst margins."""
        nK = len(self.values)
        xi = rng.standard_normal((nK, n_probes, 2))
        eta = rng.standard_normal((nK, n_probes, 2))
        xi /= np.linalg.norm(xi, axis=2, keepdims=True)
        eta /= np.linalg.norm(eta, axis=2, keepdims=True)
        Axi = np.einsum("kij,kpj->kpi", self.values, xi)
        lower = np.einsum("kpi,kpi->kp", xi, Axi) - m
        upper = M * (1.0 + M / m) - np.abs(np.einsum("kpi,kpi->kp", eta, Axi))
        return float(lower.min()), float(upper.min())


@dataclass(frozen=True, eq=False)
class ElementOffline:
    """Everything computed on one coarse element."""

    fine: object
    stiffness: object
    correctors: np.ndarray
    tensor: np.ndarray
    basis: np.ndarray | None = None


class CorrectorSet:
    """Correctors V_K^1, V_K^2 of every element, as values on the element fine meshes."""

    def __init__(self, elements):
        self._elements = elements

    def __len__(self):
        return len(self._elements)

    def values(self, K):
        """Array (n_local_vertices, 2)."""
        return self._elements[K].correctors

    def for_element(self, K):
        e = self._elements[K]
        return FeFunction(e.fine, e.correctors[:, 0]), FeFunction(e.fine, e.correctors[:, 1])

    def stacked(self):
        return np.stack([e.correctors for e in self._elements])


class MultiscaleBasisLocal:
    """The three local multiscale basis functions of every element."""

    def __init__(self, elements):
        self._elements = elements

    def __len__(self):
        return len(self._elements)

    def values(self, K):
        """Array (n_local_vertices, 3); column a belongs to local coarse vertex a."""
        return self._elements[K].basis

    def for_element(self, K):
        e = self._elements[K]
        return tuple(FeFunction(e.fine, e.basis[:, a]) for a in range(3))

    def stacked(self):
        return np.stack([e.basis for e in self._elements])


def _local_operator(fine, coeff, quad):
    tensors = triangle_tensors(fine.triangle_coords, coeff, quad)
    S = scatter_matrix(fine.triangles, stiffness_batch(fine.areas, fine.gradients, tensors), fine.n_vertices)
    return S, tensors


def _corrector_loads(fine, tensors):
    # b_a[j] = -sum_T |T| grad(phi_j) . A_T e_a
    local = -fine.areas[:, None, None] * np.einsum("tjd,tda->tja", fine.gradients, tensors)
    return np.stack(
        [scatter_vector(fine.triangles, local[:, :, a], fine.n_vertices) for a in range(2)], axis=1
    )


def _solve_interior(S, rhs, fine, settings):
    I = fine.interior_vertex_ids
    A = S[I][:, I]
    if settings.resolve(len(I)) == "direct":
        return factorize(A)(rhs)
    return np.stack([solve_sparse((A, rhs[:, k]), settings) for k in range(rhs.shape[1])], axis=1)


def _tensor_from_correctors(fine, tensors, V, area):
    gV = np.einsum("tal,tad->tld", V[fine.triangles], fine.gradients)  # (T, alpha, d)
    G = np.eye(2) + gV.transpose(0, 2, 1)  # column alpha is e_alpha + grad V_alpha
    return np.einsum("t,tdb,tde,tea->ba", fine.areas, G, tensors, G) / area


def solve_correctors(fine, coeff, quad=DEFAULT_QUAD, settings=DIRECT):
    """Correctors (V_K^1, V_K^2) on the fine mesh of one coarse element."""
    S, tensors = _local_operator(fine, coeff, quad)
    V = np.zeros((fine.n_vertices, 2))
    V[fine.interior_vertex_ids] = _solve_interior(S, _corrector_loads(fine, tensors)[fine.interior_vertex_ids], fine, settings)
    return FeFunction(fine, V[:, 0]), FeFunction(fine, V[:, 1])


def effective_tensor(correctors, coeff, quad=DEFAULT_QUAD):
    """Mean of (e_b + grad V_b) . A (e_a + grad V_a) over the element, as a 2x2 matrix."""
    fine = correctors[0].mesh
    tensors = triangle_tensors(fine.triangle_coords, coeff, quad)
    V = np.stack([c.values for c in correctors], axis=1)
    return _tensor_from_correctors(fine, tensors, V, fine.areas.sum())


def multiscale_basis_local(fine, coeff, quad=DEFAULT_QUAD, settings=DIRECT):
    """Discrete A-harmonic extensions of the three coarse hats into the element."""
    S, _ = _local_operator(fine, coeff, quad)
    hats = np.array(fine.barycentric_coords)
    I, B = fine.interior_vertex_ids, fine.boundary_vertex_ids
    phi = hats.copy()
    phi[I] = _solve_interior(S, -(S[I][:, B] @ hats[B]), fine, settings)
    return tuple(FeFunction(fine, phi[:, a]) for a in range(3))


def verify_expansion(basis, correctors, hat_gradients):
    """Largest deviation between each basis function and hat + sum_a (d_a hat) V_a.

    ``hat_gradients`` is the (3, 2) array of coarse hat gradients on the element.
    """
    fine = basis[0].mesh
    hats = np.asarray(fine.barycentric_coords)
    V = np.stack([c.values for c in correctors], axis=1)
    expansion = hats + V @ np.asarray(hat_gradients).T
    phi = np.stack([b.values for b in basis], axis=1)
    return float(np.abs(phi - expansion).max())


def solve_element(mesh, K, coeff, r, quad=DEFAULT_QUAD, settings=DIRECT, with_basis=False):
    """Correctors, effective tensor and (optionally) multiscale basis of element K."""
    fine = refine_element(mesh, K, r)
    S, tensors = _local_operator(fine, coeff, quad)
    I, B = fine.interior_vertex_ids, fine.boundary_vertex_ids
    rhs = _corrector_loads(fine, tensors)[I]
    if with_basis:
        hats = np.asarray(fine.barycentric_coords)
        rhs = np.concatenate([rhs, -(S[I][:, B] @ hats[B])], axis=1)
    try:
        X = _solve_interior(S, rhs, fine, settings)
    except SolverFailure as exc:
        raise SolverFailure(f"element {K}: {exc}", residual=exc.residual, element=K) from exc
    except MsfemError as exc:
        raise type(exc)(f"element {K}: {exc}") from exc
    V = np.zeros((fine.n_vertices, 2))
    V[I] = X[:, :2]
    basis = None
    if with_basis:
        basis = hats.copy()
        basis[I] = X[:, 2:]
    tensor = _tensor_from_correctors(fine, tensors, V, mesh.areas[K])
    return ElementOffline(fine=fine, stiffness=S, correctors=V, tensor=tensor, basis=basis)


@dataclass(frozen=True, eq=False)
class OfflineResult:
    mesh: object
    coeff: object
    r: int
    quad: object
    elements: list

    @property
    def correctors(self):
        return CorrectorSet(self.elements)

    @cached_property
    def tensors(self):
        return EffectiveTensor(np.stack([e.tensor for e in self.elements]))

    @property
    def has_basis(self):
        return all(e.basis is not None for e in self.elements)

    @property
    def basis(self):
        return MultiscaleBasisLocal(self.elements) if self.has_basis else None

    @cached_property
    def global_fine(self):
        return build_global_fine(self.mesh, self.r)


def run_offline(mesh, coeff, r, quad=DEFAULT_QUAD, with_basis=False, workers=1, settings=DIRECT):
    """Solve the local problems of every coarse element.

    Elements are dispatched to ``workers`` threads; the first failing element
    aborts the run and its id is carried by the raised error.
    """
    check_resolution(mesh.spacing / 2**r, coeff)

    def work(K):
        return solve_element(mesh, K, coeff, r, quad, settings, with_basis)

    ids = range(mesh.n_triangles)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            elements = list(pool.map(work, ids))
    else:
        elements = [work(K) for K in ids]
    logger.debug("offline phase done: %d elements, r=%d", len(elements), r)
    return OfflineResult(mesh=mesh, coeff=coeff, r=r, quad=quad, elements=elements)
