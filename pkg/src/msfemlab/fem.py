"""P1 finite element primitives on triangle meshes.

Coefficients and sources come from a small catalog. Every integral that
involves the coefficient is a sum of per-triangle quadrature, so applying
a rule on the fine mesh resolves the oscillations while the same rule on a
coarse mesh gives the naive single-scale discretization.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from msfemlab.errors import (
    InvalidArgumentError,
    NumericError,
    ResolutionWarning,
    SolverFailure,
)
from msfemlab.mesh import triangle_geometry

logger = logging.getLogger(__name__)

DIRECT_LIMIT = 1_000_000


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on a triangle: barycentric points and weights summing to one."""

    name: str
    points: np.ndarray
    weights: np.ndarray
    degree: int


CENTROID = QuadratureRule("centroid", np.full((1, 3), 1.0 / 3.0), np.ones(1), 1)
EDGE_MIDPOINT = QuadratureRule(
    "edge-midpoint",
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.full(3, 1.0 / 3.0),
    2,
)
# Strang-Fix interior rule; same degree as EDGE_MIDPOINT but never samples on
# an edge, which matters for coefficients that jump across mesh lines
GAUSS3 = QuadratureRule(
    "gauss3",
    np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
    np.full(3, 1.0 / 3.0),
    2,
)
QUADRATURE_RULES = {q.name: q for q in (CENTROID, EDGE_MIDPOINT, GAUSS3)}
DEFAULT_QUAD = EDGE_MIDPOINT


@dataclass(frozen=True)
class CoefficientField:
    """Diffusion tensor A(x) from the catalog, with ellipticity bounds (m, M).

    Use the constructors :meth:`constant_scalar`, :meth:`constant_matrix`,
    :meth:`paper_periodic` and :meth:`layered` rather than instantiating
    directly.
    """

    kind: str
    params: dict = field(default_factory=dict)
    bounds: tuple = (1.0, 1.0)

    @classmethod
    def constant_scalar(cls, c=1.0):
        if c <= 0:
            raise InvalidArgumentError(f"coefficient must be positive, got {c}")
        return cls("constant-scalar", {"c": float(c)}, (float(c), float(c)))

    @classmethod
    def constant_matrix(cls, matrix):
        C = np.array(matrix, dtype=float).reshape(2, 2)
        m = float(np.linalg.eigvalsh(0.5 * (C + C.T)).min())
        if m <= 0:
            raise InvalidArgumentError("constant matrix is not uniformly elliptic")
        M = float(np.linalg.norm(C, 2))
        return cls("constant-matrix", {"matrix": C}, (m, M))

    @classmethod
    def paper_periodic(cls, eps, amplitude=100.0):
        """(1 + amplitude cos^2(pi x1/eps) sin^2(pi x2/eps)) Id."""
        if eps <= 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {eps}")
        if amplitude < 0:
            raise InvalidArgumentError("amplitude must be non-negative")
        return cls(
            "paper-periodic",
            {"eps": float(eps), "amplitude": float(amplitude)},
            (1.0, 1.0 + float(amplitude)),
        )

    @classmethod
    def layered(cls, eps, a_minus, a_plus):
        """a(x1) Id, equal to a_minus on [0, eps/2) and a_plus on [eps/2, eps), eps-periodic."""
        if eps <= 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {eps}")
        if min(a_minus, a_plus) <= 0:
            raise InvalidArgumentError("layer values must be positive")
        lo, hi = sorted((float(a_minus), float(a_plus)))
        return cls(
            "layered",
            {"eps": float(eps), "a_minus": float(a_minus), "a_plus": float(a_plus)},
            (lo, hi),
        )

    @property
    def epsilon(self):
        return self.params.get("eps")

    @property
    def is_symmetric(self):
        if self.kind == "constant-matrix":
            C = self.params["matrix"]
            return bool(np.allclose(C, C.T, rtol=0, atol=1e-15))
        return True

    def scalar(self, x):
        """Scalar profile for isotropic kinds; ``x`` has shape (..., 2)."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "constant-scalar":
            return np.full(x.shape[:-1], p["c"])
        if self.kind == "paper-periodic":
            eps, amp = p["eps"], p["amplitude"]
            return 1.0 + amp * np.cos(np.pi * x[..., 0] / eps) ** 2 * np.sin(np.pi * x[..., 1] / eps) ** 2
        if self.kind == "layered":
            t = np.mod(x[..., 0] / p["eps"], 1.0)
            return np.where(t < 0.5, p["a_minus"], p["a_plus"])
        raise InvalidArgumentError(f"coefficient kind {self.kind!r} is not isotropic")

    def __call__(self, x):
        """Tensor values at points ``x`` (..., 2); returns (..., 2, 2)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "constant-matrix":
            return np.broadcast_to(self.params["matrix"], x.shape[:-1] + (2, 2)).copy()
        return self.scalar(x)[..., None, None] * np.eye(2)

    def homogenized(self):
        """Closed-form homogenized matrix where one exists (constant and layered kinds)."""
        if self.kind == "layered":
            a, b = self.params["a_minus"], self.params["a_plus"]
            return np.diag([2.0 / (1.0 / a + 1.0 / b), 0.5 * (a + b)])
        if self.kind.startswith("constant"):
            return self(np.zeros(2))
        raise InvalidArgumentError(f"no closed-form homogenized matrix for {self.kind!r}")


@dataclass(frozen=True)
class SourceField:
    """Right-hand side f(x) from the catalog; none of them oscillate."""

    kind: str
    params: dict = field(default_factory=dict)

    @classmethod
    def constant(cls, c=1.0):
        return cls("constant", {"c": float(c)})

    @classmethod
    def paper_source(cls):
        """sin(x1) cos(x2)."""
        return cls("paper-source")

    @classmethod
    def manufactured(cls, k=1):
        """2 k^2 pi^2 sin(k pi x1) sin(k pi x2), whose Laplace solution is known."""
        return cls("manufactured", {"k": int(k)})

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape[:-1], self.params["c"])
        if self.kind == "paper-source":
            return np.sin(x[..., 0]) * np.cos(x[..., 1])
        if self.kind == "manufactured":
            k = self.params["k"]
            return 2 * k**2 * np.pi**2 * np.sin(k * np.pi * x[..., 0]) * np.sin(k * np.pi * x[..., 1])
        raise InvalidArgumentError(f"unknown source kind {self.kind!r}")

    def exact_solution(self, x):
        """Solution of -Laplace(u) = f with zero boundary values (manufactured only)."""
        if self.kind != "manufactured":
            raise InvalidArgumentError("exact solution only known for the manufactured source")
        k = self.params["k"]
        x = np.asarray(x, dtype=float)
        return np.sin(k * np.pi * x[..., 0]) * np.sin(k * np.pi * x[..., 1])

    @property
    def is_zero(self):
        return self.kind == "constant" and self.params["c"] == 0.0


def quadrature_points(coords, quad):
    """Physical quadrature points, shape (T, q, 2), for triangles (T, 3, 2)."""
    return np.einsum("qa,tad->tqd", quad.points, coords)


def triangle_tensors(coords, coeff, quad=DEFAULT_QUAD):
    """Quadrature-weighted mean of the coefficient on each triangle, shape (T, 2, 2).

    For P1 functions the gradients are constant per triangle, so the element
    stiffness only needs this averaged tensor.
    """
    vals = coeff(quadrature_points(coords, quad))
    return np.einsum("q,tqij->tij", quad.weights, vals)


def _tensors_for(mesh, coeff, quad):
    if isinstance(coeff, CoefficientField):
        return triangle_tensors(mesh.triangle_coords, coeff, quad)
    # piecewise constant per-triangle field (e.g. an EffectiveTensor)
    vals = np.asarray(getattr(coeff, "values", coeff), dtype=float)
    if vals.shape != (mesh.n_triangles, 2, 2):
        raise InvalidArgumentError(
            f"piecewise constant coefficient has shape {vals.shape}, expected ({mesh.n_triangles}, 2, 2)"
        )
    return vals


def stiffness_batch(areas, grads, tensors):
    """Element matrices K[t, j, i] = |T| grad(phi_j) . A_t grad(phi_i)."""
    return areas[:, None, None] * np.einsum("tjd,tde,tie->tji", grads, tensors, grads)


def load_batch(coords, areas, f, quad=DEFAULT_QUAD):
    """Element load vectors b[t, j] = |T| sum_q w_q f(x_q) phi_j(x_q)."""
    fx = f(quadrature_points(coords, quad))
    return areas[:, None] * np.einsum("q,tq,qj->tj", quad.weights, fx, quad.points)


def element_stiffness(triangle, coeff, quad=DEFAULT_QUAD):
    """3x3 stiffness matrix of one triangle given by its three vertices."""
    coords = np.asarray(triangle, dtype=float).reshape(1, 3, 2)
    areas, grads = triangle_geometry(coords)
    return stiffness_batch(areas, grads, triangle_tensors(coords, coeff, quad))[0]


def element_load(triangle, f, quad=DEFAULT_QUAD):
    coords = np.asarray(triangle, dtype=float).reshape(1, 3, 2)
    areas, _ = triangle_geometry(coords)
    return load_batch(coords, areas, f, quad)[0]


def scatter_matrix(triangles, local, n):
    """Sum element matrices (T, 3, 3) into an n-by-n CSR matrix."""
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def scatter_vector(triangles, local, n):
    return np.bincount(triangles.ravel(), weights=local.ravel(), minlength=n)


def stiffness_matrix(mesh, coeff, quad=DEFAULT_QUAD):
    """Full stiffness matrix over all mesh vertices (no boundary elimination)."""
    K = stiffness_batch(mesh.areas, mesh.gradients, _tensors_for(mesh, coeff, quad))
    return scatter_matrix(mesh.triangles, K, mesh.n_vertices)


def load_vector(mesh, f, quad=DEFAULT_QUAD):
    b = load_batch(mesh.triangle_coords, mesh.areas, f, quad)
    return scatter_vector(mesh.triangles, b, mesh.n_vertices)


@dataclass
class SparseSystem:
    """Linear system over the interior (free) vertices of a mesh."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dof_map: np.ndarray
    symmetric: bool = True

    def asymmetry(self):
        d = self.matrix - self.matrix.T
        return float(abs(d).max()) if d.nnz else 0.0


def restrict(A, dofs):
    A = A[dofs][:, dofs].tocsr()
    A.sort_indices()
    return A


def assemble(mesh, coeff, f=None, quad=DEFAULT_QUAD):
    """Assemble the homogeneous Dirichlet P1 system on ``mesh``.

    ``coeff`` is a :class:`CoefficientField` or a per-triangle tensor array.
    ``f=None`` gives a zero right-hand side.
    """
    dofs = np.asarray(mesh.interior_vertex_ids)
    A = restrict(stiffness_matrix(mesh, coeff, quad), dofs)
    rhs = np.zeros(len(dofs)) if f is None else load_vector(mesh, f, quad)[dofs]
    symmetric = coeff.is_symmetric if isinstance(coeff, CoefficientField) else None
    if symmetric is None:
        vals = np.asarray(getattr(coeff, "values", coeff))
        symmetric = bool(np.allclose(vals, vals.transpose(0, 2, 1), rtol=0, atol=1e-12))
    return SparseSystem(A, rhs, dofs, symmetric)


@dataclass(frozen=True)
class SolverSettings:
    """``method`` is 'auto', 'direct' or 'cg'; ``tol``/``maxit`` apply to cg."""

    method: str = "auto"
    tol: float = 1e-12
    maxit: int | None = None

    def resolve(self, n):
        if self.method == "auto":
            return "direct" if n <= DIRECT_LIMIT else "cg"
        if self.method not in ("direct", "cg"):
            raise InvalidArgumentError(f"unknown solver method {self.method!r}")
        return self.method


DIRECT = SolverSettings("direct")


def factorize(A):
    """Symmetric-mode sparse LU without pivoting; returns a solve callable.

    With diagonal pivots only, the LU of a symmetric matrix carries the
    LDL^T pivots on U's diagonal, so a non-positive pivot means the matrix
    is not positive definite.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] == 0:
        return lambda b: np.zeros_like(np.asarray(b, dtype=float))
    try:
        lu = spla.splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise NumericError(f"factorization failed: {exc}") from exc
    if not np.all(lu.U.diagonal() > 0):
        raise NumericError("matrix is not symmetric positive definite")
    return lu.solve


def _cg(A, b, tol, maxit):
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    d = A.diagonal()
    M = sp.diags(1.0 / d)
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxit, M=M)
    res = np.linalg.norm(A @ x - b) / bnorm
    if info != 0 or res > tol:
        raise SolverFailure(f"cg did not converge: relative residual {res:.3e} > {tol:.1e}", residual=res)
    return x


def solve_sparse(system, settings=DIRECT):
    """Solve ``system`` (a SparseSystem or an ``(A, b)`` pair)."""
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs
    else:
        A, b = system
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise InvalidArgumentError(f"shape mismatch: matrix {A.shape}, rhs {b.shape}")
    method = settings.resolve(A.shape[0])
    if method == "cg":
        maxit = settings.maxit if settings.maxit is not None else 10 * A.shape[0] + 100
        return _cg(sp.csr_matrix(A), b, settings.tol, maxit)
    return factorize(A)(b)


@dataclass(frozen=True, eq=False)
class FeFunction:
    """P1 field: one value per vertex of ``mesh``."""

    mesh: object
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_vertices,):
            raise InvalidArgumentError(f"expected {self.mesh.n_vertices} values, got {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, mesh):
        return cls(mesh, np.zeros(mesh.n_vertices))

    @classmethod
    def interpolate(cls, mesh, func):
        return cls(mesh, np.asarray(func(mesh.vertices), dtype=float))

    @classmethod
    def from_dofs(cls, mesh, dof_values, dof_map=None):
        """Scatter interior values into a field that is zero on the boundary."""
        v = np.zeros(mesh.n_vertices)
        v[mesh.interior_vertex_ids if dof_map is None else dof_map] = dof_values
        return cls(mesh, v)

    @property
    def dofs(self):
        return self.values[self.mesh.interior_vertex_ids]

    def evaluate(self, p):
        tri, lam = self.mesh.locate_point(p)
        return float(lam @ self.values[self.mesh.triangles[tri]])

    def evaluate_many(self, points):
        tri, lam = self.mesh.locate_points(points)
        return np.einsum("pa,pa->p", lam, self.values[self.mesh.triangles[tri]])

    def gradients(self):
        """Constant gradient on every triangle, shape (T, 2)."""
        return np.einsum("ta,tad->td", self.values[self.mesh.triangles], self.mesh.gradients)

    def gradient_in_element(self, K):
        return self.gradients()[K]

    def __sub__(self, other):
        _check_same_mesh(self, other)
        return FeFunction(self.mesh, self.values - other.values)


def _check_same_mesh(u, v):
    if u.mesh is v.mesh:
        return
    a, b = u.mesh, v.mesh
    if a.vertices.shape == b.vertices.shape and a.triangles.shape == b.triangles.shape:
        if np.array_equal(a.triangles, b.triangles) and np.array_equal(a.vertices, b.vertices):
            return
    raise InvalidArgumentError("fields live on different meshes")


def _diff(u, v):
    if v is None:
        return u.values
    _check_same_mesh(u, v)
    return u.values - v.values


def h1_seminorm_diff(u, v=None):
    """|u - v|_{H^1}, integrated exactly for P1 fields on a common mesh."""
    e = _diff(u, v)
    g = np.einsum("ta,tad->td", e[u.mesh.triangles], u.mesh.gradients)
    return float(np.sqrt(np.sum(u.mesh.areas * np.einsum("td,td->t", g, g))))


def l2_norm_diff(u, v=None):
    """||u - v||_{L^2} with the exact P1 mass matrix."""
    e = _diff(u, v)[u.mesh.triangles]
    # element mass matrix |T|/12 (1 + delta_ij)
    local = u.mesh.areas / 12.0 * (np.sum(e * e, axis=1) + np.sum(e, axis=1) ** 2)
    return float(np.sqrt(max(local.sum(), 0.0)))


def h1_norm_diff(u, v=None):
    return float(np.hypot(l2_norm_diff(u, v), h1_seminorm_diff(u, v)))


def check_resolution(h, coeff):
    """Warn when the fine mesh size exceeds a quarter of the oscillation period."""
    eps = coeff.epsilon if isinstance(coeff, CoefficientField) else None
    if eps is not None and h > eps / 4.0 * (1.0 + 1e-12):
        warnings.warn(
            f"fine mesh size h={h:.4g} exceeds eps/4={eps / 4:.4g}; oscillations may be under-resolved",
            ResolutionWarning,
            stacklevel=2,
        )
        return False
    return True
