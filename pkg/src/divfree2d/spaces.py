"""Reference-element polynomial bases and global degree-of-freedom maps.

Scalar spaces use the orthonormal Dubiner basis on the unit triangle
(collapsed-coordinate construction, evaluated through normalized Jacobi
polynomials) and shifted Legendre polynomials on the unit segment, so
reference mass matrices are identity matrices and conditioning stays flat
with the degree.

The H(div)-conforming vector basis on the triangle is constructed as the
dual basis of the classical moment functionals: k+1 normal moments per edge
against Legendre polynomials, plus interior moments against gradients and
curls of bubbles.  Facet degrees of freedom are therefore shared between
neighbouring elements up to a sign, and the contravariant Piola map
preserves them exactly, which is what makes the global normal trace
single-valued.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import lgamma, log

import numpy as np
from scipy.special import eval_jacobi

from .mesh import LOCAL_EDGES
from .quadrature import quadrature_rule

MAX_SCALAR_DEGREE = 10
MAX_BDM_DEGREE = 6

# Reference triangle vertices; edge j runs CCW between LOCAL_EDGES[j],
# opposite vertex j.  Outward unit normals and lengths per edge.
REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
_SQ2 = np.sqrt(2.0)
EDGE_NORMALS = np.array([[1.0 / _SQ2, 1.0 / _SQ2], [-1.0, 0.0], [0.0, -1.0]])
EDGE_LENGTHS = np.array([_SQ2, 1.0, 1.0])


def _jacobi_normalized(n, alpha, beta, x):
    """Jacobi polynomial P_n^{alpha,beta} scaled to unit L2 weight-norm on [-1,1]."""
    lognorm = (
        (alpha + beta + 1.0) * log(2.0)
        + lgamma(n + alpha + 1.0)
        + lgamma(n + beta + 1.0)
        - log(2.0 * n + alpha + beta + 1.0)
        - lgamma(n + alpha + beta + 1.0)
        - lgamma(n + 1.0)
    )
    return eval_jacobi(n, alpha, beta, x) * np.exp(-0.5 * lognorm)


def _jacobi_normalized_deriv(n, alpha, beta, x):
    if n == 0:
        return np.zeros_like(x)
    fac = np.sqrt(n * (n + alpha + beta + 1.0))
    return fac * _jacobi_normalized(n - 1, alpha + 1, beta + 1, x)


class ScalarBasis:
    """Orthonormal basis of P^degree on the reference triangle or segment.

    eval() returns values with shape (n_funcs, n_pts); grad() returns
    (n_funcs, n_pts, 2) on the triangle and (n_funcs, n_pts) on the segment.
    Functions are ordered by total degree with the constant first.
    """

    def __init__(self, domain, degree):
        if domain not in ("triangle", "segment"):
            raise ValueError(f"unknown basis domain {domain!r}")
        if not 0 <= degree <= MAX_SCALAR_DEGREE:
            raise ValueError(
                f"scalar basis degree must be in [0, {MAX_SCALAR_DEGREE}], got {degree}"
            )
        self.domain = domain
        self.degree = int(degree)
        if domain == "triangle":
            self.index_pairs = [
                (i, d - i) for d in range(degree + 1) for i in range(d + 1)
            ]
            self.n_funcs = len(self.index_pairs)
        else:
            self.n_funcs = degree + 1

    def eval(self, points):
        if self.domain == "segment":
            return self._eval_segment(points)
        return self._eval_triangle(points)

    def grad(self, points):
        if self.domain == "segment":
            return self._grad_segment(points)
        return self._grad_triangle(points)

    def _eval_segment(self, points):
        t = np.asarray(points, dtype=float).reshape(-1)
        x = 2.0 * t - 1.0
        vals = np.empty((self.n_funcs, t.shape[0]))
        for m in range(self.n_funcs):
            vals[m] = np.sqrt(2.0 * m + 1.0) * eval_jacobi(m, 0.0, 0.0, x)
        return vals

    def _grad_segment(self, points):
        t = np.asarray(points, dtype=float).reshape(-1)
        x = 2.0 * t - 1.0
        grads = np.zeros((self.n_funcs, t.shape[0]))
        for m in range(1, self.n_funcs):
            dP = 0.5 * (m + 1.0) * eval_jacobi(m - 1, 1.0, 1.0, x)
            grads[m] = 2.0 * np.sqrt(2.0 * m + 1.0) * dP
        return grads

    @staticmethod
    def _collapsed(points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        r = 2.0 * pts[:, 0] - 1.0
        s = 2.0 * pts[:, 1] - 1.0
        denom = 1.0 - s
        a = np.where(denom > 1e-14, 2.0 * (1.0 + r) / np.where(denom > 1e-14, denom, 1.0) - 1.0, -1.0)
        return a, s

    def _eval_triangle(self, points):
        a, b = self._collapsed(points)
        vals = np.empty((self.n_funcs, a.shape[0]))
        for n, (i, j) in enumerate(self.index_pairs):
            fa = _jacobi_normalized(i, 0.0, 0.0, a)
            gb = _jacobi_normalized(j, 2.0 * i + 1.0, 0.0, b)
            vals[n] = 2.0 * _SQ2 * fa * gb * (1.0 - b) ** i
        return vals

    def _grad_triangle(self, points):
        a, b = self._collapsed(points)
        grads = np.empty((self.n_funcs, a.shape[0], 2))
        half1mb = 0.5 * (1.0 - b)
        for n, (i, j) in enumerate(self.index_pairs):
            fa = _jacobi_normalized(i, 0.0, 0.0, a)
            dfa = _jacobi_normalized_deriv(i, 0.0, 0.0, a)
            gb = _jacobi_normalized(j, 2.0 * i + 1.0, 0.0, b)
            dgb = _jacobi_normalized_deriv(j, 2.0 * i + 1.0, 0.0, b)
            dr = dfa * gb
            ds = dfa * gb * 0.5 * (1.0 + a)
            if i > 0:
                dr = dr * half1mb ** (i - 1)
                ds = ds * half1mb ** (i - 1)
            tmp = dgb * half1mb**i
            if i > 0:
                tmp = tmp - 0.5 * i * gb * half1mb ** (i - 1)
            ds = ds + fa * tmp
            # 2^(i+1/2) restores the (1-b)^i scaling, the extra 4 is the
            # biunit-to-unit chain rule times the stored factor 2.
            grads[n, :, 0] = 4.0 * 2.0 ** (i + 0.5) * dr
            grads[n, :, 1] = 4.0 * 2.0 ** (i + 0.5) * ds
        return grads


@lru_cache(maxsize=None)
def scalar_basis(domain, degree):
    """Cached orthonormal ScalarBasis factory."""
    return ScalarBasis(domain, degree)


class BDMBasis:
    """Dual basis of the H(div) moment functionals on the reference triangle.

    Local dof ordering: edge-major facet dofs (edge*(k+1) + moment) followed
    by interior dofs.  The normal trace of function (edge j, moment m) along
    edge j equals q_m(t)/|edge j| in the CCW edge parameter t, with q_m the
    orthonormal Legendre polynomial, and vanishes on the other edges.
    """

    def __init__(self, degree):
        if not 1 <= degree <= MAX_BDM_DEGREE:
            raise ValueError(
                f"H(div) basis degree must be in [1, {MAX_BDM_DEGREE}], got {degree}"
            )
        k = int(degree)
        self.degree = k
        self.n_dofs = (k + 1) * (k + 2)
        self.n_edge_dofs = k + 1
        self.n_interior = (k + 1) * (k - 1)
        self._scalar = scalar_basis("triangle", k)
        n_scal = self._scalar.n_funcs
        L = self._moment_matrix(quad_degree=2 * k + 2)
        coeff = np.linalg.solve(L, np.eye(self.n_dofs))
        resid = np.abs(L @ coeff - np.eye(self.n_dofs)).max()
        if resid > 1e-10:
            raise RuntimeError(f"dual basis solve residual {resid:.2e}")
        self.coeff_x = np.ascontiguousarray(coeff[:n_scal])
        self.coeff_y = np.ascontiguousarray(coeff[n_scal:])

    def _moment_matrix(self, quad_degree):
        """Rows: functionals applied to the primal basis (phi_i,0),(0,phi_i)."""
        k = self.degree
        n_scal = self._scalar.n_funcs
        L = np.zeros((self.n_dofs, self.n_dofs))
        seg = quadrature_rule("segment", quad_degree)
        leg = scalar_basis("segment", k).eval(seg.points)
        for j in range(3):
            va = REF_VERTS[LOCAL_EDGES[j][0]]
            vb = REF_VERTS[LOCAL_EDGES[j][1]]
            pts = va[None, :] + seg.points[:, None] * (vb - va)[None, :]
            phi = self._scalar.eval(pts)
            nx, ny = EDGE_NORMALS[j]
            # moment of v.n against q_m, scaled by edge length
            mom = EDGE_LENGTHS[j] * (leg * seg.weights) @ phi.T
            rows = slice(j * (k + 1), (j + 1) * (k + 1))
            L[rows, :n_scal] = nx * mom
            L[rows, n_scal:] = ny * mom
        if self.n_interior:
            tri = quadrature_rule("triangle", quad_degree)
            phi = self._scalar.eval(tri.points)
            weights = self._interior_weights(tri.points)
            mom_x = (weights[:, :, 0] * tri.weights) @ phi.T
            mom_y = (weights[:, :, 1] * tri.weights) @ phi.T
            rows = slice(3 * (k + 1), self.n_dofs)
            L[rows, :n_scal] = mom_x
            L[rows, n_scal:] = mom_y
        return L

    def _interior_weights(self, points):
        """Weight fields for the interior moments: grad P^{k-1} and curl(b P^{k-2})."""
        k = self.degree
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        fields = []
        grads = scalar_basis("triangle", k - 1).grad(pts)
        for i in range(1, grads.shape[0]):
            fields.append(grads[i])
        if k >= 2:
            bub = x * y * (1.0 - x - y)
            bub_x = y * (1.0 - 2.0 * x - y)
            bub_y = x * (1.0 - x - 2.0 * y)
            qb = scalar_basis("triangle", k - 2)
            qv = qb.eval(pts)
            qg = qb.grad(pts)
            for i in range(qv.shape[0]):
                wx = bub_y * qv[i] + bub * qg[i, :, 1]
                wy = -(bub_x * qv[i] + bub * qg[i, :, 0])
                fields.append(np.column_stack([wx, wy]))
        return np.asarray(fields)

    def eval(self, points):
        """Reference values, shape (n_dofs, n_pts, 2)."""
        phi = self._scalar.eval(points)
        vals = np.empty((self.n_dofs, phi.shape[1], 2))
        vals[:, :, 0] = self.coeff_x.T @ phi
        vals[:, :, 1] = self.coeff_y.T @ phi
        return vals

    def div(self, points):
        """Reference divergences, shape (n_dofs, n_pts)."""
        g = self._scalar.grad(points)
        return self.coeff_x.T @ g[:, :, 0] + self.coeff_y.T @ g[:, :, 1]


@lru_cache(maxsize=None)
def bdm_basis(degree):
    """Cached BDMBasis factory."""
    return BDMBasis(degree)


def piola_push(basis, amap, points):
    """Push reference basis values to a physical element.

    Contravariant map v_phys = B v_ref / det(B): preserves the normal
    moments on edges so facet dofs glue across elements.  Values come back
    as (n_dofs, n_pts, 2) and divergences, scaled by 1/det(B), as
    (n_dofs, n_pts).
    """
    vals = basis.eval(points)
    divs = basis.div(points)
    pushed = np.einsum("cb,ipb->ipc", amap.B, vals) / amap.det
    return pushed, divs / amap.det


@dataclass(frozen=True)
class DofMap:
    """Global dof layout for one discrete space on one mesh.

    element_dofs has one row of global indices per element; signs carries
    the +-1 orientation factors turning global dof values into local
    coefficients (identity for the fully discontinuous spaces).  facet_dofs
    is set for the facet multiplier space only.
    """

    kind: str
    degree: int
    n_dofs: int
    n_local: int
    element_dofs: np.ndarray = None
    signs: np.ndarray = None
    facet_dofs: np.ndarray = None


def build_dofmap(kind, mesh, degree):
    """Dof maps for the four discrete spaces.

    kind: "vdg" (vector DG, 2 components x scalar basis), "q" (scalar DG),
    "m" (facet multipliers, degree+1 dofs per facet), "bdm" (H(div):
    shared facet dofs with orientation signs, then private interior dofs).
    """
    nt = mesh.num_triangles
    if kind == "vdg":
        n_scal = (degree + 1) * (degree + 2) // 2
        n_local = 2 * n_scal
        dofs = np.arange(nt * n_local, dtype=np.int64).reshape(nt, n_local)
        return DofMap("vdg", degree, nt * n_local, n_local, dofs,
                      np.ones((nt, n_local)))
    if kind == "q":
        n_local = (degree + 1) * (degree + 2) // 2
        dofs = np.arange(nt * n_local, dtype=np.int64).reshape(nt, n_local)
        return DofMap("q", degree, nt * n_local, n_local, dofs,
                      np.ones((nt, n_local)))
    facets = mesh.facets
    nf = facets.n_facets
    if kind == "m":
        n_local = degree + 1
        dofs = np.arange(nf * n_local, dtype=np.int64).reshape(nf, n_local)
        return DofMap("m", degree, nf * n_local, n_local, facet_dofs=dofs)
    if kind == "bdm":
        k = degree
        n_edge = k + 1
        n_int = (k + 1) * (k - 1)
        n_local = 3 * n_edge + n_int
        n_dofs = nf * n_edge + nt * n_int
        dofs = np.empty((nt, n_local), dtype=np.int64)
        signs = np.ones((nt, n_local))
        parity = np.array([(-1.0) ** m for m in range(n_edge)])
        for e in range(nt):
            for le in range(3):
                f = facets.elem_facet[e, le]
                side = facets.elem_side[e, le]
                cols = slice(le * n_edge, (le + 1) * n_edge)
                dofs[e, cols] = f * n_edge + np.arange(n_edge)
                side_sign = 1.0 if side == 0 else -1.0
                flip = facets.left_flip[f] if side == 0 else facets.right_flip[f]
                signs[e, cols] = side_sign * (parity if flip else 1.0)
            dofs[e, 3 * n_edge:] = nf * n_edge + e * n_int + np.arange(n_int)
        return DofMap("bdm", degree, n_dofs, n_local, dofs, signs)
    raise ValueError(f"unknown dof map kind {kind!r}")


def project_dg(f, degree, mesh, quad_degree=None):
    """Elementwise L2 projection of a vector field onto broken [P^degree]^2.

    f is called as f(x, y) with flat coordinate arrays and must return
    something broadcastable to shape (2, n).  Returns coefficients with
    shape (num_triangles, 2, n_scalar_basis).
    """
    if quad_degree is None:
        quad_degree = 2 * degree + 4
    rule = quadrature_rule("triangle", quad_degree)
    basis = scalar_basis("triangle", degree)
    phi = basis.eval(rule.points)
    gram = (phi * rule.weights) @ phi.T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise RuntimeError(f"singular local mass matrix, cond {cond:.2e}")
    geo = mesh.geometry
    pts = geo.push(rule.points)
    fx = np.asarray(f(pts[:, :, 0].ravel(), pts[:, :, 1].ravel()), dtype=float)
    fx = np.broadcast_to(fx, (2, pts.shape[0] * pts.shape[1]))
    fx = fx.reshape(2, pts.shape[0], pts.shape[1])
    # detB cancels against the orthonormal reference mass detB * gram
    rhs = np.einsum("ceq,iq,q->eci", fx, phi, rule.weights)
    coeffs = np.linalg.solve(gram, rhs.reshape(-1, basis.n_funcs).T).T
    return np.ascontiguousarray(coeffs.reshape(mesh.num_triangles, 2, basis.n_funcs))


def bdm_to_vdg(coeffs, dofmap, mesh):
    """Expand global H(div) dof values into broken vector DG coefficients.

    Exact embedding: with v_ref = sum_d c_d psi_d and the Piola map,
    component c of the physical field is sum_i (B[c,:] @ C[:, d] c_d / det)
    phi_i, so the result reproduces the field to round-off.
    """
    basis = bdm_basis(dofmap.degree)
    local = coeffs[dofmap.element_dofs] * dofmap.signs
    ux = local @ basis.coeff_x.T
    uy = local @ basis.coeff_y.T
    geo = mesh.geometry
    out = np.empty((mesh.num_triangles, 2, ux.shape[1]))
    for c in range(2):
        out[:, c, :] = (geo.B[:, c, 0, None] * ux + geo.B[:, c, 1, None] * uy)
    out /= geo.det[:, None, None]
    return out
