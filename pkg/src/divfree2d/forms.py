"""Variational forms for the explicit divergence-free DG flow solver.

The velocity state lives in the broken vector space [P^k]^2 per element,
stored as coefficients of the orthonormal scalar basis per component, so
the mass matrix is block diagonal (a detB multiple of the identity per
element, computed rather than assumed).  The upwind convective form and
the symmetric interior penalty viscous form are applied matrix free from
precontracted reference tensors and facet trace tables; the divergence and
facet trace couplings of the constrained mass solve are assembled once per
(mesh, degree) and reused by the solver across all stages.
"""

from dataclasses import dataclass
from weakref import WeakKeyDictionary

import numpy as np
import scipy.sparse as sp

from .quadrature import quadrature_rule
from .spaces import scalar_basis


@dataclass
class StateVector:
    """Velocity coefficients (num_triangles, 2, n_scalar) plus metadata."""

    coeffs: np.ndarray
    degree: int
    mesh: object
    t: float = 0.0

    @property
    def flat(self):
        return self.coeffs.reshape(-1)

    def copy(self):
        return StateVector(self.coeffs.copy(), self.degree, self.mesh, self.t)


@dataclass(frozen=True)
class NoFlow:
    """Impenetrable free-slip boundary: u.n = 0, no viscous facet terms."""


@dataclass(frozen=True)
class WallNoSlip:
    """No-slip wall: u.n = 0 plus one-sided interior-penalty terms with
    zero exterior datum."""


@dataclass(frozen=True)
class Inflow:
    """Prescribed velocity g(x, y, t) -> (2, n); the normal component
    enters the facet constraint, the full vector feeds the upwind flux."""

    g: object


@dataclass(frozen=True)
class Outflow:
    """Natural outflow: multiplier (skeleton pressure) pinned to zero,
    no normal constraint."""


@dataclass(frozen=True)
class ProblemData:
    nu: float = 0.0
    alpha: float = 2.0
    source: object = None
    bcs: dict = None
    include_convection: bool = True

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError(f"viscosity must be >= 0, got {self.nu}")
        if self.alpha <= 0:
            raise ValueError(f"penalty constant must be > 0, got {self.alpha}")


@dataclass
class AssembledBlocks:
    """Assembled couplings: global sparse views plus the element-local
    dense blocks the static condensation works from."""

    M: sp.spmatrix
    D: sp.spmatrix
    T: sp.spmatrix
    Bvisc: object = None
    D_loc: np.ndarray = None
    T_loc: np.ndarray = None
    lambda_cols: np.ndarray = None


def _check_finite(arr):
    if not np.isfinite(arr).all():
        raise ValueError("non-finite velocity coefficients")


class DGForms:
    """Precomputed tables and form applications for one (mesh, degree).

    All facet tables are indexed by facet, with the left element the one
    the facet normal points out of.  Periodic facets are handled through
    the translated right-side quadrature points baked into the tables.
    """

    def __init__(self, mesh, degree):
        if degree < 1:
            raise ValueError(f"velocity degree must be >= 1, got {degree}")
        self.mesh = mesh
        self.degree = k = int(degree)
        basis = scalar_basis("triangle", k)
        self.n_scalar = N = basis.n_funcs
        self.n_dofs = mesh.num_triangles * 2 * N

        vol = quadrature_rule("triangle", 3 * k)
        self.vol_rule = vol
        self.Phi = basis.eval(vol.points)
        self.Gphi = basis.grad(vol.points)

        geo = mesh.geometry
        self.geo = geo
        self.detB = geo.det
        self.invB = geo.invB
        self.xvol = geo.push(vol.points)

        rule_mass = quadrature_rule("triangle", 2 * k)
        phi_m = basis.eval(rule_mass.points)
        self.M_ref = (phi_m * rule_mass.weights) @ phi_m.T

        qbasis = scalar_basis("triangle", k - 1)
        self.n_pressure = qbasis.n_funcs
        psi = qbasis.eval(vol.points)
        self.Psi = psi
        self.Dref = np.einsum("mq,iqb,q->mib", psi, self.Gphi, vol.weights)
        self.Gref = np.einsum("jq,lq,iqb,q->ijlb", self.Phi, self.Phi,
                              self.Gphi, vol.weights, optimize=True)
        self.Kref = np.einsum("iqa,jqb,q->ijab", self.Gphi, self.Gphi,
                              vol.weights, optimize=True)

        fac = mesh.facets
        self.fac = fac
        nf = fac.n_facets
        seg = quadrature_rule("segment", 3 * k)
        self.facet_rule = seg
        nqf = seg.n_points
        self.leg = scalar_basis("segment", k).eval(seg.points)
        ptsL, ptsR = fac.side_points(seg.points)
        self.xfac = ptsL
        eL = fac.left_elem
        eR = np.where(fac.right_elem >= 0, fac.right_elem, 0)
        refL = geo.pull(eL, ptsL)
        refR = geo.pull(eR, ptsR)
        self.PhiL = np.ascontiguousarray(
            basis.eval(refL.reshape(-1, 2)).reshape(N, nf, nqf)
            .transpose(1, 0, 2))
        self.PhiR = np.ascontiguousarray(
            basis.eval(refR.reshape(-1, 2)).reshape(N, nf, nqf)
            .transpose(1, 0, 2))
        gL = basis.grad(refL.reshape(-1, 2)).reshape(N, nf, nqf, 2)
        gR = basis.grad(refR.reshape(-1, 2)).reshape(N, nf, nqf, 2)
        # physical gradient dotted with the facet normal, per side
        self.GnL = np.einsum("ifqb,fbd,fd->fiq", gL, self.invB[eL],
                             fac.normals)
        self.GnR = np.einsum("ifqb,fbd,fd->fiq", gR, self.invB[eR],
                             fac.normals)
        self.wfac = fac.lengths[:, None] * seg.weights[None, :]

        nt = mesh.num_triangles
        ones = np.ones(nf)
        self.scatter_left = sp.csr_matrix(
            (ones, (eL, np.arange(nf))), shape=(nt, nf))
        ii = fac.interior
        self.scatter_right = sp.csr_matrix(
            (np.ones(len(ii)), (fac.right_elem[ii], ii)), shape=(nt, nf))
        self.scatter_left_int = sp.csr_matrix(
            (np.ones(len(ii)), (fac.left_elem[ii], np.arange(len(ii)))),
            shape=(nt, len(ii)))
        self.scatter_right_int = sp.csr_matrix(
            (np.ones(len(ii)), (fac.right_elem[ii], np.arange(len(ii)))),
            shape=(nt, len(ii)))

        # facet moment tensor: integral of leg_m * phi_i over the facet
        self.TmomL = np.einsum("fiq,mq,fq->fim", self.PhiL, self.leg,
                               self.wfac)
        self.TmomR = np.einsum("fiq,mq,fq->fim", self.PhiR, self.leg,
                               self.wfac)

        self._avis = None
        self._blocks = None

    # state plumbing

    def as_coeffs(self, u):
        arr = u.coeffs if isinstance(u, StateVector) else np.asarray(u)
        return arr.reshape(self.mesh.num_triangles, 2, self.n_scalar)

    def bc_groups(self, data):
        """Resolve boundary labels to facet index arrays per condition."""
        by_label = self.fac.boundary_by_label()
        bcs = (data.bcs or {}) if data is not None else {}
        for label in bcs:
            if label not in by_label:
                raise ValueError(f"boundary label {label!r} not in mesh")
        wall, outflow, inflow = [], [], []
        for label, ids in by_label.items():
            bc = bcs.get(label, NoFlow())
            if isinstance(bc, WallNoSlip):
                wall.append(ids)
            elif isinstance(bc, Outflow):
                outflow.append(ids)
            elif isinstance(bc, Inflow):
                inflow.append((ids, bc.g))
            elif not isinstance(bc, NoFlow):
                raise TypeError(f"unknown boundary condition {bc!r}")
        cat = lambda parts: (np.concatenate(parts) if parts
                             else np.empty(0, dtype=np.int64))
        return cat(wall), cat(outflow), inflow

    # mass

    def mass_apply(self, U):
        return np.einsum("e,ij,ecj->eci", self.detB, self.M_ref, U)

    def mass_matrix(self):
        comp = sp.kron(sp.eye(2), sp.csr_matrix(self.M_ref))
        return sp.kron(sp.diags(self.detB), comp).tocsr()

    # traces

    def side_values(self, U, table, elems):
        return np.einsum("fiq,fci->fcq", table, U[elems])

    def boundary_exterior(self, uL, data, t):
        """Exterior trace on boundary facets: mirror except at inflow."""
        fac = self.fac
        ext = uL[fac.boundary].copy()
        if data is not None:
            _, _, inflow = self.bc_groups(data)
            pos = np.full(fac.n_facets, -1, dtype=np.int64)
            pos[fac.boundary] = np.arange(len(fac.boundary))
            for ids, g in inflow:
                pts = self.xfac[ids]
                vals = np.asarray(g(pts[:, :, 0].ravel(), pts[:, :, 1].ravel(), t),
                                  dtype=float)
                vals = np.broadcast_to(vals, (2, pts.shape[0] * pts.shape[1]))
                ext[pos[ids]] = vals.reshape(2, len(ids), -1).transpose(1, 0, 2)
        return ext

    # convection

    def convection(self, U, data=None, t=0.0):
        _check_finite(U)
        fac = self.fac
        uL = self.side_values(U, self.PhiL, fac.left_elem)
        eR = np.where(fac.right_elem >= 0, fac.right_elem, 0)
        uR = self.side_values(U, self.PhiR, eR)
        uR[fac.boundary] = self.boundary_exterior(uL, data, t)
        un = 0.5 * np.einsum("fcq,fc->fq", uL + uR, fac.normals)
        un[fac.boundary] = np.einsum("fcq,fc->fq", uL[fac.boundary],
                                     fac.normals[fac.boundary])
        upwind = np.where(un[:, None, :] >= 0.0, uL, uR)
        flux = (self.wfac * un)[:, None, :] * upwind
        RL = np.einsum("fcq,fiq->fci", flux, self.PhiL)
        RR = np.einsum("fcq,fiq->fci", flux, self.PhiR)
        nt, N = self.mesh.num_triangles, self.n_scalar
        r = (self.scatter_left @ RL.reshape(len(flux), -1)
             - self.scatter_right @ RR.reshape(len(flux), -1))
        r = r.reshape(nt, 2, N)
        # volume term -(u (x) u) : grad v
        W = np.einsum("ebd,edl->ebl", self.invB, U)
        H = np.einsum("ijlb,ebl->eij", self.Gref, W, optimize=True)
        r -= np.einsum("e,ecj,eij->eci", self.detB, U, H, optimize=True)
        return r

    # viscous

    def _viscous_volume(self):
        if self._avis is None:
            gm = np.einsum("e,ebd,ecd->ebc", self.detB, self.invB, self.invB)
            self._avis = np.einsum("ijbc,ebc->eij", self.Kref, gm,
                                   optimize=True)
        return self._avis

    def viscous(self, U, data, t=0.0):
        _check_finite(U)
        nu, k = data.nu, self.degree
        if nu <= 0:
            raise ValueError("viscous form requires nu > 0")
        r = nu * np.einsum("eij,ecj->eci", self._viscous_volume(), U)
        fac = self.fac
        ii = fac.interior
        uL = self.side_values(U, self.PhiL[ii], fac.left_elem[ii])
        uR = self.side_values(U, self.PhiR[ii], fac.right_elem[ii])
        gnL = self.side_values(U, self.GnL[ii], fac.left_elem[ii])
        gnR = self.side_values(U, self.GnR[ii], fac.right_elem[ii])
        jump = uL - uR
        mean = 0.5 * (gnL + gnR)
        w = self.wfac[ii][:, None, :]
        pen = (nu * data.alpha * k * k / fac.lengths[ii])[:, None, None]
        RL = (np.einsum("fcq,fiq->fci", w * (pen * jump - nu * mean),
                        self.PhiL[ii])
              - 0.5 * nu * np.einsum("fcq,fiq->fci", w * jump, self.GnL[ii]))
        RR = (np.einsum("fcq,fiq->fci", w * (nu * mean - pen * jump),
                        self.PhiR[ii])
              - 0.5 * nu * np.einsum("fcq,fiq->fci", w * jump, self.GnR[ii]))
        nt, N = self.mesh.num_triangles, self.n_scalar
        r += (self.scatter_left_int @ RL.reshape(len(ii), -1)
              + self.scatter_right_int @ RR.reshape(len(ii), -1)
              ).reshape(nt, 2, N)
        wall, _, _ = self.bc_groups(data)
        if len(wall):
            uW = self.side_values(U, self.PhiL[wall], fac.left_elem[wall])
            gnW = self.side_values(U, self.GnL[wall], fac.left_elem[wall])
            ww = self.wfac[wall][:, None, :]
            penw = (nu * data.alpha * k * k
                    / fac.lengths[wall])[:, None, None]
            RW = (np.einsum("fcq,fiq->fci", ww * (penw * uW - nu * gnW),
                            self.PhiL[wall])
                  - nu * np.einsum("fcq,fiq->fci", ww * uW, self.GnL[wall]))
            np.add.at(r, fac.left_elem[wall], RW)
        return r

    # source and full spatial operator

    def source_load(self, source, t):
        x = self.xvol[:, :, 0].ravel()
        y = self.xvol[:, :, 1].ravel()
        vals = np.asarray(source(x, y, t), dtype=float)
        vals = np.broadcast_to(vals, (2, x.shape[0]))
        vals = vals.reshape(2, self.mesh.num_triangles, -1)
        return np.einsum("e,ceq,iq,q->eci", self.detB, vals, self.Phi,
                         self.vol_rule.weights)

    def operator(self, U, data, t=0.0):
        """Residual of the explicit spatial terms: C + B - (f, v)."""
        if data is not None and data.include_convection:
            r = self.convection(U, data, t)
        else:
            r = np.zeros_like(U)
        if data is not None and data.nu > 0:
            r += self.viscous(U, data, t)
        if data is not None and data.source is not None:
            r -= self.source_load(data.source, t)
        return r

    def rhs(self, U, dt, data, t=0.0):
        return self.mass_apply(U) - dt * self.operator(U, data, t)

    # couplings for the constrained mass solve

    def div_blocks(self):
        d = np.einsum("e,mib,ebc->emci", self.detB, self.Dref, self.invB)
        nt = self.mesh.num_triangles
        return np.ascontiguousarray(
            d.reshape(nt, self.n_pressure, 2 * self.n_scalar))

    def trace_blocks(self):
        """Element blocks of the facet multiplier coupling and the global
        multiplier column of every local entry."""
        fac = self.fac
        k = self.degree
        fmap = fac.elem_facet
        smap = fac.elem_side
        tmom = np.where((smap == 0)[:, :, None, None], self.TmomL[fmap],
                        self.TmomR[fmap])
        sgn = np.where(smap == 0, 1.0, -1.0)
        nrm = fac.normals[fmap]
        t_loc = np.einsum("tl,tlc,tlim->tcilm", sgn, nrm, tmom)
        nt = self.mesh.num_triangles
        t_loc = t_loc.reshape(nt, 2 * self.n_scalar, 3 * (k + 1))
        cols = (fmap[:, :, None] * (k + 1)
                + np.arange(k + 1)[None, None, :]).reshape(nt, 3 * (k + 1))
        return np.ascontiguousarray(t_loc), cols

    def constraint_load(self, data, t=0.0):
        """Right-hand side of the facet normal constraint (inflow moments)."""
        fac = self.fac
        b = np.zeros((fac.n_facets, self.degree + 1))
        if data is None:
            return b
        _, _, inflow = self.bc_groups(data)
        for ids, g in inflow:
            pts = self.xfac[ids]
            vals = np.asarray(g(pts[:, :, 0].ravel(), pts[:, :, 1].ravel(), t),
                              dtype=float)
            vals = np.broadcast_to(vals, (2, pts.shape[0] * pts.shape[1]))
            vals = vals.reshape(2, len(ids), -1)
            gn = np.einsum("cfq,fc->fq", vals, fac.normals[ids])
            b[ids] = np.einsum("fq,mq,fq->fm", gn, self.leg, self.wfac[ids])
        return b

    # diagnostics helpers

    def div_values(self, U):
        return np.einsum("eci,ebc,iqb->eq", U, self.invB, self.Gphi,
                         optimize=True)

    def div_norm(self, U):
        d = self.div_values(U)
        return float(np.sqrt(np.einsum("eq,q,e->", d * d,
                                       self.vol_rule.weights, self.detB)))

    def vorticity_values(self, U):
        grads = np.einsum("eci,eba,iqb->ecaq", U, self.invB, self.Gphi,
                          optimize=True)
        return grads[:, 1, 0] - grads[:, 0, 1]

    def normal_jump_max(self, U):
        fac = self.fac
        ii = fac.interior
        if len(ii) == 0:
            return 0.0
        uL = self.side_values(U, self.PhiL[ii], fac.left_elem[ii])
        uR = self.side_values(U, self.PhiR[ii], fac.right_elem[ii])
        jn = np.einsum("fcq,fc->fq", uL - uR, fac.normals[ii])
        return float(np.abs(jn).max())

    def vmax(self, U):
        vals = np.einsum("eci,iq->ecq", U, self.Phi)
        speed = np.sqrt((vals * vals).sum(axis=1))
        return float(speed.max())

    def l2_norm(self, U):
        mu = self.mass_apply(U)
        return float(np.sqrt(max((U * mu).sum(), 0.0)))


_CONTEXTS = WeakKeyDictionary()


def forms_context(mesh, degree):
    """Cached DGForms for a (mesh, degree) pair."""
    per_mesh = _CONTEXTS.setdefault(mesh, {})
    if degree not in per_mesh:
        per_mesh[degree] = DGForms(mesh, degree)
    return per_mesh[degree]


def make_state(coeffs, degree, mesh, t=0.0):
    ctx = forms_context(mesh, degree)
    return StateVector(ctx.as_coeffs(coeffs).copy(), degree, mesh, t)


def apply_convection(u, data=None, t=None):
    """Dense residual r with r.v = C_h(u; u, v) for all broken DG v."""
    ctx = forms_context(u.mesh, u.degree)
    ts = u.t if t is None else t
    return ctx.convection(u.coeffs, data, ts).reshape(-1)


def apply_viscous(u, data, t=None):
    """Dense residual r with r.v = B_h(u, v) for all broken DG v."""
    ctx = forms_context(u.mesh, u.degree)
    ts = u.t if t is None else t
    return ctx.viscous(u.coeffs, data, ts).reshape(-1)


def assemble_rhs(u_n, dt, data, t=None):
    """Forward step functional: (u_n, v) - dt (C + B - f)."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    ctx = forms_context(u_n.mesh, u_n.degree)
    ts = u_n.t if t is None else t
    return ctx.rhs(u_n.coeffs, dt, data, ts).reshape(-1)


def assemble_mass(degree, mesh):
    """Block-diagonal mass matrix over the broken vector DG dofs."""
    return forms_context(mesh, degree).mass_matrix()


def assemble_couplings(degree, mesh, data=None):
    """Divergence and facet trace couplings plus global sparse views."""
    ctx = forms_context(mesh, degree)
    if ctx._blocks is None:
        d_loc = ctx.div_blocks()
        t_loc, cols = ctx.trace_blocks()
        nt = mesh.num_triangles
        nq, nv = ctx.n_pressure, 2 * ctx.n_scalar
        rows = (np.arange(nt * nq).reshape(nt, nq, 1)
                + np.zeros((1, 1, nv), dtype=np.int64))
        colsd = (np.arange(nt * nv).reshape(nt, 1, nv)
                 + np.zeros((1, nq, 1), dtype=np.int64))
        D = sp.csr_matrix((d_loc.ravel(), (rows.ravel(), colsd.ravel())),
                          shape=(nt * nq, nt * nv))
        nl = t_loc.shape[2]
        rows_t = np.repeat(np.arange(nt * nv).reshape(nt, nv, 1), nl, axis=2)
        cols_t = np.repeat(cols.reshape(nt, 1, nl), nv, axis=1)
        nm = mesh.facets.n_facets * (degree + 1)
        T = sp.csr_matrix((t_loc.ravel(), (rows_t.ravel(), cols_t.ravel())),
                          shape=(nt * nv, nm))
        ctx._blocks = AssembledBlocks(ctx.mass_matrix(), D, T, None,
                                      d_loc, t_loc, cols)
    return ctx._blocks


def assemble_viscous_matrix(degree, mesh, data):
    """Dense viscous operator matrix, for small-mesh verification only."""
    ctx = forms_context(mesh, degree)
    n = ctx.n_dofs
    if n > 4000:
        raise ValueError("dense viscous assembly is for small meshes only")
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(ctx.viscous(ctx.as_coeffs(e), data).reshape(-1))
    return np.column_stack(cols)
