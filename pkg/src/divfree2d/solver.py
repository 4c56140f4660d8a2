"""Hybrid solves that invert the velocity mass matrix over the
divergence-free, normal-continuous subspace.

The mass inversion behind every explicit stage is posed as a saddle
problem over broken velocities, elementwise pressures, and facet
multipliers.  The element blocks are eliminated up front, leaving a
sparse SPD system for the multipliers that is factored once per
(mesh, degree, boundary-condition) combination and reused for every
stage.  Two slower references, a conforming mixed saddle solve and a
dense nullspace solve, are provided for cross-checking.
"""

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import (
    ProblemData,
    assemble_couplings,
    forms_context,
    make_state,
)
from .quadrature import quadrature_rule
from .spaces import bdm_basis, bdm_to_vdg, build_dofmap, scalar_basis


def _as_problem_data(bcs):
    if bcs is None:
        return ProblemData()
    if isinstance(bcs, ProblemData):
        return bcs
    return ProblemData(bcs=dict(bcs))


class StageSolution:
    """Velocity, elementwise pressure variable, and facet multipliers
    produced by one hybrid solve."""

    def __init__(self, u, w, lam, dt):
        self.u = u
        self.w = w
        self.lam = lam
        self.dt = dt

    @property
    def pressure(self):
        """Pressure coefficients recovered from the scaled variable."""
        return self.w / self.dt

    @property
    def skeleton_pressure(self):
        return self.lam / self.dt


class HybridSystem:
    """Condensed facet-multiplier system with per-element recovery.

    Stores the dense inverse of every element saddle block, the sparse
    condensed matrix over active multiplier dofs, and its factorization.
    The condensed matrix does not depend on the time step, so one build
    serves an entire run.
    """

    def __init__(self, degree, mesh, data, solver="direct", pin_index=None):
        if degree < 1:
            raise ValueError("degree must be at least 1")
        self.degree = degree
        self.mesh = mesh
        self.data = data
        self.ctx = forms_context(mesh, degree)
        self.blocks = assemble_couplings(degree, mesh)

        nt = mesh.num_triangles
        nv = 2 * self.ctx.n_scalar
        nq = self.ctx.n_pressure
        geo = mesh.geometry

        # element saddle blocks [[M, -D^T], [D, 0]], inverted in a batch
        A = np.zeros((nt, nv + nq, nv + nq))
        M_loc = geo.det[:, None, None] * np.kron(np.eye(2),
                                                 self.ctx.M_ref)[None]
        D_loc = self.blocks.D_loc
        A[:, :nv, :nv] = M_loc
        A[:, :nv, nv:] = -np.transpose(D_loc, (0, 2, 1))
        A[:, nv:, :nv] = D_loc
        try:
            K = np.linalg.inv(A)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                "singular element block during condensation") from exc
        self.R = np.ascontiguousarray(K[:, :nv, :nv])
        self.W = np.ascontiguousarray(K[:, nv:, :nv])

        T_loc = self.blocks.T_loc
        self.lambda_cols = self.blocks.lambda_cols
        self.G = np.einsum("eab,ebl->eal", self.R, T_loc)
        self.Wg = np.einsum("emb,ebl->eml", self.W, T_loc)
        S_blocks = np.einsum("eal,eam->elm", T_loc, self.G)

        k = degree
        fac = mesh.facets
        n_lam = fac.n_facets * (k + 1)
        rows = np.repeat(self.lambda_cols[:, :, None],
                         self.lambda_cols.shape[1], axis=2)
        cols = np.transpose(rows, (0, 2, 1))
        S = sp.coo_matrix((S_blocks.ravel(),
                           (rows.ravel(), cols.ravel())),
                          shape=(n_lam, n_lam)).tocsr()
        S = 0.5 * (S + S.T)

        _, outflow, _ = self.ctx.bc_groups(data)
        inactive = np.zeros(n_lam, dtype=bool)
        for f in outflow:
            inactive[f * (k + 1):(f + 1) * (k + 1)] = True
        self.active = np.where(~inactive)[0]
        self.has_outflow = bool(outflow.size)

        if self.has_outflow:
            self.pinned = None
            keep = self.active
        else:
            self.pinned = self.active[0] if pin_index is None else pin_index
            keep = self.active[self.active != self.pinned]
        self.keep = keep
        self.S = S[keep][:, keep].tocsc()
        self.n_lambda = n_lam

        if solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver kind '{solver}'")
        self.solver = solver
        self._factor = None
        if solver == "direct":
            try:
                self._factor = spla.splu(
                    self.S, permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True})
            except (RuntimeError, MemoryError):
                self.solver = "cg"
        if self.solver == "cg":
            d = self.S.diagonal()
            if np.any(d <= 0):
                raise RuntimeError(
                    "condensed matrix has nonpositive diagonal; check "
                    "facet orientation signs")
            self._precond = spla.LinearOperator(
                self.S.shape, matvec=lambda x: x / d)

        self._spd_probe()
        self.n_solves = 0

    def _spd_probe(self):
        rng = np.random.default_rng(1234)
        for _ in range(3):
            x = rng.standard_normal(self.S.shape[0])
            quad = x @ (self.S @ x)
            if not quad > 0:
                raise RuntimeError(
                    "condensed multiplier matrix is not positive definite; "
                    "check facet orientation signs")

    def _solve_condensed(self, r):
        if self.solver == "direct":
            return self._factor.solve(r)
        lam, info = spla.cg(self.S, r, rtol=1e-12, atol=0.0,
                            M=self._precond, maxiter=10 * self.S.shape[0])
        if info != 0:
            raise RuntimeError(f"multiplier CG did not converge (info={info})")
        return lam

    def constraint_data(self, t=0.0):
        """Facet flux moments on the active multiplier dofs."""
        b = self.ctx.constraint_load(self.data, t).ravel()
        return b

    def solve(self, F, dt, t=0.0):
        """Invert the constrained mass matrix against the load F."""
        F = np.asarray(F, dtype=float).ravel()
        if not np.all(np.isfinite(F)):
            raise ValueError("load vector contains non-finite entries")
        nt = self.mesh.num_triangles
        nv = 2 * self.ctx.n_scalar
        F_loc = F.reshape(nt, nv)

        u0 = np.einsum("eab,eb->ea", self.R, F_loc)
        w0 = np.einsum("emb,eb->em", self.W, F_loc)

        b = self.constraint_data(t)
        if self.pinned is not None:
            # with no outflow the flux data must balance
            net = b.reshape(-1, self.degree + 1)[:, 0].sum()
            if abs(net) > 1e-9 * (1.0 + np.abs(b).sum()):
                raise ValueError(
                    "boundary data has net flux but no outflow boundary")

        r = self.blocks.T.T @ u0.ravel() - b
        lam = np.zeros(self.n_lambda)
        lam[self.keep] = self._solve_condensed(r[self.keep])

        lam_loc = lam[self.lambda_cols]
        u = u0 - np.einsum("eal,el->ea", self.G, lam_loc)
        w = w0 - np.einsum("eml,el->em", self.Wg, lam_loc)

        if self.pinned is not None:
            # the scaled pressure is defined up to a constant; remove its
            # mean and shift the multiplier by the paired amount so the
            # first saddle equation stays satisfied
            geo = self.mesh.geometry
            mean = (geo.det @ w[:, 0]) / (np.sqrt(2.0) * self.mesh.area)
            w[:, 0] -= mean / np.sqrt(2.0)
            lam = lam.copy()
            lam.reshape(-1, self.degree + 1)[:, 0] -= mean

        self.n_solves += 1
        state = make_state(u.reshape(nt, 2, self.ctx.n_scalar),
                           self.degree, self.mesh, t=t)
        return StageSolution(state, w, lam, dt)

    def residual(self, sol, F, t=0.0):
        """Max relative residual of the three saddle equations."""
        nt = self.mesh.num_triangles
        nv = 2 * self.ctx.n_scalar
        F = np.asarray(F, dtype=float).ravel()
        u = sol.u.coeffs.reshape(nt, nv)
        geo = self.mesh.geometry
        M_loc = geo.det[:, None, None] * np.kron(np.eye(2),
                                                 self.ctx.M_ref)[None]
        mu = np.einsum("eab,eb->ea", M_loc, u).ravel()
        dtw = self.blocks.D.T @ sol.w.ravel()
        tl = self.blocks.T @ sol.lam
        b = self.constraint_data(t)
        scale = 1.0 + np.abs(F).max()
        r1 = np.abs(mu - dtw + tl - F).max() / scale
        r2 = np.abs(self.blocks.D @ u.ravel()).max() / scale
        r3 = np.abs((self.blocks.T.T @ u.ravel() - b)[self.active]).max() / scale
        return max(r1, r2, r3)


def build_hybrid(k, mesh, bcs=None, solver="direct", pin_index=None):
    """Assemble and factor the condensed facet-multiplier system."""
    return HybridSystem(k, mesh, _as_problem_data(bcs), solver=solver,
                        pin_index=pin_index)


def solve_stage(sys, F, dt, t=0.0):
    """One constrained mass inversion; dt only scales pressure recovery."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return sys.solve(F, dt, t=t)


def project_initial(u0, sys, t=0.0):
    """Constrained L2 projection of a velocity field callback."""
    mesh = sys.mesh
    rule = quadrature_rule("triangle", 2 * sys.degree + 4)
    basis = scalar_basis("triangle", sys.degree)
    phi = basis.eval(rule.points)
    xq = mesh.geometry.push(rule.points)
    flat = np.asarray(u0(xq[:, :, 0].ravel(), xq[:, :, 1].ravel()),
                      dtype=float)
    vals = flat.reshape(2, mesh.num_triangles, -1).transpose(1, 0, 2)
    F = np.einsum("e,ecq,iq,q->eci", mesh.geometry.det, vals, phi,
                  rule.weights)
    return solve_stage(sys, F.ravel(), 1.0, t=t).u


class _MixedSystem:
    """Conforming saddle solve over normal-continuous velocities and
    elementwise pressures, used as a reference for the hybrid path."""

    def __init__(self, degree, mesh, data):
        self.degree = degree
        self.mesh = mesh
        self.data = data
        ctx = forms_context(mesh, degree)
        self.ctx = ctx
        blocks = assemble_couplings(degree, mesh)
        dm = build_dofmap("bdm", mesh, degree)
        self.dofmap = dm

        _, outflow, inflow = ctx.bc_groups(data)
        if inflow or outflow.size:
            raise NotImplementedError(
                "mixed reference solve supports impermeable or periodic "
                "boundaries only")

        nt = mesh.num_triangles
        N = ctx.n_scalar
        k = degree
        basis = bdm_basis(degree)
        geo = mesh.geometry

        # embedding of the normal-continuous space into broken coefficients
        n_loc = basis.n_dofs
        E_loc = np.zeros((nt, 2 * N, n_loc))
        cx, cy = basis.coeff_x, basis.coeff_y
        B = geo.B
        E_loc[:, :N, :] = (B[:, 0, 0, None, None] * cx +
                           B[:, 0, 1, None, None] * cy)
        E_loc[:, N:, :] = (B[:, 1, 0, None, None] * cx +
                           B[:, 1, 1, None, None] * cy)
        E_loc /= geo.det[:, None, None]
        E_loc *= dm.signs[:, None, :]

        rows = (np.arange(nt * 2 * N).reshape(nt, 2 * N)[:, :, None] *
                np.ones((1, 1, n_loc), dtype=int))
        cols = np.broadcast_to(dm.element_dofs[:, None, :], rows.shape)
        E = sp.coo_matrix((E_loc.ravel(), (rows.ravel(), cols.ravel())),
                          shape=(nt * 2 * N, dm.n_dofs)).tocsr()
        self.E = E

        Mvdg = sp.kron(sp.diags(geo.det),
                       sp.kron(sp.eye(2), ctx.M_ref)).tocsr()
        Mb = (E.T @ Mvdg @ E).tocsr()
        Db = (blocks.D @ E).tocsr()

        # impermeable boundary: zero out facet normal dofs on the boundary
        free = np.ones(dm.n_dofs, dtype=bool)
        for f in mesh.facets.boundary:
            free[f * (k + 1):(f + 1) * (k + 1)] = False
        self.free = np.where(free)[0]

        nq_glob = nt * ctx.n_pressure
        A = sp.bmat([[Mb[self.free][:, self.free],
                      -Db[:, self.free].T],
                     [Db[:, self.free], None]], format="csr")
        # pin one pressure dof to fix the constant
        pin = len(self.free)
        A = A.tolil()
        A[pin, :] = 0.0
        A[:, pin] = 0.0
        A[pin, pin] = 1.0
        self.A = A.tocsc()
        self.pin = pin
        self.n_free = len(self.free)
        self.n_pressure = nq_glob
        self._factor = spla.splu(self.A)

    def solve(self, F):
        F = np.asarray(F, dtype=float).ravel()
        rhs = np.zeros(self.n_free + self.n_pressure)
        rhs[:self.n_free] = (self.E.T @ F)[self.free]
        rhs[self.pin] = 0.0
        z = self._factor.solve(rhs)
        coeffs = np.zeros(self.dofmap.n_dofs)
        coeffs[self.free] = z[:self.n_free]
        u = bdm_to_vdg(coeffs, self.dofmap, self.mesh)
        w = z[self.n_free:].reshape(self.mesh.num_triangles, -1)
        geo = self.mesh.geometry
        mean = (geo.det @ w[:, 0]) / (np.sqrt(2.0) * self.mesh.area)
        w[:, 0] -= mean / np.sqrt(2.0)
        return make_state(u, self.degree, self.mesh), w


def solve_mixed(k, mesh, bcs, F):
    """Reference solve of the conforming velocity/pressure saddle system."""
    sysm = _MixedSystem(k, mesh, _as_problem_data(bcs))
    return sysm.solve(F)


def divfree_nullspace(k, mesh, bcs=None):
    """Dense basis of the divergence-free, normal-continuous subspace."""
    if mesh.num_triangles > 50:
        raise ValueError("nullspace reference limited to 50 elements")
    data = _as_problem_data(bcs)
    ctx = forms_context(mesh, k)
    blocks = assemble_couplings(k, mesh)
    _, outflow, _ = ctx.bc_groups(data)
    n_lam = mesh.facets.n_facets * (k + 1)
    keep = np.ones(n_lam, dtype=bool)
    for f in outflow:
        keep[f * (k + 1):(f + 1) * (k + 1)] = False
    C = sp.vstack([blocks.D, blocks.T.T[np.where(keep)[0]]]).toarray()
    return la.null_space(C, rcond=1e-10)


def solve_direct_divfree(k, mesh, F, bcs=None):
    """Galerkin solve on an explicit nullspace basis; test reference only."""
    N = divfree_nullspace(k, mesh, bcs)
    ctx = forms_context(mesh, k)
    geo = mesh.geometry
    Mvdg = sp.kron(sp.diags(geo.det),
                   sp.kron(sp.eye(2), ctx.M_ref)).tocsr()
    F = np.asarray(F, dtype=float).ravel()
    y = la.solve(N.T @ (Mvdg @ N), N.T @ F, assume_a="pos")
    return make_state(N @ y, k, mesh)
