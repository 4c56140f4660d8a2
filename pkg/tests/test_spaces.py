import numpy as np
import pytest

from divfree2d.mesh import LOCAL_EDGES, AffineMap, square_mesh
from divfree2d.quadrature import quadrature_rule
from divfree2d.spaces import (
    EDGE_LENGTHS,
    EDGE_NORMALS,
    REF_VERTS,
    bdm_basis,
    bdm_to_vdg,
    build_dofmap,
    piola_push,
    project_dg,
    scalar_basis,
)


def random_points(n, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.02, 0.98, size=n)
    b = rng.uniform(0.02, 0.98, size=n) * (1.0 - a)
    return np.column_stack([a, b])


def apply_moments(eval_fn, k, quad_degree):
    """Independent application of the H(div) dof functionals.

    eval_fn(points) -> (n_funcs, n_pts, 2).  Returns the (n_dofs, n_funcs)
    matrix of edge normal moments followed by interior moments.
    """
    seg = quadrature_rule("segment", quad_degree)
    leg = scalar_basis("segment", k).eval(seg.points)
    rows = []
    for j in range(3):
        va = REF_VERTS[LOCAL_EDGES[j][0]]
        vb = REF_VERTS[LOCAL_EDGES[j][1]]
        pts = va[None, :] + seg.points[:, None] * (vb - va)[None, :]
        vn = eval_fn(pts) @ EDGE_NORMALS[j]
        for m in range(k + 1):
            rows.append(EDGE_LENGTHS[j] * vn @ (leg[m] * seg.weights))
    tri = quadrature_rule("triangle", quad_degree)
    x, y = tri.points[:, 0], tri.points[:, 1]
    vals = eval_fn(tri.points)
    qgrad = scalar_basis("triangle", k - 1).grad(tri.points)
    for i in range(1, qgrad.shape[0]):
        w = np.einsum("npd,pd,p->n", vals, qgrad[i], tri.weights)
        rows.append(w)
    if k >= 2:
        bub = x * y * (1.0 - x - y)
        bub_x = y * (1.0 - 2.0 * x - y)
        bub_y = x * (1.0 - x - 2.0 * y)
        qb = scalar_basis("triangle", k - 2)
        qv, qg = qb.eval(tri.points), qb.grad(tri.points)
        for i in range(qv.shape[0]):
            wx = bub_y * qv[i] + bub * qg[i, :, 1]
            wy = -(bub_x * qv[i] + bub * qg[i, :, 0])
            w = vals[:, :, 0] @ (wx * tri.weights) + vals[:, :, 1] @ (wy * tri.weights)
            rows.append(w)
    return np.asarray(rows)


# scalar bases


@pytest.mark.parametrize("degree", [0, 1, 2, 3, 4, 6, 8, 10])
def test_triangle_gram_is_identity(degree):
    basis = scalar_basis("triangle", degree)
    rule = quadrature_rule("triangle", 2 * degree)
    phi = basis.eval(rule.points)
    gram = (phi * rule.weights) @ phi.T
    assert np.abs(gram - np.eye(basis.n_funcs)).max() < 1e-12


@pytest.mark.parametrize("degree", [0, 1, 3, 7, 10])
def test_segment_gram_is_identity(degree):
    basis = scalar_basis("segment", degree)
    rule = quadrature_rule("segment", 2 * degree)
    phi = basis.eval(rule.points)
    gram = (phi * rule.weights) @ phi.T
    assert np.abs(gram - np.eye(degree + 1)).max() < 1e-13


def test_function_counts():
    assert scalar_basis("triangle", 0).n_funcs == 1
    assert scalar_basis("triangle", 2).n_funcs == 6
    assert scalar_basis("triangle", 10).n_funcs == 66
    assert scalar_basis("segment", 1).n_funcs == 2
    with pytest.raises(ValueError):
        scalar_basis("triangle", 11)
    with pytest.raises(ValueError):
        scalar_basis("segment", -1)
    with pytest.raises(ValueError):
        scalar_basis("square", 2)


def test_constant_mode_value():
    # the first function is the constant sqrt(2) = 1/sqrt(area)
    basis = scalar_basis("triangle", 4)
    vals = basis.eval(random_points(7))
    assert np.allclose(vals[0], np.sqrt(2.0), atol=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 4, 7, 10])
def test_triangle_span_reproduces_polynomials(degree):
    # project a random polynomial of matching degree; quadrature projection
    # must reproduce it pointwise if the basis spans P^degree
    rng = np.random.default_rng(degree)
    exps = [(m, n) for m in range(degree + 1) for n in range(degree + 1 - m)]
    coeff = rng.standard_normal(len(exps))

    def poly(x, y):
        return sum(c * x**m * y**n for c, (m, n) in zip(coeff, exps))

    basis = scalar_basis("triangle", degree)
    rule = quadrature_rule("triangle", 2 * degree)
    phi = basis.eval(rule.points)
    dofs = phi @ (poly(rule.points[:, 0], rule.points[:, 1]) * rule.weights)
    pts = random_points(31, seed=degree)
    recon = dofs @ basis.eval(pts)
    expect = poly(pts[:, 0], pts[:, 1])
    assert np.abs(recon - expect).max() < 1e-11 * max(1.0, np.abs(expect).max())


def test_segment_span_reproduces_polynomials():
    rng = np.random.default_rng(3)
    coeff = rng.standard_normal(6)
    basis = scalar_basis("segment", 5)
    rule = quadrature_rule("segment", 10)
    vals = np.polyval(coeff, rule.points)
    dofs = basis.eval(rule.points) @ (vals * rule.weights)
    t = rng.uniform(0, 1, 17)
    assert np.abs(dofs @ basis.eval(t) - np.polyval(coeff, t)).max() < 1e-12


@pytest.mark.parametrize("degree", [1, 3, 6, 10])
def test_triangle_gradient_matches_finite_differences(degree):
    basis = scalar_basis("triangle", degree)
    pts = random_points(11, seed=degree + 5)
    grads = basis.grad(pts)
    h = 1e-6
    for d in range(2):
        step = np.zeros(2)
        step[d] = h
        fd = (basis.eval(pts + step) - basis.eval(pts - step)) / (2 * h)
        assert np.abs(grads[:, :, d] - fd).max() < 1e-6


def test_segment_gradient_matches_finite_differences():
    basis = scalar_basis("segment", 7)
    t = np.linspace(0.05, 0.95, 9)
    h = 1e-6
    fd = (basis.eval(t + h) - basis.eval(t - h)) / (2 * h)
    assert np.abs(basis.grad(t) - fd).max() < 1e-6


def test_vertex_evaluation_is_finite():
    # the collapsed coordinate is singular at the apex; evaluation must
    # still return finite values there (needed for point sampling)
    basis = scalar_basis("triangle", 6)
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert np.isfinite(basis.eval(verts)).all()
    assert np.isfinite(basis.grad(verts)).all()


# H(div) basis on the reference element


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6])
def test_dual_basis_identity(k):
    basis = bdm_basis(k)
    L = apply_moments(basis.eval, k, 2 * k + 4)
    assert np.abs(L - np.eye(basis.n_dofs)).max() < 1e-11


def test_bdm_counts():
    b1 = bdm_basis(1)
    assert b1.n_dofs == 6 and b1.n_edge_dofs == 2 and b1.n_interior == 0
    b2 = bdm_basis(2)
    assert b2.n_dofs == 12 and b2.n_edge_dofs == 3 and b2.n_interior == 3
    with pytest.raises(ValueError):
        bdm_basis(0)
    with pytest.raises(ValueError):
        bdm_basis(7)


def test_constant_field_reproduced():
    basis = bdm_basis(1)

    def const(points):
        vals = np.zeros((1, len(points), 2))
        vals[0, :, 0] = 1.0
        return vals

    dofs = apply_moments(const, 1, 6)[:, 0]
    pts = random_points(19)
    recon = np.einsum("d,dpc->pc", dofs, basis.eval(pts))
    assert np.abs(recon[:, 0] - 1.0).max() < 1e-12
    assert np.abs(recon[:, 1]).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6])
def test_divergence_lies_in_lower_degree_space(k):
    basis = bdm_basis(k)
    rule = quadrature_rule("triangle", 2 * k)
    dv = basis.div(rule.points)
    low = scalar_basis("triangle", k - 1)
    phi = low.eval(rule.points)
    proj = (dv * rule.weights) @ phi.T @ phi
    assert np.abs(dv - proj).max() < 1e-11


def test_edge_normal_trace_is_legendre():
    # the normal trace of facet dof (edge j, moment m) along its own edge
    # is q_m(t)/|edge|, and vanishes on the other edges
    k = 3
    basis = bdm_basis(k)
    t = np.linspace(0.07, 0.93, 9)
    leg = scalar_basis("segment", k).eval(t)
    for j in range(3):
        va = REF_VERTS[LOCAL_EDGES[j][0]]
        vb = REF_VERTS[LOCAL_EDGES[j][1]]
        pts = va[None, :] + t[:, None] * (vb - va)[None, :]
        vn = basis.eval(pts) @ EDGE_NORMALS[j]
        for jj in range(3):
            for m in range(k + 1):
                trace = vn[jj * (k + 1) + m]
                expect = leg[m] / EDGE_LENGTHS[j] if jj == j else 0.0
                assert np.abs(trace - expect).max() < 1e-11
    # interior functions have no normal trace anywhere
    for j in range(3):
        va = REF_VERTS[LOCAL_EDGES[j][0]]
        vb = REF_VERTS[LOCAL_EDGES[j][1]]
        pts = va[None, :] + t[:, None] * (vb - va)[None, :]
        vn = basis.eval(pts) @ EDGE_NORMALS[j]
        assert np.abs(vn[3 * (k + 1):]).max() < 1e-11


# Piola transform


def make_map(B):
    B = np.asarray(B, dtype=float)
    return AffineMap(B, np.array([0.3, -0.2]), np.linalg.det(B),
                     np.linalg.inv(B))


def test_piola_identity_map():
    basis = bdm_basis(2)
    amap = make_map(np.eye(2))
    pts = random_points(8)
    vals, divs = piola_push(basis, amap, pts)
    assert np.allclose(vals, basis.eval(pts), atol=1e-14)
    assert np.allclose(divs, basis.div(pts), atol=1e-14)


def test_piola_uniform_scaling():
    basis = bdm_basis(2)
    s = 2.5
    amap = make_map(s * np.eye(2))
    pts = random_points(8)
    vals, divs = piola_push(basis, amap, pts)
    # values scale by 1/s, divergences by 1/s^2
    assert np.allclose(vals, basis.eval(pts) / s, atol=1e-13)
    assert np.allclose(divs, basis.div(pts) / s**2, atol=1e-13)


def test_piola_divergence_matches_finite_differences():
    basis = bdm_basis(3)
    rng = np.random.default_rng(11)
    B = np.eye(2) + 0.3 * rng.standard_normal((2, 2))
    amap = make_map(B)
    ref = random_points(6, seed=2)
    phys = amap.push(ref)
    _, divs = piola_push(basis, amap, ref)
    h = 1e-6
    fd = np.zeros_like(divs)
    for d in range(2):
        step = np.zeros(2)
        step[d] = h
        vp, _ = piola_push(basis, amap, amap.pull(phys + step))
        vm, _ = piola_push(basis, amap, amap.pull(phys - step))
        fd += (vp[:, :, d] - vm[:, :, d]) / (2 * h)
    assert np.abs(fd - divs).max() < 1e-6


def test_piola_preserves_edge_moments():
    # the edge normal moments of the pushed field on the physical edge
    # equal the reference dofs, for a random affine map
    k = 2
    basis = bdm_basis(k)
    rng = np.random.default_rng(4)
    B = np.eye(2) + 0.4 * rng.standard_normal((2, 2))
    if np.linalg.det(B) < 0:
        B[:, [0, 1]] = B[:, [1, 0]]
    amap = make_map(B)
    seg = quadrature_rule("segment", 2 * k + 2)
    leg = scalar_basis("segment", k).eval(seg.points)
    for j in range(3):
        va = REF_VERTS[LOCAL_EDGES[j][0]]
        vb = REF_VERTS[LOCAL_EDGES[j][1]]
        ref_pts = va[None, :] + seg.points[:, None] * (vb - va)[None, :]
        pa, pb = amap.push(va), amap.push(vb)
        tang = pb - pa
        length = np.hypot(*tang)
        normal = np.array([tang[1], -tang[0]]) / length
        vals, _ = piola_push(basis, amap, ref_pts)
        vn = vals @ normal
        for m in range(k + 1):
            mom = length * vn @ (leg[m] * seg.weights)
            expect = np.zeros(basis.n_dofs)
            expect[j * (k + 1) + m] = 1.0
            assert np.abs(mom - expect).max() < 1e-11


# dof maps


def test_dofmap_counts():
    mesh = square_mesh(1, size=1.0)
    assert build_dofmap("m", mesh, 2).n_dofs == 15
    assert build_dofmap("vdg", mesh, 1).n_dofs == 12
    assert build_dofmap("bdm", mesh, 1).n_dofs == 10
    assert build_dofmap("bdm", mesh, 2).n_dofs == 5 * 3 + 2 * 3
    assert build_dofmap("q", mesh, 0).n_dofs == 2
    torus = square_mesh(1, size=1.0, periodic=True)
    assert build_dofmap("m", torus, 1).n_dofs == 6
    assert build_dofmap("bdm", torus, 1).n_dofs == 6
    with pytest.raises(ValueError):
        build_dofmap("rt", mesh, 1)


def test_bdm_dofmap_shares_facet_dofs():
    mesh = square_mesh(2, size=1.0)
    dm = build_dofmap("bdm", mesh, 2)
    fac = mesh.facets
    for f in fac.interior:
        eL, leL = fac.left_elem[f], fac.left_edge[f]
        eR, leR = fac.right_elem[f], fac.right_edge[f]
        colsL = dm.element_dofs[eL, leL * 3:(leL + 1) * 3]
        colsR = dm.element_dofs[eR, leR * 3:(leR + 1) * 3]
        assert (colsL == colsR).all()


@pytest.mark.parametrize("k", [1, 2, 3])
def test_global_normal_continuity_basiswise(k):
    mesh = square_mesh(1, size=1.0)
    dm = build_dofmap("bdm", mesh, k)
    seg = quadrature_rule("segment", 2 * k + 2)
    for g in range(dm.n_dofs):
        coeffs = np.zeros(dm.n_dofs)
        coeffs[g] = 1.0
        assert max_normal_jump(coeffs, dm, mesh, seg.points) < 1e-11


def test_global_normal_continuity_random_jittered():
    for periodic in (False, True):
        mesh = square_mesh(4, size=2 * np.pi, periodic=periodic, jitter=0.2,
                           seed=7)
        dm = build_dofmap("bdm", mesh, 3)
        rng = np.random.default_rng(5)
        coeffs = rng.standard_normal(dm.n_dofs)
        t = quadrature_rule("segment", 8).points
        assert max_normal_jump(coeffs, dm, mesh, t) < 1e-10


def max_normal_jump(coeffs, dm, mesh, t):
    basis = scalar_basis("triangle", dm.degree)
    u = bdm_to_vdg(coeffs, dm, mesh)
    fac = mesh.facets
    geo = mesh.geometry
    ptsL, ptsR = fac.side_points(t)
    worst = 0.0
    for f in fac.interior:
        eL, eR = fac.left_elem[f], fac.right_elem[f]
        refL = geo.pull(np.array([eL]), ptsL[f][None])[0]
        refR = geo.pull(np.array([eR]), ptsR[f][None])[0]
        uL = np.einsum("ci,iq->qc", u[eL], basis.eval(refL))
        uR = np.einsum("ci,iq->qc", u[eR], basis.eval(refR))
        jump = (uL - uR) @ fac.normals[f]
        worst = max(worst, np.abs(jump).max())
    return worst


def test_bdm_to_vdg_roundtrip():
    # the broken representation must reproduce the H(div) field pointwise
    mesh = square_mesh(2, size=1.5, jitter=0.15, seed=3)
    k = 3
    dm = build_dofmap("bdm", mesh, k)
    basis = bdm_basis(k)
    rng = np.random.default_rng(8)
    coeffs = rng.standard_normal(dm.n_dofs)
    u = bdm_to_vdg(coeffs, dm, mesh)
    scal = scalar_basis("triangle", k)
    pts = random_points(9, seed=1)
    geo = mesh.geometry
    for e in range(mesh.num_triangles):
        local = coeffs[dm.element_dofs[e]] * dm.signs[e]
        amap = AffineMap(geo.B[e], geo.offset[e], geo.det[e], geo.invB[e])
        vals, _ = piola_push(basis, amap, pts)
        direct = np.einsum("d,dqc->qc", local, vals)
        from_vdg = np.einsum("ci,iq->qc", u[e], scal.eval(pts))
        assert np.abs(direct - from_vdg).max() < 1e-12


# projection


def test_project_constant_exact():
    mesh = square_mesh(2, size=2.0, jitter=0.1, seed=1)
    coeffs = project_dg(lambda x, y: (np.ones_like(x), np.zeros_like(y)), 2,
                        mesh)
    basis = scalar_basis("triangle", 2)
    pts = random_points(5)
    vals = np.einsum("eci,iq->ecq", coeffs, basis.eval(pts))
    assert np.abs(vals[:, 0] - 1.0).max() < 1e-13
    assert np.abs(vals[:, 1]).max() < 1e-13


def test_project_linear_exact():
    mesh = square_mesh(2, size=2.0, jitter=0.1, seed=2)
    coeffs = project_dg(lambda x, y: (y, -x), 1, mesh)
    basis = scalar_basis("triangle", 1)
    pts = random_points(5)
    geo = mesh.geometry
    phys = geo.push(pts)
    vals = np.einsum("eci,iq->ecq", coeffs, basis.eval(pts))
    assert np.abs(vals[:, 0] - phys[:, :, 1]).max() < 1e-12
    assert np.abs(vals[:, 1] + phys[:, :, 0]).max() < 1e-12


def projection_error(nx, degree):
    mesh = square_mesh(nx, size=2 * np.pi)
    f = lambda x, y: (np.sin(y), np.sin(2 * x))
    coeffs = project_dg(f, degree, mesh)
    rule = quadrature_rule("triangle", 2 * degree + 4)
    basis = scalar_basis("triangle", degree)
    phi = basis.eval(rule.points)
    geo = mesh.geometry
    phys = geo.push(rule.points)
    exact = np.stack(f(phys[:, :, 0], phys[:, :, 1]), axis=1)
    vals = np.einsum("eci,iq->ecq", coeffs, phi)
    diff2 = ((vals - exact) ** 2).sum(axis=1)
    return np.sqrt(np.einsum("eq,q,e->", diff2, rule.weights, geo.det))


def test_projection_convergence_rate_k3():
    errs = [projection_error(nx, 3) for nx in (4, 8, 16)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates.min() > 3.6
    assert rates.max() < 4.4
