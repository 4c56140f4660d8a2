"""Triangle meshes: file format, generators, geometry, facet topology.

Mesh file format (ASCII, '#' starts a comment, blank lines ignored):

    nv nt nbf np
    x y                  (nv vertex lines)
    v0 v1 v2             (nt triangle lines, zero-based vertex ids)
    v0 v1 label          (nbf labeled boundary facet lines)
    mv0 mv1 sv0 sv1 tx ty  (np periodic pair lines)

A periodic pair identifies the slave facet (sv0, sv1) with the master
facet (mv0, mv1); the slave vertices must equal the master vertices
translated by (tx, ty) to 1e-12. Identification happens at the facet
level only: the slave facet disappears from the topology and the master
facet becomes interior, while the vertex arrays keep both copies.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

_DEGENERATE_REL = 1e-14
_PERIODIC_TOL = 1e-12

# local edge le sits opposite local vertex le, directed CCW
LOCAL_EDGES = ((1, 2), (2, 0), (0, 1))


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshTopologyError(ValueError):
    """Raised for non-manifold connectivity or bad periodic pairs."""


class MeshGeometryError(ValueError):
    """Raised for degenerate elements or mismatched periodic geometry."""


@dataclass(frozen=True)
class AffineMap:
    """Affine map x = B @ xhat + b from the reference triangle."""

    B: np.ndarray
    b: np.ndarray
    det: float
    invB: np.ndarray

    def push(self, ref_points):
        return ref_points @ self.B.T + self.b

    def pull(self, points):
        return (points - self.b) @ self.invB.T


class Mesh:
    """Immutable triangle mesh with optional boundary labels and periodicity.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array
        Reoriented to positive (CCW) orientation on construction.
    boundary_labels : dict, optional
        Maps a sorted vertex pair (v0, v1) to a label string.
    periodic_pairs : sequence, optional
        Entries (mv0, mv1, sv0, sv1, tx, ty).
    """

    def __init__(self, vertices, triangles, boundary_labels=None,
                 periodic_pairs=None):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshFormatError("vertices must be an (nv, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshFormatError("triangles must be an (nt, 3) array")
        if triangles.size and (triangles.min() < 0
                               or triangles.max() >= len(vertices)):
            raise MeshTopologyError("triangle vertex id out of range")

        # fix orientation, then reject degenerate elements
        v = vertices
        t = triangles.copy()
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        flip = det < 0
        t[flip, 1], t[flip, 2] = t[flip, 2], t[flip, 1].copy()
        det = np.abs(det)

        edges = v[t].reshape(-1, 3, 2)
        d01 = np.linalg.norm(edges[:, 1] - edges[:, 0], axis=1)
        d12 = np.linalg.norm(edges[:, 2] - edges[:, 1], axis=1)
        d20 = np.linalg.norm(edges[:, 0] - edges[:, 2], axis=1)
        diam = np.maximum(np.maximum(d01, d12), d20)
        h = diam.max() if len(t) else 0.0
        if len(t) and det.min() < _DEGENERATE_REL * h * h:
            bad = int(np.argmin(det))
            raise MeshGeometryError(
                f"element {bad} is degenerate (area {det.min() / 2:.3e})")

        self.vertices = vertices
        self.triangles = t
        self.boundary_labels = dict(boundary_labels or {})
        self.periodic_pairs = [tuple(p) for p in (periodic_pairs or [])]
        self._diam = diam
        self._det = det
        vertices.setflags(write=False)
        t.setflags(write=False)
        self._validate_periodic()

    def _validate_periodic(self):
        v = self.vertices
        for mv0, mv1, sv0, sv1, tx, ty in self.periodic_pairs:
            shift = np.array([tx, ty])
            err = max(np.linalg.norm(v[sv0] - v[mv0] - shift),
                      np.linalg.norm(v[sv1] - v[mv1] - shift))
            if err > _PERIODIC_TOL:
                raise MeshGeometryError(
                    f"periodic pair ({mv0},{mv1})->({sv0},{sv1}) mismatches "
                    f"its translation by {err:.3e}")

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def h_max(self):
        return float(self._diam.max())

    @property
    def h_min(self):
        return float(self._diam.min())

    @property
    def areas(self):
        return self._det / 2.0

    @property
    def area(self):
        return float(self._det.sum() / 2.0)

    @cached_property
    def geometry(self):
        return _Geometry(self)

    @cached_property
    def facets(self):
        return build_facets(self)

    def __repr__(self):
        return (f"Mesh({self.num_vertices} vertices, "
                f"{self.num_triangles} triangles)")


class _Geometry:
    """Batched affine maps for all elements of a mesh."""

    def __init__(self, mesh):
        v = mesh.vertices
        t = mesh.triangles
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        B = np.empty((len(t), 2, 2))
        B[:, :, 0] = p1 - p0
        B[:, :, 1] = p2 - p0
        det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
        invB = np.empty_like(B)
        invB[:, 0, 0] = B[:, 1, 1] / det
        invB[:, 0, 1] = -B[:, 0, 1] / det
        invB[:, 1, 0] = -B[:, 1, 0] / det
        invB[:, 1, 1] = B[:, 0, 0] / det
        self.B = B
        self.offset = np.ascontiguousarray(p0)
        self.det = det
        self.invB = invB
        for arr in (self.B, self.offset, self.det, self.invB):
            arr.setflags(write=False)

    def push(self, ref_points):
        """Map reference points (nq, 2) into every element, out (nt, nq, 2)."""
        return np.einsum("ecd,qd->eqc", self.B, ref_points) \
            + self.offset[:, None, :]

    def pull(self, elems, points):
        """Map physical points (n, nq, 2) back into elements `elems`."""
        diff = points - self.offset[elems][:, None, :]
        return np.einsum("edc,eqc->eqd", self.invB[elems], diff)


def affine_map(mesh, e):
    """Affine map of element e (reference triangle (0,0)-(1,0)-(0,1))."""
    geo = mesh.geometry
    return AffineMap(B=geo.B[e], b=geo.offset[e], det=float(geo.det[e]),
                     invB=geo.invB[e])


class FacetTopology:
    """Facet arrays for a mesh, with periodic slaves merged away.

    Every facet stores its master geometry (vertex pair v0 < v1), the left
    element (the facet's owner; its outward normal is the stored normal),
    and for interior facets the right element. For a merged periodic facet
    the right element touches the facet through the translated slave edge;
    `translation` maps master-side points onto the slave side.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        pairs = {}
        for e, tri in enumerate(mesh.triangles):
            for le, (a, b) in enumerate(LOCAL_EDGES):
                key = tuple(sorted((tri[a], tri[b])))
                pairs.setdefault(key, []).append((e, le))

        for key, inc in pairs.items():
            if len(inc) > 2:
                raise MeshTopologyError(
                    f"edge {key} is shared by {len(inc)} triangles")

        for key in mesh.boundary_labels:
            if key not in pairs or len(pairs[key]) != 1:
                raise MeshTopologyError(
                    f"labeled boundary facet {key} is not a boundary edge")

        # periodic merge: slave facet disappears, master becomes interior
        merged = {}
        for mv0, mv1, sv0, sv1, tx, ty in mesh.periodic_pairs:
            mkey = tuple(sorted((mv0, mv1)))
            skey = tuple(sorted((sv0, sv1)))
            for key, name in ((mkey, "master"), (skey, "slave")):
                if key not in pairs:
                    raise MeshTopologyError(
                        f"periodic {name} facet {key} does not exist")
                if len(pairs[key]) != 1:
                    raise MeshTopologyError(
                        f"periodic {name} facet {key} is not on the boundary")
            if mkey in merged or skey in merged:
                raise MeshTopologyError(
                    f"facet {mkey} or {skey} appears in two periodic pairs")
            merged[mkey] = (skey, (mv0, mv1, sv0, sv1, tx, ty))
            merged[skey] = None  # consumed

        v0, v1 = [], []
        left_elem, left_edge = [], []
        right_elem, right_edge = [], []
        translation, labels = [], []
        slave_start = []  # slave vertex matching v0, -1 if not periodic
        for key in sorted(pairs):
            if key in merged and merged[key] is None:
                continue
            inc = pairs[key]
            (eL, leL) = inc[0]
            if key in merged:
                skey, (mv0, mv1, sv0, sv1, tx, ty) = merged[key]
                (eR, leR) = pairs[skey][0]
                translation.append((tx, ty))
                slave_start.append(sv0 if key[0] == mv0 else sv1)
                labels.append(None)
            elif len(inc) == 2:
                (eR, leR) = inc[1]
                translation.append((0.0, 0.0))
                slave_start.append(-1)
                labels.append(None)
            else:
                eR, leR = -1, -1
                translation.append((0.0, 0.0))
                slave_start.append(-1)
                labels.append(mesh.boundary_labels.get(key, "unmarked"))
            v0.append(key[0])
            v1.append(key[1])
            left_elem.append(eL)
            left_edge.append(leL)
            right_elem.append(eR)
            right_edge.append(leR)

        self.v0 = np.asarray(v0, dtype=np.int64)
        self.v1 = np.asarray(v1, dtype=np.int64)
        self.left_elem = np.asarray(left_elem, dtype=np.int64)
        self.left_edge = np.asarray(left_edge, dtype=np.int64)
        self.right_elem = np.asarray(right_elem, dtype=np.int64)
        self.right_edge = np.asarray(right_edge, dtype=np.int64)
        self.translation = np.asarray(translation, dtype=float)
        self.labels = labels

        verts = mesh.vertices
        p0 = verts[self.v0]
        p1 = verts[self.v1]
        tang = p1 - p0
        self.lengths = np.linalg.norm(tang, axis=1)
        # normal points out of the left element
        normals = np.column_stack([tang[:, 1], -tang[:, 0]])
        normals /= self.lengths[:, None]
        tri = mesh.triangles
        a = np.array([LOCAL_EDGES[le][0] for le in self.left_edge])
        b = np.array([LOCAL_EDGES[le][1] for le in self.left_edge])
        pa = verts[tri[self.left_elem, a]]
        pb = verts[tri[self.left_elem, b]]
        ccw = pb - pa  # CCW edge of the left element, outward = (dy, -dx)
        out = np.column_stack([ccw[:, 1], -ccw[:, 0]])
        sign = np.sign(np.einsum("fd,fd->f", normals, out))
        normals *= sign[:, None]
        self.normals = normals

        # direction flags: does the side's CCW edge start at the facet's v0?
        self.left_flip = tri[self.left_elem, a] != self.v0
        self.right_flip = np.zeros(len(self.v0), dtype=bool)
        interior = self.right_elem >= 0
        ra = np.array([LOCAL_EDGES[le][0] if le >= 0 else 0
                       for le in self.right_edge])
        rstart = tri[self.right_elem, ra]
        expect = np.where(np.asarray(slave_start) >= 0,
                          np.asarray(slave_start), self.v0)
        self.right_flip[interior] = rstart[interior] != expect[interior]

        self.interior_mask = interior
        self.boundary_mask = ~interior
        self.interior = np.nonzero(self.interior_mask)[0]
        self.boundary = np.nonzero(self.boundary_mask)[0]

        # element-local edge -> (facet, side)
        nt = mesh.num_triangles
        self.elem_facet = np.full((nt, 3), -1, dtype=np.int64)
        self.elem_side = np.zeros((nt, 3), dtype=np.int64)
        f = np.arange(len(self.v0))
        self.elem_facet[self.left_elem, self.left_edge] = f
        self.elem_side[self.left_elem, self.left_edge] = 0
        self.elem_facet[self.right_elem[interior],
                        self.right_edge[interior]] = f[interior]
        self.elem_side[self.right_elem[interior],
                       self.right_edge[interior]] = 1
        if (self.elem_facet < 0).any():
            raise MeshTopologyError("element edge without facet")

        for arr in (self.v0, self.v1, self.left_elem, self.left_edge,
                    self.right_elem, self.right_edge, self.translation,
                    self.lengths, self.normals, self.elem_facet,
                    self.elem_side):
            arr.setflags(write=False)

    @property
    def n_facets(self):
        return len(self.v0)

    def side_points(self, quad_t):
        """Physical facet quadrature points seen from each side.

        Returns (left (nf, nq, 2), right (nf, nq, 2)); right-side points
        include the periodic translation where applicable.
        """
        verts = self.mesh.vertices
        p0 = verts[self.v0][:, None, :]
        p1 = verts[self.v1][:, None, :]
        pts = p0 + quad_t[None, :, None] * (p1 - p0)
        return pts, pts + self.translation[:, None, :]

    def boundary_by_label(self):
        """Map label -> array of boundary facet indices."""
        out = {}
        for f in self.boundary:
            out.setdefault(self.labels[f], []).append(f)
        return {k: np.asarray(ids, dtype=np.int64)
                for k, ids in out.items()}


def build_facets(mesh):
    """Build (or fetch) the facet topology of a mesh."""
    return FacetTopology(mesh)


def load_mesh(path):
    """Read a mesh from the ASCII format described in the module docstring."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                rows.append((lineno, text.split()))
    if not rows:
        raise MeshFormatError(f"{path}: empty mesh file")

    def take(kinds, what):
        if not rows:
            raise MeshFormatError(f"{path}: unexpected end of file in {what}")
        lineno, fields = rows.pop(0)
        if len(fields) != len(kinds):
            raise MeshFormatError(
                f"{path}:{lineno}: expected {len(kinds)} fields for {what}, "
                f"got {len(fields)}")
        out = []
        for kind, field in zip(kinds, fields):
            try:
                out.append(kind(field))
            except ValueError:
                raise MeshFormatError(
                    f"{path}:{lineno}: bad value {field!r} in {what}") \
                    from None
        return out

    nv, nt, nbf, nper = take((int, int, int, int), "header")
    verts = np.array([take((float, float), "vertex") for _ in range(nv)],
                     dtype=float).reshape(nv, 2)
    tris = np.array([take((int, int, int), "triangle") for _ in range(nt)],
                    dtype=np.int64).reshape(nt, 3)
    labels = {}
    for _ in range(nbf):
        a, b, label = take((int, int, str), "boundary facet")
        labels[tuple(sorted((a, b)))] = label
    pairs = [tuple(take((int, int, int, int, float, float), "periodic pair"))
             for _ in range(nper)]
    if rows:
        lineno, _ = rows[0]
        raise MeshFormatError(f"{path}:{lineno}: trailing data after mesh")
    return Mesh(verts, tris, boundary_labels=labels, periodic_pairs=pairs)


def square_mesh(nx, size=2.0 * np.pi, periodic=False, jitter=0.0, seed=0,
                ny=None, diagonal="right"):
    """Structured triangulated square [0, size]^2, optionally jittered.

    Parameters
    ----------
    nx, ny : int
        Grid cells per direction (ny defaults to nx). Two triangles per cell.
    periodic : bool or (bool, bool)
        Identify left/right and/or bottom/top boundaries.
    jitter : float
        Interior vertices move by at most `jitter * h` (h = grid pitch),
        deterministically from `seed`. Must stay <= 0.25 so elements cannot
        invert. Boundary vertices never move, so periodic identification
        stays exact.
    diagonal : str
        "right": every cell is split along the same diagonal.
        "alternate": the split direction flips with cell parity, which
        removes the directional bias of the leading interpolation error.
    """
    if ny is None:
        ny = nx
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    if not 0.0 <= jitter <= 0.25:
        raise ValueError("jitter must lie in [0, 0.25]")
    if diagonal not in ("right", "alternate"):
        raise ValueError(f"diagonal must be 'right' or 'alternate', "
                         f"got {diagonal!r}")
    if isinstance(periodic, bool):
        periodic = (periodic, periodic)
    per_x, per_y = periodic

    hx = size / nx
    hy = size / ny
    xs = np.arange(nx + 1) * hx
    ys = np.arange(ny + 1) * hy
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        radius = jitter * min(hx, hy) * np.sqrt(rng.uniform(
            size=(ny + 1, nx + 1)))
        angle = rng.uniform(0.0, 2.0 * np.pi, size=(ny + 1, nx + 1))
        mask = np.zeros((ny + 1, nx + 1), dtype=bool)
        mask[1:-1, 1:-1] = True
        verts[:, 0] += (mask * radius * np.cos(angle)).ravel()
        verts[:, 1] += (mask * radius * np.sin(angle)).ravel()

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if diagonal == "alternate" and (i + j) % 2:
                tris.append((a, b, d))
                tris.append((b, c, d))
            else:
                tris.append((a, b, c))
                tris.append((a, c, d))

    labels = {}
    pairs = []
    for j in range(ny):
        lkey = (vid(0, j), vid(0, j + 1))
        rkey = (vid(nx, j), vid(nx, j + 1))
        if per_x:
            pairs.append((*lkey, *rkey, size, 0.0))
        else:
            labels[tuple(sorted(lkey))] = "left"
            labels[tuple(sorted(rkey))] = "right"
    for i in range(nx):
        bkey = (vid(i, 0), vid(i + 1, 0))
        tkey = (vid(i, ny), vid(i + 1, ny))
        if per_y:
            pairs.append((*bkey, *tkey, 0.0, size))
        else:
            labels[tuple(sorted(bkey))] = "bottom"
            labels[tuple(sorted(tkey))] = "top"

    return Mesh(verts, np.asarray(tris), boundary_labels=labels,
                periodic_pairs=pairs)


def reference_triangle():
    """Single-element mesh of the reference triangle."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    labels = {(0, 1): "bottom", (1, 2): "hyp", (0, 2): "left"}
    return Mesh(verts, tris, boundary_labels=labels)
