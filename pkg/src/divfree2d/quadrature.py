"""Quadrature rules on the reference triangle and the unit segment.

Triangle rules come from the collapsed-coordinate (Duffy) substitution
x = a*(1-b), y = b, which turns the triangle integral into a tensor
product of a Gauss-Legendre rule in a and a Gauss-Jacobi(1,0) rule in b.
The resulting rule has ceil((d+1)/2)**2 strictly interior points, all
weights positive, and is exact for every polynomial of total degree d.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadRule:
    domain: str
    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    @property
    def n_points(self):
        return self.weights.shape[0]


def quadrature_rule(domain, degree):
    """Return a cached rule exact for polynomials of total degree `degree`.

    Parameters
    ----------
    domain : str
        "triangle" (reference triangle (0,0)-(1,0)-(0,1), points (n,2))
        or "segment" (unit interval [0,1], points (n,)).
    degree : int
        Requested polynomial exactness, >= 0.
    """
    if degree < 0:
        raise ValueError(f"quadrature degree must be >= 0, got {degree}")
    if domain == "triangle":
        return _triangle_rule(int(degree))
    if domain == "segment":
        return _segment_rule(int(degree))
    raise ValueError(f"unknown quadrature domain {domain!r}")


@lru_cache(maxsize=None)
def _segment_rule(degree):
    m = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(m)
    pts = 0.5 * (x + 1.0)
    wts = 0.5 * w
    _freeze(pts, wts)
    return QuadRule("segment", pts, wts, 2 * m - 1)


@lru_cache(maxsize=None)
def _triangle_rule(degree):
    m = degree // 2 + 1
    xa, wa = np.polynomial.legendre.leggauss(m)
    # weight (1-x) on [-1,1]; mapped to (1-b) db on [0,1] this absorbs the
    # Jacobian of the Duffy substitution exactly
    xb, wb = roots_jacobi(m, 1.0, 0.0)
    a = 0.5 * (xa + 1.0)
    b = 0.5 * (xb + 1.0)
    pa, pb = np.meshgrid(a, b, indexing="ij")
    pts = np.column_stack([(pa * (1.0 - pb)).ravel(), pb.ravel()])
    wts = np.outer(0.5 * wa, 0.25 * wb).ravel()
    _freeze(pts, wts)
    return QuadRule("triangle", pts, wts, 2 * m - 1)


def _freeze(*arrays):
    for arr in arrays:
        arr.setflags(write=False)
