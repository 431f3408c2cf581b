"""Simplicial meshes of intervals and polygons for P1 finite elements."""

import hashlib
import math
from functools import cached_property

import numpy as np

from .errors import DimensionError, InvalidInputError


class Mesh:
    """Conforming simplicial mesh.

    Parameters
    ----------
    nodes : array_like, shape (n_nodes, d)
        Node coordinates, ``d`` in {1, 2}.
    elements : array_like of int, shape (n_elements, d + 1)
        Zero-based vertex indices.  Negatively oriented triangles are
        reordered; degenerate elements are rejected.
    boundary : array_like of bool, optional
        Boundary flags.  By default the nodes on facets that belong to a
        single element.
    """

    def __init__(self, nodes, elements, boundary=None):
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        elements = np.array(elements, dtype=np.int64)
        d = nodes.shape[1]
        if d not in (1, 2):
            raise DimensionError(f"only 1D and 2D meshes are supported, got d={d}")
        if elements.ndim != 2 or elements.shape[1] != d + 1:
            raise DimensionError(f"elements must have {d + 1} vertices")
        if elements.min(initial=0) < 0 or elements.max(initial=0) >= len(nodes):
            raise InvalidInputError("element vertex index out of range")
        if not np.all(np.isfinite(nodes)):
            raise InvalidInputError("non-finite node coordinates")
        signed = self._signed_measure(nodes, elements)
        if np.any(np.abs(signed) <= 1e-14 * max(1.0, np.abs(signed).max(initial=1.0))):
            raise InvalidInputError("degenerate element with zero measure")
        flip = signed < 0
        if np.any(flip):
            elements[flip, -2:] = elements[flip][:, [-1, -2]]
        self.nodes = nodes
        self.elements = elements
        self.nodes.setflags(write=False)
        self.elements.setflags(write=False)
        if boundary is None:
            boundary = self._facet_boundary()
        self.boundary = np.asarray(boundary, dtype=bool)
        if self.boundary.shape != (len(nodes),):
            raise DimensionError("boundary flags must have one entry per node")
        self.boundary.setflags(write=False)

    @staticmethod
    def _signed_measure(nodes, elements):
        x = nodes[elements]
        edges = x[:, 1:, :] - x[:, :1, :]
        if nodes.shape[1] == 1:
            return edges[:, 0, 0]
        return 0.5 * (edges[:, 0, 0] * edges[:, 1, 1] - edges[:, 0, 1] * edges[:, 1, 0])

    def _facet_boundary(self):
        d = self.dim
        facets = []
        for k in range(d + 1):
            f = np.delete(self.elements, k, axis=1)
            facets.append(np.sort(f, axis=1))
        facets = np.concatenate(facets)
        uniq, counts = np.unique(facets, axis=0, return_counts=True)
        flags = np.zeros(self.n_nodes, dtype=bool)
        flags[uniq[counts == 1].ravel()] = True
        return flags

    @classmethod
    def interval(cls, n_elements, a=0.0, b=1.0):
        """Uniform partition of ``[a, b]``."""
        if n_elements < 1:
            raise InvalidInputError("need at least one element")
        x = np.linspace(a, b, n_elements + 1)
        el = np.stack([np.arange(n_elements), np.arange(1, n_elements + 1)], axis=1)
        return cls(x[:, None], el)

    @classmethod
    def unit_square(cls, nx, ny=None):
        """Structured triangulation of the unit square, two triangles per cell."""
        ny = nx if ny is None else ny
        xs, ys = np.meshgrid(np.linspace(0, 1, nx + 1), np.linspace(0, 1, ny + 1))
        nodes = np.column_stack([xs.ravel(), ys.ravel()])
        idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
        p0 = idx[:-1, :-1].ravel()
        p1 = idx[:-1, 1:].ravel()
        p2 = idx[1:, :-1].ravel()
        p3 = idx[1:, 1:].ravel()
        el = np.concatenate([np.stack([p0, p1, p3], 1), np.stack([p0, p3, p2], 1)])
        return cls(nodes, el)

    @classmethod
    def from_text(cls, path):
        """Read the plain-text format written by :meth:`to_text`."""
        with open(path) as fh:
            lines = [ln.split("#", 1)[0].strip() for ln in fh]
        lines = [ln for ln in lines if ln]
        pos = 0

        def header(name):
            nonlocal pos
            parts = lines[pos].split()
            if parts[0] != name:
                raise InvalidInputError(f"mesh file: expected '{name}', got '{parts[0]}'")
            pos += 1
            return int(parts[1])

        try:
            d = header("dim")
            nn = header("nodes")
            nodes = np.array([[float(v) for v in lines[pos + i].split()] for i in range(nn)])
            pos += nn
            ne = header("elements")
            els = np.array([[int(v) for v in lines[pos + i].split()] for i in range(ne)])
            pos += ne
        except (IndexError, ValueError) as exc:
            raise InvalidInputError(f"malformed mesh file {path}: {exc}") from exc
        if nodes.shape[1] != d:
            raise DimensionError("node coordinates do not match declared dimension")
        boundary = None
        if pos < len(lines):
            nb = header("boundary")
            ids = [int(v) for ln in lines[pos:pos + nb] for v in ln.split()]
            boundary = np.zeros(nn, dtype=bool)
            boundary[ids] = True
        return cls(nodes, els, boundary)

    def to_text(self, path):
        with open(path, "w") as fh:
            fh.write(f"dim {self.dim}\nnodes {self.n_nodes}\n")
            for row in self.nodes:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write(f"elements {self.n_elements}\n")
            for row in self.elements:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
            ids = np.flatnonzero(self.boundary)
            fh.write(f"boundary {len(ids)}\n")
            for i in ids:
                fh.write(f"{int(i)}\n")

    @property
    def dim(self):
        return self.nodes.shape[1]

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @cached_property
    def interior(self):
        """Indices of the free (non-Dirichlet) nodes."""
        return np.flatnonzero(~self.boundary)

    @cached_property
    def measures(self):
        return np.abs(self._signed_measure(self.nodes, self.elements))

    @cached_property
    def centroids(self):
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def grads(self):
        """Gradients of the barycentric coordinates, shape (n_el, d+1, d)."""
        x = self.nodes[self.elements]
        t = np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)
        tinv = np.linalg.inv(t)
        g = np.empty((self.n_elements, self.dim + 1, self.dim))
        g[:, 1:, :] = tinv
        g[:, 0, :] = -tinv.sum(axis=1)
        return g

    @cached_property
    def node_weights(self):
        """Vertex-lumped quadrature weights (trapezoidal rule in 1D)."""
        w = np.zeros(self.n_nodes)
        np.add.at(w, self.elements.ravel(),
                  np.repeat(self.measures / (self.dim + 1), self.dim + 1))
        return w

    @cached_property
    def digest(self):
        """SHA-256 of coordinates and connectivity (32 bytes)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.elements, dtype="<i8").tobytes())
        return h.digest()

    @property
    def h(self):
        """Largest element diameter."""
        x = self.nodes[self.elements]
        diam = 0.0
        for i in range(self.dim + 1):
            for j in range(i + 1, self.dim + 1):
                diam = max(diam, np.linalg.norm(x[:, i] - x[:, j], axis=1).max())
        return diam

    def locate(self, points, tol=1e-12):
        """Element index and barycentric coordinates of each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.dim == 1 and pts.shape[0] == 1 and pts.shape[1] != 1:
            pts = pts.T
        x0 = self.nodes[self.elements[:, 0]]
        out_el = np.empty(len(pts), dtype=np.int64)
        out_bc = np.empty((len(pts), self.dim + 1))
        for k, p in enumerate(pts):
            lam = np.einsum("ekj,ej->ek", self.grads[:, 1:, :], p - x0)
            bc = np.column_stack([1.0 - lam.sum(axis=1), lam])
            inside = np.flatnonzero(bc.min(axis=1) >= -tol)
            if inside.size == 0:
                raise InvalidInputError(f"point {p} lies outside the mesh")
            e = int(inside[0])
            out_el[k] = e
            out_bc[k] = np.clip(bc[e], 0.0, 1.0)
        return out_el, out_bc

    def interpolation_matrix(self, points):
        """Dense ``(n_points, n_nodes)`` matrix of P1 point evaluation."""
        el, bc = self.locate(points)
        mat = np.zeros((len(el), self.n_nodes))
        for k in range(len(el)):
            np.add.at(mat[k], self.elements[el[k]], bc[k])
        return mat

    def average_matrix(self, centers, radius):
        """Rows of local averages of a P1 field over ``|x - c| <= radius``.

        The average is approximated with vertex-lumped weights restricted to
        the ball, which is exact for fields constant on the ball.
        """
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if self.dim == 1 and centers.shape[0] == 1 and centers.shape[1] != 1:
            centers = centers.T
        mat = np.zeros((len(centers), self.n_nodes))
        for k, c in enumerate(centers):
            sel = np.linalg.norm(self.nodes - c, axis=1) <= radius + 1e-12
            if not sel.any():
                raise InvalidInputError(f"no node within {radius} of {c}")
            w = self.node_weights * sel
            mat[k] = w / w.sum()
        return mat

    def __repr__(self):
        return f"Mesh(dim={self.dim}, nodes={self.n_nodes}, elements={self.n_elements})"


def uniform_refinements(base, levels):
    """Sequence of uniform 1D meshes with ``base * 2**k`` elements."""
    return [Mesh.interval(base * 2 ** k) for k in range(levels)]


def observed_order(hs, errors):
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    hs = np.log(np.asarray(hs, dtype=float))
    es = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(hs, es, 1)[0]) if len(hs) > 1 else math.nan
