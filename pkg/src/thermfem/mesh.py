"""Interval meshes and structured triangulations of axis-aligned rectangles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Invalid mesh construction request."""


class InvalidRangeError(MeshError):
    pass


class TooCoarseError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplicial mesh: segments in 1D, triangles in 2D.

    Vertices are numbered ascending in 1D and lexicographically by
    (y, x) in 2D, and every 2D cell is split along the same lower-left
    to upper-right diagonal, so assembled matrices are bit-stable
    across runs.  ``h`` is the maximum element diameter, recomputable
    exactly from the stored geometry.  Instances are immutable.
    """

    dim: int
    vertices: np.ndarray            # (n_vertices, dim)
    elements: np.ndarray            # (n_elements, dim + 1), vertex indices
    boundary_vertices: frozenset
    h: float
    interval: tuple | None = None   # (a, b, n) for 1D meshes
    rect: tuple | None = None       # (x0, y0, x1, y1, nx, ny) for 2D meshes

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[list(self.boundary_vertices)] = True
        return mask

    def element_diameters(self) -> np.ndarray:
        """Diameter (longest edge) of every element."""
        p = self.vertices[self.elements]
        if self.dim == 1:
            return np.abs(p[:, 1, 0] - p[:, 0, 0])
        edges = [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]]
        lengths = np.stack([np.linalg.norm(e, axis=1) for e in edges])
        return lengths.max(axis=0)

    def signed_areas(self) -> np.ndarray:
        """Signed areas of 2D elements (positive for the chosen orientation)."""
        if self.dim != 2:
            raise MeshError("signed areas are defined for 2D meshes only")
        p = self.vertices[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in radians."""
        if self.dim != 2:
            raise MeshError("angles are defined for 2D meshes only")
        p = self.vertices[self.elements]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.sum(a * b, axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return float(np.min(np.stack(angles)))

    def domain_bounds(self) -> tuple:
        """Bounding interval (a, b) or rectangle (x0, y0, x1, y1)."""
        if self.dim == 1:
            return (self.interval[0], self.interval[1])
        return self.rect[:4]

    def dump_text(self, stream) -> None:
        """Write the mesh as plain text (debugging aid).

        Format: one header line ``dim n_vertices n_elements``, then one
        line per vertex, then one line of vertex indices per element.
        """
        stream.write(f"{self.dim} {self.n_vertices} {self.n_elements}\n")
        for v in self.vertices:
            stream.write(" ".join(f"{c:.17g}" for c in v) + "\n")
        for e in self.elements:
            stream.write(" ".join(str(int(i)) for i in e) + "\n")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _finish(dim, vertices, elements, boundary, interval=None, rect=None) -> Mesh:
    mesh = Mesh(
        dim=dim,
        vertices=_freeze(np.ascontiguousarray(vertices, dtype=float)),
        elements=_freeze(np.ascontiguousarray(elements, dtype=np.int64)),
        boundary_vertices=frozenset(int(i) for i in boundary),
        h=0.0,
        interval=interval,
        rect=rect,
    )
    object.__setattr__(mesh, "h", float(mesh.element_diameters().max()))
    return mesh


def make_interval_mesh(a: float, b: float, n: int) -> Mesh:
    """Uniform partition of (a, b) into n segments.

    Vertices are sorted ascending; the endpoints are the boundary.
    """
    if not a < b:
        raise InvalidRangeError(f"need a < b, got a={a}, b={b}")
    if n < 2:
        raise TooCoarseError(f"need at least 2 elements, got n={n}")
    x = np.linspace(a, b, n + 1)
    vertices = x[:, None]
    elements = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
    return _finish(1, vertices, elements, {0, n}, interval=(a, b, n))


def make_rect_mesh(x0: float, y0: float, x1: float, y1: float,
                   nx: int, ny: int) -> Mesh:
    """Structured triangulation of [x0,x1] x [y0,y1] with nx*ny cells.

    Each cell is split along its lower-left to upper-right diagonal
    into two counterclockwise triangles; all perimeter vertices are
    marked as boundary.
    """
    if not (x0 < x1 and y0 < y1):
        raise InvalidRangeError(
            f"need x0 < x1 and y0 < y1, got ({x0},{y0})-({x1},{y1})")
    if nx < 2 or ny < 2:
        raise TooCoarseError(f"need nx, ny >= 2, got nx={nx}, ny={ny}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)            # row-major in y: index iy*(nx+1)+ix
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    k = 0
    for iy in range(ny):
        base = iy * (nx + 1)
        for ix in range(nx):
            v00 = base + ix
            v10 = v00 + 1
            v01 = v00 + (nx + 1)
            v11 = v01 + 1
            elements[k] = (v00, v10, v11)
            elements[k + 1] = (v00, v11, v01)
            k += 2

    ix_all = np.tile(np.arange(nx + 1), ny + 1)
    iy_all = np.repeat(np.arange(ny + 1), nx + 1)
    on_bdry = (ix_all == 0) | (ix_all == nx) | (iy_all == 0) | (iy_all == ny)
    boundary = set(np.nonzero(on_bdry)[0])
    return _finish(2, vertices, elements, boundary,
                   rect=(x0, y0, x1, y1, nx, ny))


def refine(mesh: Mesh) -> Mesh:
    """Uniform refinement: h is halved exactly for uniform meshes.

    1D segments are split at their midpoints; 2D grids are regenerated
    with nx and ny doubled, which preserves the triangle similarity
    classes (the minimum angle is identical across levels).
    """
    if mesh.dim == 1:
        old = mesh.vertices[:, 0]
        x = np.empty(2 * old.size - 1)
        x[0::2] = old
        x[1::2] = 0.5 * (old[:-1] + old[1:])
        n = x.size - 1
        vertices = x[:, None]
        elements = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
        a, b, n_old = mesh.interval
        return _finish(1, vertices, elements, {0, n}, interval=(a, b, 2 * n_old))
    x0, y0, x1, y1, nx, ny = mesh.rect
    return make_rect_mesh(x0, y0, x1, y1, 2 * nx, 2 * ny)


def validate(mesh: Mesh) -> None:
    """Check structural mesh invariants; raises MeshError on failure."""
    el = mesh.elements
    if np.any(el < 0) or np.any(el >= mesh.n_vertices):
        raise MeshError("element vertex index out of range")
    for row in el:
        if len(set(int(i) for i in row)) != len(row):
            raise MeshError("repeated vertex index in element")
    if mesh.dim == 2 and np.any(mesh.signed_areas() <= 0):
        raise MeshError("non-positive triangle area")
    if not np.isclose(mesh.h, mesh.element_diameters().max(), rtol=0, atol=0):
        raise MeshError("stored h does not match geometry")
