"""Uniform quadrilateral meshes of the unit square and DOF layouts.

The mesh is an n-by-n grid of axis-aligned squares of side h = 1/n.
Skeleton edges carry a fixed global orientation: horizontal edges have
normal +y, vertical edges have normal +x.  An element therefore sees its
four edges (listed bottom, right, top, left) with outward-normal signs
(-1, +1, +1, -1) relative to the global normal, which is the single sign
convention used for flux unknowns throughout the library.

A DofLayout numbers the global degrees of freedom of one function-space
component and owns the element-to-global connectivity map.  Local DOF
orderings agree with the master-element basis orderings in
:mod:`dlsfem.basis`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UnsupportedSpace(Exception):
    """Requested function-space kind is not implemented."""


#: local edge order within an element and the outward-vs-global normal sign
LOCAL_EDGES = ("bottom", "right", "top", "left")
EDGE_NORMAL_SIGNS = np.array([-1.0, 1.0, 1.0, -1.0])

#: local vertex ids (ll, lr, ur, ul) at the two ends of each local edge,
#: listed in the direction of increasing global edge parameter
EDGE_VERTICES = {"bottom": (0, 1), "right": (1, 2), "top": (3, 2), "left": (0, 3)}

SPACE_KINDS = (
    "h1",          # H1-conforming, order p
    "hdiv",        # H(div)-conforming, order p
    "l2",          # L2-broken (one Y^p component)
    "trace_h1",    # skeleton trace of W^p: vertices + degree-p edge functions
    "trace_flux",  # skeleton normal trace of V^p: degree p-1 per edge, signed
    "h1_broken",   # discontinuous W^p test space
    "hdiv_broken", # discontinuous V^p test space
    "l2_broken",   # discontinuous Y^p test space
)


@dataclass
class Mesh:
    """Uniform n-by-n quadrilateral partition of (0,1)^2."""

    n: int
    h: float
    vertices: np.ndarray          # (nv, 2)
    elements: np.ndarray          # (ne, 4) vertex ids, order ll, lr, ur, ul
    element_edges: np.ndarray     # (ne, 4) edge ids, order bottom/right/top/left
    edge_orientation: np.ndarray  # (nedges,) 0 = horizontal (normal +y), 1 = vertical
    edge_midpoints: np.ndarray    # (nedges, 2)
    edge_on_boundary: np.ndarray  # (nedges,) bool
    vertex_on_boundary: np.ndarray  # (nv,) bool

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_orientation.shape[0]

    @property
    def n_interior_edges(self) -> int:
        return int(np.count_nonzero(~self.edge_on_boundary))

    def element_origin(self, e: int) -> np.ndarray:
        """Lower-left corner of element e."""
        return self.vertices[self.elements[e, 0]]

    def element_origins(self) -> np.ndarray:
        return self.vertices[self.elements[:, 0]]


def uniform_mesh(n: int) -> Mesh:
    """Uniform quadrilateral mesh with n subdivisions per side."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h = 1.0 / n
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(ix, iy):
        return iy * (n + 1) + ix

    ne = n * n
    elements = np.empty((ne, 4), dtype=np.int64)
    element_edges = np.empty((ne, 4), dtype=np.int64)
    n_h = n * (n + 1)  # horizontal edges (rows iy = 0..n of n each)

    def hedge(ix, iy):
        return iy * n + ix

    def vedge(ix, iy):
        return n_h + iy * (n + 1) + ix

    for ey in range(n):
        for ex in range(n):
            e = ey * n + ex
            elements[e] = (vid(ex, ey), vid(ex + 1, ey), vid(ex + 1, ey + 1), vid(ex, ey + 1))
            element_edges[e] = (
                hedge(ex, ey),       # bottom
                vedge(ex + 1, ey),   # right
                hedge(ex, ey + 1),   # top
                vedge(ex, ey),       # left
            )

    nedges = 2 * n * (n + 1)
    orientation = np.zeros(nedges, dtype=np.int64)
    orientation[n_h:] = 1
    midpoints = np.empty((nedges, 2))
    on_boundary = np.zeros(nedges, dtype=bool)
    for iy in range(n + 1):
        for ix in range(n):
            eid = hedge(ix, iy)
            midpoints[eid] = ((ix + 0.5) * h, iy * h)
            on_boundary[eid] = iy in (0, n)
    for iy in range(n):
        for ix in range(n + 1):
            eid = vedge(ix, iy)
            midpoints[eid] = (ix * h, (iy + 0.5) * h)
            on_boundary[eid] = ix in (0, n)

    vertex_on_boundary = (
        np.isclose(vertices[:, 0], 0.0)
        | np.isclose(vertices[:, 0], 1.0)
        | np.isclose(vertices[:, 1], 0.0)
        | np.isclose(vertices[:, 1], 1.0)
    )
    return Mesh(
        n=n,
        h=h,
        vertices=vertices,
        elements=elements,
        element_edges=element_edges,
        edge_orientation=orientation,
        edge_midpoints=midpoints,
        edge_on_boundary=on_boundary,
        vertex_on_boundary=vertex_on_boundary,
    )


@dataclass
class DofLayout:
    """Global numbering of one function-space component.

    element_dofs[e] lists the global ids of element e's local DOFs in the
    canonical local ordering of :mod:`dlsfem.basis`; element_signs carries
    the matching orientation signs (all +1 on these axis-aligned meshes,
    the flux sign convention being baked into the local edge signs).
    """

    kind: str
    p: int
    n_total: int
    element_dofs: np.ndarray        # (ne, nloc) int
    element_signs: np.ndarray       # (ne, nloc) float
    boundary_dofs: np.ndarray       # sorted global ids on the domain boundary
    positions: np.ndarray           # (n_total, 2) representative coordinates
    counts: dict = field(default_factory=dict)  # per-entity DOF counts

    @property
    def n_local(self) -> int:
        return self.element_dofs.shape[1]


def _h1_like_layout(mesh: Mesh, p: int, with_interior: bool) -> DofLayout:
    """Shared constructor for the h1 and trace_h1 layouts."""
    n = mesh.n
    nv = (n + 1) * (n + 1)
    nedge = mesh.n_edges
    ker = p - 1
    n_total = nv + nedge * ker + (with_interior ) * mesh.n_elements * ker * ker
    interior_base = nv + nedge * ker

    nloc = 4 + 4 * ker + (ker * ker if with_interior else 0)
    dofs = np.empty((mesh.n_elements, nloc), dtype=np.int64)
    positions = np.empty((n_total, 2))
    positions[:nv] = mesh.vertices
    for eid in range(nedge):
        positions[nv + eid * ker : nv + (eid + 1) * ker] = mesh.edge_midpoints[eid]

    for e in range(mesh.n_elements):
        cols = list(mesh.elements[e])
        for le in range(4):
            eid = mesh.element_edges[e, le]
            cols.extend(nv + eid * ker + k for k in range(ker))
        if with_interior:
            base = interior_base + e * ker * ker
            cols.extend(base + k for k in range(ker * ker))
            positions[base : base + ker * ker] = mesh.element_origin(e) + 0.5 * mesh.h
        dofs[e] = cols

    boundary = np.concatenate(
        [
            np.flatnonzero(mesh.vertex_on_boundary),
            np.concatenate(
                [
                    nv + eid * ker + np.arange(ker)
                    for eid in np.flatnonzero(mesh.edge_on_boundary)
                ]
            )
            if ker > 0
            else np.zeros(0, dtype=np.int64),
        ]
    )
    counts = {
        "vertex": nv,
        "edge": nedge * ker,
        "interior": (mesh.n_elements * ker * ker) if with_interior else 0,
    }
    return DofLayout(
        kind="h1" if with_interior else "trace_h1",
        p=p,
        n_total=n_total,
        element_dofs=dofs,
        element_signs=np.ones_like(dofs, dtype=np.float64),
        boundary_dofs=np.unique(boundary),
        positions=positions,
        counts=counts,
    )


def _hdiv_layout(mesh: Mesh, p: int) -> DofLayout:
    nedge = mesh.n_edges
    n_int = 2 * p * (p - 1)
    n_total = nedge * p + mesh.n_elements * n_int
    interior_base = nedge * p

    nloc = 4 * p + n_int
    dofs = np.empty((mesh.n_elements, nloc), dtype=np.int64)
    positions = np.empty((n_total, 2))
    for eid in range(nedge):
        positions[eid * p : (eid + 1) * p] = mesh.edge_midpoints[eid]
    for e in range(mesh.n_elements):
        cols = []
        for le in range(4):
            eid = mesh.element_edges[e, le]
            cols.extend(eid * p + k for k in range(p))
        base = interior_base + e * n_int
        cols.extend(base + k for k in range(n_int))
        positions[base : base + n_int] = mesh.element_origin(e) + 0.5 * mesh.h
        dofs[e] = cols

    boundary = np.concatenate(
        [eid * p + np.arange(p) for eid in np.flatnonzero(mesh.edge_on_boundary)]
    )
    return DofLayout(
        kind="hdiv",
        p=p,
        n_total=n_total,
        element_dofs=dofs,
        element_signs=np.ones_like(dofs, dtype=np.float64),
        boundary_dofs=np.unique(boundary),
        positions=positions,
        counts={"edge": nedge * p, "interior": mesh.n_elements * n_int},
    )


def _flux_layout(mesh: Mesh, p: int) -> DofLayout:
    """Skeleton flux traces: p single-valued DOFs per edge."""
    nedge = mesh.n_edges
    n_total = nedge * p
    dofs = np.empty((mesh.n_elements, 4 * p), dtype=np.int64)
    positions = np.repeat(mesh.edge_midpoints, p, axis=0)
    for e in range(mesh.n_elements):
        cols = []
        for le in range(4):
            eid = mesh.element_edges[e, le]
            cols.extend(eid * p + k for k in range(p))
        dofs[e] = cols
    boundary = np.concatenate(
        [eid * p + np.arange(p) for eid in np.flatnonzero(mesh.edge_on_boundary)]
    )
    return DofLayout(
        kind="trace_flux",
        p=p,
        n_total=n_total,
        element_dofs=dofs,
        element_signs=np.ones_like(dofs, dtype=np.float64),
        boundary_dofs=np.unique(boundary),
        positions=positions,
        counts={"edge": n_total},
    )


def _broken_layout(mesh: Mesh, kind: str, p: int) -> DofLayout:
    per_element = {
        "l2": p * p,
        "l2_broken": p * p,
        "h1_broken": (p + 1) * (p + 1),
        "hdiv_broken": 2 * p * (p + 1),
    }[kind]
    n_total = mesh.n_elements * per_element
    dofs = (
        np.arange(per_element, dtype=np.int64)[None, :]
        + per_element * np.arange(mesh.n_elements, dtype=np.int64)[:, None]
    )
    positions = np.repeat(mesh.element_origins() + 0.5 * mesh.h, per_element, axis=0)
    return DofLayout(
        kind=kind,
        p=p,
        n_total=n_total,
        element_dofs=dofs,
        element_signs=np.ones_like(dofs, dtype=np.float64),
        boundary_dofs=np.zeros(0, dtype=np.int64),
        positions=positions,
        counts={"interior": n_total},
    )


def build_layout(mesh: Mesh, kind: str, p: int) -> DofLayout:
    """Construct the DOF layout and connectivity of one component."""
    if p < 1:
        raise UnsupportedSpace("order p must be >= 1")
    if kind == "h1":
        return _h1_like_layout(mesh, p, with_interior=True)
    if kind == "trace_h1":
        return _h1_like_layout(mesh, p, with_interior=False)
    if kind == "hdiv":
        return _hdiv_layout(mesh, p)
    if kind == "trace_flux":
        return _flux_layout(mesh, p)
    if kind in ("l2", "l2_broken", "h1_broken", "hdiv_broken"):
        return _broken_layout(mesh, kind, p)
    raise UnsupportedSpace(f"unknown space kind {kind!r}")
