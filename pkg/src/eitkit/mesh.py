"""Triangulated unit-disk meshes with boundary electrodes.

The generator lays nodes on concentric rings (ring node counts proportional
to radius) and triangulates ring-to-ring, which keeps the construction
deterministic and reproducible at any target density.  Boundary nodes are
placed so that electrode arcs are tiled exactly by mesh edges.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    """Invalid mesh topology, geometry, or generation request."""


@dataclass(frozen=True)
class MeshSpec:
    """Request for a generated disk mesh.

    Parameters
    ----------
    target_nodes : int
        Desired node count; the generator lands within 15% of it.
    n_electrodes : int
        Number of evenly spaced boundary electrodes.
    electrode_coverage : float
        Fraction of the boundary arc covered by metal, in (0, 1).
    """

    target_nodes: int
    n_electrodes: int = 16
    electrode_coverage: float = 0.5

    def validate(self) -> None:
        if self.n_electrodes < 4:
            raise MeshError(f"need at least 4 electrodes, got {self.n_electrodes}")
        if self.target_nodes < 3 * self.n_electrodes:
            raise MeshError(
                f"target_nodes={self.target_nodes} too small to place "
                f"{self.n_electrodes} electrodes (minimum {3 * self.n_electrodes})"
            )
        if not 0.0 < self.electrode_coverage < 1.0:
            raise MeshError(
                f"electrode_coverage must be in (0, 1), got {self.electrode_coverage}"
            )


@dataclass
class Mesh:
    """Triangulated unit disk with electrode boundary edges.

    Attributes
    ----------
    nodes : (N, 2) float array
        Node coordinates, unit-disk normalized.
    elements : (M, 3) int array
        Counter-clockwise node-index triples.
    electrodes : list of (E_k, 2) int arrays
        Per-electrode ordered boundary edges (node-index pairs).
    boundary_nodes : (B,) int array
        Indices of nodes on the boundary circle.
    """

    nodes: np.ndarray
    elements: np.ndarray
    electrodes: list[np.ndarray]
    boundary_nodes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=float))
        self.elements = np.ascontiguousarray(np.asarray(self.elements, dtype=np.int64))
        self.electrodes = [np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in self.electrodes]
        if self.boundary_nodes is None:
            r = np.hypot(self.nodes[:, 0], self.nodes[:, 1])
            self.boundary_nodes = np.flatnonzero(r >= 1.0 - 1e-6)
        self.boundary_nodes = np.asarray(self.boundary_nodes, dtype=np.int64)
        for a in (self.nodes, self.elements, self.boundary_nodes):
            a.setflags(write=False)
        for e in self.electrodes:
            e.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as (radius, angle) with angle in [0, 2*pi)."""
        r = np.hypot(self.nodes[:, 0], self.nodes[:, 1])
        theta = np.mod(np.arctan2(self.nodes[:, 1], self.nodes[:, 0]), 2.0 * np.pi)
        return r, theta


def signed_areas(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Signed area of each triangle (positive for counter-clockwise)."""
    p0 = nodes[elements[:, 0]]
    p1 = nodes[elements[:, 1]]
    p2 = nodes[elements[:, 2]]
    return 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    )


def element_areas(mesh: Mesh) -> np.ndarray:
    return signed_areas(mesh.nodes, mesh.elements)


def element_diameters(mesh: Mesh) -> np.ndarray:
    """Longest edge of each element."""
    p = mesh.nodes[mesh.elements]  # (M, 3, 2)
    d01 = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    d12 = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    d20 = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    return np.maximum(np.maximum(d01, d12), d20)


def validate_mesh(mesh: Mesh) -> None:
    """Check the structural invariants; raise MeshError on violation."""
    n = mesh.n_nodes
    if n < 3 or mesh.n_elements < 1:
        raise MeshError("mesh too small")
    r = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
    if np.any(r > 1.0 + 1e-9):
        raise MeshError("node outside the closed unit disk")
    if mesh.elements.min() < 0 or mesh.elements.max() >= n:
        raise MeshError("element references node index out of range")
    areas = element_areas(mesh)
    if np.any(areas <= 0):
        raise MeshError("element with non-positive signed area")

    # every electrode edge must lie on the boundary and belong to some element
    edge_set = set()
    for tri in mesh.elements:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_set.add(frozenset((int(a), int(b))))
    seen = set()
    for k, edges in enumerate(mesh.electrodes):
        for a, b in edges:
            if r[a] < 1.0 - 1e-6 or r[b] < 1.0 - 1e-6:
                raise MeshError(f"electrode {k} edge ({a},{b}) not on the boundary")
            key = frozenset((int(a), int(b)))
            if key in seen:
                raise MeshError(f"electrode edge ({a},{b}) assigned twice")
            if key not in edge_set:
                raise MeshError(f"electrode edge ({a},{b}) is not a mesh edge")
            seen.add(key)


def _ring_layout(target: int, n_el: int, coverage: float):
    """Choose ring count and boundary segmentation closest to the target.

    Returns (n_rings, edges_per_electrode, edges_per_gap, ring_counts) where
    ring_counts[j] is the node count of interior ring j (1-based radius j/R).
    """
    best = None
    r_guess = max(2, int(round(math.sqrt(target / math.pi))))
    for n_rings in range(2, max(6, 3 * r_guess)):
        per0 = max(2, int(round(2.0 * math.pi * n_rings / n_el)))
        for per in range(max(2, per0 - 2), per0 + 3):
            n_e = int(round(coverage * per))
            n_e = min(max(n_e, 1), per - 1)
            # odd edge counts keep boundary nodes off the exact electrode
            # centers, where the analytic point-source sensitivity blows up
            if n_e % 2 == 0:
                if n_e + 1 <= per - 1:
                    n_e += 1
                elif n_e - 1 >= 1:
                    n_e -= 1
            n_g = per - n_e
            n_bound = n_el * per
            counts = [
                max(4, int(round(n_bound * j / n_rings)))
                for j in range(1, n_rings)
            ]
            total = 1 + sum(counts) + n_bound
            err = abs(total - target)
            if best is None or err < best[0]:
                best = (err, n_rings, n_e, n_g, counts)
    _, n_rings, n_e, n_g, counts = best
    return n_rings, n_e, n_g, counts


def _annulus_triangles(outer_ids, outer_angles, inner_ids, inner_angles):
    """Triangulate the annulus between two rings of sorted-by-angle nodes."""
    n_o = len(outer_ids)
    n_i = len(inner_ids)
    two_pi = 2.0 * math.pi
    # align the inner walk with the first outer node
    diffs = np.mod(inner_angles - outer_angles[0] + math.pi, two_pi) - math.pi
    i0 = int(np.argmin(np.abs(diffs)))

    # unwrapped angle sequences drive the two-pointer merge
    ua_o = np.empty(n_o + 1)
    ua_o[0] = outer_angles[0]
    for m in range(1, n_o + 1):
        step = (outer_angles[m % n_o] - outer_angles[(m - 1) % n_o]) % two_pi
        if step <= 0:
            step += two_pi
        ua_o[m] = ua_o[m - 1] + step
    ua_i = np.empty(n_i + 1)
    ua_i[0] = outer_angles[0] + diffs[i0]
    for m in range(1, n_i + 1):
        step = (inner_angles[(i0 + m) % n_i] - inner_angles[(i0 + m - 1) % n_i]) % two_pi
        if step <= 0:
            step += two_pi
        ua_i[m] = ua_i[m - 1] + step

    tris = []
    o = 0
    i = 0
    while o < n_o or i < n_i:
        adv_outer = o < n_o and (i >= n_i or ua_o[o + 1] <= ua_i[i + 1])
        if adv_outer:
            tris.append(
                (outer_ids[o % n_o], outer_ids[(o + 1) % n_o], inner_ids[(i0 + i) % n_i])
            )
            o += 1
        else:
            tris.append(
                (outer_ids[o % n_o], inner_ids[(i0 + i + 1) % n_i], inner_ids[(i0 + i) % n_i])
            )
            i += 1
    return tris


def generate_disk_mesh(spec: MeshSpec) -> Mesh:
    """Generate a conforming triangulated unit disk with boundary electrodes.

    Node ordering is deterministic: boundary nodes first, counter-clockwise
    from angle 0, then interior rings from the outermost inward, center last.
    """
    spec.validate()
    n_el = spec.n_electrodes
    coverage = spec.electrode_coverage
    n_rings, n_e, n_g, ring_counts = _ring_layout(
        spec.target_nodes, n_el, coverage
    )
    per = n_e + n_g
    n_bound = n_el * per

    arc_el = coverage * 2.0 * math.pi / n_el
    arc_gap = (1.0 - coverage) * 2.0 * math.pi / n_el

    # boundary angles in generation order, starting at electrode 0's arc start
    angles = np.empty(n_bound)
    electrode_edges_raw = []  # (electrode index, start position) pairs
    pos = 0
    for k in range(n_el):
        start = 2.0 * math.pi * k / n_el - arc_el / 2.0
        for i in range(n_e):
            angles[pos + i] = start + arc_el * i / n_e
        electrode_edges_raw.append((pos, n_e))
        pos += n_e
        gap_start = start + arc_el
        for j in range(n_g):
            angles[pos + j] = gap_start + arc_gap * j / n_g
        pos += n_g

    # rotate indexing so that node 0 has the smallest non-negative angle
    shift = int(np.sum(angles < 0.0))
    angles_mod = np.mod(angles, 2.0 * math.pi)

    def reindex(old):
        return (old - shift) % n_bound

    bound_xy = np.empty((n_bound, 2))
    for old in range(n_bound):
        new = reindex(old)
        bound_xy[new, 0] = math.cos(angles_mod[old])
        bound_xy[new, 1] = math.sin(angles_mod[old])

    electrodes = []
    for start, count in electrode_edges_raw:
        edges = [
            (reindex(start + i), reindex((start + i + 1) % n_bound))
            for i in range(count)
        ]
        electrodes.append(np.asarray(edges, dtype=np.int64))

    nodes = [bound_xy]
    ring_ids = [np.arange(n_bound)]
    ring_angles = [np.sort(angles_mod)]
    next_id = n_bound
    for j in range(n_rings - 1, 0, -1):
        count = ring_counts[j - 1]
        radius = j / n_rings
        offset = ((n_rings - j) % 2) * math.pi / count
        th = offset + 2.0 * math.pi * np.arange(count) / count
        th = np.mod(th, 2.0 * math.pi)
        order = np.argsort(th)
        th = th[order]
        nodes.append(np.column_stack((radius * np.cos(th), radius * np.sin(th))))
        ring_ids.append(np.arange(next_id, next_id + count))
        ring_angles.append(th)
        next_id += count
    center_id = next_id
    nodes.append(np.zeros((1, 2)))

    all_nodes = np.vstack(nodes)

    tris = []
    for outer, inner in zip(range(len(ring_ids) - 1), range(1, len(ring_ids))):
        tris.extend(
            _annulus_triangles(
                ring_ids[outer], ring_angles[outer], ring_ids[inner], ring_angles[inner]
            )
        )
    # fan around the center
    innermost_ids = ring_ids[-1]
    n_in = len(innermost_ids)
    for m in range(n_in):
        tris.append((center_id, innermost_ids[m], innermost_ids[(m + 1) % n_in]))

    mesh = Mesh(
        nodes=all_nodes,
        elements=np.asarray(tris, dtype=np.int64),
        electrodes=electrodes,
        boundary_nodes=np.arange(n_bound),
    )
    validate_mesh(mesh)
    return mesh


def node_sparsity(mesh: Mesh) -> np.ndarray:
    """Per-node mean incident-element area, min-max normalized to [0, 1].

    A constant area field maps to 0.5 everywhere.  Raises MeshError if a
    node has no incident element.
    """
    areas = element_areas(mesh)
    total = np.zeros(mesh.n_nodes)
    count = np.zeros(mesh.n_nodes)
    for v in range(3):
        np.add.at(total, mesh.elements[:, v], areas)
        np.add.at(count, mesh.elements[:, v], 1.0)
    if np.any(count == 0):
        isolated = np.flatnonzero(count == 0)
        raise MeshError(f"isolated nodes with no incident element: {isolated[:5]}")
    h = total / count
    span = h.max() - h.min()
    if span < 1e-15 * max(1.0, abs(h.max())):
        return np.full(mesh.n_nodes, 0.5)
    return (h - h.min()) / span


def save_mesh(mesh: Mesh, path) -> None:
    """Write the mesh JSON (full-precision coordinates, 0-based indices)."""
    payload = {
        "nodes": [[float(x), float(y)] for x, y in mesh.nodes],
        "elements": [[int(a), int(b), int(c)] for a, b, c in mesh.elements],
        "electrodes": [
            {"edges": [[int(a), int(b)] for a, b in e]} for e in mesh.electrodes
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_mesh(path) -> Mesh:
    """Load and validate a mesh JSON; clockwise elements are reoriented."""
    with open(path) as f:
        data = json.load(f)
    try:
        nodes = np.asarray(data["nodes"], dtype=float)
        elements = np.asarray(data["elements"], dtype=np.int64)
        electrodes = [np.asarray(e["edges"], dtype=np.int64) for e in data["electrodes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must be an array of 2D coordinates")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshError("elements must be an array of index triples")
    if elements.min(initial=0) < 0 or elements.max(initial=-1) >= len(nodes):
        raise MeshError("element references node index out of range")
    areas = signed_areas(nodes, elements)
    flipped = areas < 0
    if np.any(flipped):
        elements = elements.copy()
        elements[flipped] = elements[flipped][:, ::-1]
    mesh = Mesh(nodes=nodes, elements=elements, electrodes=electrodes)
    validate_mesh(mesh)
    return mesh
