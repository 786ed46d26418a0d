"""Simulated ground-truth conductivity fields and measurement generation.

Phantoms are built from circles, rectangles, and equilateral triangles on a
unit background.  Measurement simulation forward-solves on a fine mesh and
adds seeded Gaussian noise at a prescribed SNR, keeping the clean vector for
diagnostics.  Simulation and inversion meshes stay distinct so the data
never comes from the inversion discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .forward import FemContext, Measurement, PatternSet, default_patterns, solve_forward
from .mesh import Mesh, MeshSpec


class PhantomError(Exception):
    """Shape outside the disk, overlap, or an inconsistent spec."""


@dataclass(frozen=True)
class Shape:
    """One inclusion: circle, rectangle, or (equilateral) triangle."""

    kind: str
    center: tuple
    size: tuple
    rotation: float = 0.0
    value: float = 2.0

    def validate(self) -> None:
        if self.kind not in ("circle", "rectangle", "triangle"):
            raise PhantomError(f"unknown shape kind '{self.kind}'")
        if self.value <= 0:
            raise PhantomError("shape conductivity must be positive")
        if self.max_radius() > 1.0 + 1e-12:
            raise PhantomError(f"{self.kind} at {self.center} extends outside the disk")

    def _vertices(self) -> np.ndarray:
        cx, cy = self.center
        if self.kind == "rectangle":
            w, h = self.size
            corners = np.array(
                [[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]]
            )
        elif self.kind == "triangle":
            (side,) = self.size
            rc = side / math.sqrt(3.0)
            ang = self.rotation + 2.0 * math.pi * np.arange(3) / 3.0
            corners = rc * np.column_stack([np.cos(ang), np.sin(ang)])
            return corners + np.array([cx, cy])
        else:
            raise PhantomError("circle has no vertices")
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + np.array([cx, cy])

    def max_radius(self) -> float:
        cx, cy = self.center
        if self.kind == "circle":
            (r,) = self.size
            return math.hypot(cx, cy) + r
        return float(np.max(np.linalg.norm(self._vertices(), axis=1)))

    def area(self) -> float:
        if self.kind == "circle":
            (r,) = self.size
            return math.pi * r * r
        if self.kind == "rectangle":
            w, h = self.size
            return w * h
        (side,) = self.size
        return math.sqrt(3.0) / 4.0 * side * side

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cx, cy = self.center
        if self.kind == "circle":
            (r,) = self.size
            return (points[:, 0] - cx) ** 2 + (points[:, 1] - cy) ** 2 <= r * r
        verts = self._vertices()
        inside = np.ones(points.shape[0], dtype=bool)
        n = len(verts)
        for i in range(n):
            a = verts[i]
            b = verts[(i + 1) % n]
            cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
            inside &= cross >= -1e-12
        return inside


@dataclass(frozen=True)
class PhantomSpec:
    """Ground-truth scene plus the simulation/inversion mesh pairing."""

    shapes: tuple = ()
    background: float = 1.0
    snr_db: float | None = 60.0
    sim_mesh: MeshSpec = field(default_factory=lambda: MeshSpec(target_nodes=5833))
    inv_mesh: MeshSpec = field(default_factory=lambda: MeshSpec(target_nodes=1145))
    name: str = "custom"

    def validate(self) -> None:
        if self.background <= 0:
            raise PhantomError("background conductivity must be positive")
        if self.snr_db is not None and self.snr_db <= 0:
            raise PhantomError("SNR must be positive (or None for noise off)")
        for s in self.shapes:
            s.validate()
        if self.sim_mesh == self.inv_mesh:
            raise PhantomError(
                "simulation and inversion meshes must differ to avoid the inverse crime"
            )


def rasterize_phantom(spec: PhantomSpec, mesh: Mesh) -> np.ndarray:
    """Nodal conductivity: later shapes override earlier ones."""
    spec.validate()
    sigma = np.full(mesh.n_nodes, spec.background)
    for shape in spec.shapes:
        sigma[shape.contains(mesh.nodes)] = shape.value
    return sigma


def simulate_measurements(
    spec: PhantomSpec,
    patterns: PatternSet,
    mesh: Mesh,
    seed: int = 0,
    contact=None,
    drop_overlapping: bool = True,
) -> Measurement:
    """Forward-solve the phantom on `mesh` and add seeded Gaussian noise.

    Noise standard deviation is RMS(V) * 10^(-SNR/20); snr_db=None disables
    noise, in which case the voltages equal the clean vector exactly.
    """
    spec.validate()
    from .forward import ContactModel

    ctx = FemContext(mesh, contact if contact is not None else ContactModel())
    sigma = rasterize_phantom(spec, mesh)
    clean = solve_forward(ctx, sigma, patterns, drop_overlapping=drop_overlapping).voltages
    meta = {"snr_db": spec.snr_db, "seed": seed, "phantom": spec.name}
    if spec.snr_db is None:
        noisy = clean.copy()
    else:
        rms = float(np.sqrt(np.mean(clean * clean)))
        std = rms * 10.0 ** (-spec.snr_db / 20.0)
        rng = np.random.default_rng(seed)
        noisy = clean + rng.normal(0.0, std, size=clean.shape)
    return Measurement(patterns=patterns, voltages=noisy, voltages_clean=clean, meta=meta)


TRIANGLE_SIDE = 0.4
TRIANGLE_INRADIUS = TRIANGLE_SIDE / (2.0 * math.sqrt(3.0))


def distance_sweep_spec(d: float, **overrides) -> PhantomSpec:
    """Two mirrored equilateral triangles (side 0.4) centered at (-d,0), (d,0).

    The flat sides face each other, so the pair overlaps when d is below the
    triangle inradius.
    """
    if not 0.1 <= d <= 0.5:
        raise PhantomError(f"distance {d} outside the supported range [0.1, 0.5]")
    if d <= TRIANGLE_INRADIUS + 1e-12:
        raise PhantomError(f"triangles overlap at distance {d}")
    left = Shape(kind="triangle", center=(-d, 0.0), size=(TRIANGLE_SIDE,), rotation=math.pi, value=2.0)
    right = Shape(kind="triangle", center=(d, 0.0), size=(TRIANGLE_SIDE,), rotation=0.0, value=2.0)
    return PhantomSpec(shapes=(left, right), name=f"distance_{d:g}", **overrides)


@dataclass(frozen=True)
class PolygonShape(Shape):
    """Convex polygon inclusion given by explicit counter-clockwise vertices."""

    vertices: tuple = ()

    def validate(self) -> None:
        if len(self.vertices) < 3:
            raise PhantomError("polygon needs at least 3 vertices")
        if self.value <= 0:
            raise PhantomError("shape conductivity must be positive")
        if self.max_radius() > 1.0 + 1e-12:
            raise PhantomError(f"polygon at {self.center} extends outside the disk")

    def _vertices(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def max_radius(self) -> float:
        return float(np.max(np.linalg.norm(self._vertices(), axis=1)))

    def area(self) -> float:
        v = self._vertices()
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        verts = self._vertices()
        inside = np.ones(points.shape[0], dtype=bool)
        n = len(verts)
        for i in range(n):
            a = verts[i]
            b = verts[(i + 1) % n]
            cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
            inside &= cross >= -1e-12
        return inside


def _ellipse_shape(center, rx, ry, value, n_vertices=24) -> PolygonShape:
    ang = 2.0 * math.pi * np.arange(n_vertices) / n_vertices
    verts = np.column_stack([center[0] + rx * np.cos(ang), center[1] + ry * np.sin(ang)])
    return PolygonShape(
        kind="polygon",
        center=tuple(center),
        size=(0.0,),
        value=value,
        vertices=tuple(map(tuple, verts)),
    )


def heart_lungs_spec(**overrides) -> PhantomSpec:
    """Low-contrast chest-like scene: two lungs at 0.8, a heart at 1.2."""
    lungs = [
        _ellipse_shape((-0.42, 0.05), 0.28, 0.45, 0.8),
        _ellipse_shape((0.42, 0.05), 0.28, 0.45, 0.8),
    ]
    heart = Shape(kind="circle", center=(0.0, -0.38), size=(0.22,), value=1.2)
    return PhantomSpec(shapes=(*lungs, heart), name="heart_lungs", **overrides)


def case_spec(name: str, **overrides) -> PhantomSpec:
    """Named scenes used throughout the evaluation workflows."""
    shapes = {
        "case1": (
            Shape(kind="circle", center=(-0.35, 0.35), size=(0.22,), value=2.0),
            Shape(kind="rectangle", center=(0.40, 0.30), size=(0.40, 0.30), value=2.0),
            Shape(kind="triangle", center=(0.0, -0.45), size=(0.45,), rotation=math.pi / 2, value=2.0),
        ),
        "case2": (
            Shape(kind="circle", center=(-0.40, 0.0), size=(0.25,), value=2.0),
            Shape(kind="rectangle", center=(0.42, 0.0), size=(0.35, 0.35), rotation=math.pi / 6, value=2.0),
        ),
        "case3": (
            Shape(kind="triangle", center=(-0.38, -0.20), size=(0.50,), value=2.0),
            Shape(kind="circle", center=(0.35, 0.35), size=(0.20,), value=2.0),
        ),
        "homogeneous": (),
    }
    if name == "heart_lungs" or name == "heart-lungs":
        return heart_lungs_spec(**overrides)
    if name not in shapes:
        raise PhantomError(f"unknown case '{name}'")
    return PhantomSpec(shapes=shapes[name], name=name, **overrides)


def default_simulation(
    spec: PhantomSpec,
    seed: int = 0,
    patterns: PatternSet | None = None,
):
    """Generate (sim mesh, inv mesh, ground truth on sim mesh, measurement)."""
    from .mesh import generate_disk_mesh

    spec.validate()
    sim_mesh = generate_disk_mesh(spec.sim_mesh)
    inv_mesh = generate_disk_mesh(spec.inv_mesh)
    pats = patterns if patterns is not None else default_patterns(spec.sim_mesh.n_electrodes)
    sigma_true = rasterize_phantom(spec, sim_mesh)
    meas = simulate_measurements(spec, pats, sim_mesh, seed=seed)
    return sim_mesh, inv_mesh, sigma_true, meas
