"""Closed-form disk sensitivity and the per-node encoding-level map.

For a homogeneous unit disk driven by a boundary source/sink pair, the
potential has a closed form; averaging the squared field strength over all
adjacent electrode pairs gives a per-node sensitivity score.  Combining it
with local mesh sparsity yields the real-valued level assigned to each node,
which the hybrid encoder uses to allocate representational capacity.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, node_sparsity

#: additive floor inside the log of the level score
EPS_SENSITIVITY = 1e-12

#: nodes are pulled to this radius before evaluating the closed form
RADIUS_CLAMP = 1.0 - 1e-6


class SensitivityError(Exception):
    """Singular evaluation point or inconsistent level-map inputs."""


@dataclass(frozen=True)
class AnalyticConfig:
    """Homogeneous-disk drive configuration (unit radius, unit background)."""

    n_electrodes: int = 16
    current: float = 1.0
    sigma0: float = 1.0

    def validate(self):
        if self.n_electrodes < 4:
            raise SensitivityError("need at least 4 electrodes")
        if self.current <= 0:
            raise SensitivityError("current must be positive")
        if self.sigma0 <= 0:
            raise SensitivityError("background conductivity must be positive")


def analytic_potential(r, theta, theta_in, theta_out, config: AnalyticConfig = AnalyticConfig()):
    """Potential at (r, theta) for a boundary source at theta_in, sink at theta_out.

    Valid for 0 <= r < 1; the boundary point at an electrode angle is a
    logarithmic singularity and raises SensitivityError.
    """
    config.validate()
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    num = 1.0 - 2.0 * r * np.cos(theta - theta_out) + r * r
    den = 1.0 - 2.0 * r * np.cos(theta - theta_in) + r * r
    if np.any(num <= 0.0) or np.any(den <= 0.0):
        raise SensitivityError("potential is singular at an electrode point")
    phi = (config.current / (2.0 * math.pi * config.sigma0)) * np.log(num / den)
    if not np.all(np.isfinite(phi)):
        raise SensitivityError("non-finite potential evaluation")
    return phi


def nodal_sensitivity(mesh: Mesh, config: AnalyticConfig = AnalyticConfig()) -> np.ndarray:
    """Signed (non-positive) sensitivity score per node.

    Averages the squared field strength of the closed-form potential over
    all adjacent boundary-pair drives.  Node radii are clamped to keep the
    evaluation finite on the boundary.
    """
    config.validate()
    k = config.n_electrodes
    r, theta = mesh.polar()
    r = np.minimum(r, RADIUS_CLAMP)
    thetas = 2.0 * math.pi * np.arange(k + 1) / k  # theta_k, wrapping to theta_0

    acc = np.zeros(mesh.n_nodes)
    pref = config.current**2 / (4.0 * math.pi**2)
    for idx in range(k):
        t_lo = thetas[idx]
        t_hi = thetas[idx + 1]
        d = r * r + 1.0 - 2.0 * r * np.cos(theta - t_hi)
        e = r * r + 1.0 - 2.0 * r * np.cos(theta - t_lo)
        gx = (r - np.cos(theta - t_hi)) / d - (r - np.cos(theta - t_lo)) / e
        gy = np.sin(theta - t_hi) / d - np.sin(theta - t_lo) / e
        acc += pref * (gx * gx + gy * gy)
    return -acc / k


@dataclass
class LevelMap:
    """Per-node sensitivity, sparsity, and assigned real-valued level."""

    sensitivity: np.ndarray
    sparsity: np.ndarray
    level: np.ndarray
    mu: float
    nu: float
    n_levels: int

    def save(self, path) -> None:
        payload = {
            "S": [float(v) for v in self.sensitivity],
            "H": [float(v) for v in self.sparsity],
            "level": [float(v) for v in self.level],
            "mu": float(self.mu),
            "nu": float(self.nu),
            "L": int(self.n_levels),
        }
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f)
        os.replace(tmp, path)


def level_map(
    mesh: Mesh,
    sensitivity: np.ndarray,
    sparsity: np.ndarray,
    mu: float = -1.0,
    nu: float = 1.0,
    n_levels: int = 16,
) -> LevelMap:
    """Map per-node scores to encoding levels in [0, n_levels - 1].

    raw_i = mu * log10(|S_i| + eps) + nu * (1 - H_i), min-max normalized and
    scaled onto [0, n_levels - 1].  A constant raw score maps every node to
    the middle level.  With the default mu = -1, low-|S| (deep) nodes land on
    the fine end of the pyramid.
    """
    if n_levels < 2:
        raise SensitivityError("need at least 2 levels")
    s = np.asarray(sensitivity, dtype=float)
    h = np.asarray(sparsity, dtype=float)
    if s.shape != (mesh.n_nodes,) or h.shape != (mesh.n_nodes,):
        raise SensitivityError("sensitivity/sparsity length must match node count")
    raw = mu * np.log10(np.abs(s) + EPS_SENSITIVITY) + nu * (1.0 - h)
    span = raw.max() - raw.min()
    if span < 1e-15 * max(1.0, abs(raw.max())):
        level = np.full(mesh.n_nodes, (n_levels - 1) / 2.0)
    else:
        level = (raw - raw.min()) / span * (n_levels - 1)
    return LevelMap(
        sensitivity=s, sparsity=h, level=level, mu=mu, nu=nu, n_levels=n_levels
    )


def default_level_map(
    mesh: Mesh, mu: float = -1.0, nu: float = 1.0, n_levels: int = 16
) -> LevelMap:
    """Level map with the standard inputs: closed-form S and mesh sparsity H."""
    cfg = AnalyticConfig(n_electrodes=mesh.n_electrodes)
    return level_map(mesh, nodal_sensitivity(mesh, cfg), node_sparsity(mesh), mu, nu, n_levels)


def coordinate_sensitivity(mesh: Mesh, field_gradient: np.ndarray, jacobian) -> np.ndarray:
    """Measurement-space sensitivity of each node's coordinate.

    Chains the voltage/conductivity Jacobian with the per-node magnitude of
    the representation's spatial derivative and aggregates as the Euclidean
    norm over measurements: out_n = |g_n| * ||J[:, n]||.
    """
    g = np.asarray(field_gradient, dtype=float)
    mat = jacobian.matrix if hasattr(jacobian, "matrix") else np.asarray(jacobian)
    if g.shape != (mesh.n_nodes,) or mat.shape[1] != mesh.n_nodes:
        raise SensitivityError("dimension mismatch between gradient and Jacobian")
    return np.abs(g) * np.linalg.norm(mat, axis=0)
