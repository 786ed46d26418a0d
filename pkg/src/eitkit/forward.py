"""Complete Electrode Model forward solver and measurement Jacobian.

Piecewise-linear FEM on the triangulated disk with per-electrode contact
impedances.  Conductivity lives on nodes; an element's conductivity is the
mean of its three vertex values.  The electrode-potential gauge (sum of
electrode potentials = 0) is enforced with a symmetric augmented row/column,
so one sparse LU factorization serves every drive pattern.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, element_areas


class ForwardError(Exception):
    """Invalid conductivity/pattern input or a failed solve."""


@dataclass(frozen=True)
class PatternSet:
    """Current injections and voltage measurement pairs (electrode indices)."""

    injections: tuple
    measurements: tuple
    current: float = 1.0

    def validate(self, n_electrodes: int) -> None:
        seen = set()
        for s, t in self.injections:
            if not (0 <= s < n_electrodes and 0 <= t < n_electrodes):
                raise ForwardError(f"injection ({s},{t}) out of range")
            if s == t:
                raise ForwardError(f"injection source equals sink: {s}")
            if (s, t) in seen:
                raise ForwardError(f"duplicate injection pair ({s},{t})")
            seen.add((s, t))
        for p, q in self.measurements:
            if not (0 <= p < n_electrodes and 0 <= q < n_electrodes):
                raise ForwardError(f"measurement ({p},{q}) out of range")
            if p == q:
                raise ForwardError(f"measurement pair degenerate: {p}")
        if self.current <= 0:
            raise ForwardError("current amplitude must be positive")

    def retained_pairs(self, drop_overlapping: bool = True):
        """(injection index, measurement index) pairs in fixed pattern order."""
        pairs = []
        for pi, (s, t) in enumerate(self.injections):
            for mi, (p, q) in enumerate(self.measurements):
                if drop_overlapping and len({s, t} & {p, q}) > 0:
                    continue
                pairs.append((pi, mi))
        return pairs


@functools.lru_cache(maxsize=32)
def _retained_arrays(patterns: PatternSet, drop_overlapping: bool):
    pairs = patterns.retained_pairs(drop_overlapping)
    pi_arr = np.fromiter((p for p, _ in pairs), dtype=np.int64, count=len(pairs))
    mi_arr = np.fromiter((q for _, q in pairs), dtype=np.int64, count=len(pairs))
    return pairs, pi_arr, mi_arr


def adjacent_measurements(n_electrodes: int):
    """All neighboring electrode pairs (p, p+1 mod K)."""
    return tuple((k, (k + 1) % n_electrodes) for k in range(n_electrodes))


def default_injections(n_electrodes: int, count: int = 54):
    """Adjacent pairs, then widening skip pairs, truncated to `count`."""
    pairs = []
    for skip in range(1, n_electrodes // 2 + 1):
        canon = set()
        for k in range(n_electrodes):
            pair = (k, (k + skip) % n_electrodes)
            key = frozenset(pair)
            if key in canon:
                continue
            canon.add(key)
            pairs.append(pair)
            if len(pairs) == count:
                return tuple(pairs)
    if len(pairs) < count:
        raise ForwardError(
            f"cannot build {count} unique injections with {n_electrodes} electrodes"
        )
    return tuple(pairs)


def default_patterns(n_electrodes: int = 16, n_injections: int = 54, current: float = 1.0) -> PatternSet:
    return PatternSet(
        injections=default_injections(n_electrodes, n_injections),
        measurements=adjacent_measurements(n_electrodes),
        current=current,
    )


@dataclass(frozen=True)
class ContactModel:
    """Per-electrode contact impedances (ohm*m); scalar broadcasts to all."""

    contact_impedance: float | tuple = 0.01

    def per_electrode(self, n_electrodes: int) -> np.ndarray:
        z = np.asarray(self.contact_impedance, dtype=float)
        if z.ndim == 0:
            z = np.full(n_electrodes, float(z))
        if z.shape != (n_electrodes,):
            raise ForwardError("contact impedance length must match electrode count")
        if np.any(z <= 0):
            raise ForwardError("contact impedances must be positive")
        return z


@dataclass
class ForwardResult:
    """Voltages for every retained (injection, measurement) pair, in order."""

    voltages: np.ndarray
    pairs: list
    electrode_potentials: np.ndarray  # (K, n_injections)
    nodal_potentials: np.ndarray | None = None  # (N, n_injections) if retained


@dataclass
class Jacobian:
    """dV/dsigma: rows follow ForwardResult.voltages, columns are nodes."""

    matrix: np.ndarray
    pairs: list


class FemContext:
    """Mesh-dependent precomputation shared by every solve on that mesh."""

    def __init__(self, mesh: Mesh, contact: ContactModel = ContactModel()):
        self.mesh = mesh
        self.n_nodes = mesh.n_nodes
        self.n_el = mesh.n_electrodes
        self.areas = element_areas(mesh)
        tri = mesh.elements
        p = mesh.nodes[tri]  # (M, 3, 2)
        # gradients of the barycentric basis: grad lambda_v, shape (M, 3, 2)
        g = np.empty_like(p)
        for v in range(3):
            a = p[:, (v + 1) % 3]
            b = p[:, (v + 2) % 3]
            g[:, v, 0] = a[:, 1] - b[:, 1]
            g[:, v, 1] = b[:, 0] - a[:, 0]
        self.basis_grad = g / (2.0 * self.areas[:, None, None])

        # unit-conductivity element stiffness entries, ready for scaling
        rows, cols, base = [], [], []
        for i in range(3):
            for j in range(3):
                rows.append(tri[:, i])
                cols.append(tri[:, j])
                base.append(
                    self.areas * np.einsum("md,md->m", self.basis_grad[:, i], self.basis_grad[:, j])
                )
        self.stiff_rows = np.concatenate(rows)
        self.stiff_cols = np.concatenate(cols)
        self.stiff_base = np.concatenate(base)
        self.n_stiff = self.stiff_base.size

        # electrode boundary blocks (independent of sigma)
        z = contact.per_electrode(self.n_el)
        self.contact = z
        n, k = self.n_nodes, self.n_el
        dim = n + k + 1  # nodes, electrode potentials, gauge multiplier
        self.dim = dim
        erows, ecols, evals = [], [], []
        for ell, edges in enumerate(mesh.electrodes):
            pa = mesh.nodes[edges[:, 0]]
            pb = mesh.nodes[edges[:, 1]]
            lengths = np.linalg.norm(pa - pb, axis=1)
            inv_z = 1.0 / z[ell]
            for (a, b), L in zip(edges, lengths):
                # edge mass matrix L/6 * [[2,1],[1,2]] scaled by 1/z
                erows += [a, b, a, b]
                ecols += [a, b, b, a]
                evals += [inv_z * L / 3.0, inv_z * L / 3.0, inv_z * L / 6.0, inv_z * L / 6.0]
                # node-electrode coupling -1/z * integral of basis
                erows += [a, b, n + ell, n + ell]
                ecols += [n + ell, n + ell, a, b]
                evals += [-inv_z * L / 2.0] * 4
            erows.append(n + ell)
            ecols.append(n + ell)
            evals.append(inv_z * float(lengths.sum()))
            # gauge row/column: electrode potentials sum to zero
            erows += [n + k, n + ell]
            ecols += [n + ell, n + k]
            evals += [1.0, 1.0]
        self.const_rows = np.asarray(erows, dtype=np.int64)
        self.const_cols = np.asarray(ecols, dtype=np.int64)
        self.const_vals = np.asarray(evals, dtype=float)

        # element -> node scatter with the 1/3 vertex share, for Jacobians
        m = mesh.n_elements
        pr = np.repeat(np.arange(m), 3)
        pc = tri.reshape(-1)
        pv = np.full(3 * m, 1.0 / 3.0)
        self.vertex_share = sp.csr_matrix((pv, (pc, pr)), shape=(n, m))
        self.tri_flat = tri.reshape(-1)
        self._workspace = {}

    def _jac_buffers(self, n_inj: int, n_meas: int, n_rows: int):
        """Reusable scratch arrays keyed by pattern dimensions."""
        key = (n_inj, n_meas, n_rows)
        buf = self._workspace.get(key)
        if buf is None:
            m = self.mesh.n_elements
            buf = {
                "u_inj": np.empty((3 * m, n_inj)),
                "u_meas": np.empty((3 * m, n_meas)),
                "g_inj": np.empty((m, 2, n_inj)),
                "g_meas": np.empty((m, 2, n_meas)),
                "dots": np.empty((m, n_inj, n_meas)),
                "t": np.empty((m, n_rows)),
            }
            self._workspace[key] = buf
        return buf


class CemSystem:
    """Factorized CEM operator for one conductivity field."""

    def __init__(self, ctx: FemContext, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (ctx.n_nodes,):
            raise ForwardError("sigma length must match node count")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ForwardError("conductivity must be positive and finite")
        self.ctx = ctx
        self.sigma = sigma
        sigma_e = sigma[ctx.mesh.elements].mean(axis=1)
        # stiffness entries are stacked as 9 blocks of length n_elements
        data = np.concatenate([np.tile(sigma_e, 9) * ctx.stiff_base, ctx.const_vals])
        rows = np.concatenate([ctx.stiff_rows, ctx.const_rows])
        cols = np.concatenate([ctx.stiff_cols, ctx.const_cols])
        mat = sp.coo_matrix((data, (rows, cols)), shape=(ctx.dim, ctx.dim)).tocsc()
        try:
            self.lu = spla.splu(mat)
        except RuntimeError as exc:  # pragma: no cover - guarded by the gauge
            raise ForwardError(f"singular CEM system: {exc}") from exc
        self.matrix = mat

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.lu.solve(rhs)


def assemble_system(mesh_or_ctx, sigma, contact: ContactModel = ContactModel()) -> CemSystem:
    """Assemble and factorize the CEM system for one conductivity field."""
    ctx = mesh_or_ctx if isinstance(mesh_or_ctx, FemContext) else FemContext(mesh_or_ctx, contact)
    return CemSystem(ctx, sigma)


def _injection_rhs(ctx: FemContext, patterns: PatternSet) -> np.ndarray:
    rhs = np.zeros((ctx.dim, len(patterns.injections)))
    for i, (s, t) in enumerate(patterns.injections):
        rhs[ctx.n_nodes + s, i] = patterns.current
        rhs[ctx.n_nodes + t, i] = -patterns.current
    return rhs


def _measurement_rhs(ctx: FemContext, patterns: PatternSet) -> np.ndarray:
    rhs = np.zeros((ctx.dim, len(patterns.measurements)))
    for i, (p, q) in enumerate(patterns.measurements):
        rhs[ctx.n_nodes + p, i] = 1.0
        rhs[ctx.n_nodes + q, i] = -1.0
    return rhs


def solve_forward(
    mesh_or_ctx,
    sigma,
    patterns: PatternSet,
    contact: ContactModel = ContactModel(),
    drop_overlapping: bool = True,
    retain_potentials: bool = False,
    system: CemSystem | None = None,
) -> ForwardResult:
    """Electrode voltages for every retained (injection, measurement) pair."""
    ctx = mesh_or_ctx if isinstance(mesh_or_ctx, FemContext) else FemContext(mesh_or_ctx, contact)
    patterns.validate(ctx.n_el)
    sys_ = system if system is not None else CemSystem(ctx, sigma)
    sol = sys_.solve(_injection_rhs(ctx, patterns))
    u_el = sol[ctx.n_nodes : ctx.n_nodes + ctx.n_el, :]
    pairs = patterns.retained_pairs(drop_overlapping)
    voltages = np.empty(len(pairs))
    for row, (pi, mi) in enumerate(pairs):
        p, q = patterns.measurements[mi]
        voltages[row] = u_el[p, pi] - u_el[q, pi]
    return ForwardResult(
        voltages=voltages,
        pairs=pairs,
        electrode_potentials=u_el,
        nodal_potentials=sol[: ctx.n_nodes, :] if retain_potentials else None,
    )


def jacobian(
    mesh_or_ctx,
    sigma,
    patterns: PatternSet,
    contact: ContactModel = ContactModel(),
    drop_overlapping: bool = True,
    system: CemSystem | None = None,
    forward_result: ForwardResult | None = None,
) -> Jacobian:
    """Adjoint dV/dsigma for every retained pair.

    Each entry combines the drive field and the field excited by the
    measurement pair: the per-element product -grad(u_inj).grad(u_meas)*area
    is shared equally among the element's three vertices, matching the
    vertex-mean conductivity rule used in assembly.
    """
    ctx = mesh_or_ctx if isinstance(mesh_or_ctx, FemContext) else FemContext(mesh_or_ctx, contact)
    patterns.validate(ctx.n_el)
    sys_ = system if system is not None else CemSystem(ctx, sigma)
    sol_inj = sys_.solve(_injection_rhs(ctx, patterns))
    sol_meas = sys_.solve(_measurement_rhs(ctx, patterns))
    return _jacobian_from_fields(ctx, patterns, sol_inj, sol_meas, drop_overlapping)


def _jacobian_from_fields(ctx, patterns, sol_inj, sol_meas, drop_overlapping):
    m = ctx.mesh.n_elements
    pairs, pi_arr, mi_arr = _retained_arrays(patterns, drop_overlapping)
    n_p = len(patterns.injections)
    n_q = len(patterns.measurements)
    buf = ctx._jac_buffers(n_p, n_q, len(pairs))
    np.take(sol_inj[: ctx.n_nodes], ctx.tri_flat, axis=0, out=buf["u_inj"])
    np.take(sol_meas[: ctx.n_nodes], ctx.tri_flat, axis=0, out=buf["u_meas"])
    u_inj = buf["u_inj"].reshape(m, 3, n_p)
    u_meas = buf["u_meas"].reshape(m, 3, n_q)
    g_inj = np.einsum("mvd,mvp->mdp", ctx.basis_grad, u_inj, out=buf["g_inj"])
    g_meas = np.einsum("mvd,mvq->mdq", ctx.basis_grad, u_meas, out=buf["g_meas"])
    g_meas *= ctx.areas[:, None, None]
    dots = np.matmul(g_inj.transpose(0, 2, 1), g_meas, out=buf["dots"])  # (M, P, Q)
    flat = pi_arr * n_q + mi_arr
    t = np.take(dots.reshape(m, n_p * n_q), flat, axis=1, out=buf["t"])
    np.negative(t, out=t)
    mat = (ctx.vertex_share @ t).T
    if not np.all(np.isfinite(mat)):
        raise ForwardError("non-finite Jacobian entries")
    return Jacobian(matrix=mat, pairs=pairs)


def forward_and_jacobian(
    ctx: FemContext,
    sigma,
    patterns: PatternSet,
    drop_overlapping: bool = True,
) -> tuple[ForwardResult, Jacobian]:
    """One assembly and one pair of multi-RHS solves for both outputs."""
    patterns.validate(ctx.n_el)
    sys_ = CemSystem(ctx, sigma)
    sol_inj = sys_.solve(_injection_rhs(ctx, patterns))
    sol_meas = sys_.solve(_measurement_rhs(ctx, patterns))
    u_el = sol_inj[ctx.n_nodes : ctx.n_nodes + ctx.n_el, :]
    pairs = patterns.retained_pairs(drop_overlapping)
    voltages = np.empty(len(pairs))
    for row, (pi, mi) in enumerate(pairs):
        p, q = patterns.measurements[mi]
        voltages[row] = u_el[p, pi] - u_el[q, pi]
    fwd = ForwardResult(voltages=voltages, pairs=pairs, electrode_potentials=u_el)
    jac = _jacobian_from_fields(ctx, patterns, sol_inj, sol_meas, drop_overlapping)
    return fwd, jac


def vjp(jac: Jacobian, residual_gradient: np.ndarray) -> np.ndarray:
    """Exact transpose product J^T g, mapping measurement-space to nodes."""
    g = np.asarray(residual_gradient, dtype=float)
    if g.shape != (jac.matrix.shape[0],):
        raise ForwardError(
            f"gradient length {g.shape} does not match {jac.matrix.shape[0]} measurements"
        )
    return jac.matrix.T @ g


@dataclass
class Measurement:
    """A pattern set plus its (possibly noisy) voltage vector."""

    patterns: PatternSet
    voltages: np.ndarray
    voltages_clean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def save_measurement(meas: Measurement, path) -> None:
    payload = {
        "patterns": {
            "injections": [[int(a), int(b)] for a, b in meas.patterns.injections],
            "measurements": [[int(a), int(b)] for a, b in meas.patterns.measurements],
            "current_mA": float(meas.patterns.current),
        },
        "voltages": [float(v) for v in meas.voltages],
        "meta": meas.meta,
    }
    if meas.voltages_clean is not None:
        payload["voltages_clean"] = [float(v) for v in meas.voltages_clean]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_measurement(path) -> Measurement:
    with open(path) as f:
        data = json.load(f)
    try:
        patterns = PatternSet(
            injections=tuple(tuple(p) for p in data["patterns"]["injections"]),
            measurements=tuple(tuple(p) for p in data["patterns"]["measurements"]),
            current=float(data["patterns"].get("current_mA", 1.0)),
        )
        voltages = np.asarray(data["voltages"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ForwardError(f"malformed measurement file {path}: {exc}") from exc
    clean = data.get("voltages_clean")
    return Measurement(
        patterns=patterns,
        voltages=voltages,
        voltages_clean=None if clean is None else np.asarray(clean, dtype=float),
        meta=data.get("meta", {}),
    )
