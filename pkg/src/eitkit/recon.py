"""Reconstruction drivers: neural-field variants and TV Gauss-Newton.

Neural methods fit a coordinate network to measured voltages through the
CEM forward operator; the representation itself is the regularizer (no
explicit penalty by default).  The classic baseline minimizes the same data
term plus a smoothed total-variation penalty with a damped Gauss-Newton
iteration.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .encoding import FourierBank, GlobalFeature, HashGrid, MipMapPyramid
from .forward import (
    ContactModel,
    FemContext,
    Measurement,
    forward_and_jacobian,
    jacobian as compute_jacobian,
    solve_forward,
    vjp,
)
from .mesh import Mesh, element_areas, node_sparsity
from .network import init_params, mlp_backward, mlp_forward
from .optim import AdamW, AdamWConfig, FreqSchedule, OptimError, maybe_resample, schedule_s0
from .sensitivity import AnalyticConfig, coordinate_sensitivity, level_map, nodal_sensitivity

NEURAL_METHODS = ("phync", "ffp", "hash", "hybhash")
METHODS = NEURAL_METHODS + ("tv",)

#: per-method defaults on top of ReconConfig's field defaults.  The pure
#: Fourier baseline trains on a fixed bank (its head alone cannot re-adapt
#: to mid-training redraws the way feature-grid methods can); the TV weight
#: follows the Morozov discrepancy rule for the 60 dB protocol.
METHOD_DEFAULTS = {
    "ffp": {"resample_every": 10**9},
    "tv": {"tv_alpha": 1e-5},
}


class ReconError(Exception):
    """Bad configuration or an unrecoverable numerical failure."""


@dataclass
class ReconConfig:
    """Everything a reconstruction needs besides the mesh and data."""

    method: str = "phync"
    seed: int = 0
    total_iters: int = 1000
    out_scale: float = 2.0
    contact_impedance: float = 0.01
    drop_overlapping: bool = True
    # level mapping
    n_levels: int = 16
    mu: float = -1.0
    nu: float = 1.0
    # mipmap pyramid
    mipmap_channels: int = 32
    mipmap_n_min: int = 4
    mipmap_n_max: int = 64
    feature_init_scale: float = 1e-4
    # Fourier banks
    fourier_frequencies: int = 16
    hybhash_fourier_frequencies: int = 8
    eta: float = 1.05
    # blend Fourier features across the two neighboring banks at fractional
    # levels (continuous encoding) instead of picking the nearest bank
    fourier_level_blend: bool = False
    # global feature
    global_dim: int = 16
    # hash grid
    hash_levels: int = 32
    hash_channels: int = 2
    hash_n_min: int = 4
    hash_n_max: int = 64
    hash_table_size: int = 131072
    # optimizer
    lr_mlp: float = 5e-3
    lr_features: float = 5e-2
    weight_decay: float = 1e-4
    clip_norm: float | None = None
    # bandwidth schedule
    s_min: float = 2.0
    s_max: float = 12.0
    steepness: float = 0.02
    midpoint: float = 400.0
    resample_every: int = 100
    # no resampling beyond this fraction of training: the bandwidth has
    # saturated there and the annealed learning rate could no longer
    # re-adapt the head to a fresh bank
    resample_stop_fraction: float = 0.7
    # optional explicit smoothness term for neural methods
    neural_tv_alpha: float = 0.0
    # 'none': mean squared raw-voltage residual; 'relative': residuals
    # scaled by per-measurement magnitude, which upweights the small deep
    # -region voltages
    measurement_weighting: str = "relative"
    # additive floor for the relative weights, as a fraction of the median
    # voltage magnitude
    measurement_weight_floor: float = 0.05
    # Jacobian refresh interval; None = every iteration up to 1500 nodes
    jacobian_refresh: int | None = None
    # TV baseline
    tv_alpha: float = 1e-3
    tv_beta: float = 1e-4
    tv_max_iters: int = 30
    tv_sigma_min: float = 1e-3

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ReconError(f"unknown method '{self.method}' (expected one of {METHODS})")
        if self.seed is None:
            raise ReconError("seed is mandatory")
        if self.total_iters < 1:
            raise ReconError("total_iters must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ReconConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def for_method(cls, method: str, **overrides) -> "ReconConfig":
        """Config with the per-method tuned defaults applied first."""
        base = cls().to_dict()
        base.update(METHOD_DEFAULTS.get(method, {}))
        base.update(overrides)
        base["method"] = method
        cfg = cls.from_dict(base)
        cfg.validate()
        return cfg

    def schedule(self) -> FreqSchedule:
        return FreqSchedule(
            s_min=self.s_min,
            s_max=self.s_max,
            steepness=self.steepness,
            midpoint=self.midpoint,
            resample_every=self.resample_every,
        )

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(
            lr_mlp=self.lr_mlp,
            lr_features=self.lr_features,
            weight_decay=self.weight_decay,
            total_iters=self.total_iters,
            clip_norm=self.clip_norm,
        )


@dataclass
class ReconResult:
    """Final field plus the training trace; `field` carries the live model."""

    method: str
    sigma: np.ndarray
    loss_history: list
    seed: int
    config: dict
    wall_time: float = 0.0
    aborted_at: int | None = None
    objective_history: list | None = None
    field: object | None = None
    state: object | None = None
    warning: str | None = None
    training_mesh: object | None = None


def save_result(result: ReconResult, path) -> None:
    payload = {
        "method": result.method,
        "sigma": [float(v) for v in result.sigma],
        "loss_history": [float(v) for v in result.loss_history],
        "seed": int(result.seed),
        "config": result.config,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_result(path) -> ReconResult:
    with open(path) as f:
        data = json.load(f)
    return ReconResult(
        method=data["method"],
        sigma=np.asarray(data["sigma"], dtype=float),
        loss_history=list(data["loss_history"]),
        seed=int(data["seed"]),
        config=data["config"],
    )


class NeuralField:
    """Coordinate-to-conductivity model for one reconstruction method."""

    def __init__(self, method: str, config: ReconConfig):
        if method not in NEURAL_METHODS:
            raise ReconError(f"'{method}' is not a neural method")
        self.method = method
        self.config = config
        s0 = schedule_s0(0.0, config.schedule())
        self.bank = None
        self.pyramid = None
        self.global_feature = None
        self.hash_grid = None
        if method == "phync":
            self.bank = FourierBank(
                config.n_levels, config.fourier_frequencies, s0, config.eta,
                seed=np.random.SeedSequence([config.seed, 1]),
            )
            self.pyramid = MipMapPyramid(
                config.n_levels, config.mipmap_channels, config.mipmap_n_min,
                config.mipmap_n_max, config.feature_init_scale,
                seed=np.random.SeedSequence([config.seed, 2]),
            )
            self.global_feature = GlobalFeature(
                config.global_dim, config.feature_init_scale,
                seed=np.random.SeedSequence([config.seed, 3]),
            )
            self.encoding_dim = self.bank.dim + self.pyramid.dim + self.global_feature.dim
        elif method == "ffp":
            self.bank = FourierBank(
                1, config.fourier_frequencies, s0, config.eta,
                seed=np.random.SeedSequence([config.seed, 1]),
            )
            self.encoding_dim = self.bank.dim
        elif method == "hash":
            self.hash_grid = HashGrid(
                config.hash_levels, config.hash_channels, config.hash_n_min,
                config.hash_n_max, config.hash_table_size, config.feature_init_scale,
                seed=np.random.SeedSequence([config.seed, 4]),
            )
            self.encoding_dim = self.hash_grid.dim
        else:  # hybhash
            self.bank = FourierBank(
                1, config.hybhash_fourier_frequencies, s0, config.eta,
                seed=np.random.SeedSequence([config.seed, 1]),
            )
            self.hash_grid = HashGrid(
                config.hash_levels, config.hash_channels, config.hash_n_min,
                config.hash_n_max, config.hash_table_size, config.feature_init_scale,
                seed=np.random.SeedSequence([config.seed, 4]),
            )
            self.encoding_dim = self.bank.dim + self.hash_grid.dim
        self.mlp = init_params(
            np.random.SeedSequence([config.seed, 5]), self.encoding_dim, config.out_scale
        )
    def levels_for(self, mesh: Mesh) -> np.ndarray:
        """Per-node encoding levels; uniform zero except for phync.

        Levels are recomputed per mesh (sparsity is a mesh-relative
        quantity), so cross-mesh evaluation re-derives the assignment on
        the query mesh.
        """
        if self.method != "phync":
            return np.zeros(mesh.n_nodes)
        cfg = self.config
        s = nodal_sensitivity(mesh, AnalyticConfig(n_electrodes=mesh.n_electrodes))
        h = node_sparsity(mesh)
        return level_map(mesh, s, h, cfg.mu, cfg.nu, cfg.n_levels).level

    def encode(self, coords: np.ndarray, levels: np.ndarray):
        parts = []
        cache = {}
        if self.bank is not None:
            parts.append(
                self.bank.encode(coords, levels, blend=self.config.fourier_level_blend)
            )
        if self.pyramid is not None:
            m, cache["pyramid"] = self.pyramid.encode(coords, levels)
            parts.append(m)
        if self.hash_grid is not None:
            hv, cache["hash"] = self.hash_grid.encode(coords)
            parts.append(hv)
        if self.global_feature is not None:
            parts.append(self.global_feature.encode(coords.shape[0]))
        return np.concatenate(parts, axis=1), cache

    def backward_encoding(self, upstream: np.ndarray, cache: dict) -> dict:
        grads = {}
        offset = self.bank.dim if self.bank is not None else 0
        if self.pyramid is not None:
            gs = self.pyramid.backward(upstream[:, offset : offset + self.pyramid.dim], cache["pyramid"])
            grads.update({f"mipmap_{i}": g for i, g in enumerate(gs)})
            offset += self.pyramid.dim
        if self.hash_grid is not None:
            gs = self.hash_grid.backward(upstream[:, offset : offset + self.hash_grid.dim], cache["hash"])
            grads.update({f"hash_{i}": g for i, g in enumerate(gs)})
            offset += self.hash_grid.dim
        if self.global_feature is not None:
            grads["global"] = self.global_feature.backward(upstream[:, offset:])
        return grads

    def predict(self, coords: np.ndarray, levels: np.ndarray) -> np.ndarray:
        feats, _ = self.encode(coords, levels)
        sigma, _ = mlp_forward(self.mlp, feats)
        return sigma

    def params(self) -> dict:
        out = dict(self.mlp.as_dict())
        if self.pyramid is not None:
            out.update({f"mipmap_{i}": g for i, g in enumerate(self.pyramid.grids)})
        if self.hash_grid is not None:
            out.update({f"hash_{i}": t for i, t in enumerate(self.hash_grid.tables)})
        if self.global_feature is not None:
            out["global"] = self.global_feature.value
        return out

    def set_params(self, params: dict) -> None:
        self.mlp.set_from_dict(params)
        if self.pyramid is not None:
            for i in range(self.pyramid.n_levels):
                self.pyramid.grids[i] = params[f"mipmap_{i}"]
        if self.hash_grid is not None:
            for i in range(self.hash_grid.n_levels):
                self.hash_grid.tables[i] = params[f"hash_{i}"]
        if self.global_feature is not None:
            self.global_feature.value = params["global"]

    def param_groups(self) -> dict:
        groups = {}
        for key in self.params():
            if key.startswith("mlp_w"):
                groups[key] = "mlp_weight"
            elif key.startswith("mlp_b"):
                groups[key] = "mlp_bias"
            else:
                groups[key] = "feature"
        return groups

    def uses_schedule(self) -> bool:
        """Fourier slices follow the bandwidth schedule; hash-only does not."""
        return self.bank is not None


def build_field(config: ReconConfig) -> NeuralField:
    return NeuralField(config.method, config)


@dataclass
class ReconState:
    """Trainable parameters, optimizer moments, and the frequency stream."""

    field: NeuralField
    optimizer: AdamW
    iteration: int = 0

    def save(self, path) -> None:
        arrays = {f"param__{k}": v for k, v in self.field.params().items()}
        opt = self.optimizer.state()
        arrays.update({f"m__{k}": v for k, v in opt["m"].items()})
        arrays.update({f"v__{k}": v for k, v in opt["v"].items()})
        meta = {
            "method": self.field.method,
            "config": self.field.config.to_dict(),
            "iteration": self.iteration,
            "opt_t": opt["t"],
        }
        if self.field.bank is not None:
            bank_state = self.field.bank.state()
            arrays.update({f"bank__{i}": f for i, f in enumerate(bank_state["freqs"])})
            meta["bank_s0"] = bank_state["s0"]
            meta["bank_rng"] = bank_state["rng_state"]
        tmp = f"{path}.tmp"
        np.savez(tmp, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        os.replace(f"{tmp}.npz", path)

    @classmethod
    def load(cls, path) -> "ReconState":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            config = ReconConfig.from_dict(meta["config"])
            field_ = NeuralField(meta["method"], config)
            params = {k[len("param__"):]: np.array(data[k]) for k in data.files if k.startswith("param__")}
            field_.set_params(params)
            if field_.bank is not None:
                n_banks = len(field_.bank.freqs)
                field_.bank.load_state(
                    {
                        "s0": meta["bank_s0"],
                        "freqs": [np.array(data[f"bank__{i}"]) for i in range(n_banks)],
                        "rng_state": meta["bank_rng"],
                    }
                )
            optimizer = AdamW(field_.params(), field_.param_groups(), config.adamw())
            optimizer.load_state(
                {
                    "t": meta["opt_t"],
                    "m": {k[len("m__"):]: np.array(data[k]) for k in data.files if k.startswith("m__")},
                    "v": {k[len("v__"):]: np.array(data[k]) for k in data.files if k.startswith("v__")},
                }
            )
            return cls(field=field_, optimizer=optimizer, iteration=int(meta["iteration"]))


def _interior_edges(mesh: Mesh):
    """Mesh edges shared by two elements, with their lengths."""
    counts = {}
    for tri in mesh.elements:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            counts[key] = counts.get(key, 0) + 1
    edges = np.asarray([k for k, c in sorted(counts.items()) if c == 2], dtype=np.int64)
    lengths = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1)
    return edges, lengths


def _edge_incidence(mesh: Mesh, edges: np.ndarray) -> sp.csr_matrix:
    n_e = edges.shape[0]
    rows = np.repeat(np.arange(n_e), 2)
    cols = edges.reshape(-1)
    vals = np.tile([1.0, -1.0], n_e)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_e, mesh.n_nodes))


def _smoothed_tv(diffs: np.ndarray, weights: np.ndarray, beta: float):
    phi = np.sqrt(diffs * diffs + beta * beta)
    value = float(weights @ phi)
    slope = weights * diffs / phi
    curvature = weights / phi
    return value, slope, curvature


def reconstruct_neural(mesh: Mesh, measurement: Measurement, config: ReconConfig) -> ReconResult:
    """Fit a neural conductivity field to measured voltages.

    Per iteration: encode every node, run the head, forward-solve, pull the
    residual back through the Jacobian and the network, and take one AdamW
    step; Fourier banks resample on the schedule.  A non-finite loss aborts
    with the last finite iterate.
    """
    config.validate()
    if config.method not in NEURAL_METHODS:
        raise ReconError(f"reconstruct_neural cannot run method '{config.method}'")
    t_start = time.perf_counter()
    with threadpool_limits(limits=1):
        measurement.patterns.validate(mesh.n_electrodes)
        ctx = FemContext(mesh, ContactModel(config.contact_impedance))
        field_ = build_field(config)
        levels = field_.levels_for(mesh)
        coords = mesh.nodes
        params = field_.params()
        optimizer = AdamW(params, field_.param_groups(), config.adamw())
        schedule = config.schedule()
        v_meas = measurement.voltages
        n_meas = v_meas.size

        use_tv = config.neural_tv_alpha > 0.0
        if use_tv:
            edges, edge_len = _interior_edges(mesh)
            incidence = _edge_incidence(mesh, edges)

        if config.measurement_weighting == "relative":
            floor = config.measurement_weight_floor * float(np.median(np.abs(v_meas)))
            inv_w = 1.0 / (np.abs(v_meas) + floor)
        elif config.measurement_weighting == "none":
            inv_w = np.ones_like(v_meas)
        else:
            raise ReconError(
                f"unknown measurement_weighting '{config.measurement_weighting}'"
            )

        refresh = config.jacobian_refresh
        if refresh is None:
            refresh = 1 if mesh.n_nodes <= 1500 else 5

        loss_history = []
        snapshot = None
        aborted_at = None
        jac = None
        resample_horizon = config.resample_stop_fraction * config.total_iters
        for t in range(1, config.total_iters + 1):
            if (
                field_.uses_schedule()
                and t % schedule.resample_every == 0
                and t <= resample_horizon
            ):
                maybe_resample(t, schedule, field_.bank)
            feats, enc_cache = field_.encode(coords, levels)
            sigma, mlp_cache = mlp_forward(field_.mlp, feats)
            if jac is None or (t - 1) % refresh == 0:
                fwd, jac = forward_and_jacobian(
                    ctx, sigma, measurement.patterns, config.drop_overlapping
                )
            else:
                fwd = solve_forward(
                    ctx, sigma, measurement.patterns,
                    drop_overlapping=config.drop_overlapping,
                )
            if fwd.voltages.size != n_meas:
                raise ReconError(
                    f"measurement count mismatch: solver produced {fwd.voltages.size}, "
                    f"file has {n_meas}"
                )
            residual = (fwd.voltages - v_meas) * inv_w
            loss = float(np.mean(residual * residual))
            if use_tv:
                d = np.asarray(incidence @ sigma)
                tv_val, tv_slope, _ = _smoothed_tv(d, edge_len, config.tv_beta)
                loss += config.neural_tv_alpha * tv_val
            if not np.isfinite(loss):
                aborted_at = t
                if snapshot is not None:
                    field_.set_params({k: v.copy() for k, v in snapshot.items()})
                break
            d_sigma = vjp(jac, 2.0 * residual * inv_w / n_meas)
            if use_tv:
                d_sigma = d_sigma + config.neural_tv_alpha * (incidence.T @ tv_slope)
            mlp_grads, d_feats = mlp_backward(field_.mlp, mlp_cache, d_sigma)
            enc_grads = field_.backward_encoding(d_feats, enc_cache)
            try:
                optimizer.step(params, {**mlp_grads, **enc_grads})
            except OptimError as exc:
                raise ReconError(str(exc)) from exc
            loss_history.append(loss)
            snapshot = {k: v.copy() for k, v in params.items()}

        sigma_final = field_.predict(coords, levels)
        result = ReconResult(
            method=config.method,
            sigma=sigma_final,
            loss_history=loss_history,
            seed=config.seed,
            config=config.to_dict(),
            wall_time=time.perf_counter() - t_start,
            aborted_at=aborted_at,
            field=field_,
            training_mesh=mesh,
        )
        result.state = ReconState(field=field_, optimizer=optimizer, iteration=len(loss_history))
        return result


def reconstruct_tv(mesh: Mesh, measurement: Measurement, config: ReconConfig) -> ReconResult:
    """Damped Gauss-Newton on the smoothed-TV objective.

    Accepts a step only when it satisfies an Armijo decrease of the full
    objective, so the objective history is non-increasing; conductivity is
    projected onto [tv_sigma_min, inf) after every candidate step.
    """
    config.validate()
    t_start = time.perf_counter()
    with threadpool_limits(limits=1):
        measurement.patterns.validate(mesh.n_electrodes)
        ctx = FemContext(mesh, ContactModel(config.contact_impedance))
        v_meas = measurement.voltages
        edges, edge_len = _interior_edges(mesh)
        incidence = _edge_incidence(mesh, edges)
        alpha = config.tv_alpha
        beta = config.tv_beta

        sigma = np.ones(mesh.n_nodes)
        lam = 1e-4
        c1 = 1e-4
        max_line_failures = 20
        line_failures = 0
        loss_history = []
        objective_history = []

        def objective(s):
            f = solve_forward(ctx, s, measurement.patterns, drop_overlapping=config.drop_overlapping)
            r = f.voltages - v_meas
            data = float(r @ r)
            tv_val, _, _ = _smoothed_tv(np.asarray(incidence @ s), edge_len, beta)
            return data + alpha * tv_val, data

        f_cur, data_cur = objective(sigma)
        warning = None
        for _ in range(config.tv_max_iters):
            fwd, jac = forward_and_jacobian(ctx, sigma, measurement.patterns, config.drop_overlapping)
            residual = fwd.voltages - v_meas
            d = np.asarray(incidence @ sigma)
            _, tv_slope, tv_curv = _smoothed_tv(d, edge_len, beta)
            grad = 2.0 * (jac.matrix.T @ residual) + alpha * (incidence.T @ tv_slope)
            hess = 2.0 * (jac.matrix.T @ jac.matrix)
            hess += alpha * (incidence.T @ sp.diags(tv_curv) @ incidence).toarray()
            accepted = False
            while not accepted:
                try:
                    delta = np.linalg.solve(hess + lam * np.eye(mesh.n_nodes), -grad)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                step = 1.0
                slope = float(grad @ delta)
                for _ in range(20):
                    cand = np.maximum(sigma + step * delta, config.tv_sigma_min)
                    f_cand, data_cand = objective(cand)
                    if f_cand <= f_cur + c1 * step * slope or f_cand < f_cur:
                        sigma = cand
                        f_cur, data_cur = f_cand, data_cand
                        accepted = True
                        lam = max(lam * 0.3, 1e-10)
                        break
                    step *= 0.5
                if not accepted:
                    line_failures += 1
                    lam *= 10.0
                    if line_failures >= max_line_failures:
                        warning = "line search failed 20 times; returning best iterate"
                        break
            if warning is not None:
                break
            loss_history.append(data_cur / v_meas.size)
            objective_history.append(f_cur)
            if len(objective_history) >= 2 and (
                objective_history[-2] - objective_history[-1]
            ) <= 1e-10 * max(1.0, objective_history[-2]):
                break

        result = ReconResult(
            method="tv",
            sigma=sigma,
            loss_history=loss_history,
            seed=config.seed,
            config=config.to_dict(),
            wall_time=time.perf_counter() - t_start,
            objective_history=objective_history,
        )
        if warning is not None:
            result.warning = warning
        return result


def reconstruct(mesh: Mesh, measurement: Measurement, config: ReconConfig) -> ReconResult:
    config.validate()
    if config.method == "tv":
        return reconstruct_tv(mesh, measurement, config)
    return reconstruct_neural(mesh, measurement, config)


def barycentric_sample(mesh: Mesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Interpolate a nodal field at arbitrary points inside the disk."""
    from scipy.spatial import cKDTree

    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.elements
    p0 = mesh.nodes[tri[:, 0]]
    p1 = mesh.nodes[tri[:, 1]]
    p2 = mesh.nodes[tri[:, 2]]
    denom = 2.0 * element_areas(mesh)
    centroids = (p0 + p1 + p2) / 3.0
    tree = cKDTree(centroids)
    k = min(12, mesh.n_elements)
    _, candidates = tree.query(points, k=k)
    candidates = np.atleast_2d(candidates)
    out = np.empty(points.shape[0])
    for i, pt in enumerate(points):
        best_e = -1
        best_w = None
        best_short = -np.inf
        for e in candidates[i]:
            w0 = ((p1[e, 0] - pt[0]) * (p2[e, 1] - pt[1]) - (p2[e, 0] - pt[0]) * (p1[e, 1] - pt[1])) / denom[e]
            w1 = ((p2[e, 0] - pt[0]) * (p0[e, 1] - pt[1]) - (p0[e, 0] - pt[0]) * (p2[e, 1] - pt[1])) / denom[e]
            w2 = 1.0 - w0 - w1
            low = min(w0, w1, w2)
            if low > best_short:
                best_short = low
                best_e = e
                best_w = (w0, w1, w2)
            if low >= -1e-12:
                break
        w = np.clip(best_w, 0.0, None)
        w = w / w.sum()
        out[i] = w @ values[tri[best_e]]
    return out


def crossmesh_evaluate(
    result: ReconResult,
    fine_mesh: Mesh,
    coarse_mesh: Mesh | None = None,
    training_mesh: Mesh | None = None,
) -> np.ndarray:
    """Evaluate a finished reconstruction on a (finer) mesh.

    Neural fields are queried directly at the new coordinates.  For the
    level-mapped method the per-node levels at query points interpolate the
    training mesh's assignment when that mesh is available (the trained
    field's own capacity allocation, continued off-mesh); otherwise they
    are recomputed on the query mesh.  The TV result is interpolated from
    its inversion mesh, which must be provided.
    """
    if result.method in NEURAL_METHODS:
        if result.field is None:
            raise ReconError("trained neural state is required for cross-mesh evaluation")
        anchor = training_mesh if training_mesh is not None else result.training_mesh
        if result.method == "phync" and anchor is not None:
            trained = result.field.levels_for(anchor)
            levels = np.clip(
                barycentric_sample(anchor, trained, fine_mesh.nodes),
                0.0,
                result.field.config.n_levels - 1,
            )
        else:
            levels = result.field.levels_for(fine_mesh)
        return result.field.predict(fine_mesh.nodes, levels)
    if coarse_mesh is None:
        raise ReconError("TV cross-mesh evaluation needs the inversion mesh")
    return barycentric_sample(coarse_mesh, result.sigma, fine_mesh.nodes)


def initial_sensitivity_map(
    mesh: Mesh,
    measurement: Measurement,
    config: ReconConfig,
    fd_step: float = 1e-3,
) -> np.ndarray:
    """Coordinate-sensitivity diagnostic of the untrained model.

    Combines the physics Jacobian at the initial field with the magnitude of
    the representation's spatial derivative, estimated by central finite
    differences at fixed per-node levels.
    """
    config.validate()
    if config.method not in NEURAL_METHODS:
        raise ReconError("the diagnostic applies to neural methods")
    with threadpool_limits(limits=1):
        ctx = FemContext(mesh, ContactModel(config.contact_impedance))
        field_ = build_field(config)
        levels = field_.levels_for(mesh)
        coords = mesh.nodes
        sigma = field_.predict(coords, levels)
        jac = compute_jacobian(ctx, sigma, measurement.patterns,
                               drop_overlapping=config.drop_overlapping)
        grad_sq = np.zeros(mesh.n_nodes)
        for dim in range(2):
            shift = np.zeros(2)
            shift[dim] = fd_step
            plus = field_.predict(coords + shift, levels)
            minus = field_.predict(coords - shift, levels)
            grad_sq += ((plus - minus) / (2.0 * fd_step)) ** 2
        return coordinate_sensitivity(mesh, np.sqrt(grad_sq), jac)
