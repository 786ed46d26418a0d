"""Coordinate encodings: Fourier banks, mipmap pyramids, hash grids.

Every encoder maps 2D coordinates (plus a per-coordinate level, where it
applies) to a feature vector and provides exact gradients with respect to
its learnable tables.  Gradient accumulation uses `np.add.at`, which applies
contributions in coordinate order, so results are deterministic.
"""

from __future__ import annotations

import math

import numpy as np

HASH_PRIMES = (1, 2654435761)


class EncodingError(Exception):
    """Inconsistent dimensions or a missing forward cache."""


def grid_growth_factor(n_min: int, n_max: int, n_levels: int) -> float:
    """Per-level geometric growth so level 0 is n_min and the top is n_max."""
    if n_levels < 2:
        return 1.0
    return math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))


def level_resolutions(n_min: int, n_max: int, n_levels: int) -> list[int]:
    b = grid_growth_factor(n_min, n_max, n_levels)
    return [int(round(n_min * b**level)) for level in range(n_levels)]


class FourierBank:
    """Per-level Gaussian frequency matrices, frozen between resamples.

    Level ``l`` draws from N(0, s_l^2) with s_l = s0 * eta**l.  A coordinate
    with real-valued level uses the nearest integer level's bank.  Output is
    [sin(2*pi*B x), cos(2*pi*B x)], so the dimension is 2*n_frequencies.
    """

    def __init__(
        self,
        n_levels: int,
        n_frequencies: int,
        s0: float,
        eta: float = 1.15,
        seed=0,
        shared_directions: bool = False,
    ):
        self.n_levels = n_levels
        self.n_frequencies = n_frequencies
        self.eta = eta
        self.shared_directions = shared_directions
        self._rng = np.random.default_rng(seed)
        self.s0 = None
        self.freqs = None
        self.resample(s0)

    @property
    def dim(self) -> int:
        return 2 * self.n_frequencies

    def resample(self, s0: float) -> None:
        """Redraw every level's frequencies at base bandwidth s0.

        With shared directions, one standard-normal draw is scaled by each
        level's s_l (still exactly N(0, s_l^2) per level), so a feature slot
        keeps one spatial direction across levels and only its bandwidth
        grows; independent mode draws each level separately.
        """
        self.s0 = float(s0)
        if self.shared_directions:
            base = self._rng.normal(0.0, 1.0, size=(self.n_frequencies, 2))
            self.freqs = [
                self.s0 * self.eta**level * base for level in range(self.n_levels)
            ]
        else:
            self.freqs = [
                self._rng.normal(0.0, self.s0 * self.eta**level, size=(self.n_frequencies, 2))
                for level in range(self.n_levels)
            ]

    def encode(self, coords: np.ndarray, levels=None, blend: bool = False) -> np.ndarray:
        """Features at each coordinate's level.

        By default a coordinate uses the bank of its nearest integer level;
        with ``blend`` the floor/ceil banks' features are mixed with the
        same fractional weights the pyramid uses, which keeps the encoding
        continuous across level contours.
        """
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        n = coords.shape[0]
        if levels is None:
            levels = np.zeros(n)
        levels = np.clip(np.asarray(levels, dtype=float), 0, self.n_levels - 1)
        if not blend:
            lvl = np.rint(levels).astype(int)
            out = np.empty((n, self.dim))
            for level in np.unique(lvl):
                mask = lvl == level
                out[mask] = self._features(coords[mask], level)
            return out
        lo = np.floor(levels).astype(int)
        frac = levels - lo
        hi = np.minimum(lo + 1, self.n_levels - 1)
        out = np.zeros((n, self.dim))
        for side_lvl, w in ((lo, 1.0 - frac), (hi, frac)):
            for level in np.unique(side_lvl):
                mask = (side_lvl == level) & (w > 0.0)
                if np.any(mask):
                    out[mask] += w[mask, None] * self._features(coords[mask], level)
        return out

    def _features(self, coords: np.ndarray, level: int) -> np.ndarray:
        proj = 2.0 * math.pi * coords @ self.freqs[level].T
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)

    def state(self) -> dict:
        return {
            "s0": self.s0,
            "freqs": [f.copy() for f in self.freqs],
            "rng_state": self._rng.bit_generator.state,
        }

    def load_state(self, state: dict) -> None:
        self.s0 = state["s0"]
        self.freqs = [np.asarray(f, dtype=float) for f in state["freqs"]]
        self._rng.bit_generator.state = state["rng_state"]


def bilinear_weights(coords: np.ndarray, resolution: int):
    """Corner indices and weights for a grid of `resolution`^2 vertices on [-1,1]^2.

    Coordinates outside the square are clamped onto it.
    """
    if resolution < 2:
        raise EncodingError("grid resolution must be at least 2")
    g = (np.clip(coords, -1.0, 1.0) + 1.0) * 0.5 * (resolution - 1)
    gx = g[:, 0]
    gy = g[:, 1]
    ix0 = np.minimum(np.floor(gx).astype(np.int64), resolution - 2)
    iy0 = np.minimum(np.floor(gy).astype(np.int64), resolution - 2)
    fx = gx - ix0
    fy = gy - iy0
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    return (ix0, iy0), (w00, w10, w01, w11)


class MipMapPyramid:
    """Learnable feature grids at geometrically growing resolutions.

    Grid ``level`` has shape (channels, H_level, H_level) over the bounding
    square [-1,1]^2.  Fractional levels blend the two neighboring grids; an
    integer level uses its single grid (the continuity limit of the blend).
    """

    def __init__(
        self,
        n_levels: int = 16,
        channels: int = 32,
        n_min: int = 4,
        n_max: int = 64,
        init_scale: float = 1e-4,
        seed=0,
    ):
        self.n_levels = n_levels
        self.channels = channels
        self.resolutions = level_resolutions(n_min, n_max, n_levels)
        rng = np.random.default_rng(seed)
        self.grids = [
            rng.uniform(-init_scale, init_scale, size=(channels, res, res))
            for res in self.resolutions
        ]

    @property
    def dim(self) -> int:
        return self.channels

    def interp(self, coords: np.ndarray, level: int) -> np.ndarray:
        """Bilinear interpolation of one grid; exact at grid vertices."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        res = self.resolutions[level]
        (ix0, iy0), (w00, w10, w01, w11) = bilinear_weights(coords, res)
        grid = self.grids[level]
        out = (
            grid[:, iy0, ix0] * w00
            + grid[:, iy0, ix0 + 1] * w10
            + grid[:, iy0 + 1, ix0] * w01
            + grid[:, iy0 + 1, ix0 + 1] * w11
        )
        return out.T

    def encode(self, coords: np.ndarray, levels) -> tuple[np.ndarray, dict]:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        n = coords.shape[0]
        levels = np.asarray(levels, dtype=float)
        if levels.shape != (n,):
            raise EncodingError("levels length must match coordinate count")
        lo = np.floor(np.clip(levels, 0, self.n_levels - 1)).astype(int)
        frac = np.clip(levels, 0, self.n_levels - 1) - lo
        hi = np.minimum(lo + 1, self.n_levels - 1)
        out = np.zeros((n, self.channels))
        cache = {"coords": coords, "pieces": []}
        for side, lvl_arr, w_arr in (("lo", lo, 1.0 - frac), ("hi", hi, frac)):
            for level in np.unique(lvl_arr):
                mask = (lvl_arr == level) & (w_arr > 0.0)
                if not np.any(mask):
                    continue
                idxs, weights = bilinear_weights(coords[mask], self.resolutions[level])
                vals = self._gather(level, idxs, weights)
                out[mask] += w_arr[mask, None] * vals
                cache["pieces"].append(
                    {
                        "level": int(level),
                        "mask": mask,
                        "corner_idx": idxs,
                        "corner_w": weights,
                        "level_w": w_arr[mask],
                    }
                )
        return out, cache

    def _gather(self, level, idxs, weights):
        ix0, iy0 = idxs
        w00, w10, w01, w11 = weights
        grid = self.grids[level]
        out = (
            grid[:, iy0, ix0] * w00
            + grid[:, iy0, ix0 + 1] * w10
            + grid[:, iy0 + 1, ix0] * w01
            + grid[:, iy0 + 1, ix0 + 1] * w11
        )
        return out.T

    def backward(self, upstream: np.ndarray, cache: dict) -> list[np.ndarray]:
        """Exact per-grid gradients; only touched vertices receive mass."""
        if cache is None or "pieces" not in cache:
            raise EncodingError("missing forward cache")
        grads = [np.zeros_like(g) for g in self.grids]
        for piece in cache["pieces"]:
            level = piece["level"]
            mask = piece["mask"]
            ix0, iy0 = piece["corner_idx"]
            w00, w10, w01, w11 = piece["corner_w"]
            up = upstream[mask] * piece["level_w"][:, None]  # (n, C)
            res = self.resolutions[level]
            flat = grads[level].reshape(self.channels, res * res)
            for cw, ix, iy in (
                (w00, ix0, iy0),
                (w10, ix0 + 1, iy0),
                (w01, ix0, iy0 + 1),
                (w11, ix0 + 1, iy0 + 1),
            ):
                np.add.at(flat.T, iy * res + ix, up * cw[:, None])
        return grads


class GlobalFeature:
    """A single learnable vector appended to every coordinate's encoding."""

    def __init__(self, dim: int = 16, init_scale: float = 1e-4, seed=0):
        rng = np.random.default_rng(seed)
        self.value = rng.uniform(-init_scale, init_scale, size=dim)

    @property
    def dim(self) -> int:
        return self.value.size

    def encode(self, n: int) -> np.ndarray:
        return np.broadcast_to(self.value, (n, self.dim))

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return upstream.sum(axis=0)


class HashGrid:
    """Multi-resolution hashed feature grids with trainable entries.

    Levels whose dense vertex count fits the table cap are stored dense
    (index y*(res+1)+x); finer levels hash corner coordinates with the
    prime-XOR scheme modulo the cap.  Output concatenates all levels.
    """

    def __init__(
        self,
        n_levels: int = 32,
        channels: int = 2,
        n_min: int = 4,
        n_max: int = 128,
        table_size: int = 2**17,
        init_scale: float = 1e-4,
        seed=0,
    ):
        self.n_levels = n_levels
        self.channels = channels
        self.table_size = table_size
        self.resolutions = level_resolutions(n_min, n_max, n_levels)
        rng = np.random.default_rng(seed)
        self.tables = []
        self.dense = []
        for res in self.resolutions:
            n_dense = (res + 1) ** 2
            dense = n_dense <= table_size
            size = n_dense if dense else table_size
            self.dense.append(dense)
            self.tables.append(rng.uniform(-init_scale, init_scale, size=(size, channels)))

    @property
    def dim(self) -> int:
        return self.n_levels * self.channels

    def _corner_indices(self, level: int, ix, iy):
        res = self.resolutions[level]
        if self.dense[level]:
            return iy * (res + 1) + ix
        return (ix * HASH_PRIMES[0] ^ iy * HASH_PRIMES[1]) % self.table_size

    def encode(self, coords: np.ndarray, levels=None) -> tuple[np.ndarray, dict]:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        n = coords.shape[0]
        out = np.empty((n, self.dim))
        cache = {"pieces": []}
        for level, res in enumerate(self.resolutions):
            g = (np.clip(coords, -1.0, 1.0) + 1.0) * 0.5 * res
            ix0 = np.minimum(np.floor(g[:, 0]).astype(np.int64), res - 1)
            iy0 = np.minimum(np.floor(g[:, 1]).astype(np.int64), res - 1)
            fx = g[:, 0] - ix0
            fy = g[:, 1] - iy0
            weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
            corners = (
                self._corner_indices(level, ix0, iy0),
                self._corner_indices(level, ix0 + 1, iy0),
                self._corner_indices(level, ix0, iy0 + 1),
                self._corner_indices(level, ix0 + 1, iy0 + 1),
            )
            table = self.tables[level]
            vals = sum(table[c] * w[:, None] for c, w in zip(corners, weights))
            out[:, level * self.channels : (level + 1) * self.channels] = vals
            cache["pieces"].append({"corners": corners, "weights": weights})
        return out, cache

    def backward(self, upstream: np.ndarray, cache: dict) -> list[np.ndarray]:
        if cache is None or "pieces" not in cache:
            raise EncodingError("missing forward cache")
        grads = [np.zeros_like(t) for t in self.tables]
        for level, piece in enumerate(cache["pieces"]):
            up = upstream[:, level * self.channels : (level + 1) * self.channels]
            for c, w in zip(piece["corners"], piece["weights"]):
                np.add.at(grads[level], c, up * w[:, None])
        return grads


class HybridEncoder:
    """Fourier + mipmap + global feature, concatenated in that fixed order."""

    def __init__(self, bank: FourierBank, pyramid: MipMapPyramid, global_feature: GlobalFeature):
        if bank.n_levels != pyramid.n_levels:
            raise EncodingError("Fourier bank and pyramid must share the level count")
        self.bank = bank
        self.pyramid = pyramid
        self.global_feature = global_feature

    @property
    def dim(self) -> int:
        return self.bank.dim + self.pyramid.dim + self.global_feature.dim

    def encode(self, coords: np.ndarray, levels) -> tuple[np.ndarray, dict]:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        f = self.bank.encode(coords, levels)
        m, cache = self.pyramid.encode(coords, levels)
        xi = self.global_feature.encode(coords.shape[0])
        return np.concatenate([f, m, xi], axis=1), cache

    def backward(self, upstream: np.ndarray, cache: dict) -> dict:
        """Gradients for the learnable parts; Fourier frequencies are frozen."""
        fd = self.bank.dim
        md = self.pyramid.dim
        grid_grads = self.pyramid.backward(upstream[:, fd : fd + md], cache)
        global_grad = self.global_feature.backward(upstream[:, fd + md :])
        out = {f"mipmap_{i}": g for i, g in enumerate(grid_grads)}
        out["global"] = global_grad
        return out

    def params(self) -> dict:
        out = {f"mipmap_{i}": g for i, g in enumerate(self.pyramid.grids)}
        out["global"] = self.global_feature.value
        return out

    def set_params(self, params: dict) -> None:
        for i in range(self.pyramid.n_levels):
            self.pyramid.grids[i] = params[f"mipmap_{i}"]
        self.global_feature.value = params["global"]
