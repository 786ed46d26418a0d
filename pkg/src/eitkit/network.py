"""Fully-connected conductivity head with manual forward/backward passes.

Maps an encoded feature vector to a scalar conductivity through three
ReLU-activated hidden layers of width 128 and a sigmoid output scaled by
``out_scale``, so predictions always lie in (0, out_scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class NetworkError(Exception):
    """Dimension mismatch or a missing forward cache."""


@dataclass
class MlpParams:
    """Weight matrices, bias vectors, and the positive output scale."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    out_scale: float = 2.0

    def validate(self) -> None:
        if len(self.weights) != len(self.biases):
            raise NetworkError("weights/biases length mismatch")
        if self.out_scale <= 0:
            raise NetworkError("out_scale must be positive")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise NetworkError(f"layer {i}->{i+1} dimension mismatch")
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise NetworkError("bias shape does not match layer width")
        if not all(np.all(np.isfinite(w)) for w in self.weights + self.biases):
            raise NetworkError("non-finite parameter")

    def as_dict(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"mlp_w{i}"] = w
            out[f"mlp_b{i}"] = b
        return out

    def set_from_dict(self, params: dict) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = params[f"mlp_w{i}"]
            self.biases[i] = params[f"mlp_b{i}"]


def init_params(
    seed,
    encoding_dim: int,
    out_scale: float = 2.0,
    hidden: int = 128,
    n_hidden: int = 3,
    out_init_scale: float = 0.05,
) -> MlpParams:
    """He-uniform hidden layers, damped Xavier-uniform output layer, zero biases.

    The output layer is scaled down so the initial field sits near the
    sigmoid midpoint (out_scale / 2) everywhere; large initial excursions
    would live partly in the measurement null space and never train away.
    """
    if encoding_dim <= 0 or hidden <= 0:
        raise NetworkError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    dims = [encoding_dim] + [hidden] * n_hidden + [1]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i < len(dims) - 2:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = out_init_scale * np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    params = MlpParams(weights=weights, biases=biases, out_scale=out_scale)
    params.validate()
    return params


#: forward matmuls run in fixed-size row chunks so every coordinate passes
#: through an identically shaped BLAS call; results are then independent of
#: how coordinates are batched
_ROW_CHUNK = 64


def _matmul_rows(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    out = np.empty((n, w.shape[1]))
    full = n - n % _ROW_CHUNK
    for start in range(0, full, _ROW_CHUNK):
        np.matmul(x[start : start + _ROW_CHUNK], w, out=out[start : start + _ROW_CHUNK])
    tail = n - full
    if tail:
        buf = np.zeros((_ROW_CHUNK, x.shape[1]))
        buf[:tail] = x[full:]
        out[full:] = (buf @ w)[:tail]
    return out


def mlp_forward(params: MlpParams, features: np.ndarray) -> tuple[np.ndarray, dict]:
    """Conductivity per row of `features`, plus the activation cache.

    One-by-one and batched evaluation agree bit-exactly for any batch size.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != params.weights[0].shape[0]:
        raise NetworkError(
            f"feature dim {x.shape[1]} does not match first layer {params.weights[0].shape[0]}"
        )
    cache = {"inputs": [x]}
    h = x
    n_layers = len(params.weights)
    for i in range(n_layers - 1):
        z = _matmul_rows(h, params.weights[i]) + params.biases[i]
        h = np.maximum(z, 0.0)
        cache["inputs"].append(h)
    z_out = _matmul_rows(h, params.weights[-1]) + params.biases[-1]
    s = expit(z_out[:, 0])
    cache["sigmoid"] = s
    sigma = params.out_scale * s
    return sigma, cache


def mlp_backward(params: MlpParams, cache: dict, upstream: np.ndarray) -> tuple[dict, np.ndarray]:
    """Gradients for all parameters and the input features.

    ReLU subgradient at exactly zero is taken as zero.
    """
    if cache is None or "sigmoid" not in cache:
        raise NetworkError("missing forward cache")
    up = np.asarray(upstream, dtype=float)
    s = cache["sigmoid"]
    if up.shape != s.shape:
        raise NetworkError("upstream gradient shape mismatch")
    dz = (up * params.out_scale * s * (1.0 - s))[:, None]
    grads = {}
    n_layers = len(params.weights)
    for i in range(n_layers - 1, -1, -1):
        h_in = cache["inputs"][i]
        grads[f"mlp_w{i}"] = h_in.T @ dz
        grads[f"mlp_b{i}"] = dz.sum(axis=0)
        dh = dz @ params.weights[i].T
        if i > 0:
            dz = dh * (cache["inputs"][i] > 0.0)
        else:
            d_features = dh
    return grads, d_features
