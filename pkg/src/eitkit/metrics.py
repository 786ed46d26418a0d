"""Image-domain evaluation: rasterization, PSNR, SSIM, frequency-band
consistency, 2D spectra, and continuous piecewise-linear sweep fits.

All metrics operate on square rasters of the disk; out-of-disk pixels carry
the in-disk mean so windowed operations see no artificial edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.signal import fftconvolve

from .mesh import Mesh, element_areas

PSNR_CAP_DB = 99.0


class MetricsError(Exception):
    """Mismatched rasters or unusable fit inputs."""


@dataclass
class RasterField:
    """Square grid over [-1,1]^2 with an in-disk mask."""

    values: np.ndarray
    mask: np.ndarray
    provenance: str = ""
    fallback_pixels: int = 0

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


def _pixel_centers(resolution: int) -> np.ndarray:
    return -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)


def rasterize(mesh: Mesh, sigma: np.ndarray, resolution: int = 128, provenance: str = "") -> RasterField:
    """Barycentric interpolation of a nodal field onto pixel centers.

    In-disk pixels that fall outside the mesh hull (boundary slivers) take
    the nearest element with clipped barycentric weights; their count is
    reported on the result.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_nodes,):
        raise MetricsError("sigma length must match node count")
    xs = _pixel_centers(resolution)
    gx, gy = np.meshgrid(xs, xs)  # row index = y, column index = x
    mask = gx * gx + gy * gy <= 1.0
    values = np.zeros((resolution, resolution))

    pts = np.column_stack([gx[mask], gy[mask]])
    n_pts = pts.shape[0]
    vals = np.full(n_pts, np.nan)
    assigned = np.zeros(n_pts, dtype=bool)

    tri = mesh.elements
    p0 = mesh.nodes[tri[:, 0]]
    p1 = mesh.nodes[tri[:, 1]]
    p2 = mesh.nodes[tri[:, 2]]
    denom = 2.0 * element_areas(mesh)

    # map pixels to candidate elements through per-element bounding boxes
    step = 2.0 / resolution
    lo = np.minimum(np.minimum(p0, p1), p2)
    hi = np.maximum(np.maximum(p0, p1), p2)
    ix_lo = np.clip(((lo[:, 0] + 1.0) / step - 0.5).astype(int), 0, resolution - 1)
    ix_hi = np.clip(np.ceil((hi[:, 0] + 1.0) / step - 0.5).astype(int), 0, resolution - 1)
    iy_lo = np.clip(((lo[:, 1] + 1.0) / step - 0.5).astype(int), 0, resolution - 1)
    iy_hi = np.clip(np.ceil((hi[:, 1] + 1.0) / step - 0.5).astype(int), 0, resolution - 1)

    flat_index = np.full((resolution, resolution), -1, dtype=np.int64)
    flat_index[mask] = np.arange(n_pts)

    tol = 1e-12
    for e in range(mesh.n_elements):
        sub = flat_index[iy_lo[e] : iy_hi[e] + 1, ix_lo[e] : ix_hi[e] + 1].ravel()
        sub = sub[sub >= 0]
        sub = sub[~assigned[sub]]
        if sub.size == 0:
            continue
        px = pts[sub, 0]
        py = pts[sub, 1]
        w0 = ((p1[e, 0] - px) * (p2[e, 1] - py) - (p2[e, 0] - px) * (p1[e, 1] - py)) / denom[e]
        w1 = ((p2[e, 0] - px) * (p0[e, 1] - py) - (p0[e, 0] - px) * (p2[e, 1] - py)) / denom[e]
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -tol) & (w1 >= -tol) & (w2 >= -tol)
        hit = sub[inside]
        if hit.size:
            vals[hit] = (
                w0[inside] * sigma[tri[e, 0]]
                + w1[inside] * sigma[tri[e, 1]]
                + w2[inside] * sigma[tri[e, 2]]
            )
            assigned[hit] = True

    fallback = np.flatnonzero(~assigned)
    if fallback.size:
        centroids = (p0 + p1 + p2) / 3.0
        for idx in fallback:
            d2 = (centroids[:, 0] - pts[idx, 0]) ** 2 + (centroids[:, 1] - pts[idx, 1]) ** 2
            e = int(np.argmin(d2))
            px, py = pts[idx]
            w0 = ((p1[e, 0] - px) * (p2[e, 1] - py) - (p2[e, 0] - px) * (p1[e, 1] - py)) / denom[e]
            w1 = ((p2[e, 0] - px) * (p0[e, 1] - py) - (p0[e, 0] - px) * (p2[e, 1] - py)) / denom[e]
            w2 = 1.0 - w0 - w1
            w = np.clip([w0, w1, w2], 0.0, None)
            w = w / w.sum()
            vals[idx] = w @ sigma[tri[e]]

    values[mask] = vals
    values[~mask] = vals.mean()
    return RasterField(
        values=values, mask=mask, provenance=provenance, fallback_pixels=int(fallback.size)
    )


def _check_pair(a: RasterField, b: RasterField) -> None:
    if a.values.shape != b.values.shape:
        raise MetricsError("raster resolutions differ")
    if not np.array_equal(a.mask, b.mask):
        raise MetricsError("raster masks differ")


def psnr(truth: RasterField, recon: RasterField) -> float:
    """Peak signal-to-noise ratio over in-disk pixels.

    The peak is the ground-truth maximum (first argument); identical fields
    return the 99 dB cap.
    """
    _check_pair(truth, recon)
    diff = truth.values[truth.mask] - recon.values[recon.mask]
    mse = float(np.mean(diff * diff))
    peak = float(np.max(truth.values[truth.mask]))
    if mse <= 0.0 or peak == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * np.log10(peak * peak / mse)
    return float(min(value, PSNR_CAP_DB))


def _gaussian_kernel(size: int = 11, std: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * std * std))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(truth: RasterField, recon: RasterField, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean single-scale SSIM over windows fully inside the disk.

    The dynamic range is the ground-truth max minus min, and both fields are
    anchored at the ground-truth minimum, so a shared constant offset leaves
    the score unchanged.
    """
    _check_pair(truth, recon)
    anchor = float(np.min(truth.values[truth.mask]))
    data_range = float(np.max(truth.values[truth.mask])) - anchor
    if data_range <= 0.0:
        data_range = 1.0
    a = truth.values - anchor
    b = recon.values - anchor

    kernel = _gaussian_kernel()
    valid = binary_erosion(truth.mask, structure=np.ones((11, 11)), border_value=0)
    if not np.any(valid):
        raise MetricsError("mask too small for an 11x11 SSIM window")

    def smooth(img):
        return fftconvolve(img, kernel, mode="same")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map[valid]))


def _band_masks(resolution: int, n_bands: int) -> list[np.ndarray]:
    """Radial annuli covering the centered spectrum without overlap."""
    freq = np.fft.fftshift(np.fft.fftfreq(resolution, d=1.0 / resolution))
    fx, fy = np.meshgrid(freq, freq)
    rho = np.hypot(fx, fy)
    nyquist = resolution / 2.0
    width = nyquist / n_bands
    band = np.minimum((rho / width).astype(int), n_bands - 1)
    return [band == i for i in range(n_bands)]


def fbc(recon: RasterField, truth: RasterField, n_bands: int = 5):
    """Per-band Pearson correlation of band-limited reconstructions.

    Both fields are mean-removed over the disk, transformed, partitioned
    into equal-width radial bands up to Nyquist, inverse-transformed per
    band, and correlated over in-disk pixels.  Bands where the ground truth
    carries no energy are returned as NaN and flagged.

    Returns (values, defined) arrays of length n_bands.
    """
    _check_pair(recon, truth)
    mask = truth.mask
    res = truth.resolution

    def prep(f):
        img = np.zeros_like(f.values)
        img[mask] = f.values[mask] - f.values[mask].mean()
        return np.fft.fftshift(np.fft.fft2(img))

    spec_r = prep(recon)
    spec_t = prep(truth)
    values = np.full(n_bands, np.nan)
    defined = np.zeros(n_bands, dtype=bool)
    scale_t = np.abs(spec_t).max()
    for i, band in enumerate(_band_masks(res, n_bands)):
        bt = np.real(np.fft.ifft2(np.fft.ifftshift(spec_t * band)))[mask]
        br = np.real(np.fft.ifft2(np.fft.ifftshift(spec_r * band)))[mask]
        st = bt.std()
        sr = br.std()
        if scale_t == 0.0 or st < 1e-12 * scale_t:
            continue
        if sr == 0.0:
            values[i] = 0.0
            defined[i] = True
            continue
        values[i] = float(np.mean((bt - bt.mean()) * (br - br.mean())) / (st * sr))
        defined[i] = True
    return values, defined


def spectrum_export(field: RasterField):
    """Centered 2D magnitude spectrum and its radial average.

    Returns (spectrum, radii, profile); Parseval holds for the raw grid:
    sum |F|^2 / N_pixels == sum field^2.
    """
    spec = np.abs(np.fft.fftshift(np.fft.fft2(field.values)))
    res = field.resolution
    freq = np.fft.fftshift(np.fft.fftfreq(res, d=1.0 / res))
    fx, fy = np.meshgrid(freq, freq)
    rho = np.rint(np.hypot(fx, fy)).astype(int)
    n_radii = rho.max() + 1
    sums = np.bincount(rho.ravel(), weights=spec.ravel(), minlength=n_radii)
    counts = np.bincount(rho.ravel(), minlength=n_radii)
    profile = sums / np.maximum(counts, 1)
    return spec, np.arange(n_radii), profile


@dataclass
class PiecewiseFit:
    """Continuous piecewise-linear least-squares fit."""

    n_segments: int
    breakpoints: list
    slopes: list
    intercepts: list
    rss: float

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = self.intercepts[0] + self.slopes[0] * x
        for bp, s_prev, s_next in zip(self.breakpoints, self.slopes[:-1], self.slopes[1:]):
            y = y + (s_next - s_prev) * np.maximum(x - bp, 0.0)
        return y


def _hinge_design(x: np.ndarray, breakpoints) -> np.ndarray:
    cols = [np.ones_like(x), x]
    for bp in breakpoints:
        cols.append(np.maximum(x - bp, 0.0))
    return np.column_stack(cols)


def _fit_at(x, y, breakpoints):
    design = _hinge_design(x, breakpoints)
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return coef, float(resid @ resid)


def piecewise_fit(x, y, segments: int = 2) -> PiecewiseFit:
    """Least-squares continuous piecewise-linear fit with 1-3 segments.

    Breakpoints are searched exhaustively over interior data points; ties
    resolve toward the leftmost candidate set.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise MetricsError("x and y must be 1D arrays of equal length")
    if np.any(np.diff(x) <= 0):
        raise MetricsError("x must be strictly increasing")
    if segments not in (1, 2, 3):
        raise MetricsError("segments must be 1, 2, or 3")
    if x.size < 2 * segments + 1:
        raise MetricsError(f"need at least {2 * segments + 1} points for {segments} segments")

    interior = x[1:-1]
    if segments == 1:
        candidates = [()]
    elif segments == 2:
        candidates = [(bp,) for bp in interior]
    else:
        candidates = [
            (interior[i], interior[j])
            for i in range(len(interior))
            for j in range(i + 1, len(interior))
        ]

    best = None
    for bps in candidates:
        coef, rss = _fit_at(x, y, bps)
        if best is None or rss < best[1] - 1e-15:
            best = (bps, rss, coef)
    bps, rss, coef = best

    slopes = [float(coef[1])]
    for extra in coef[2:]:
        slopes.append(slopes[-1] + float(extra))
    intercepts = [float(coef[0])]
    for bp, s_prev, s_next in zip(bps, slopes[:-1], slopes[1:]):
        intercepts.append(intercepts[-1] + (s_prev - s_next) * bp)
    return PiecewiseFit(
        n_segments=segments,
        breakpoints=[float(b) for b in bps],
        slopes=slopes,
        intercepts=intercepts,
        rss=rss,
    )
