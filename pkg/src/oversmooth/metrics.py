"""Objective over-smoothness metrics over spectrogram grids.

Two metrics: the variance of the absolute Laplacian-filter response (higher
means sharper) and windowed structural similarity between two grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError, Spectrogram

# 3x3 Laplacian mask; rows sum to zero so constant grids respond with zero.
LAPLACIAN_MASK = np.array(
    [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]]
) / 6.0


@dataclass(frozen=True)
class SsimConfig:
    """Window and stabilization constants for SSIM.

    ``lo``/``hi`` give the dynamic range used to normalize inputs to [0, 1]
    before any statistics; when left as None the joint min/max of the two
    grids is used. C1 = 0.01**2 and C2 = 0.03**2 presuppose unit dynamic
    range, which is why the normalization is not optional.
    """

    window: int = 11
    c1: float = 0.0001
    c2: float = 0.0009
    lo: float | None = None
    hi: float | None = None
    window_kind: str = "box"  # "box" or "gaussian"
    gaussian_sigma: float = 1.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ContractError("window side must be odd and >= 3")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ContractError("C1 and C2 must be positive")
        if (self.lo is None) != (self.hi is None):
            raise ContractError("set both lo and hi, or neither")
        if self.lo is not None and not self.lo < self.hi:
            raise ContractError(f"degenerate dynamic range [{self.lo}, {self.hi}]")
        if self.window_kind not in ("box", "gaussian"):
            raise ContractError(f"unknown window kind {self.window_kind!r}")


def _as_grid(spec) -> np.ndarray:
    if isinstance(spec, Spectrogram):
        return spec.values
    arr = np.asarray(spec, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("expected a 2-D grid")
    return arr


def laplacian_response(spec) -> np.ndarray:
    """Valid (no padding) cross-correlation with the 3x3 Laplacian mask.

    Input must be at least 3x3; output shape is (T-2, F-2).
    """
    grid = _as_grid(spec)
    t, f = grid.shape
    if t < 3 or f < 3:
        raise ContractError(f"grid must be at least 3x3, got {t}x{f}")
    out = np.zeros((t - 2, f - 2))
    for di in range(3):
        for dj in range(3):
            w = LAPLACIAN_MASK[di, dj]
            if w != 0.0:
                out += w * grid[di : di + t - 2, dj : dj + f - 2]
    return out


def var_laplacian(spec) -> float:
    """Variance of the absolute Laplacian response.

    Normalized by the response cell count so values are comparable across
    grid sizes. Zero for any constant grid; grows as the grid gets sharper.
    """
    response = np.abs(laplacian_response(spec))
    return float(np.mean((response - response.mean()) ** 2))


def _reflect_pad_2d(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflect-pad both axes; falls back gracefully for tiny inputs."""

    def axis_indices(n: int) -> np.ndarray:
        idx = np.arange(-pad, n + pad)
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * (n - 1)
        idx = np.abs(idx) % period
        return np.where(idx >= n, period - idx, idx)

    rows = axis_indices(x.shape[0])
    cols = axis_indices(x.shape[1])
    return x[np.ix_(rows, cols)]


def _window_kernel(cfg: SsimConfig) -> np.ndarray:
    w = cfg.window
    if cfg.window_kind == "box":
        k1 = np.full(w, 1.0 / w)
    else:
        offsets = np.arange(w) - w // 2
        k1 = np.exp(-0.5 * (offsets / cfg.gaussian_sigma) ** 2)
        k1 /= k1.sum()
    return np.outer(k1, k1)


def _window_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    pad = kernel.shape[0] // 2
    padded = _reflect_pad_2d(x, pad)
    view = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape)
    return np.einsum("ijkl,kl->ij", view, kernel)


def ssim_map(a, b, cfg: SsimConfig | None = None) -> np.ndarray:
    """Per-cell SSIM between two equally shaped grids.

    Both grids are first mapped to [0, 1] using the configured dynamic range
    (default: their joint min/max), then windowed means, variances, and the
    covariance feed the two-factor similarity formula. Cells lie in [-1, 1];
    negative covariance can make cells negative and no clamping is applied.
    """
    cfg = cfg or SsimConfig()
    ga, gb = _as_grid(a), _as_grid(b)
    if ga.shape != gb.shape:
        raise ContractError(f"shape mismatch {ga.shape} vs {gb.shape}")
    if cfg.lo is None:
        lo = min(ga.min(), gb.min())
        hi = max(ga.max(), gb.max())
    else:
        lo, hi = cfg.lo, cfg.hi
    span = hi - lo
    if span <= 0.0:
        # Joint range collapses only when both grids are the same constant.
        span = 1.0
    ga = (ga - lo) / span
    gb = (gb - lo) / span

    kernel = _window_kernel(cfg)
    mu_a = _window_mean(ga, kernel)
    mu_b = _window_mean(gb, kernel)
    var_a = _window_mean(ga * ga, kernel) - mu_a * mu_a
    var_b = _window_mean(gb * gb, kernel) - mu_b * mu_b
    cov = _window_mean(ga * gb, kernel) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + cfg.c1) / (mu_a**2 + mu_b**2 + cfg.c1)
    structure = (2.0 * cov + cfg.c2) / (var_a + var_b + cfg.c2)
    return luminance * structure


def ssim(a, b, cfg: SsimConfig | None = None) -> float:
    """Mean of :func:`ssim_map`; 1.0 exactly when the grids are identical."""
    return float(np.mean(ssim_map(a, b, cfg)))
