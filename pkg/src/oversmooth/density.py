"""Distribution diagnostics: per-phoneme KDE marginals/joints and the dip
statistic for multimodality.

The dip statistic follows the classical greatest-convex-minorant /
least-concave-majorant computation on the sorted sample. Values respect the
theoretical bounds 1/(2n) <= dip <= 1/4; larger values are stronger evidence
of multimodality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError, gather_phoneme_frames


class PhonemeAbsent(ContractError):
    """The requested phoneme occurs in no alignment of the corpus."""


class BinOutOfRange(ContractError):
    """A frequency-bin index exceeds the spectrogram width."""


class NoPairs(ContractError):
    """No within-span value pairs exist for the requested joint axis."""


@dataclass(frozen=True)
class Density1D:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float


@dataclass(frozen=True)
class Density2D:
    grid_x: np.ndarray
    grid_y: np.ndarray
    values: np.ndarray  # shape (len(grid_x), len(grid_y))
    bandwidths: tuple[float, float]


@dataclass(frozen=True)
class DipResult:
    dip: float
    n: int


@dataclass(frozen=True)
class FreqPair:
    """Joint over two frequency bins of the same frame."""

    f1: int
    f2: int


@dataclass(frozen=True)
class TimePair:
    """Joint over one bin at frames t and t + lag within the same span."""

    f: int
    lag: int = 1


def silverman_bandwidth(samples: np.ndarray) -> float:
    """Reference-rule bandwidth 1.06 * std * n**(-1/5)."""
    n = len(samples)
    if n < 2:
        raise ContractError("bandwidth rule needs at least 2 samples")
    sd = float(np.std(samples, ddof=1))
    if sd == 0.0:
        raise ContractError(
            "sample has zero variance; pass an explicit bandwidth"
        )
    return 1.06 * sd * n ** (-0.2)


def _auto_grid(samples: np.ndarray, h: float, points: int) -> np.ndarray:
    return np.linspace(samples.min() - 4.0 * h, samples.max() + 4.0 * h, points)


def _gauss_sum(grid: np.ndarray, samples: np.ndarray, h: float) -> np.ndarray:
    """Sum of Gaussian kernels on ``grid``, chunked to bound memory."""
    out = np.zeros(len(grid))
    norm = 1.0 / (np.sqrt(2.0 * np.pi) * h)
    for start in range(0, len(samples), 4096):
        chunk = samples[start : start + 4096]
        z = (grid[None, :] - chunk[:, None]) / h
        out += norm * np.exp(-0.5 * z * z).sum(axis=0)
    return out


def kde1d(samples, bandwidth: float | None = None, grid=None) -> Density1D:
    """Gaussian-kernel density estimate of a 1-D sample.

    Without an explicit grid, 512 points spanning [min - 4h, max + 4h] are
    used, which keeps the trapezoidal integral within 2% of one. A
    zero-variance sample requires an explicit bandwidth.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 1:
        raise ContractError("need at least one sample")
    if not np.all(np.isfinite(x)):
        raise ContractError("samples must be finite")
    if bandwidth is None:
        h = silverman_bandwidth(x)
    else:
        if bandwidth <= 0:
            raise ContractError("bandwidth must be positive")
        h = float(bandwidth)
    g = _auto_grid(x, h, 512) if grid is None else np.asarray(grid, dtype=np.float64)
    return Density1D(g, _gauss_sum(g, x, h) / len(x), h)


def kde2d(pairs, bandwidths: tuple[float, float] | None = None,
          grid_points: int = 128) -> Density2D:
    """Product-Gaussian-kernel density estimate of an (n, 2) sample."""
    p = np.asarray(pairs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
        raise ContractError("pairs must be a non-empty (n, 2) array")
    if not np.all(np.isfinite(p)):
        raise ContractError("pairs must be finite")
    xs, ys = p[:, 0], p[:, 1]
    if bandwidths is None:
        hx, hy = silverman_bandwidth(xs), silverman_bandwidth(ys)
    else:
        hx, hy = float(bandwidths[0]), float(bandwidths[1])
        if hx <= 0 or hy <= 0:
            raise ContractError("bandwidths must be positive")
    gx = _auto_grid(xs, hx, grid_points)
    gy = _auto_grid(ys, hy, grid_points)
    values = np.zeros((len(gx), len(gy)))
    norm = 1.0 / (2.0 * np.pi * hx * hy)
    for start in range(0, len(p), 1024):
        cx = xs[start : start + 1024]
        cy = ys[start : start + 1024]
        kx = np.exp(-0.5 * ((gx[None, :] - cx[:, None]) / hx) ** 2)
        ky = np.exp(-0.5 * ((gy[None, :] - cy[:, None]) / hy) ** 2)
        values += kx.T @ ky
    return Density2D(gx, gy, values * norm / len(p), (hx, hy))


def pooled_phoneme_values(corpus, phoneme: str, bin_index: int) -> np.ndarray:
    """All values at one bin over every span of a phoneme, corpus-pooled."""
    found = False
    chunks = []
    for spec, align in corpus:
        if bin_index >= spec.bins:
            raise BinOutOfRange(
                f"bin {bin_index} out of range for F={spec.bins}"
            )
        frames = gather_phoneme_frames(spec, align, phoneme)
        if align.spans(phoneme):
            found = True
        if len(frames):
            chunks.append(frames[:, bin_index])
    if not found:
        raise PhonemeAbsent(f"phoneme {phoneme!r} absent from corpus")
    return np.concatenate(chunks)


def phoneme_marginal(corpus, phoneme: str, bin_index: int,
                     bandwidth: float | None = None) -> Density1D:
    """KDE of all values at one frequency bin over a phoneme's frames.

    ``corpus`` is an iterable of (Spectrogram, Alignment) pairs; values are
    pooled across every span of ``phoneme`` in every utterance.
    """
    corpus = list(corpus)
    return kde1d(pooled_phoneme_values(corpus, phoneme, bin_index), bandwidth)


def phoneme_joint(corpus, phoneme: str, axis,
                  bandwidths: tuple[float, float] | None = None) -> Density2D:
    """Joint KDE of two grid positions conditioned on a phoneme.

    ``axis`` selects the pairing: :class:`FreqPair` pairs two bins of the
    same frame, :class:`TimePair` pairs one bin at frames t and t + lag.
    Time pairs never cross span boundaries, so both frames are guaranteed to
    carry the same phoneme.
    """
    corpus = list(corpus)
    pairs = []
    found = False
    for spec, align in corpus:
        spans = align.spans(phoneme)
        if spans:
            found = True
        for start, end in spans:
            if end > spec.frames:
                raise ContractError(
                    f"span [{start}, {end}) exceeds T={spec.frames}"
                )
            block = spec.values[start:end]
            if isinstance(axis, FreqPair):
                if max(axis.f1, axis.f2) >= spec.bins:
                    raise BinOutOfRange(
                        f"bins {(axis.f1, axis.f2)} out of range for F={spec.bins}"
                    )
                pairs.append(np.column_stack([block[:, axis.f1], block[:, axis.f2]]))
            elif isinstance(axis, TimePair):
                if axis.f >= spec.bins:
                    raise BinOutOfRange(
                        f"bin {axis.f} out of range for F={spec.bins}"
                    )
                if axis.lag < 1:
                    raise ContractError("lag must be >= 1")
                if len(block) > axis.lag:
                    col = block[:, axis.f]
                    pairs.append(np.column_stack([col[: -axis.lag], col[axis.lag :]]))
            else:
                raise ContractError(f"unknown joint axis {axis!r}")
    if not found:
        raise PhonemeAbsent(f"phoneme {phoneme!r} absent from corpus")
    if not pairs or sum(len(p) for p in pairs) == 0:
        raise NoPairs(f"no within-span pairs for {phoneme!r} with {axis!r}")
    return kde2d(np.concatenate(pairs), bandwidths)


def _dip_sorted(x: np.ndarray) -> float:
    """Dip of a sorted sample with n >= 4 and x[0] != x[-1].

    Returns the raw sup-distance (already divided by 2n). Iteratively fits
    the greatest convex minorant and least concave majorant of the empirical
    CDF over a shrinking modal interval.
    """
    n = len(x)
    low, high = 0, n - 1
    d_best = 0.0

    # mn[j]: start of the convex-minorant segment ending at j.
    mn = np.zeros(n, dtype=np.int64)
    for j in range(1, n):
        mn[j] = j - 1
        while True:
            mnj = mn[j]
            mnmnj = mn[mnj]
            if mnj == 0 or (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj):
                break
            mn[j] = mnmnj
    # mj[k]: end of the concave-majorant segment starting at k.
    mj = np.zeros(n, dtype=np.int64)
    mj[n - 1] = n - 1
    for k in range(n - 2, -1, -1):
        mj[k] = k + 1
        while True:
            mjk = mj[k]
            mjmjk = mj[mjk]
            if mjk == n - 1 or (x[k] - x[mjk]) * (mjk - mjmjk) < (x[mjk] - x[mjmjk]) * (k - mjk):
                break
            mj[k] = mjmjk

    gcm = np.zeros(n, dtype=np.int64)
    lcm = np.zeros(n, dtype=np.int64)
    while True:
        gcm[0] = high
        i = 0
        while gcm[i] > low:
            gcm[i + 1] = mn[gcm[i]]
            i += 1
        ig = l_gcm = i
        ix = ig - 1
        lcm[0] = low
        i = 0
        while lcm[i] < high:
            lcm[i + 1] = mj[lcm[i]]
            i += 1
        ih = l_lcm = i
        iv = 1

        d = 0.0
        if l_gcm != 1 or l_lcm != 1:
            # Largest distance between the two hulls.
            while True:
                gcmix = gcm[ix]
                lcmiv = lcm[iv]
                if gcmix > lcmiv:
                    gcmi1 = gcm[ix + 1]
                    dx = (lcmiv - gcmi1 + 1) - (x[lcmiv] - x[gcmi1]) * (
                        gcmix - gcmi1
                    ) / (x[gcmix] - x[gcmi1])
                    iv += 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv - 1
                else:
                    lcmiv1 = lcm[iv - 1]
                    dx = (x[gcmix] - x[lcmiv1]) * (lcmiv - lcmiv1) / (
                        x[lcmiv] - x[lcmiv1]
                    ) - (gcmix - lcmiv1 - 1)
                    ix -= 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv
                if ix < 0:
                    ix = 0
                if iv > l_lcm:
                    iv = l_lcm
                if gcm[ix] == lcm[iv]:
                    break
        if d < d_best:
            break

        # Largest deviation of the ECDF from each hull segment.
        dip_l = 0.0
        for j in range(ig, l_gcm):
            max_t = 1.0
            jb, je = gcm[j + 1], gcm[j]
            if je - jb > 1 and x[je] != x[jb]:
                c = (je - jb) / (x[je] - x[jb])
                for jj in range(jb, je + 1):
                    t = (jj - jb + 1) - (x[jj] - x[jb]) * c
                    if max_t < t:
                        max_t = t
            if dip_l < max_t:
                dip_l = max_t
        dip_u = 0.0
        for j in range(ih, l_lcm):
            max_t = 1.0
            jb, je = lcm[j], lcm[j + 1]
            if je - jb > 1 and x[je] != x[jb]:
                c = (je - jb) / (x[je] - x[jb])
                for jj in range(jb, je + 1):
                    t = (x[jj] - x[jb]) * c - (jj - jb - 1)
                    if max_t < t:
                        max_t = t
            if dip_u < max_t:
                dip_u = max_t

        d_best = max(d_best, dip_l, dip_u)
        if low == gcm[ig] and high == lcm[ih]:
            break
        low = gcm[ig]
        high = lcm[ih]
    return d_best / (2.0 * n)


def dip_statistic(samples) -> DipResult:
    """Hartigan-Hartigan dip of a sample's empirical CDF.

    The result is clamped into the theoretical range [1/(2n), 1/4], which
    also covers the degenerate n = 2 and n = 3 cases where every sample is
    exactly 1/(2n) away from some unimodal CDF.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = len(x)
    if n < 2:
        raise ContractError("dip needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ContractError("samples must be finite")
    if n < 4 or x[0] == x[-1]:
        raw = 0.0
    else:
        raw = _dip_sorted(x)
    return DipResult(float(min(max(raw, 0.5 / n), 0.25)), n)


@dataclass(frozen=True)
class MeanDipResult:
    mean: float
    cells: dict  # (phoneme, bin) -> DipResult
    skipped: list  # (phoneme, bin) cells with < 2 samples


def mean_dip(corpus, bins, phonemes) -> MeanDipResult:
    """Average dip over (phoneme, bin) cells of a corpus.

    Cells with fewer than 2 pooled samples are skipped and reported. Cells
    are processed in lexicographic order so the reduction is deterministic.
    """
    corpus = list(corpus)
    cells = {}
    skipped = []
    for ph in sorted(set(phonemes)):
        for f in sorted(set(bins)):
            try:
                values = pooled_phoneme_values(corpus, ph, f)
            except PhonemeAbsent:
                skipped.append((ph, f))
                continue
            if len(values) < 2:
                skipped.append((ph, f))
                continue
            cells[(ph, f)] = dip_statistic(values)
    if not cells:
        raise ContractError("every (phoneme, bin) cell was empty or too small")
    mean = float(np.mean([r.dip for r in cells.values()]))
    return MeanDipResult(mean, cells, skipped)
