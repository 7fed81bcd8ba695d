"""Least-squares adversarial losses with multiple random-window critics.

A grid is clipped into three windows of different lengths, each scored by its
own tiny 2-D convolutional discriminator. Only the loss/score/gradient math
lives here; the (deliberately unguaranteed) adversarial training demo sits in
the toy lab.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BadMagic, ContractError, FormatError, SeededRng, Spectrogram

DSC_MAGIC = b"DSC1"
LEAKY_SLOPE = 0.2
MIN_CLIP_SIDE = 8  # receptive footprint of the three stride-2 stages
_STAGE_CHANNELS = (4, 8, 16)


@dataclass(frozen=True)
class WindowSpec:
    """Three window lengths in frames; each clip is clamped to the grid."""

    lengths: tuple[int, int, int] = (32, 64, 128)

    def __post_init__(self):
        if len(self.lengths) != 3:
            raise ContractError("exactly 3 window lengths are required")
        if any(length < 1 for length in self.lengths):
            raise ContractError("window lengths must be positive")


def random_windows(spec, windows: WindowSpec, rng: SeededRng) -> list[np.ndarray]:
    """Clip the grid into 3 random windows along time, full bins retained.

    Clip i has min(lengths[i], T) frames at an offset uniform over the valid
    starts, so a fixed (seed, stream) reproduces the same offsets.
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    t = values.shape[0]
    clips = []
    for length in windows.lengths:
        size = min(length, t)
        offset = int(rng.integers(0, t - size + 1))
        clips.append(values[offset : offset + size].copy())
    return clips


def _score_sets(sets, expected=3) -> list[np.ndarray]:
    sets = [np.asarray(s, dtype=np.float64).ravel() for s in sets]
    if len(sets) != expected:
        raise ContractError(f"expected {expected} score sets, got {len(sets)}")
    if any(len(s) == 0 for s in sets):
        raise ContractError("score sets must be non-empty")
    return sets


def lsgan_d_loss(real_scores, fake_scores) -> float:
    """Sum over critics of mean (real - 1)^2 + mean fake^2."""
    real = _score_sets(real_scores)
    fake = _score_sets(fake_scores)
    return float(
        sum(np.mean((r - 1.0) ** 2) + np.mean(f**2) for r, f in zip(real, fake))
    )


def lsgan_g_loss(fake_scores) -> float:
    """Mean over critics of mean (fake - 1)^2."""
    fake = _score_sets(fake_scores)
    return float(np.mean([np.mean((f - 1.0) ** 2) for f in fake]))


@dataclass
class TinyDiscriminator:
    """Three stride-2 3x3 conv stages with leaky activations, then a global
    mean pool and an affine map to one scalar score.

    Normalization and dropout act as evaluation-time no-ops, so scoring is
    deterministic; training-time dropout belongs to the demo loop.
    """

    conv_w: list[np.ndarray]  # (c_out, c_in, 3, 3) per stage
    conv_b: list[np.ndarray]
    out_w: np.ndarray  # (c_last,)
    out_b: float

    @classmethod
    def random(cls, rng: SeededRng, weight_scale: float = 0.1) -> "TinyDiscriminator":
        conv_w, conv_b = [], []
        c_in = 1
        for c_out in _STAGE_CHANNELS:
            conv_w.append(weight_scale * rng.normal(size=(c_out, c_in, 3, 3)))
            conv_b.append(np.zeros(c_out))
            c_in = c_out
        return cls(conv_w, conv_b,
                   weight_scale * rng.normal(size=_STAGE_CHANNELS[-1]), 0.0)


def _conv_pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1)))


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    padded = _conv_pad(x)
    view = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    view = view[:, ::2, ::2]
    out = np.einsum("ihwkl,oikl->ohw", view, w) + b[:, None, None]
    return out, view, padded.shape


def _conv_backward(d_out, view, pad_shape, w):
    d_w = np.einsum("ohw,ihwkl->oikl", d_out, view)
    d_b = d_out.sum(axis=(1, 2))
    d_pad = np.zeros(pad_shape)
    hp, wp = d_out.shape[1:]
    for ki in range(3):
        for kj in range(3):
            contrib = np.einsum("ohw,oi->ihw", d_out, w[:, :, ki, kj])
            d_pad[:, ki : ki + 2 * hp : 2, kj : kj + 2 * wp : 2] += contrib
    return d_w, d_b, d_pad[:, 1:-1, 1:-1]


def discriminator_score(disc: TinyDiscriminator, clip: np.ndarray) -> float:
    """Deterministic scalar score for one clip (frames x bins)."""
    score, _ = discriminator_score_and_grads(disc, clip, want_grads=False)
    return score


def discriminator_score_and_grads(disc: TinyDiscriminator, clip: np.ndarray,
                                  want_grads: bool = True):
    """Score plus gradients w.r.t. every parameter and the clip itself.

    Returns ``(score, grads)`` where grads is None when not requested,
    otherwise a dict with ``conv_w``, ``conv_b``, ``out_w``, ``out_b``, and
    ``clip`` entries.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 2:
        raise ContractError("clip must be a 2-D grid")
    if min(clip.shape) < MIN_CLIP_SIDE:
        raise ContractError(
            f"clip {clip.shape} smaller than the receptive footprint "
            f"({MIN_CLIP_SIDE}x{MIN_CLIP_SIDE})"
        )
    h = clip[None, :, :]
    caches = []
    for w, b in zip(disc.conv_w, disc.conv_b):
        pre, view, pad_shape = _conv_forward(h, w, b)
        h = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
        caches.append((pre, view, pad_shape))
    pooled = h.mean(axis=(1, 2))
    score = float(disc.out_w @ pooled + disc.out_b)
    if not want_grads:
        return score, None

    grads = {"conv_w": [], "conv_b": [], "out_w": pooled.copy(), "out_b": 1.0}
    cells = h.shape[1] * h.shape[2]
    d_h = np.broadcast_to(
        disc.out_w[:, None, None] / cells, h.shape
    ).copy()
    for (pre, view, pad_shape), w in zip(reversed(caches), reversed(disc.conv_w)):
        d_pre = d_h * np.where(pre > 0, 1.0, LEAKY_SLOPE)
        d_w, d_b, d_h = _conv_backward(d_pre, view, pad_shape, w)
        grads["conv_w"].insert(0, d_w)
        grads["conv_b"].insert(0, d_b)
    grads["clip"] = d_h[0]
    return score, grads


def save_discriminator(disc: TinyDiscriminator, path) -> None:
    """Checkpoint with the same envelope idea as flow models (magic DSC1)."""
    with open(path, "wb") as fh:
        fh.write(DSC_MAGIC)
        fh.write(struct.pack("<I", len(disc.conv_w)))
        for w, b in zip(disc.conv_w, disc.conv_b):
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(disc.out_w)))
        fh.write(np.ascontiguousarray(disc.out_w, dtype="<f4").tobytes())
        fh.write(struct.pack("<f", disc.out_b))


def load_discriminator(path) -> TinyDiscriminator:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != DSC_MAGIC:
        raise BadMagic(f"{path}: expected magic {DSC_MAGIC!r}, got {data[:4]!r}")
    pos = 4
    (n_stages,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    conv_w, conv_b = [], []
    try:
        for _ in range(n_stages):
            c_out, c_in = struct.unpack("<II", data[pos : pos + 8])
            pos += 8
            size = c_out * c_in * 9
            w = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            b = np.frombuffer(data, dtype="<f4", count=c_out, offset=pos)
            pos += 4 * c_out
            conv_w.append(w.astype(np.float64).reshape(c_out, c_in, 3, 3))
            conv_b.append(b.astype(np.float64))
        (n_out,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        out_w = np.frombuffer(data, dtype="<f4", count=n_out, offset=pos)
        pos += 4 * n_out
        (out_b,) = struct.unpack("<f", data[pos : pos + 4])
        pos += 4
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated payload") from exc
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after payload")
    return TinyDiscriminator(conv_w, conv_b, out_w.astype(np.float64), float(out_b))
