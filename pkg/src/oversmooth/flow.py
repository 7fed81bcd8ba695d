"""Desk-scale conditional normalizing flow over (T, c) grids.

Each flow step combines three invertible sublayers with exact log-Jacobians:
a per-channel affine (actnorm), an invertible c x c channel-mixing matrix,
and an affine coupling layer whose scale/shift come from a small tanh MLP fed
with the untouched channels plus a per-frame condition vector.

Direction conventions, fixed once:

* analysis (data -> latent, the training direction) applies steps in list
  order; within a step: ``h = scale * h + bias``, then ``h = h @ inv(mix).T``,
  then the second half of channels is normalized as
  ``z_b = (h_b - shift) * exp(-ell)``.
* synthesis (latent -> data, :func:`forward`) is the exact inverse, steps in
  reverse order.

``scale``/``bias`` therefore live on the data side (data-dependent init makes
the first actnorm output standard per channel), while ``mix`` is stored in the
synthesis sense: a step whose matrix is 2I doubles values on the way from
latent to data. The coupling log-scale ``ell`` is squashed to (-2, 2) with
2*tanh so round trips stay well conditioned. All log-determinants are those
of the actual maps; :func:`forward` and :func:`inverse` report values that
are exact negatives of each other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BadMagic, ContractError, FormatError, SeededRng

FLW_MAGIC = b"FLW1"
LOG_2PI = np.log(2.0 * np.pi)


class UninitializedModel(ContractError):
    """The model's actnorm layers have not been initialized yet."""


class DegenerateChannel(ContractError):
    """A channel of the init batch has zero variance."""


class FlowDivergence(RuntimeError):
    """Training produced a non-finite likelihood."""


@dataclass
class CouplingNet:
    """Two-layer tanh perceptron: (h_a ++ cond) -> (raw log-scale, shift).

    With frame context the net maps each frame independently; with grid
    context it sees every frame of the conditioning half at once (the
    desk-scale stand-in for a coupling network with a temporal receptive
    field), which fixes the frame count.
    """

    w1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out_dim, hidden)
    b2: np.ndarray  # (out_dim,)


@dataclass
class FlowStep:
    scale: np.ndarray  # (c,), actnorm, data side
    bias: np.ndarray  # (c,)
    mix: np.ndarray  # (c, c), synthesis sense
    net: CouplingNet


def _net_dims(channels: int, cond_dim: int, context: str, frames: int):
    c_a = (channels + 1) // 2
    c_b = channels - c_a
    if context == "frame":
        return c_a + cond_dim, 2 * c_b
    if context == "grid":
        if frames < 1:
            raise ContractError("grid-context models must fix a frame count")
        return frames * (c_a + cond_dim), frames * 2 * c_b
    raise ContractError(f"unknown coupling context {context!r}")


@dataclass
class FlowModel:
    steps: list[FlowStep]
    channels: int
    cond_dim: int
    hidden: int
    initialized: bool = False
    context: str = "frame"
    frames: int = 0  # fixed frame count for grid context; 0 = flexible

    @property
    def split(self) -> tuple[int, int]:
        c_a = (self.channels + 1) // 2
        return c_a, self.channels - c_a

    @classmethod
    def identity(cls, channels: int, cond_dim: int, n_steps: int = 1,
                 hidden: int = 16, context: str = "frame",
                 frames: int = 0) -> "FlowModel":
        """All-identity steps; usable without data-dependent init."""
        in_dim, out_dim = _net_dims(channels, cond_dim, context, frames)
        steps = []
        for _ in range(n_steps):
            net = CouplingNet(np.zeros((hidden, in_dim)), np.zeros(hidden),
                              np.zeros((out_dim, hidden)), np.zeros(out_dim))
            steps.append(FlowStep(np.ones(channels), np.zeros(channels),
                                  np.eye(channels), net))
        return cls(steps, channels, cond_dim, hidden, initialized=True,
                   context=context, frames=frames)

    @classmethod
    def random(cls, rng: SeededRng, channels: int, cond_dim: int,
               n_steps: int = 8, hidden: int = 16,
               weight_scale: float = 0.05, context: str = "frame",
               frames: int = 0) -> "FlowModel":
        """Random-rotation mixes and small coupling weights.

        The model still needs :func:`actnorm_init` on a data batch before
        likelihoods or sampling make sense.
        """
        if channels < 2:
            raise ContractError("need at least 2 channels for coupling splits")
        in_dim, out_dim = _net_dims(channels, cond_dim, context, frames)
        steps = []
        for _ in range(n_steps):
            gaussian = rng.normal(size=(channels, channels))
            q, r = np.linalg.qr(gaussian)
            q = q * np.sign(np.diag(r))  # unique rotation-ish factor
            if np.linalg.det(q) < 0:
                q[:, 0] = -q[:, 0]  # keep det = +1
            net = CouplingNet(
                w1=weight_scale * rng.normal(size=(hidden, in_dim)),
                b1=np.zeros(hidden),
                w2=weight_scale * rng.normal(size=(out_dim, hidden)),
                b2=np.zeros(out_dim),
            )
            steps.append(FlowStep(np.ones(channels), np.zeros(channels), q, net))
        return cls(steps, channels, cond_dim, hidden, initialized=False,
                   context=context, frames=frames)


@dataclass(frozen=True)
class ConditionedBatch:
    """Aligned stacks of target grids (n, T, c) and conditions (n, T, d)."""

    targets: np.ndarray
    conds: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64)
        c = np.asarray(self.conds, dtype=np.float64)
        if t.ndim != 3 or c.ndim != 3:
            raise ContractError("targets and conds must be 3-D stacks")
        if t.shape[:2] != c.shape[:2]:
            raise ContractError(
                f"targets {t.shape} and conds {c.shape} disagree on (n, T)"
            )
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(c))):
            raise ContractError("batch values must be finite")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "conds", c)

    def __len__(self) -> int:
        return self.targets.shape[0]


def _check_shapes(model: FlowModel, grids: np.ndarray, conds: np.ndarray):
    if grids.shape[-1] != model.channels:
        raise ContractError(
            f"grid has {grids.shape[-1]} channels, model expects {model.channels}"
        )
    if conds.shape[-1] != model.cond_dim:
        raise ContractError(
            f"condition dim {conds.shape[-1]} != model cond_dim {model.cond_dim}"
        )
    if grids.shape[:-1] != conds.shape[:-1]:
        raise ContractError("grid and condition frame counts disagree")
    if model.context == "grid" and grids.shape[-2] != model.frames:
        raise ContractError(
            f"grid-context model fixes T={model.frames}, got {grids.shape[-2]}"
        )


def _coupling_raw(step: FlowStep, h_a: np.ndarray, cond: np.ndarray, c_b: int,
                  context: str):
    """Coupling net outputs: (netin, hidden, ell, tanh(raw), shift)."""
    n, t = h_a.shape[:2]
    if context == "frame":
        netin = np.concatenate([h_a, cond], axis=-1)
        hid = np.tanh(netin @ step.net.w1.T + step.net.b1)
        out = hid @ step.net.w2.T + step.net.b2
    else:
        netin = np.concatenate(
            [h_a.reshape(n, -1), cond.reshape(n, -1)], axis=-1
        )
        hid = np.tanh(netin @ step.net.w1.T + step.net.b1)
        out = (hid @ step.net.w2.T + step.net.b2).reshape(n, t, 2 * c_b)
    th = np.tanh(out[..., :c_b])
    return netin, hid, 2.0 * th, th, out[..., c_b:]  # ell = 2*tanh(raw)


def _analysis(model: FlowModel, grids: np.ndarray, conds: np.ndarray):
    """Data -> latent on an (n, T, c) stack; returns (z, per-sample logdet)."""
    c_a, c_b = model.split
    h = grids
    n, t = grids.shape[:2]
    logdet = np.zeros(n)
    for step in model.steps:
        h = step.scale * h + step.bias
        logdet += t * np.sum(np.log(np.abs(step.scale)))
        inv_mix = np.linalg.inv(step.mix)
        h = h @ inv_mix.T
        logdet += -t * _slogdet(step.mix)
        h_a, h_b = h[..., :c_a], h[..., c_a:]
        _, _, ell, _, shift = _coupling_raw(step, h_a, conds, c_b, model.context)
        z_b = (h_b - shift) * np.exp(-ell)
        logdet += -ell.sum(axis=(1, 2))
        h = np.concatenate([h_a, z_b], axis=-1)
    return h, logdet


def _synthesis(model: FlowModel, latents: np.ndarray, conds: np.ndarray):
    """Latent -> data on an (n, T, c) stack; returns (y, per-sample logdet)."""
    c_a, c_b = model.split
    h = latents
    n, t = latents.shape[:2]
    logdet = np.zeros(n)
    for step in reversed(model.steps):
        h_a, h_b = h[..., :c_a], h[..., c_a:]
        _, _, ell, _, shift = _coupling_raw(step, h_a, conds, c_b, model.context)
        h = np.concatenate([h_a, h_b * np.exp(ell) + shift], axis=-1)
        logdet += ell.sum(axis=(1, 2))
        h = h @ step.mix.T
        logdet += t * _slogdet(step.mix)
        h = (h - step.bias) / step.scale
        logdet += -t * np.sum(np.log(np.abs(step.scale)))
    return h, logdet


def _slogdet(m: np.ndarray) -> float:
    sign, logabs = np.linalg.slogdet(m)
    if sign == 0:
        raise ContractError("channel-mix matrix is singular")
    return float(logabs)


def _require_initialized(model: FlowModel):
    if not model.initialized:
        raise UninitializedModel(
            "run actnorm_init on a data batch before using the model"
        )


def forward(model: FlowModel, z: np.ndarray, cond: np.ndarray):
    """Map one latent grid (T, c) to a data grid; returns (y, logdet)."""
    _require_initialized(model)
    z = np.asarray(z, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    _check_shapes(model, z, cond)
    y, logdet = _synthesis(model, z[None], cond[None])
    return y[0], float(logdet[0])


def inverse(model: FlowModel, y: np.ndarray, cond: np.ndarray):
    """Map one data grid (T, c) to its latent; returns (z, logdet)."""
    _require_initialized(model)
    y = np.asarray(y, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    _check_shapes(model, y, cond)
    z, logdet = _analysis(model, y[None], cond[None])
    return z[0], float(logdet[0])


def actnorm_init(model: FlowModel, batch: ConditionedBatch) -> FlowModel:
    """Data-dependent init: every actnorm standardizes its input batch.

    After init, the first actnorm's output over the init batch has
    per-channel mean 0 and standard deviation 1.
    """
    if model.initialized:
        raise ContractError("model is already initialized")
    if len(batch) < 1:
        raise ContractError("init batch must be non-empty")
    _check_shapes(model, batch.targets, batch.conds)
    c_a, c_b = model.split
    h = batch.targets
    for step in model.steps:
        mean = h.reshape(-1, model.channels).mean(axis=0)
        std = h.reshape(-1, model.channels).std(axis=0)
        if np.any(std < 1e-12):
            raise DegenerateChannel(
                f"zero-variance channels {np.nonzero(std < 1e-12)[0].tolist()} "
                "in init batch"
            )
        step.scale = 1.0 / std
        step.bias = -mean / std
        h = step.scale * h + step.bias
        h = h @ np.linalg.inv(step.mix).T
        h_a, h_b = h[..., :c_a], h[..., c_a:]
        _, _, ell, _, shift = _coupling_raw(step, h_a, batch.conds, c_b, model.context)
        h = np.concatenate([h_a, (h_b - shift) * np.exp(-ell)], axis=-1)
    model.initialized = True
    return model


def log_likelihood(model: FlowModel, batch: ConditionedBatch) -> np.ndarray:
    """Per-sample log-likelihood under the standard-normal prior."""
    _require_initialized(model)
    _check_shapes(model, batch.targets, batch.conds)
    z, logdet = _analysis(model, batch.targets, batch.conds)
    dims = z.shape[1] * z.shape[2]
    return -(0.5 * (z**2).sum(axis=(1, 2)) + 0.5 * dims * LOG_2PI) + logdet


def nll(model: FlowModel, batch: ConditionedBatch) -> float:
    """Mean per-sample negative log-likelihood under the standard-normal prior."""
    return float(-log_likelihood(model, batch).mean())


def sample(model: FlowModel, cond: np.ndarray, rng: SeededRng,
           temperature: float = 1.0) -> np.ndarray:
    """Draw one (T, c) grid: z ~ N(0, temperature**2 I) pushed to data space."""
    _require_initialized(model)
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    cond = np.asarray(cond, dtype=np.float64)
    z = temperature * rng.normal(size=(cond.shape[0], model.channels))
    y, _ = forward(model, z, cond)
    return y


def sample_batch(model: FlowModel, conds: np.ndarray, rng: SeededRng,
                 temperature: float = 1.0) -> np.ndarray:
    """Draw one grid per condition row of an (n, T, d_cond) stack."""
    _require_initialized(model)
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    conds = np.asarray(conds, dtype=np.float64)
    _check_shapes(model, np.empty(conds.shape[:2] + (model.channels,)), conds)
    z = temperature * rng.normal(
        size=(conds.shape[0], conds.shape[1], model.channels)
    )
    y, _ = _synthesis(model, z, conds)
    return y


# ---------------------------------------------------------------------------
# Analytic gradients and training
# ---------------------------------------------------------------------------


@dataclass
class StepGrads:
    scale: np.ndarray
    bias: np.ndarray
    mix: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def nll_and_grads(model: FlowModel, batch: ConditionedBatch):
    """NLL and its gradient w.r.t. every model parameter (hand backprop)."""
    _require_initialized(model)
    _check_shapes(model, batch.targets, batch.conds)
    c_a, c_b = model.split
    conds = batch.conds
    n, t = batch.targets.shape[:2]
    dims = t * model.channels

    # Analysis pass, caching what the reverse sweep needs.
    h = batch.targets
    caches = []
    total_ell = 0.0
    logdet_const = 0.0
    for step in model.steps:
        h0 = h
        h1 = step.scale * h0 + step.bias
        inv_mix = np.linalg.inv(step.mix)
        h2 = h1 @ inv_mix.T
        h_a, h_b = h2[..., :c_a], h2[..., c_a:]
        netin, hid, ell, th, shift = _coupling_raw(step, h_a, conds, c_b, model.context)
        z_b = (h_b - shift) * np.exp(-ell)
        caches.append((h0, h1, inv_mix, h_a, netin, hid, ell, th, z_b))
        h = np.concatenate([h_a, z_b], axis=-1)
        total_ell += ell.sum() / n
        logdet_const += t * np.sum(np.log(np.abs(step.scale))) - t * _slogdet(step.mix)
    z = h
    value = (
        0.5 * (z**2).sum() / n
        + 0.5 * dims * LOG_2PI
        - logdet_const
        + total_ell
    )
    if not np.isfinite(value):
        raise FlowDivergence(f"non-finite NLL {value}")

    grads = []
    g = z / n  # dNLL/dz
    for step, cache in zip(reversed(model.steps), reversed(caches)):
        h0, h1, inv_mix, h_a, netin, hid, ell, th, z_b = cache
        g_a, g_b = g[..., :c_a], g[..., c_a:]
        exp_neg = np.exp(-ell)
        d_hb = g_b * exp_neg
        d_shift = -d_hb
        d_ell = -g_b * z_b + 1.0 / n  # z-path plus the direct +ell/n term
        d_raw = d_ell * 2.0 * (1.0 - th**2)
        d_out = np.concatenate([d_raw, d_shift], axis=-1)
        if model.context == "frame":
            g_w2 = np.einsum("ntk,nth->kh", d_out, hid)
            g_b2 = d_out.sum(axis=(0, 1))
            d_hid = d_out @ step.net.w2
            d_pre = d_hid * (1.0 - hid**2)
            g_w1 = np.einsum("nth,ntm->hm", d_pre, netin)
            g_b1 = d_pre.sum(axis=(0, 1))
            d_netin = d_pre @ step.net.w1
            d_ha = g_a + d_netin[..., :c_a]
        else:
            d_flat = d_out.reshape(n, -1)
            g_w2 = np.einsum("nk,nh->kh", d_flat, hid)
            g_b2 = d_flat.sum(axis=0)
            d_hid = d_flat @ step.net.w2
            d_pre = d_hid * (1.0 - hid**2)
            g_w1 = np.einsum("nh,nm->hm", d_pre, netin)
            g_b1 = d_pre.sum(axis=0)
            d_netin = d_pre @ step.net.w1
            d_ha = g_a + d_netin[:, : t * c_a].reshape(n, t, c_a)
        g2 = np.concatenate([d_ha, d_hb], axis=-1)

        d_inv = np.einsum("nti,ntj->ij", g2, h1)
        g_mix = -inv_mix.T @ d_inv @ inv_mix.T + t * inv_mix.T
        g1 = g2 @ inv_mix

        g_scale = (g1 * h0).sum(axis=(0, 1)) - t / step.scale
        g_bias = g1.sum(axis=(0, 1))
        g = g1 * step.scale
        grads.append(StepGrads(g_scale, g_bias, g_mix, g_w1, g_b1, g_w2, g_b2))
    grads.reverse()
    return float(value), grads


_PARAM_FIELDS = ("scale", "bias", "mix", "w1", "b1", "w2", "b2")


def _param_arrays(model: FlowModel):
    for step in model.steps:
        yield step.scale, step.bias, step.mix, step.net.w1, step.net.b1, \
            step.net.w2, step.net.b2


def _set_params(model: FlowModel, flat: np.ndarray):
    pos = 0
    for step in model.steps:
        for name in _PARAM_FIELDS:
            holder = step if name in ("scale", "bias", "mix") else step.net
            arr = getattr(holder, name)
            size = arr.size
            setattr(holder, name, flat[pos : pos + size].reshape(arr.shape).copy())
            pos += size


def get_params(model: FlowModel) -> np.ndarray:
    return np.concatenate([a.ravel() for arrs in _param_arrays(model) for a in arrs])


def _flat_grads(grads: list[StepGrads]) -> np.ndarray:
    return np.concatenate(
        [getattr(g, name).ravel() for g in grads for name in _PARAM_FIELDS]
    )


@dataclass
class TrainResult:
    model: FlowModel
    curve: list  # (step, full-dataset nll)


def train_flow(model: FlowModel, batch: ConditionedBatch, steps: int = 500,
               step_size: float = 2e-3, batch_size: int = 128,
               seed: int = 0, eval_every: int = 100) -> TrainResult:
    """Minibatch Adam on the exact NLL with analytic gradients.

    The model must already be actnorm-initialized. The training curve holds
    full-dataset NLLs (step 0, every ``eval_every`` steps, and the final
    step); a non-finite loss raises :class:`FlowDivergence` instead of being
    swallowed.
    """
    _require_initialized(model)
    n = len(batch)
    if n < 1:
        raise ContractError("training set must be non-empty")
    rng = SeededRng(seed, stream=0x464C)
    theta = get_params(model)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    curve = [(0, nll(model, batch))]
    order = rng.permutation(n)
    cursor = 0
    for it in range(1, steps + 1):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        mini = ConditionedBatch(batch.targets[idx], batch.conds[idx])
        _, grads = nll_and_grads(model, mini)
        g = _flat_grads(grads)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**it)
        v_hat = v / (1 - beta2**it)
        theta = theta - step_size * m_hat / (np.sqrt(v_hat) + eps)
        _set_params(model, theta)
        if it % eval_every == 0 or it == steps:
            full = nll(model, batch)
            if not np.isfinite(full):
                raise FlowDivergence(f"non-finite NLL at step {it}")
            curve.append((it, full))
    return TrainResult(model, curve)


def curve_to_csv(curve, path) -> None:
    lines = ["step,nll"] + [f"{s},{v!r}" for s, v in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_model(model: FlowModel, path) -> None:
    """Checkpoint: magic FLW1; u32 K, c, cond_dim, hidden, initialized,
    grid_context, frames; then each step's scale, bias, mix, w1, b1, w2, b2
    as little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(FLW_MAGIC)
        fh.write(struct.pack("<IIIIIII", len(model.steps), model.channels,
                             model.cond_dim, model.hidden,
                             int(model.initialized),
                             int(model.context == "grid"), model.frames))
        for arrs in _param_arrays(model):
            for arr in arrs:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> FlowModel:
    data = Path(path).read_bytes()
    if len(data) < 32:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != FLW_MAGIC:
        raise BadMagic(f"{path}: expected magic {FLW_MAGIC!r}, got {data[:4]!r}")
    k, c, cond_dim, hidden, inited, grid_ctx, frames = struct.unpack(
        "<IIIIIII", data[4:32]
    )
    model = FlowModel.identity(
        c, cond_dim, n_steps=k, hidden=hidden,
        context="grid" if grid_ctx else "frame", frames=frames,
    )
    flat = np.frombuffer(data, dtype="<f4", offset=32).astype(np.float64)
    expected = get_params(model).size
    if flat.size != expected:
        raise FormatError(
            f"{path}: parameter payload has {flat.size} floats, expected {expected}"
        )
    _set_params(model, flat)
    model.initialized = bool(inited)
    return model
