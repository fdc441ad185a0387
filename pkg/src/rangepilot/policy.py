"""Feed-forward actor-critic with analytic gradients.

A shared ReLU trunk feeds a diagonal-Gaussian policy head (state-dependent
mean, state-independent log standard deviation) and a scalar value head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .binfmt import Reader, Writer
from .observation import OBS_LAYOUT_VERSION, OBS_SIZE, STACK_SIZE

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ACTION_DIM = 5
PPO_HIDDEN = (512, 256)
SAC_HIDDEN = (512, 512)  # recorded for reference; no SAC trainer exists
_LOG_2PI = math.log(2.0 * math.pi)


class LossError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite loss term: {term}")
        self.term = term


@dataclass
class PolicyModel:
    params: dict[str, np.ndarray]
    n_hidden: int
    obs_layout_version: int = OBS_LAYOUT_VERSION
    mode: int = 0
    bounds_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    stack_size: int = STACK_SIZE

    @property
    def dtype(self):
        return self.params["log_std"].dtype

    @property
    def obs_dim(self) -> int:
        return self.params["W0"].shape[0]

    @property
    def act_dim(self) -> int:
        return self.params["log_std"].shape[0]

    @property
    def hidden(self) -> tuple:
        return tuple(self.params[f"W{k}"].shape[1] for k in range(self.n_hidden))

    def trunk(self):
        return [(self.params[f"W{k}"], self.params[f"b{k}"]) for k in range(self.n_hidden)]

    def copy(self) -> "PolicyModel":
        return PolicyModel({k: v.copy() for k, v in self.params.items()}, self.n_hidden,
                           self.obs_layout_version, self.mode, self.bounds_min.copy(),
                           self.bounds_max.copy(), self.stack_size)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(rng: np.random.Generator, obs_dim: int = OBS_SIZE, hidden=PPO_HIDDEN,
               act_dim: int = ACTION_DIM, *, log_std_init: float = 0.0, dtype=np.float32,
               policy_scale: float = 0.01, **meta) -> PolicyModel:
    """Scaled uniform fan-in initialization; the mean head starts near zero."""
    params = {}
    fan_in = obs_dim
    for k, width in enumerate(hidden):
        lim = math.sqrt(6.0 / fan_in)
        params[f"W{k}"] = rng.uniform(-lim, lim, (fan_in, width))
        params[f"b{k}"] = np.zeros(width)
        fan_in = width
    lim = math.sqrt(3.0 / fan_in)
    params["Wmu"] = policy_scale * rng.uniform(-lim, lim, (fan_in, act_dim))
    params["bmu"] = np.zeros(act_dim)
    params["log_std"] = np.full(act_dim, float(log_std_init))
    params["Wv"] = rng.uniform(-lim, lim, (fan_in, 1))
    params["bv"] = np.zeros(1)
    params = {k: v.astype(dtype) for k, v in params.items()}
    for k in ("bounds_min", "bounds_max"):
        if k in meta:
            meta[k] = np.asarray(meta[k], dtype=np.float64)
    return PolicyModel(params, len(hidden), **meta)


def zeros_like_model(model: PolicyModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def effective_log_std(model: PolicyModel) -> np.ndarray:
    return np.clip(model.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def _forward_cached(model: PolicyModel, obs, dtype=None):
    x = np.asarray(obs, dtype=dtype or model.dtype)
    if x.shape[-1] != model.obs_dim:
        raise ValueError(f"observation has {x.shape[-1]} features, model expects {model.obs_dim}")
    acts = [x]
    h = x
    for W, b in model.trunk():
        h = np.maximum(h @ W.astype(x.dtype, copy=False) + b, 0)
        acts.append(h)
    p = model.params
    mu = h @ p["Wmu"].astype(x.dtype, copy=False) + p["bmu"]
    value = (h @ p["Wv"].astype(x.dtype, copy=False) + p["bv"])[..., 0]
    sigma = np.exp(effective_log_std(model))
    return mu, sigma, value, acts


def forward(model: PolicyModel, obs):
    """Return ``(mu, sigma, value)`` for one observation or a batch.

    Sums are accumulated in float64 and rounded to the model dtype once, so
    a row's result does not depend on the batch it came in or on BLAS
    blocking. The exported runtime computes the same way.
    """
    mu, sigma, value, _ = _forward_cached(model, obs, np.float64)
    dt = model.dtype
    return mu.astype(dt), sigma, value.astype(dt)


def log_prob(mu, sigma, action):
    """Diagonal-Gaussian log density, summed over the last axis."""
    z = (np.asarray(action) - mu) / sigma
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(sigma)) - 0.5 * mu.shape[-1] * _LOG_2PI


def sample_action(mu, sigma, rng: np.random.Generator):
    """Draw ``a ~ N(mu, sigma^2)``.

    Returns ``(clamped_action, pre_clamp_action, log_prob)``; the log-prob is
    that of the pre-clamp sample, which is what PPO needs for its ratio.
    """
    raw = mu + sigma * rng.standard_normal(np.shape(mu))
    raw = raw.astype(np.asarray(mu).dtype, copy=False)
    return np.clip(raw, -1.0, 1.0), raw, log_prob(mu, sigma, raw)


def entropy(model: PolicyModel) -> float:
    ls = effective_log_std(model).astype(np.float64)
    return float(np.sum(ls) + 0.5 * ls.size * (1.0 + _LOG_2PI))


@dataclass(frozen=True)
class LossSpec:
    """Coefficients of the PPO composite loss.

    ``loss = policy_coeff * clipped_surrogate + value_coeff * mse - entropy_coeff * entropy``
    """
    clip_range: float = 0.2
    policy_coeff: float = 1.0
    value_coeff: float = 0.5
    entropy_coeff: float = 0.003


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray  # pre-clamp
    old_log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def loss_and_gradients(model: PolicyModel, batch: Minibatch, spec: LossSpec):
    """Evaluate the composite loss and its gradient for every parameter.

    Returns ``(loss, grads, stats)``.
    """
    p = model.params
    mu, sigma, value, acts = _forward_cached(model, batch.obs)
    dt = model.dtype
    a = np.asarray(batch.actions, dtype=dt)
    adv = np.asarray(batch.advantages, dtype=dt)
    ret = np.asarray(batch.returns, dtype=dt)
    n = a.shape[0]

    logp = log_prob(mu, sigma, a)
    ratio = np.exp(logp - np.asarray(batch.old_log_prob, dtype=dt))
    clipped = np.clip(ratio, 1.0 - spec.clip_range, 1.0 + spec.clip_range)
    s1 = ratio * adv
    s2 = clipped * adv
    surrogate = -np.mean(np.minimum(s1, s2))
    v_err = value - ret
    v_loss = np.mean(v_err * v_err)
    ent = entropy(model)

    terms = {"surrogate": surrogate, "value": v_loss, "entropy": ent}
    for name, val in terms.items():
        if not np.isfinite(val):
            raise LossError(name)
    loss = spec.policy_coeff * surrogate + spec.value_coeff * v_loss - spec.entropy_coeff * ent

    # d loss / d logp; the clipped branch carries no gradient
    inside = np.abs(ratio - 1.0) <= spec.clip_range
    active = (s1 <= s2) | inside
    dlogp = np.where(active, -spec.policy_coeff * adv * ratio / n, 0.0).astype(dt)

    z = (a - mu) / sigma
    dmu = dlogp[:, None] * z / sigma
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - spec.entropy_coeff
    raw_ls = p["log_std"]
    dlog_std = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), dlog_std, 0.0)
    dv = (2.0 * spec.value_coeff / n) * v_err

    grads = {}
    h = acts[-1]
    grads["Wmu"] = h.T @ dmu
    grads["bmu"] = dmu.sum(axis=0)
    grads["log_std"] = dlog_std.astype(dt)
    grads["Wv"] = h.T @ dv[:, None]
    grads["bv"] = np.array([dv.sum()], dtype=dt)
    dh = dmu @ p["Wmu"].T + dv[:, None] @ p["Wv"].T
    for k in reversed(range(model.n_hidden)):
        dh = dh * (acts[k + 1] > 0)
        grads[f"W{k}"] = acts[k].T @ dh
        grads[f"b{k}"] = dh.sum(axis=0)
        if k:
            dh = dh @ p[f"W{k}"].T
    grads = {k: g.astype(dt, copy=False) for k, g in grads.items()}

    stats = {
        "loss": float(loss),
        "policy_loss": float(surrogate),
        "value_loss": float(v_loss),
        "entropy": ent,
        "mean_ratio": float(np.mean(ratio)),
        "clip_fraction": float(np.mean(~inside)),
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
    }
    return float(loss), grads, stats


def gradients(model: PolicyModel, batch: Minibatch, spec: LossSpec) -> dict[str, np.ndarray]:
    return loss_and_gradients(model, batch, spec)[1]


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, model: PolicyModel, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = zeros_like_model(model)
        self.v = zeros_like_model(model)

    def step(self, model: PolicyModel, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        new = {}
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new[k] = (model.params[k] - upd).astype(model.params[k].dtype)
        # swap the whole parameter set at once so readers never see a mix
        model.params = {**model.params, **new}


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"APCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(model: PolicyModel, path) -> None:
    """Write a lossless, checksummed snapshot of ``model``.

    Layout: magic ``APCK``, u16 version, u32 total file length, u16 obs-layout
    version, u8 mode, u8 dtype size, u32 stack size, 6 x f64 bounds, u32 trunk
    depth, u32 tensor count, tensors (name, u8 ndim, u32 dims, raw data),
    trailing u32 CRC32C of everything before it.
    """
    w = Writer()
    w.u16(model.obs_layout_version)
    w.u8(int(model.mode))
    w.u8(_DTYPE_CODES[np.dtype(model.dtype)])
    w.u32(model.stack_size)
    w.array(np.concatenate([model.bounds_min, model.bounds_max]), np.float64)
    w.u32(model.n_hidden)
    w.u32(len(model.params))
    for name, arr in model.params.items():
        w.string(name)
        w.u8(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.array(arr, model.dtype)
    body = w.getvalue()
    head = Writer()
    head.raw(CKPT_MAGIC)
    head.u16(CKPT_VERSION)
    head.u32(len(CKPT_MAGIC) + 2 + 4 + len(body) + 4)
    data = binfmt.seal(head.getvalue() + body)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> PolicyModel:
    with open(path, "rb") as f:
        data = f.read()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> PolicyModel:
    r = Reader(data)
    if bytes(r.take(4)) != CKPT_MAGIC:
        raise binfmt.BadMagicError("not a checkpoint file")
    version = r.u16()
    if version != CKPT_VERSION:
        raise binfmt.VersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    total = r.u32()
    if len(data) < total:
        raise binfmt.TruncatedError(f"checkpoint truncated: {len(data)} of {total} bytes")
    if len(data) > total:
        raise binfmt.FormatError("trailing bytes after checkpoint")
    binfmt.unseal(data)
    layout = r.u16()
    mode = r.u8()
    dtype = _CODE_DTYPES[r.u8()]
    stack = r.u32()
    bounds = r.array(np.float64, 6)
    n_hidden = r.u32()
    count = r.u32()
    params = {}
    for _ in range(count):
        name = r.string()
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        params[name] = r.array(dtype, int(np.prod(shape))).reshape(shape)
    return PolicyModel(params, n_hidden, layout, mode, bounds[:3].copy(), bounds[3:].copy(), stack)
