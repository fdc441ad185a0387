"""Portable model export and a batch-1 inference runtime.

APML layout (little-endian)::

    "APML" | u16 format version | u32 total length | u16 obs-layout version
    | u8 mode | u8 flags (bit 0: last layer carries the value output)
    | u32 stack size | 6 x f64 bounds (min xyz, max xyz)
    | u32 layer count | per layer: u32 rows, u32 cols, f32 weights (rows x cols,
      row-major, input-major), f32 bias (cols)
    | u32 action count | f32 log-std (action count)
    | u32 CRC32C of everything before it

The last layer merges the policy mean and (optionally) the value output,
so a 72-512-256 trunk exports as 72-512-256-6, or 72-512-256-5 stripped.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import binfmt
from .binfmt import Reader, Writer
from .observation import OBS_LAYOUT_VERSION
from .physics import Mode
from .policy import PolicyModel

APML_MAGIC = b"APML"
APML_VERSION = 1
FIRE_THRESHOLD = 0.5
FIRE_INDEX = 4
_U32_MAX = 2**32 - 1
_HAS_VALUE = 1


class LayoutMismatchError(binfmt.FormatError):
    """The exported model was built for a different observation layout."""


def _layers(model: PolicyModel, strip_value: bool):
    p = model.params
    layers = [(np.asarray(W, np.float32), np.asarray(b, np.float32)) for W, b in model.trunk()]
    if strip_value:
        W, b = p["Wmu"], p["bmu"]
    else:
        W = np.concatenate([p["Wmu"], p["Wv"]], axis=1)
        b = np.concatenate([p["bmu"], p["bv"]])
    layers.append((np.asarray(W, np.float32), np.asarray(b, np.float32)))
    return layers


def export_bytes(model: PolicyModel, strip_value: bool = False) -> bytes:
    layers = _layers(model, strip_value)
    for W, _ in layers:
        if max(W.shape) > _U32_MAX:
            raise OverflowError(f"layer of shape {W.shape} does not fit the format")
    w = Writer()
    w.u16(model.obs_layout_version)
    w.u8(int(model.mode))
    w.u8(0 if strip_value else _HAS_VALUE)
    w.u32(model.stack_size)
    w.array(np.concatenate([model.bounds_min, model.bounds_max]), np.float64)
    w.u32(len(layers))
    for W, b in layers:
        w.u32(W.shape[0])
        w.u32(W.shape[1])
        w.array(W, np.float32)
        w.array(b, np.float32)
    ls = np.asarray(model.params["log_std"], np.float32)
    w.u32(ls.size)
    w.array(ls, np.float32)
    body = w.getvalue()
    head = Writer()
    head.raw(APML_MAGIC)
    head.u16(APML_VERSION)
    head.u32(len(APML_MAGIC) + 2 + 4 + len(body) + 4)
    return binfmt.seal(head.getvalue() + body)


def export_model(model: PolicyModel, path, strip_value: bool = False) -> int:
    """Write ``model`` as APML; returns the file size in bytes."""
    data = export_bytes(model, strip_value)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return len(data)


class InferenceModel:
    """Immutable, contiguous float32 parameters of an exported policy."""

    def __init__(self, layers, log_std, *, obs_layout_version: int, mode: int, has_value: bool,
                 stack_size: int, bounds_min, bounds_max):
        self.layers = tuple((np.ascontiguousarray(W, np.float32), np.ascontiguousarray(b, np.float32))
                            for W, b in layers)
        # float64 working copies, transposed so each output is a contiguous dot product.
        # Accumulating in float64 reproduces the trainer's forward after rounding.
        self._wide = tuple((np.ascontiguousarray(W.T, np.float64), b.astype(np.float64)) for W, b in self.layers)
        for arr in (a for pair in self.layers + self._wide for a in pair):
            arr.setflags(write=False)
        self.log_std = np.asarray(log_std, np.float32)
        self.obs_layout_version = obs_layout_version
        self.mode = int(mode)
        self.has_value = has_value
        self.stack_size = stack_size
        self.bounds_min = np.asarray(bounds_min, np.float64)
        self.bounds_max = np.asarray(bounds_max, np.float64)
        self.act_dim = self.log_std.size
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise binfmt.FormatError(f"layer dims do not chain: {W0.shape} -> {W1.shape}")
        for W, b in self.layers:
            if b.shape != (W.shape[1],):
                raise binfmt.FormatError(f"bias of shape {b.shape} for weights {W.shape}")
        out = self.layers[-1][0].shape[1]
        if out != self.act_dim + (1 if has_value else 0):
            raise binfmt.FormatError(f"output width {out} does not match {self.act_dim} actions")
        self._default = None

    @property
    def obs_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def dims(self) -> tuple:
        return (self.obs_dim,) + tuple(W.shape[1] for W, _ in self.layers)

    def session(self) -> "InferenceSession":
        """Fresh scratch buffers; one session per concurrent caller."""
        return InferenceSession(self)

    def infer(self, obs) -> np.ndarray:
        """Convenience single-caller inference through a shared default session."""
        if self._default is None:
            self._default = self.session()
        return self._default.infer(obs)


class InferenceSession:
    """Preallocated buffers for allocation-free batch-1 inference."""

    def __init__(self, model: InferenceModel):
        self.model = model
        self._x = np.zeros(model.obs_dim, np.float64)
        self._h = [np.zeros(W.shape[1], np.float64) for W, _ in model.layers]
        self._out = np.zeros(model.layers[-1][0].shape[1], np.float32)
        self._act = np.zeros(model.act_dim, np.float32)
        self._fire = model.mode == Mode.HELICOPTER and model.act_dim > FIRE_INDEX
        self._steps = [(W, b, h) for (W, b), h in zip(model._wide, self._h)]
        self._hidden = self._steps[:-1]

    def forward(self, obs) -> np.ndarray:
        """Raw last-layer output (means, then value if present). Returns an internal buffer."""
        x = self._x
        np.copyto(x, obs, casting="same_kind")
        for W, b, h in self._hidden:
            np.dot(W, x, out=h)
            np.add(h, b, out=h)
            np.maximum(h, 0.0, out=h)
            x = h
        W, b, h = self._steps[-1]
        np.dot(W, x, out=h)
        np.add(h, b, out=h)
        np.copyto(self._out, h, casting="same_kind")
        return self._out

    def infer(self, obs) -> np.ndarray:
        """Deterministic action ``clamp(mu)``; helicopter fire becomes 1.0 iff ``mu_fire >= 0.5``.

        The returned array is reused by the next call; copy it to keep it.
        """
        out = self.forward(obs)
        act = self._act
        n = act.shape[0]
        np.minimum(out[:n], 1.0, out=act)
        np.maximum(act, -1.0, out=act)
        if self._fire:
            act[FIRE_INDEX] = 1.0 if out[FIRE_INDEX] >= FIRE_THRESHOLD else 0.0
        return act


def load_bytes(data: bytes, expected_layout: int | None = OBS_LAYOUT_VERSION) -> InferenceModel:
    r = Reader(data)
    if bytes(r.take(4)) != APML_MAGIC:
        raise binfmt.BadMagicError("not an APML model")
    version = r.u16()
    if version != APML_VERSION:
        raise binfmt.VersionError(f"APML version {version}, expected {APML_VERSION}")
    total = r.u32()
    if len(data) < total:
        raise binfmt.TruncatedError(f"model truncated: {len(data)} of {total} bytes")
    if len(data) > total:
        raise binfmt.FormatError("trailing bytes after model")
    binfmt.unseal(data)
    layout = r.u16()
    if expected_layout is not None and layout != expected_layout:
        raise LayoutMismatchError(f"model uses observation layout {layout}, runtime expects {expected_layout}")
    mode = r.u8()
    flags = r.u8()
    stack = r.u32()
    bounds = r.array(np.float64, 6)
    layers = []
    for _ in range(r.u32()):
        rows, cols = r.u32(), r.u32()
        W = r.array(np.float32, rows * cols).reshape(rows, cols)
        layers.append((W, r.array(np.float32, cols)))
    log_std = r.array(np.float32, r.u32())
    if r.remaining() != 4:
        raise binfmt.FormatError("unexpected bytes before checksum")
    if not layers:
        raise binfmt.FormatError("model has no layers")
    return InferenceModel(layers, log_std, obs_layout_version=layout, mode=mode,
                          has_value=bool(flags & _HAS_VALUE), stack_size=stack,
                          bounds_min=bounds[:3], bounds_max=bounds[3:])


def load_model(path, expected_layout: int | None = OBS_LAYOUT_VERSION) -> InferenceModel:
    with open(path, "rb") as f:
        return load_bytes(f.read(), expected_layout)


@dataclass(frozen=True)
class LatencyStats:
    iterations: int
    p50_us: float
    p95_us: float
    p99_us: float
    mean_us: float
    budget_us: float = 100.0
    round_p99_us: tuple = ()

    @property
    def within_budget(self) -> bool:
        return self.p99_us < self.budget_us


def bench_latency(model: InferenceModel, iterations: int = 10_000, *, warmup: int = 1000,
                  seed: int = 0, rounds: int = 1) -> LatencyStats:
    """Time single-observation :meth:`InferenceSession.infer` calls.

    With ``rounds > 1`` the timing is repeated and the round with the median
    p99 is reported, which keeps a burst of scheduler noise on a shared
    machine from deciding the result. Every round's p99 is kept in
    ``round_p99_us``.
    """
    if iterations < 1 or rounds < 1:
        raise ValueError("iterations and rounds must be positive")
    sess = model.session()
    obs = np.random.default_rng(seed).uniform(-1, 1, (64, model.obs_dim)).astype(np.float32)
    for k in range(warmup):
        sess.infer(obs[k % 64])
    clock = time.perf_counter_ns
    results = []
    for _ in range(rounds):
        times = np.empty(iterations)
        for k in range(iterations):
            x = obs[k & 63]
            t0 = clock()
            sess.infer(x)
            times[k] = clock() - t0
        us = times / 1000.0
        p50, p95, p99 = np.percentile(us, [50, 95, 99])
        results.append((float(p99), float(p50), float(p95), float(us.mean())))
    p99, p50, p95, mean = sorted(results)[(len(results) - 1) // 2]
    return LatencyStats(iterations, p50, p95, p99, mean, round_p99_us=tuple(r[0] for r in results))
