"""The early flow classifier network: parameters, forward pass, gradients, file format.

Pipeline per flow of ``T`` packet vectors::

    conv (width 1) -> ReLU -> layer norm over channels -> avg pool 2 (same)
    -> global average over time -> dense + ReLU -> dense -> softmax
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ModelFormatError, ShapeMismatch
from . import layers as L

PARAM_NAMES = ("conv_kernel", "conv_bias", "ln_gain", "ln_shift",
               "dense1_w", "dense1_b", "out_w", "out_b")
MODEL_MAGIC = b"EFNN"
MODEL_VERSION = 1


@dataclass
class Model:
    conv_kernel: np.ndarray  # (channels, input_dim, 1)
    conv_bias: np.ndarray    # (channels,)
    ln_gain: np.ndarray      # (channels,)
    ln_shift: np.ndarray     # (channels,)
    dense1_w: np.ndarray     # (channels, hidden)
    dense1_b: np.ndarray     # (hidden,)
    out_w: np.ndarray        # (hidden, class_count)
    out_b: np.ndarray        # (class_count,)
    ln_eps: float = 1e-5
    classes: Optional[list[str]] = field(default=None, compare=False)

    def __post_init__(self):
        c, d, k = self.conv_kernel.shape
        h, n_cls = self.out_w.shape
        expected = {
            "conv_kernel": (c, d, 1), "conv_bias": (c,), "ln_gain": (c,), "ln_shift": (c,),
            "dense1_w": (c, h), "dense1_b": (h,), "out_w": (h, n_cls), "out_b": (n_cls,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if n_cls < 2 or d < 1:
            raise ShapeMismatch("a model needs at least 2 classes and 1 input feature")
        if not all(np.isfinite(a).all() for a in self.params().values()):
            raise ValueError("model parameters must be finite")
        if self.classes is not None and len(self.classes) != n_cls:
            raise ShapeMismatch(f"{len(self.classes)} class names for {n_cls} outputs")

    @property
    def input_dim(self) -> int:
        return self.conv_kernel.shape[1]

    @property
    def channels(self) -> int:
        return self.conv_kernel.shape[0]

    @property
    def hidden(self) -> int:
        return self.dense1_w.shape[1]

    @property
    def class_count(self) -> int:
        return self.out_w.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def astype(self, dtype) -> "Model":
        arrays = {n: a.astype(dtype) for n, a in self.params().items()}
        return Model(**arrays, ln_eps=self.ln_eps, classes=self.classes)

    def copy(self) -> "Model":
        return self.astype(self.conv_kernel.dtype)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(a) for n, a in self.params().items()}


def parameter_count_for(input_dim: int, class_count: int, channels: int = 32, hidden: int = 64) -> int:
    return ((input_dim * channels + channels) + 2 * channels
            + (channels * hidden + hidden) + (hidden * class_count + class_count))


def parameter_count(m: Model) -> int:
    return sum(a.size for a in m.params().values())


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(input_dim: int = 448, class_count: int = 4, seed: int = 0, channels: int = 32,
               hidden: int = 64, classes: Optional[Sequence[str]] = None) -> Model:
    rng = np.random.default_rng(seed)
    kernel = _glorot(rng, input_dim, channels, (input_dim, channels)).T[:, :, None].copy()
    return Model(
        conv_kernel=kernel,
        conv_bias=np.zeros(channels),
        ln_gain=np.ones(channels),
        ln_shift=np.zeros(channels),
        dense1_w=_glorot(rng, channels, hidden, (channels, hidden)),
        dense1_b=np.zeros(hidden),
        out_w=_glorot(rng, hidden, class_count, (hidden, class_count)),
        out_b=np.zeros(class_count),
        classes=list(classes) if classes is not None else None,
    )


@dataclass
class ForwardTrace:
    """Activations of one batched forward pass, kept for backprop."""

    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    ln_cache: tuple
    n: np.ndarray
    p: np.ndarray
    g: np.ndarray
    u: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    single: bool = False

    @property
    def probabilities(self) -> np.ndarray:
        return self.probs[0] if self.single else self.probs


def _check_input(m: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected a (T, d) or (B, T, d) array, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ShapeMismatch("a flow needs at least one packet")
    if x.shape[2] != m.input_dim:
        raise ShapeMismatch(f"packet vectors have {x.shape[2]} features, model expects {m.input_dim}")
    return x, single


def forward(m: Model, flow) -> ForwardTrace:
    """Forward pass on one ``(T, d)`` flow or a ``(B, T, d)`` batch of equal-length flows.

    Computation runs in the model's dtype.
    """
    x, single = _check_input(m, flow)
    x = x.astype(m.conv_kernel.dtype, copy=False)
    z = L.conv1x1_forward(x, m.conv_kernel, m.conv_bias)
    a = L.relu_forward(z)
    n, ln_cache = L.layernorm_forward(a, m.ln_gain, m.ln_shift, m.ln_eps)
    p = L.avgpool2_forward(n)
    g = L.global_avgpool_forward(p)
    u = L.dense_forward(g, m.dense1_w, m.dense1_b)
    h = L.relu_forward(u)
    logits = L.dense_forward(h, m.out_w, m.out_b)
    return ForwardTrace(x, z, a, ln_cache, n, p, g, u, h, logits, L.softmax(logits), single)


def _as_batch(trace: ForwardTrace, labels, weights):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    if labels.shape[0] != trace.probs.shape[0] or weights.shape[0] != labels.shape[0]:
        raise ShapeMismatch("labels/weights do not match the batch size")
    return labels, weights


def loss(trace: ForwardTrace, label, sample_weight=1.0):
    """Weighted cross-entropy: a scalar for a single flow, per-sample array for a batch."""
    labels, weights = _as_batch(trace, label, sample_weight)
    out = L.weighted_cross_entropy(trace.probs, labels, weights)
    return float(out[0]) if trace.single else out


def backward(m: Model, trace: ForwardTrace, label, sample_weight=1.0) -> dict[str, np.ndarray]:
    """Gradients of the summed weighted loss over the batch, keyed like :meth:`Model.params`."""
    labels, weights = _as_batch(trace, label, sample_weight)
    dlogits = L.softmax_cross_entropy_backward(trace.probs, labels, weights)
    dh, d_out_w, d_out_b = L.dense_backward(trace.h, m.out_w, dlogits)
    du = L.relu_backward(trace.u, dh)
    dg, d_dense1_w, d_dense1_b = L.dense_backward(trace.g, m.dense1_w, du)
    dp = L.global_avgpool_backward(dg, trace.p.shape[1])
    dn = L.avgpool2_backward(dp, trace.n.shape[1])
    da, d_gain, d_shift = L.layernorm_backward(dn, trace.ln_cache, m.ln_gain)
    dz = L.relu_backward(trace.z, da)
    _, d_kernel, d_bias = L.conv1x1_backward(trace.x, m.conv_kernel, dz, need_dx=False)
    return {
        "conv_kernel": d_kernel, "conv_bias": d_bias, "ln_gain": d_gain, "ln_shift": d_shift,
        "dense1_w": d_dense1_w, "dense1_b": d_dense1_b, "out_w": d_out_w, "out_b": d_out_b,
    }


def packet_features(m: Model, flow) -> np.ndarray:
    """Per-packet activations after layer norm, ``(T, channels)``.

    Width-1 convolution makes these depend on a single packet each, so they
    can be cached while a flow grows.
    """
    x = np.asarray(flow, dtype=m.conv_kernel.dtype)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != m.input_dim:
        raise ShapeMismatch(f"packet vectors have {x.shape[-1]} features, model expects {m.input_dim}")
    a = L.relu_forward(L.conv1x1_forward(x, m.conv_kernel, m.conv_bias))
    n, _ = L.layernorm_forward(a, m.ln_gain, m.ln_shift, m.ln_eps)
    return n


def pooled_prefix_features(n: np.ndarray) -> np.ndarray:
    """Global-average-pooled vectors for every prefix length 1..T of ``n``.

    For even ``t`` the two pooling stages reduce to the plain mean of the
    first ``t`` rows; for odd ``t`` the unpaired last row carries double weight.
    """
    T = n.shape[0]
    csum = np.cumsum(n, axis=0)
    t = np.arange(1, T + 1)
    out = np.empty_like(n)
    even = t % 2 == 0
    out[even] = csum[even] / t[even, None]
    odd = ~even
    prev = np.vstack([np.zeros((1, n.shape[1]), dtype=n.dtype), csum[:-1]])[odd]
    out[odd] = (prev / 2 + n[odd]) / ((t[odd, None] + 1) / 2)
    return out


def head_probabilities(m: Model, g: np.ndarray) -> np.ndarray:
    h = L.relu_forward(L.dense_forward(g, m.dense1_w, m.dense1_b))
    return L.softmax(L.dense_forward(h, m.out_w, m.out_b))


def prefix_probabilities(m: Model, flow) -> np.ndarray:
    """Class probabilities for every prefix of ``flow``, shape ``(T, C)``."""
    x, _ = _check_input(m, flow)
    if x.shape[0] != 1:
        raise ShapeMismatch("prefix_probabilities takes a single flow")
    return head_probabilities(m, pooled_prefix_features(packet_features(m, x[0])))


def save_model(m: Model, path: str | Path) -> None:
    """``EFNN`` magic, version byte, u32 header length, JSON header, then
    little-endian float64 parameter blocks in :data:`PARAM_NAMES` order."""
    header = {
        "input_dim": m.input_dim, "class_count": m.class_count, "channels": m.channels,
        "hidden": m.hidden, "ln_eps": m.ln_eps, "classes": m.classes,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in m.params().items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + bytes([MODEL_VERSION]) + struct.pack("<I", len(head)) + head)
        for a in m.params().values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path} is not an EFNN model file")
    if raw[4] != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {raw[4]}")
    (head_len,) = struct.unpack_from("<I", raw, 5)
    try:
        header = json.loads(raw[9 : 9 + head_len].decode("utf-8"))
        blocks = header["blocks"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    if [b["name"] for b in blocks] != list(PARAM_NAMES):
        raise ModelFormatError("unexpected parameter block layout")
    off = 9 + head_len
    arrays = {}
    for block in blocks:
        shape = tuple(block["shape"])
        size = int(np.prod(shape))
        if off + 8 * size > len(raw):
            raise ModelFormatError("model file is truncated")
        arrays[block["name"]] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    if off != len(raw):
        raise ModelFormatError("trailing bytes after the parameter blocks")
    try:
        return Model(**arrays, ln_eps=float(header["ln_eps"]), classes=header.get("classes"))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None

