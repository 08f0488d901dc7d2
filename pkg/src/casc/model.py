"""Minimal encoder-decoder segmentation network with manual backprop.

Layout (``Ch`` = base width, input ``3 + class_count`` planes)::

    enc1  conv3x3/2  -> Ch,  ReLU                        (H/2)
    enc2  conv3x3/2  -> 2Ch, ReLU                        (H/4)
    bott  conv3x3    -> 2Ch, ReLU, + enc2                (H/4)
    dec2  up2, conv3x3 -> Ch, ReLU, + enc1               (H/2)
    dec1  up2, conv3x3 -> Ch, ReLU                       (H)
    feat  conv3x3    -> Ch (linear)  = f_D
    head  conv1x1    -> 2            = logits p

All arithmetic is float64. Checkpoints store float32 parameters.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import softmax_foreground

COLOR_CHANNELS = 3
DOWNSAMPLE = 4
DEFAULT_CH = 16
DEFAULT_LR = 1e-4
DEFAULT_MOMENTUM = 0.9

CHECKPOINT_MAGIC = b"CASC"
CHECKPOINT_VERSION = 1


class Diverged(RuntimeError):
    pass


def _layer_shapes(ch: int, in_ch: int) -> dict[str, tuple[int, ...]]:
    return {
        "enc1": (ch, in_ch, 3, 3),
        "enc2": (2 * ch, ch, 3, 3),
        "bott": (2 * ch, 2 * ch, 3, 3),
        "dec2": (ch, 2 * ch, 3, 3),
        "dec1": (ch, ch, 3, 3),
        "feat": (ch, ch, 3, 3),
        "head": (2, ch, 1, 1),
    }


@dataclass
class ModelState:
    ch: int
    class_count: int
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        for name, value in self.params.items():
            self.grads.setdefault(name, np.zeros_like(value))
            self.velocity.setdefault(name, np.zeros_like(value))

    @property
    def in_channels(self) -> int:
        return COLOR_CHANNELS + self.class_count

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class ForwardOutputs:
    p: np.ndarray
    f_D: np.ndarray
    c: np.ndarray


def init_model(seed: int, ch: int = DEFAULT_CH, class_count: int = 4) -> ModelState:
    """He-normal kernels, zero biases, fully determined by ``seed``."""
    if ch < 2:
        raise ValueError("Ch must be at least 2")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(ch, COLOR_CHANNELS + class_count).items():
        fan_in = shape[1] * shape[2] * shape[3]
        params[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{name}.b"] = np.zeros(shape[0])
    return ModelState(ch=ch, class_count=class_count, params=params)


def make_input(image, class_index: int, class_count: int) -> np.ndarray:
    """Stack an ``(H, W, 3)`` uint8 image in [0, 1] with one-hot class planes."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    rgb = image.astype(np.float64).transpose(2, 0, 1) / 255.0
    planes = np.zeros((class_count, h, w))
    planes[class_index] = 1.0
    return np.concatenate([rgb, planes])


# --- layer primitives -------------------------------------------------------

def _conv(x, w, b, stride):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    out = w.reshape(o, -1) @ cols + b[:, None]
    return out.reshape(o, ho, wo), cols


def _conv_back(dout, cols, x_shape, w, stride):
    c, h, wd = x_shape
    o, _, kh, kw = w.shape
    pad = kh // 2
    ho, wo = dout.shape[1:]
    d2 = dout.reshape(o, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = (w.reshape(o, -1).T @ d2).reshape(c, kh, kw, ho, wo)
    dxp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


def _up(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_back(d):
    c, h, w = d.shape
    return d.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# --- forward / backward -----------------------------------------------------

def forward(state: ModelState, x, keep_cache: bool = True) -> ForwardOutputs:
    """Run the network; ``keep_cache=False`` skips storing intermediates
    (needed when several threads share one state)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != state.in_channels:
        raise ValueError(f"input must have shape ({state.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[1:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"input size {h}x{w} must be divisible by {DOWNSAMPLE}")
    P = state.params
    cache = {"x_shape": x.shape}

    z, cache["enc1"] = _conv(x, P["enc1.w"], P["enc1.b"], 2)
    e1 = np.maximum(z, 0.0)
    cache["m1"] = z > 0
    z, cache["enc2"] = _conv(e1, P["enc2.w"], P["enc2.b"], 2)
    e2 = np.maximum(z, 0.0)
    cache["m2"] = z > 0
    cache["e1_shape"], cache["e2_shape"] = e1.shape, e2.shape

    z, cache["bott"] = _conv(e2, P["bott.w"], P["bott.b"], 1)
    cache["mb"] = z > 0
    b = np.maximum(z, 0.0) + e2

    u2 = _up(b)
    z, cache["dec2"] = _conv(u2, P["dec2.w"], P["dec2.b"], 1)
    cache["md2"] = z > 0
    d2 = np.maximum(z, 0.0) + e1
    cache["u2_shape"] = u2.shape

    u1 = _up(d2)
    z, cache["dec1"] = _conv(u1, P["dec1.w"], P["dec1.b"], 1)
    cache["md1"] = z > 0
    d1 = np.maximum(z, 0.0)
    cache["u1_shape"], cache["d1_shape"] = u1.shape, d1.shape

    f_D, cache["feat"] = _conv(d1, P["feat.w"], P["feat.b"], 1)
    p, cache["head"] = _conv(f_D, P["head.w"], P["head.b"], 1)
    cache["fD_shape"] = f_D.shape
    if keep_cache:
        state.cache = cache
    return ForwardOutputs(p=p, f_D=f_D, c=softmax_foreground(p))


def backward(state: ModelState, grad_p, grad_f_D=None):
    """Accumulate parameter gradients given upstream ``dL/dp`` and ``dL/df_D``."""
    cache = state.cache
    if cache is None:
        raise RuntimeError("backward called without a cached forward pass")
    P, G = state.params, state.grads

    def acc(name, dw, db):
        G[f"{name}.w"] += dw
        G[f"{name}.b"] += db

    d_f, dw, db = _conv_back(np.asarray(grad_p, dtype=np.float64), cache["head"], cache["fD_shape"], P["head.w"], 1)
    acc("head", dw, db)
    if grad_f_D is not None:
        d_f = d_f + grad_f_D

    d_d1, dw, db = _conv_back(d_f, cache["feat"], cache["d1_shape"], P["feat.w"], 1)
    acc("feat", dw, db)

    dz = d_d1 * cache["md1"]
    d_u1, dw, db = _conv_back(dz, cache["dec1"], cache["u1_shape"], P["dec1.w"], 1)
    acc("dec1", dw, db)
    d_d2 = _up_back(d_u1)

    d_e1 = d_d2.copy()
    dz = d_d2 * cache["md2"]
    d_u2, dw, db = _conv_back(dz, cache["dec2"], cache["u2_shape"], P["dec2.w"], 1)
    acc("dec2", dw, db)
    d_b = _up_back(d_u2)

    d_e2 = d_b.copy()
    dz = d_b * cache["mb"]
    d, dw, db = _conv_back(dz, cache["bott"], cache["e2_shape"], P["bott.w"], 1)
    acc("bott", dw, db)
    d_e2 += d

    dz = d_e2 * cache["m2"]
    d, dw, db = _conv_back(dz, cache["enc2"], cache["e1_shape"], P["enc2.w"], 2)
    acc("enc2", dw, db)
    d_e1 += d

    dz = d_e1 * cache["m1"]
    _, dw, db = _conv_back(dz, cache["enc1"], cache["x_shape"], P["enc1.w"], 2)
    acc("enc1", dw, db)
    return G


def sgd_step(state: ModelState, lr: float = DEFAULT_LR, momentum: float = DEFAULT_MOMENTUM):
    """Heavy-ball SGD: ``v = momentum*v + g``, ``theta -= lr*v``; clears gradients."""
    for name, g in state.grads.items():
        if not np.all(np.isfinite(g)):
            raise Diverged("diverged")
    for name, g in state.grads.items():
        v = state.velocity[name]
        v *= momentum
        v += g
        state.params[name] -= lr * v
    state.zero_grad()
    return state


# --- checkpoint -------------------------------------------------------------

def checkpoint_bytes(state: ModelState) -> bytes:
    """Serialize as: magic, u32 version, u32 ch/class_count/colors/n_params,
    then per parameter a u16-prefixed UTF-8 name, u32 ndim, u32 dims and
    little-endian float32 data."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    names = sorted(state.params)
    buf.write(struct.pack("<4I", state.ch, state.class_count, COLOR_CHANNELS, len(names)))
    for name in names:
        arr = np.ascontiguousarray(state.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint_bytes(data: bytes) -> ModelState:
    view = memoryview(data)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    pos = 4
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    ch, class_count, colors, n = struct.unpack_from("<4I", view, pos)
    pos += 16
    if colors != COLOR_CHANNELS:
        raise ValueError(f"checkpoint expects {colors} color channels")
    params = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + ln]).decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        count = int(np.prod(shape))
        arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        params[name] = arr.astype(np.float64)
    expected = {f"{k}.{s}" for k in _layer_shapes(ch, colors + class_count) for s in "wb"}
    if set(params) != expected:
        raise ValueError("checkpoint parameter set does not match architecture")
    return ModelState(ch=ch, class_count=class_count, params=params)


def save_checkpoint(state: ModelState, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), checkpoint_bytes(state))


def load_checkpoint(path) -> ModelState:
    return load_checkpoint_bytes(Path(path).read_bytes())
