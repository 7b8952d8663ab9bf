"""Noise-prediction network: conditioner, step embedding and dilated residual stack.

Pure numpy, double precision, with an explicit backward pass.  Parameters
live in a plain ``dict[str, np.ndarray]`` whose names and shapes depend only
on :class:`NetConfig`; gradients use the same keys.

Layout of one forward pass::

    pos (7, N)  --conv3-act-conv3-act--.
                                        concat -- 1x1 --> cond (H, N)
    audio (Ca,N) --conv3-act-conv3-act-'

    t -> sinusoid(D) -> FC-act -> FC-act -> e
    z (C, N) -> 1x1-act -> x
    for each block b:  s_b = FC_b(e)
        for each layer: a = dilconv(x + s_b) + 1x1(cond)
                        g = tanh(a[:H]) * sigmoid(a[H:])
                        x = (x + 1x1_res(g)) / sqrt(2);  skip += 1x1_skip(g)
    out = 1x1(act(1x1(skip / sqrt(layers))))
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CorruptArray,
    ShapeMismatch,
    StaleContext,
    StepOutOfRange,
    VersionMismatch,
)

CHECKPOINT_MAGIC = b"BDIFFNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    residual_blocks: int = 3
    layers_per_block: int = 10
    hidden: int = 128
    in_channels: int = 1
    out_channels: int = 1
    cond_audio_channels: int = 2
    cond_pos_channels: int = 7
    step_embed_dim: int = 128
    dilation_cycle: int = 10
    diffusion_steps: int = 200
    cond_kernel: int = 3
    dilation_kernel: int = 3
    padding: str = "zero"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 1:
                raise ValueError(f"NetConfig.{f.name} must be >= 1, got {v}")
        if self.step_embed_dim % 2:
            raise ValueError("step_embed_dim must be even")
        if self.cond_kernel % 2 == 0 or self.dilation_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd for symmetric padding")
        if self.padding not in ("zero", "circular"):
            raise ValueError(f"padding must be 'zero' or 'circular', got {self.padding!r}")

    def dilation(self, layer: int) -> int:
        return 2 ** (layer % self.dilation_cycle)

    @property
    def n_layers(self) -> int:
        return self.residual_blocks * self.layers_per_block


def param_shapes(config: NetConfig) -> dict[str, tuple]:
    H, D = config.hidden, config.step_embed_dim
    kc, kd = config.cond_kernel, config.dilation_kernel
    shapes = {
        "cond.pos.0.w": (H, config.cond_pos_channels, kc), "cond.pos.0.b": (H,),
        "cond.pos.1.w": (H, H, kc), "cond.pos.1.b": (H,),
        "cond.audio.0.w": (H, config.cond_audio_channels, kc), "cond.audio.0.b": (H,),
        "cond.audio.1.w": (H, H, kc), "cond.audio.1.b": (H,),
        "cond.fuse.w": (H, 2 * H, 1), "cond.fuse.b": (H,),
        "step.fc1.w": (D, D), "step.fc1.b": (D,),
        "step.fc2.w": (D, D), "step.fc2.b": (D,),
        "input.w": (H, config.in_channels, 1), "input.b": (H,),
    }
    for b in range(config.residual_blocks):
        shapes[f"block{b}.step.w"] = (H, D)
        shapes[f"block{b}.step.b"] = (H,)
        for j in range(config.layers_per_block):
            p = f"block{b}.layer{j}"
            shapes[f"{p}.dil.w"] = (2 * H, H, kd)
            shapes[f"{p}.dil.b"] = (2 * H,)
            shapes[f"{p}.cond.w"] = (2 * H, H, 1)
            shapes[f"{p}.cond.b"] = (2 * H,)
            shapes[f"{p}.res.w"] = (H, H, 1)
            shapes[f"{p}.res.b"] = (H,)
            shapes[f"{p}.skip.w"] = (H, H, 1)
            shapes[f"{p}.skip.b"] = (H,)
    shapes["skip_out.w"] = (H, H, 1)
    shapes["skip_out.b"] = (H,)
    shapes["output.w"] = (config.out_channels, H, 1)
    shapes["output.b"] = (config.out_channels,)
    return shapes


def count_params(config: NetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, zero output layer."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.startswith("output."):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def check_params(params, config: NetConfig) -> None:
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ShapeMismatch(f"parameter names differ from config: missing={missing}, extra={extra}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: shape {params[name].shape}, config expects {shape}")


# ---------------------------------------------------------------- primitives

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _pad(x, p, mode):
    if p == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (p, p)))
    n = x.shape[1]
    return x[:, np.arange(-p, n + p) % n]


def _unpad(gp, p, n, mode):
    if p == 0:
        return gp
    if mode == "zero":
        return gp[:, p:p + n]
    dx = np.zeros((gp.shape[0], n))
    np.add.at(dx.T, np.arange(-p, n + p) % n, gp.T)
    return dx


def _conv(x, w, b, dilation=1, mode="zero"):
    """Non-causal 1-D convolution with symmetric padding; returns (y, padded x)."""
    k = w.shape[2]
    n = x.shape[1]
    if k == 1:
        return np.ascontiguousarray(w[:, :, 0]) @ x + b[:, None], x
    p = dilation * (k - 1) // 2
    xp = _pad(x, p, mode)
    # per-tap slices must be contiguous for matmul to reach BLAS
    taps = np.ascontiguousarray(w.transpose(2, 0, 1))
    y = b[:, None] + taps[0] @ xp[:, :n]
    for i in range(1, k):
        s = i * dilation
        y += taps[i] @ xp[:, s:s + n]
    return y, xp


def _conv_back(g, xp, w, dilation, mode, n, need_dx=True):
    """Gradients (dx, dw, db) of ``_conv`` given upstream ``g``."""
    k = w.shape[2]
    db = g.sum(axis=1)
    if k == 1:
        return (np.ascontiguousarray(w[:, :, 0].T) @ g if need_dx else None), (g @ xp.T)[:, :, None], db
    dw = np.empty_like(w)
    for i in range(k):
        s = i * dilation
        dw[:, :, i] = g @ xp[:, s:s + n].T
    if not need_dx:
        return None, dw, db
    taps_t = np.ascontiguousarray(w.transpose(2, 1, 0))
    dxp = np.zeros_like(xp)
    for i in range(k):
        s = i * dilation
        dxp[:, s:s + n] += taps_t[i] @ g
    p = dilation * (k - 1) // 2
    return _unpad(dxp, p, n, mode), dw, db


# ---------------------------------------------------------------- step embedding

def sinusoidal_encoding(t, dim: int) -> np.ndarray:
    half = dim // 2
    scale = 4.0 / (half - 1) if half > 1 else 0.0
    freqs = 10.0 ** (np.arange(half) * scale)
    arg = float(t) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


def _check_step(t, config):
    if not 1 <= int(t) <= config.diffusion_steps:
        raise StepOutOfRange(f"step {t} outside 1..{config.diffusion_steps}")


def _step_forward(t, params):
    enc = sinusoidal_encoding(t, params["step.fc1.w"].shape[1])
    u1 = params["step.fc1.w"] @ enc + params["step.fc1.b"]
    h1 = _silu(u1)
    u2 = params["step.fc2.w"] @ h1 + params["step.fc2.b"]
    return _silu(u2), (enc, u1, h1, u2)


def _step_back(de, cache, params, grads):
    enc, u1, h1, u2 = cache
    du2 = de * _silu_grad(u2)
    grads["step.fc2.w"] = np.outer(du2, h1)
    grads["step.fc2.b"] = du2
    du1 = (params["step.fc2.w"].T @ du2) * _silu_grad(u1)
    grads["step.fc1.w"] = np.outer(du1, enc)
    grads["step.fc1.b"] = du1


def step_embedding(t, config: NetConfig, params) -> np.ndarray:
    """Sinusoidal encoding of ``t`` passed through the two shared FC layers."""
    _check_step(t, config)
    return _step_forward(t, params)[0]


# ---------------------------------------------------------------- conditioner

def _branch_forward(x, prefix, params, mode, linear):
    cache = []
    h = x
    for i in range(2):
        u, hp = _conv(h, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"], 1, mode)
        cache.append((hp, u))
        h = u if linear else _silu(u)
    return h, cache


def _branch_back(g, cache, prefix, params, grads, mode, linear, n):
    for i in (1, 0):
        hp, u = cache[i]
        if not linear:
            g = g * _silu_grad(u)
        g, grads[f"{prefix}.{i}.w"], grads[f"{prefix}.{i}.b"] = _conv_back(
            g, hp, params[f"{prefix}.{i}.w"], 1, mode, n, need_dx=i > 0)


def _conditioner_forward(pos, audio, params, config, linear=False):
    pos = np.asarray(pos, float)
    audio = np.asarray(audio, float)
    if pos.ndim != 2 or pos.shape[0] != config.cond_pos_channels:
        raise ShapeMismatch(f"position input must be ({config.cond_pos_channels}, N), got {pos.shape}")
    if audio.ndim != 2 or audio.shape[0] != config.cond_audio_channels:
        raise ShapeMismatch(f"conditioning audio must be ({config.cond_audio_channels}, N), got {audio.shape}")
    if pos.shape[1] != audio.shape[1]:
        raise ShapeMismatch(f"position length {pos.shape[1]} != audio length {audio.shape[1]}")
    mode = config.padding
    hp, cp = _branch_forward(pos, "cond.pos", params, mode, linear)
    ha, ca = _branch_forward(audio, "cond.audio", params, mode, linear)
    cat = np.concatenate([hp, ha], axis=0)
    c, _ = _conv(cat, params["cond.fuse.w"], params["cond.fuse.b"])
    return c, (cp, ca, cat, linear)


def _conditioner_back(dc, cache, params, grads, config, n):
    cp, ca, cat, linear = cache
    dcat, grads["cond.fuse.w"], grads["cond.fuse.b"] = _conv_back(dc, cat, params["cond.fuse.w"], 1, "zero", n)
    H = config.hidden
    _branch_back(dcat[:H], cp, "cond.pos", params, grads, config.padding, linear, n)
    _branch_back(dcat[H:], ca, "cond.audio", params, grads, config.padding, linear, n)


def conditioner(pos_track, cond_audio, params, config: NetConfig, linear: bool = False) -> np.ndarray:
    """Fuse per-sample pose channels and conditioning audio into (hidden, N) features.

    ``linear=True`` drops the activations; it exists for testing.
    """
    return _conditioner_forward(pos_track, cond_audio, params, config, linear)[0]


# ---------------------------------------------------------------- full network

class ForwardContext:
    """Intermediate values retained by :func:`forward_with_context` for one backward pass."""

    def __init__(self, config, params, n, caches):
        self.config = config
        self.params = params
        self.n = n
        self.caches = caches
        self.used = False


def forward_with_context(z_t, t, pos_track, cond_audio, params, config: NetConfig, cond_features=None):
    """Evaluate the network and keep what :func:`backward` needs.

    ``cond_features`` may carry a precomputed :func:`conditioner` output; the
    conditioner then receives no gradient.
    """
    z_t = np.asarray(z_t, float)
    if z_t.ndim != 2 or z_t.shape[0] != config.in_channels:
        raise ShapeMismatch(f"z_t must be ({config.in_channels}, N), got {z_t.shape}")
    _check_step(t, config)
    n = z_t.shape[1]
    H = config.hidden
    mode = config.padding

    if cond_features is None:
        cond, cond_cache = _conditioner_forward(pos_track, cond_audio, params, config)
    else:
        cond, cond_cache = np.asarray(cond_features, float), None
    if cond.shape != (H, n):
        raise ShapeMismatch(f"conditioning length {cond.shape[1]} != input length {n}")
    e, step_cache = _step_forward(t, params)

    u_in, _ = _conv(z_t, params["input.w"], params["input.b"])
    x = _silu(u_in)
    skip = np.zeros((H, n))
    layers = []
    steps = []
    for b in range(config.residual_blocks):
        s = params[f"block{b}.step.w"] @ e + params[f"block{b}.step.b"]
        steps.append(s)
        for j in range(config.layers_per_block):
            p = f"block{b}.layer{j}"
            d = config.dilation(j)
            h = x + s[:, None]
            a, hp = _conv(h, params[f"{p}.dil.w"], params[f"{p}.dil.b"], d, mode)
            a += np.ascontiguousarray(params[f"{p}.cond.w"][:, :, 0]) @ cond + params[f"{p}.cond.b"][:, None]
            ta = np.tanh(a[:H])
            sb = _sigmoid(a[H:])
            g = ta * sb
            r, _ = _conv(g, params[f"{p}.res.w"], params[f"{p}.res.b"])
            k, _ = _conv(g, params[f"{p}.skip.w"], params[f"{p}.skip.b"])
            x = (x + r) / np.sqrt(2.0)
            skip += k
            layers.append((p, d, hp, ta, sb, g))
    skip_n = skip / np.sqrt(config.n_layers)
    u_out, _ = _conv(skip_n, params["skip_out.w"], params["skip_out.b"])
    o1 = _silu(u_out)
    out, _ = _conv(o1, params["output.w"], params["output.b"])

    caches = dict(cond=cond, cond_cache=cond_cache, step_cache=step_cache, e=e, z=z_t,
                  u_in=u_in, layers=layers, skip_n=skip_n, u_out=u_out, o1=o1)
    return out, ForwardContext(config, params, n, caches)


def forward(z_t, t, pos_track, cond_audio, params, config: NetConfig, cond_features=None) -> np.ndarray:
    return forward_with_context(z_t, t, pos_track, cond_audio, params, config, cond_features)[0]


def backward(ctx: ForwardContext, grad_out) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss w.r.t. every parameter.

    ``grad_out`` is dLoss/d(eps_pred).  A context supports a single backward
    pass.
    """
    if ctx.used:
        raise StaleContext("forward context already consumed by a backward pass")
    ctx.used = True
    config, params, n, c = ctx.config, ctx.params, ctx.n, ctx.caches
    g_out = np.asarray(grad_out, float)
    if g_out.shape != (config.out_channels, n):
        raise ShapeMismatch(f"loss gradient shape {g_out.shape} != output shape {(config.out_channels, n)}")
    H = config.hidden
    mode = config.padding
    grads: dict[str, np.ndarray] = {}

    do1, grads["output.w"], grads["output.b"] = _conv_back(g_out, c["o1"], params["output.w"], 1, "zero", n)
    du_out = do1 * _silu_grad(c["u_out"])
    dskip_n, grads["skip_out.w"], grads["skip_out.b"] = _conv_back(du_out, c["skip_n"], params["skip_out.w"], 1, "zero", n)
    dskip = dskip_n / np.sqrt(config.n_layers)

    dx = np.zeros((H, n))
    dcond = np.zeros((H, n))
    de = np.zeros_like(c["e"])
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    layers = c["layers"]
    for b in reversed(range(config.residual_blocks)):
        ds = np.zeros(H)
        for j in reversed(range(config.layers_per_block)):
            p, d, hp, ta, sb, g = layers[b * config.layers_per_block + j]
            dr = dx * inv_sqrt2
            dx = dx * inv_sqrt2
            dg_r, grads[f"{p}.res.w"], grads[f"{p}.res.b"] = _conv_back(dr, g, params[f"{p}.res.w"], 1, "zero", n)
            dg_k, grads[f"{p}.skip.w"], grads[f"{p}.skip.b"] = _conv_back(dskip, g, params[f"{p}.skip.w"], 1, "zero", n)
            dg = dg_r + dg_k
            da = np.concatenate([dg * sb * (1.0 - ta * ta), dg * ta * sb * (1.0 - sb)], axis=0)
            wc = params[f"{p}.cond.w"]
            grads[f"{p}.cond.w"] = (da @ c["cond"].T)[:, :, None]
            grads[f"{p}.cond.b"] = da.sum(axis=1)
            dcond += np.ascontiguousarray(wc[:, :, 0].T) @ da
            dh, grads[f"{p}.dil.w"], grads[f"{p}.dil.b"] = _conv_back(da, hp, params[f"{p}.dil.w"], d, mode, n)
            dx = dx + dh
            ds += dh.sum(axis=1)
        grads[f"block{b}.step.w"] = np.outer(ds, c["e"])
        grads[f"block{b}.step.b"] = ds
        de += params[f"block{b}.step.w"].T @ ds

    du_in = dx * _silu_grad(c["u_in"])
    _, grads["input.w"], grads["input.b"] = _conv_back(du_in, c["z"], params["input.w"], 1, "zero", n, need_dx=False)
    _step_back(de, c["step_cache"], params, grads)
    if c["cond_cache"] is not None:
        _conditioner_back(dcond, c["cond_cache"], params, grads, config, n)
    else:
        for name in param_shapes(config):
            if name.startswith("cond."):
                grads[name] = np.zeros_like(params[name])
    return grads


def loss_and_grads(params, config: NetConfig, z_t, t, pos_track, cond_audio, eps):
    """Mean-squared noise-prediction loss and its parameter gradients."""
    eps = np.asarray(eps, float)
    pred, ctx = forward_with_context(z_t, t, pos_track, cond_audio, params, config)
    if pred.shape != eps.shape:
        raise ShapeMismatch(f"target noise shape {eps.shape} != prediction shape {pred.shape}")
    diff = pred - eps
    loss = float(np.mean(diff ** 2))
    grads = backward(ctx, 2.0 * diff / diff.size)
    return loss, grads


# ---------------------------------------------------------------- optimizer

def init_moments(params) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, moments, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, step=1):
    """One bias-corrected Adam update; returns new (params, moments), inputs untouched."""
    if set(grads) != set(params):
        raise ShapeMismatch("gradient names differ from parameter names")
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * moments["m"][k] + (1.0 - beta1) * g
        v = beta2 * moments["v"][k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, {"m": new_m, "v": new_v}


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params, config: NetConfig, path, meta: dict | None = None) -> None:
    """Binary container, all integers little-endian::

        8s   magic b"BDIFFNET"
        u32  format version
        u32  byte length L, then L bytes of UTF-8 JSON {"net": ..., "meta": ...}
        u32  array count
        per array:
            u16 name length, name bytes (UTF-8)
            u8  rank, rank x u32 dims
            prod(dims) x f64 values, C order
    """
    check_params(params, config)
    text = json.dumps({"net": asdict(config), "meta": meta or {}}, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(text)), text,
           struct.pack("<I", len(params))]
    for name in param_shapes(config):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, expect: NetConfig | None = None):
    """Read a checkpoint; returns (params, config, meta).

    With ``expect`` given, any config field that differs raises
    :class:`VersionMismatch` naming the field.
    """
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a denoiser checkpoint (magic {data[:8]!r})")
    pos = 8

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise CorruptArray(what)
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (version,) = struct.unpack("<I", take(4, "<header>"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (tlen,) = struct.unpack("<I", take(4, "<header>"))
    try:
        header = json.loads(take(tlen, "<header>").decode())
        config = NetConfig(**header["net"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptArray("<header>", str(exc)) from None
    if expect is not None:
        for f in fields(NetConfig):
            if getattr(expect, f.name) != getattr(config, f.name):
                raise VersionMismatch(f"config field {f.name!r}: checkpoint has {getattr(config, f.name)!r}, "
                                      f"expected {getattr(expect, f.name)!r}")
    (count,) = struct.unpack("<I", take(4, "<header>"))
    params = {}
    for i in range(count):
        label = f"<array {i}>"
        (nlen,) = struct.unpack("<H", take(2, label))
        name = take(nlen, label).decode()
        (rank,) = struct.unpack("<B", take(1, name))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, name))
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * size, name), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise CorruptArray("<trailer>", f"{len(data) - pos} unexpected trailing bytes")
    try:
        check_params(params, config)
    except ShapeMismatch as exc:
        raise CorruptArray("<layout>", str(exc)) from None
    return params, config, header.get("meta", {})
