"""The full super-resolution network and its checkpoint format.

Activations are channels-last ``[B, H, W, C]``.  Every stage has a ``*_fwd``
returning ``(output, cache)`` and a matching ``*_bwd(cache, grad)`` returning
the input gradient plus parameter gradients shaped like the parameters.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import params as P
from .attention import SqwinParams, sqwin_bwd, sqwin_fwd
from .errors import CapacityError, FormatError, NumericalFailure, ValidationError
from .qnn import MAX_HIDDEN_QUBITS, QmlpParams, qmlp_bwd, qmlp_fwd

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"QSR1"


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 4
    window: int = 2
    num_layers: int = 6
    heads: int = 2
    qmlp_ratio: int = 2
    upscale: int = 2
    layers_per_block: int = 2
    drop_path: float = 0.0
    qlayer_depth: int = 1
    attn_depth: int = 1
    bases: tuple | None = None
    attn_mode: str = "cosine"
    channels: int = 1

    def __post_init__(self):
        if self.bases is not None:
            object.__setattr__(self, "bases", tuple(self.bases))
        if self.embed_dim < 1 or self.window < 1 or self.upscale < 1 or self.channels < 1:
            raise ValidationError("dimensions, window, upscale and channels must be >= 1")
        if self.embed_dim % self.heads:
            raise ValidationError(f"{self.heads} heads do not divide embed_dim {self.embed_dim}")
        if self.num_layers % self.layers_per_block:
            raise ValidationError("num_layers must be a multiple of layers_per_block")
        if self.embed_dim * self.qmlp_ratio > MAX_HIDDEN_QUBITS:
            raise CapacityError(
                f"QMLP hidden width {self.embed_dim * self.qmlp_ratio} exceeds the "
                f"{MAX_HIDDEN_QUBITS}-qubit budget"
            )
        if not 0.0 <= self.drop_path <= 1.0:
            raise ValidationError("drop_path must lie in [0, 1]")

    @property
    def num_blocks(self):
        return self.num_layers // self.layers_per_block

    def to_dict(self):
        d = asdict(self)
        d["bases"] = list(self.bases) if self.bases is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if d.get("bases") is not None:
            d["bases"] = tuple(d["bases"])
        return cls(**d)


@dataclass
class LayerParams:
    norm1_scale: np.ndarray
    norm1_bias: np.ndarray
    attn: SqwinParams
    norm2_scale: np.ndarray
    norm2_bias: np.ndarray
    mlp: QmlpParams


@dataclass
class BlockParams:
    layers: list = field(default_factory=list)
    conv_w: np.ndarray | None = None
    conv_b: np.ndarray | None = None


@dataclass
class ModelParams:
    conv_in_w: np.ndarray
    conv_in_b: np.ndarray
    blocks: list
    conv_mid_w: np.ndarray
    conv_mid_b: np.ndarray
    conv_up_w: np.ndarray
    conv_up_b: np.ndarray
    conv_out_w: np.ndarray
    conv_out_b: np.ndarray

    def flatten(self):
        return P.flatten(self)

    def unflatten(self, vec):
        return P.unflatten(self, vec)

    def layout(self):
        return P.layout(self)

    def count(self):
        return P.count(self)


def _conv_init(rng, cin, cout):
    bound = 1.0 / math.sqrt(9 * cin)
    return rng.uniform(-bound, bound, size=(3, 3, cin, cout)), rng.uniform(-bound, bound, size=cout)


def init_params(config: ModelConfig, rng) -> ModelParams:
    d, c, s = config.embed_dim, config.channels, config.upscale
    conv_in = _conv_init(rng, c, d)
    blocks = []
    for _ in range(config.num_blocks):
        layers = []
        for _ in range(config.layers_per_block):
            layers.append(LayerParams(
                norm1_scale=np.ones(d),
                norm1_bias=np.zeros(d),
                attn=SqwinParams.init(
                    d, config.heads, config.window, rng, qmlp_ratio=config.qmlp_ratio,
                    depth=config.attn_depth, bases=config.bases, mode=config.attn_mode,
                ),
                norm2_scale=np.ones(d),
                norm2_bias=np.zeros(d),
                mlp=QmlpParams.init(d, config.qmlp_ratio, rng, depth=config.qlayer_depth,
                                    bases=config.bases),
            ))
        w, b = _conv_init(rng, d, d)
        blocks.append(BlockParams(layers, w, b))
    conv_mid = _conv_init(rng, d, d)
    conv_up = _conv_init(rng, d, c * s * s)
    conv_out = _conv_init(rng, c, c)
    return ModelParams(*conv_in, blocks, *conv_mid, *conv_up, *conv_out)


def shift_for_layer(index, window):
    """Alternating schedule: even layers unshifted, odd layers shifted by M/2."""
    return 0 if index % 2 == 0 else window // 2


# ---------------------------------------------------------------------------
# Classical primitives
# ---------------------------------------------------------------------------


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv_fwd(x, w, b):
    if x.shape[-1] != w.shape[2] or w.shape[:2] != (3, 3):
        raise ValidationError(f"conv weight {w.shape} does not match input channels {x.shape[-1]}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [B, H, W, Cin, 3, 3]
    out = np.einsum("bhwcij,ijco->bhwo", patches, w, optimize=True) + b
    return out, x


def conv_bwd(x, g, w):
    h, wd = x.shape[1], x.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))
    dw = np.einsum("bhwcij,bhwo->ijco", patches, g, optimize=True)
    db = g.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += g @ w[i, j].T
    return dxp[:, 1:-1, 1:-1, :], dw, db


def conv2d_3x3(x, w, b):
    """Stride-1, zero-padded 3x3 convolution; ``w`` is ``[3, 3, Cin, Cout]``."""
    xb, single = _batched(x)
    out = conv_fwd(xb, np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))[0]
    return out[0] if single else out


def ln_fwd(x, scale, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * scale + bias, (xhat, inv)


def ln_bwd(cache, g, scale):
    xhat, inv = cache
    lead = tuple(range(g.ndim - 1))
    dscale = np.sum(g * xhat, axis=lead)
    dbias = g.sum(axis=lead)
    gx = g * scale
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
    return dx, dscale, dbias


def layer_norm(x, scale, bias):
    """Normalize each token over its channel axis (eps 1e-5), then scale and shift."""
    return ln_fwd(np.asarray(x, dtype=np.float64), scale, bias)[0]


def pixel_shuffle(x, s):
    """``[.., H, W, C*s*s] -> [.., s*H, s*W, C]``; channel ``c*s*s + i*s + j`` lands at (i, j)."""
    x = np.asarray(x)
    *lead, h, w, cs = x.shape
    if cs % (s * s):
        raise ValidationError(f"{cs} channels not divisible by upscale^2 = {s * s}")
    c = cs // (s * s)
    y = x.reshape(*lead, h, w, c, s, s)
    n = len(lead)
    y = y.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return y.reshape(*lead, h * s, w * s, c)


def pixel_unshuffle(x, s):
    x = np.asarray(x)
    *lead, hs, ws, c = x.shape
    if hs % s or ws % s:
        raise ValidationError(f"spatial dims {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    n = len(lead)
    y = x.reshape(*lead, h, s, w, s, c)
    y = y.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return y.reshape(*lead, h, w, c * s * s)


def _drop_path_scale(batch, rate, training, rng):
    if not training or rate == 0.0:
        return None
    if rate >= 1.0:
        return np.zeros((batch, 1, 1, 1))
    keep = rng.random(batch) >= rate
    return (keep / (1.0 - rate)).reshape(batch, 1, 1, 1)


# ---------------------------------------------------------------------------
# Transformer layer, block, network
# ---------------------------------------------------------------------------


def transformer_layer_fwd(x, lp: LayerParams, shift, drop_path=0.0, training=False, rng=None,
                          workers=None):
    b = x.shape[0]
    n1, ln1 = ln_fwd(x, lp.norm1_scale, lp.norm1_bias)
    a, attn_cache = sqwin_fwd(n1, lp.attn, shift, workers)
    s1 = _drop_path_scale(b, drop_path, training, rng)
    y = x + (a if s1 is None else a * s1)
    n2, ln2 = ln_fwd(y, lp.norm2_scale, lp.norm2_bias)
    m, mlp_cache = qmlp_fwd(n2, lp.mlp, workers)
    s2 = _drop_path_scale(b, drop_path, training, rng)
    out = y + (m if s2 is None else m * s2)
    return out, (ln1, attn_cache, s1, ln2, mlp_cache, s2)


def transformer_layer_bwd(cache, g, lp: LayerParams, workers=None):
    ln1, attn_cache, s1, ln2, mlp_cache, s2 = cache
    gm = g if s2 is None else g * s2
    dn2, dmlp = qmlp_bwd(mlp_cache, gm, lp.mlp, workers)
    dy_ln, dscale2, dbias2 = ln_bwd(ln2, dn2, lp.norm2_scale)
    gy = g + dy_ln
    ga = gy if s1 is None else gy * s1
    dn1, dattn = sqwin_bwd(attn_cache, ga, lp.attn, workers)
    dx_ln, dscale1, dbias1 = ln_bwd(ln1, dn1, lp.norm1_scale)
    grads = LayerParams(dscale1, dbias1, dattn, dscale2, dbias2, dmlp)
    return gy + dx_ln, grads


def transformer_layer_forward(x, lp: LayerParams, shift, drop_path=0.0, training=False, rng=None):
    """``x + DropPath(SQWIN(LN(x)))`` followed by ``+ DropPath(QMLP(LN(.)))``."""
    xb, single = _batched(x)
    out = transformer_layer_fwd(xb, lp, shift, drop_path, training, rng)[0]
    return out[0] if single else out


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure("non-finite activations", where=where)


def model_fwd(lr, params: ModelParams, config: ModelConfig, training=False, rng=None,
              workers=None):
    """Forward pass keeping everything the backward pass needs."""
    x, _ = _batched(lr)
    _, h, w, c = x.shape
    if h % config.window or w % config.window:
        raise ValidationError(
            f"input {h}x{w} is not divisible by window size M={config.window}"
        )
    if c != config.channels:
        raise ValidationError(f"input has {c} channels, model expects {config.channels}")
    if training and config.drop_path > 0 and rng is None:
        raise ValidationError("stochastic depth needs a seeded generator")

    f0, conv_in_cache = conv_fwd(x, params.conv_in_w, params.conv_in_b)
    _check_finite(f0, "conv_in")
    feat = f0
    block_caches = []
    layer_index = 0
    for bi, bp in enumerate(params.blocks):
        block_in = feat
        layer_caches = []
        for li, lp in enumerate(bp.layers):
            shift = shift_for_layer(li, config.window)
            feat, lc = transformer_layer_fwd(feat, lp, shift, config.drop_path, training, rng,
                                             workers)
            _check_finite(feat, f"transformer layer {layer_index}")
            layer_caches.append(lc)
            layer_index += 1
        conv_out, conv_cache = conv_fwd(feat, bp.conv_w, bp.conv_b)
        feat = conv_out + block_in
        _check_finite(feat, f"block {bi} conv")
        block_caches.append((layer_caches, conv_cache))
    deep = feat
    mid, mid_cache = conv_fwd(deep, params.conv_mid_w, params.conv_mid_b)
    fused = mid + f0
    up, up_cache = conv_fwd(fused, params.conv_up_w, params.conv_up_b)
    shuffled = pixel_shuffle(up, config.upscale)
    out, out_cache = conv_fwd(shuffled, params.conv_out_w, params.conv_out_b)
    _check_finite(out, "reconstruction")
    cache = (conv_in_cache, block_caches, mid_cache, up_cache, out_cache, deep)
    return out, cache


def model_bwd(cache, g, params: ModelParams, config: ModelConfig, workers=None):
    """Gradient of ``sum(g * forward(x))`` with respect to every parameter."""
    conv_in_cache, block_caches, mid_cache, up_cache, out_cache, _ = cache
    grads = P.zeros_like(params)
    d_shuffled, grads.conv_out_w, grads.conv_out_b = conv_bwd(out_cache, g, params.conv_out_w)
    d_up = pixel_unshuffle(d_shuffled, config.upscale)
    d_fused, grads.conv_up_w, grads.conv_up_b = conv_bwd(up_cache, d_up, params.conv_up_w)
    d_deep, grads.conv_mid_w, grads.conv_mid_b = conv_bwd(mid_cache, d_fused, params.conv_mid_w)
    d_f0 = d_fused.copy()
    dfeat = d_deep
    for bi in reversed(range(len(params.blocks))):
        bp = params.blocks[bi]
        layer_caches, conv_cache = block_caches[bi]
        gb = grads.blocks[bi]
        d_layers, gb.conv_w, gb.conv_b = conv_bwd(conv_cache, dfeat, bp.conv_w)
        d_block_in = dfeat
        for li in reversed(range(len(bp.layers))):
            d_layers, gb.layers[li] = transformer_layer_bwd(
                layer_caches[li], d_layers, bp.layers[li], workers
            )
        dfeat = d_block_in + d_layers
    d_f0 += dfeat
    dx, grads.conv_in_w, grads.conv_in_b = conv_bwd(conv_in_cache, d_f0, params.conv_in_w)
    return dx, grads


def forward(lr, params: ModelParams, config: ModelConfig, training=False, rng=None, workers=None):
    """Super-resolve ``lr`` ([H, W, C] or [B, H, W, C]) to ``s`` times its size."""
    single = np.ndim(lr) == 3
    out = model_fwd(lr, params, config, training, rng, workers)[0]
    return out[0] if single else out


def deep_features(lr, params: ModelParams, config: ModelConfig, workers=None):
    """Output of the last residual block, before conv_mid and upsampling."""
    single = np.ndim(lr) == 3
    feats = model_fwd(lr, params, config, workers=workers)[1][5]
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# Resource report
# ---------------------------------------------------------------------------


def resource_report(config: ModelConfig, input_hw=(14, 14), params: ModelParams | None = None,
                    ancilla=0):
    """Qubit and circuit budget of one forward pass on an ``input_hw`` image."""
    d, m = config.embed_dim, config.window
    hidden = d * config.qmlp_ratio
    bias_hidden = 2 * config.qmlp_ratio
    tokens = input_hw[0] * input_hw[1]
    per_layer = 4 * tokens + tokens + (2 * m - 1) ** 2
    if params is None:
        params = init_params(config, np.random.default_rng(0))
    return {
        "qubits_per_circuit": max(d, hidden, bias_hidden),
        "circuits_per_forward": per_layer * config.num_layers,
        "param_count": params.count(),
        "log_formula_qubits": math.ceil(math.log2(d)) + ancilla,
        "ancilla": ancilla,
    }


# ---------------------------------------------------------------------------
# Checkpoints: b"QSR1" | u64 LE header length | JSON header | f64 LE parameters
# ---------------------------------------------------------------------------


def _header_bytes(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, params: ModelParams, config: ModelConfig, seed=0, epoch=0, extra=None):
    header = {
        "config": config.to_dict(),
        "layout": [[name, list(shape)] for name, shape in params.layout()],
        "seed": int(seed),
        "epoch": int(epoch),
    }
    if extra:
        header["extra"] = extra
    blob = _header_bytes(header)
    flat = params.flatten().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_checkpoint(path):
    """Returns ``(params, config, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a QSR1 checkpoint", offset=0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", offset=4)
    (hlen,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + hlen:
        raise FormatError("truncated checkpoint header", offset=12)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    template = init_params(config, np.random.default_rng(0))
    layout = [[name, list(shape)] for name, shape in template.layout()]
    if layout != header["layout"]:
        raise FormatError("checkpoint layout does not match its config", offset=12)
    body = data[12 + hlen :]
    if len(body) != 8 * template.count():
        raise FormatError("parameter payload has the wrong length", offset=12 + hlen)
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return template.unflatten(flat), config, header
