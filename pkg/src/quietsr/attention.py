"""Shifted quantum window attention (SQWIN).

Feature maps are ``[B, H, W, D]`` (a single ``[H, W, D]`` map is accepted by
the public functions).  Windows are ordered image-major, then row-major over
the window grid, with tokens row-major inside each window.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .qnn import QmlpParams, QuantumLayerParams, qmlp_bwd, qmlp_fwd
from .qnn import quantum_layer_backward as ql_bwd
from .qnn import quantum_layer_forward as ql_fwd

MASK_VALUE = -1e9
KAPPA_MAX = 100.0
NORM_EPS = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Window geometry
# ---------------------------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValidationError(f"expected [H, W, D] or [B, H, W, D], got shape {x.shape}")
    return x, False


def window_partition(x, M):
    """``[B, H, W, D] -> [B * nW, M*M, D]`` (or ``[nW, M*M, D]`` for one map)."""
    xb, single = _as_batch(x)
    b, h, w, d = xb.shape
    if h % M or w % M:
        raise ValidationError(f"feature map {h}x{w} is not divisible by window {M}")
    win = xb.reshape(b, h // M, M, w // M, M, d).transpose(0, 1, 3, 2, 4, 5)
    return win.reshape(-1, M * M, d)


def window_merge(windows, M, H, W):
    """Inverse of :func:`window_partition`; returns ``[B, H, W, D]``."""
    windows = np.asarray(windows)
    d = windows.shape[-1]
    b = windows.shape[0] // ((H // M) * (W // M))
    x = windows.reshape(b, H // M, W // M, M, M, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, H, W, d)


def cyclic_shift(x, shift):
    """Roll the map by ``(-shift, -shift)`` (toward the top-left)."""
    x = np.asarray(x)
    h, w = x.shape[-3], x.shape[-2]
    if not 0 <= shift < min(h, w):
        raise ValidationError(f"shift {shift} outside [0, {min(h, w)})")
    if shift == 0:
        return x.copy()
    return np.roll(x, (-shift, -shift), axis=(-3, -2))


def inverse_shift(x, shift):
    x = np.asarray(x)
    h, w = x.shape[-3], x.shape[-2]
    if not 0 <= shift < min(h, w):
        raise ValidationError(f"shift {shift} outside [0, {min(h, w)})")
    if shift == 0:
        return x.copy()
    return np.roll(x, (shift, shift), axis=(-3, -2))


@dataclass
class AttentionMaskSpec:
    shift: int
    region_id: np.ndarray  # [H, W] labels of the shifted map
    mask: np.ndarray  # [nW, M*M, M*M], entries 0 or MASK_VALUE


def compute_attention_mask(H, W, M, shift) -> AttentionMaskSpec:
    """Mask blocking attention between tokens that were not adjacent before the shift."""
    region = np.zeros((H, W), dtype=np.int64)
    if shift:
        bands = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
        label = 0
        for hs in bands:
            for ws in bands:
                region[hs, ws] = label
                label += 1
    ids = window_partition(region[:, :, None], M)[:, :, 0]
    mask = np.where(ids[:, :, None] != ids[:, None, :], MASK_VALUE, 0.0)
    return AttentionMaskSpec(shift, region, mask)


# ---------------------------------------------------------------------------
# Log-spaced continuous relative position bias
# ---------------------------------------------------------------------------


def relative_displacements(M):
    """Distinct ``(dx, dy)`` pairs and the table index of every token pair."""
    r = np.arange(-(M - 1), M)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    table = np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)
    rows, cols = np.divmod(np.arange(M * M), M)
    ddy = rows[:, None] - rows[None, :]
    ddx = cols[:, None] - cols[None, :]
    index = (ddy + M - 1) * (2 * M - 1) + (ddx + M - 1)
    return table, index


def _log_coord(delta, gamma):
    return np.sign(delta) * np.log2(1.0 + np.abs(delta) / gamma)


def _log_coord_dgamma(delta, gamma):
    a = np.abs(delta)
    return -np.sign(delta) * a / (gamma * gamma * (1.0 + a / gamma) * math.log(2.0))


def log_relative_bias(M, gamma_x, gamma_y, bias_mlp: QmlpParams, workers=None):
    """Per-head bias ``[heads, M*M, M*M]`` from log-encoded token displacements."""
    return _bias_fwd(M, gamma_x, gamma_y, bias_mlp, workers)[0]


def _bias_fwd(M, gamma_x, gamma_y, bias_mlp, workers=None):
    if not (gamma_x > 0 and gamma_y > 0):
        raise ValidationError("position-bias scales must be positive")
    table, index = relative_displacements(M)
    feats = np.stack([_log_coord(table[:, 0], gamma_x), _log_coord(table[:, 1], gamma_y)], axis=1)
    values, mlp_cache = qmlp_fwd(feats, bias_mlp, workers)  # [(2M-1)^2, heads]
    bias = values[index].transpose(2, 0, 1)
    return bias, (table, index, mlp_cache)


# ---------------------------------------------------------------------------
# Attention block
# ---------------------------------------------------------------------------


@dataclass
class SqwinParams:
    theta_q: QuantumLayerParams
    theta_k: QuantumLayerParams
    theta_v: QuantumLayerParams
    theta_o: QuantumLayerParams
    kappa_raw: np.ndarray  # [heads]
    bias_mlp: QmlpParams  # 2 -> heads
    gamma_raw: np.ndarray  # [2] softplus pre-images of (gamma_x, gamma_y)
    num_heads: int
    window: int
    mode: str = "cosine"

    def __post_init__(self):
        d = self.theta_q.n_qubits
        if d % self.num_heads:
            raise ValidationError(f"{self.num_heads} heads do not divide embedding dim {d}")
        for layer in (self.theta_q, self.theta_k, self.theta_v, self.theta_o):
            if layer.n_qubits != d or layer.width != d:
                raise ValidationError("Q/K/V/O quantum layers must map D -> D")
        if self.kappa_raw.shape != (self.num_heads,):
            raise ValidationError("kappa_raw needs one entry per head")
        if self.bias_mlp.in_dim != 2 or self.bias_mlp.post_w.shape[1] != self.num_heads:
            raise ValidationError("bias MLP must map 2 -> num_heads")
        if self.mode not in ("cosine", "dot"):
            raise ValidationError(f"unknown attention mode {self.mode!r}")

    @classmethod
    def init(cls, dim, num_heads, window, rng, qmlp_ratio=2, depth=1, bases=None,
             mode="cosine", bias_depth=1):
        # Deeper layers keep the Z block only so projections stay D -> D.
        obs = None if depth == 1 else ("Z",)
        layers = [QuantumLayerParams.init(dim, depth, rng, bases=bases, observables=obs)
                  for _ in range(4)]
        return cls(
            *layers,
            kappa_raw=np.full(num_heads, math.log(10.0)),
            bias_mlp=QmlpParams.init(2, qmlp_ratio, rng, depth=bias_depth, out_dim=num_heads,
                                     bases=bases),
            gamma_raw=np.full(2, softplus_inv(8.0)),
            num_heads=num_heads,
            window=window,
            mode=mode,
        )

    @property
    def dim(self):
        return self.theta_q.n_qubits

    @property
    def kappa(self):
        return np.exp(np.minimum(self.kappa_raw, math.log(KAPPA_MAX)))

    @property
    def gamma(self):
        return softplus(self.gamma_raw)


def _split_heads(t, heads):
    bw, n, d = t.shape
    return t.reshape(bw, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    bw, h, n, hd = t.shape
    return t.transpose(0, 2, 1, 3).reshape(bw, n, h * hd)


def _unit(t):
    norm = np.linalg.norm(t, axis=-1, keepdims=True)
    safe = norm >= NORM_EPS
    return np.where(safe, t / np.where(safe, norm, 1.0), 0.0), norm, safe


def _unit_bwd(g, unit, norm, safe):
    proj = g - unit * np.sum(g * unit, axis=-1, keepdims=True)
    return np.where(safe, proj / np.where(safe, norm, 1.0), 0.0)


def sqwin_fwd(x, p: SqwinParams, shift, workers=None):
    xb, _ = _as_batch(x)
    b, h, w, d = xb.shape
    if d != p.dim:
        raise ValidationError(f"feature dim {d} != attention dim {p.dim}")
    M = p.window
    heads = p.num_heads
    win = window_partition(cyclic_shift(xb, shift), M)  # [BW, T, D]
    q = ql_fwd(win, p.theta_q, workers)
    k = ql_fwd(win, p.theta_k, workers)
    v = ql_fwd(win, p.theta_v, workers)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))

    gx, gy = p.gamma
    bias, bias_cache = _bias_fwd(M, gx, gy, p.bias_mlp, workers)
    mask = compute_attention_mask(h, w, M, shift).mask
    mask = np.tile(mask, (b, 1, 1))[:, None]  # [BW, 1, T, T]

    kappa = p.kappa
    if p.mode == "cosine":
        qn, qnorm, qsafe = _unit(qh)
        kn, knorm, ksafe = _unit(kh)
        sim = qn @ kn.transpose(0, 1, 3, 2)
        logits = kappa[None, :, None, None] * sim
        sim_cache = (qn, qnorm, qsafe, kn, knorm, ksafe)
    else:
        scale = 1.0 / math.sqrt(d // heads)
        sim = qh @ kh.transpose(0, 1, 3, 2) * scale
        logits = sim.copy()
        sim_cache = (qh, kh, scale)
    logits = logits + bias[None] + mask
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)

    mixed = _merge_heads(attn @ vh)
    y = ql_fwd(mixed, p.theta_o, workers)
    out = inverse_shift(window_merge(y, M, h, w), shift)
    cache = (xb.shape, shift, win, vh, sim, sim_cache, attn, mixed, bias_cache)
    return out, cache


def sqwin_bwd(cache, g, p: SqwinParams, workers=None):
    """VJP of :func:`sqwin_fwd`; returns ``(dx, grads)`` with grads shaped like ``p``."""
    shape, shift, win, vh, sim, sim_cache, attn, mixed, bias_cache = cache
    b, h, w, d = shape
    M = p.window
    heads = p.num_heads
    gy = window_partition(cyclic_shift(g.reshape(shape), shift), M)

    dmixed, dtheta_o = ql_bwd(mixed, p.theta_o, gy, workers)
    do = _split_heads(dmixed, heads)
    dattn = do @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ do
    dlogits = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))

    kappa = p.kappa
    if p.mode == "cosine":
        qn, qnorm, qsafe, kn, knorm, ksafe = sim_cache
        dkappa = np.einsum("bhij,bhij->h", dlogits, sim)
        dsim = dlogits * kappa[None, :, None, None]
        dqh = _unit_bwd(dsim @ kn, qn, qnorm, qsafe)
        dkh = _unit_bwd(dsim.transpose(0, 1, 3, 2) @ qn, kn, knorm, ksafe)
        dkappa_raw = np.where(p.kappa_raw < math.log(KAPPA_MAX), dkappa * kappa, 0.0)
    else:
        qh, kh, scale = sim_cache
        dqh = (dlogits @ kh) * scale
        dkh = (dlogits.transpose(0, 1, 3, 2) @ qh) * scale
        dkappa_raw = np.zeros_like(p.kappa_raw)

    dbias_mlp, dgamma_raw = _bias_bwd(bias_cache, dlogits.sum(axis=0), p, workers)

    dwin = np.zeros_like(win)
    thetas = []
    for dt, layer in zip((dqh, dkh, dvh), (p.theta_q, p.theta_k, p.theta_v)):
        dwin_part, dtheta = ql_bwd(win, layer, _merge_heads(dt), workers)
        dwin += dwin_part
        thetas.append(dtheta)

    dx = inverse_shift(window_merge(dwin, M, h, w), shift)
    grads = SqwinParams(
        p.theta_q.with_theta(thetas[0]),
        p.theta_k.with_theta(thetas[1]),
        p.theta_v.with_theta(thetas[2]),
        p.theta_o.with_theta(dtheta_o),
        kappa_raw=dkappa_raw,
        bias_mlp=dbias_mlp,
        gamma_raw=dgamma_raw,
        num_heads=heads,
        window=M,
        mode=p.mode,
    )
    return dx, grads


def _bias_bwd(bias_cache, dbias, p: SqwinParams, workers=None):
    table, index, mlp_cache = bias_cache
    n_rel = table.shape[0]
    dvalues = np.zeros((n_rel, p.num_heads))
    np.add.at(dvalues, index.ravel(), dbias.reshape(p.num_heads, -1).T)
    dfeats, dmlp = qmlp_bwd(mlp_cache, dvalues, p.bias_mlp, workers)
    gx, gy = p.gamma
    dgamma = np.array([
        np.sum(dfeats[:, 0] * _log_coord_dgamma(table[:, 0], gx)),
        np.sum(dfeats[:, 1] * _log_coord_dgamma(table[:, 1], gy)),
    ])
    return dmlp, dgamma * _sigmoid(p.gamma_raw)


def sqwin_forward(x, p: SqwinParams, shift, workers=None):
    """Shift, window, quantum Q/K/V, scaled cosine attention with bias, quantum O, unshift."""
    xb, single = _as_batch(x)
    out = sqwin_fwd(xb, p, shift, workers)[0]
    return out[0] if single else out


def attention_weights(x, p: SqwinParams, shift, workers=None):
    """Post-softmax attention ``[B * nW, heads, T, T]`` (for inspection and tests)."""
    return sqwin_fwd(x, p, shift, workers)[1][6]
