"""Quantum layers and the quantum MLP (affine -> variational circuit -> affine)."""
from dataclasses import dataclass

import numpy as np

from . import qsim
from .errors import CapacityError, ValidationError
from .qsim import QuantumLayerParams

__all__ = [
    "QuantumLayerParams",
    "QmlpParams",
    "quantum_layer_forward",
    "quantum_layer_backward",
    "qmlp_forward",
    "qmlp_backward",
    "trunc_normal",
]

MAX_HIDDEN_QUBITS = 10


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) samples redrawn until they fall inside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def quantum_layer_forward(x, p: QuantumLayerParams, workers=None):
    """Expectation values for each token in ``x`` [..., n_qubits] -> [..., width]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.n_qubits:
        raise ValidationError(f"last dim {x.shape[-1]} != {p.n_qubits} qubits")
    flat = x.reshape(-1, p.n_qubits)
    out = qsim.execute(flat, p, workers=workers)
    return out.reshape(x.shape[:-1] + (p.width,))


def quantum_layer_backward(x, p: QuantumLayerParams, cotangent, workers=None):
    """Parameter-shift VJP; returns ``(dx, dtheta)``."""
    x = np.asarray(x, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != x.shape[:-1] + (p.width,):
        raise ValidationError(f"cotangent shape {cot.shape} does not match output")
    dx, dtheta = qsim.execute_grad(
        x.reshape(-1, p.n_qubits), p, cot.reshape(-1, p.width), workers=workers
    )
    return dx.reshape(x.shape), dtheta


@dataclass
class QmlpParams:
    pre_w: np.ndarray  # [in_dim, hidden]
    pre_b: np.ndarray  # [hidden]
    qlayer: QuantumLayerParams  # hidden qubits
    post_w: np.ndarray  # [qlayer.width, out_dim]
    post_b: np.ndarray  # [out_dim]

    def __post_init__(self):
        hidden = self.pre_w.shape[1]
        if hidden > MAX_HIDDEN_QUBITS:
            raise CapacityError(f"QMLP hidden width {hidden} exceeds {MAX_HIDDEN_QUBITS} qubits")
        if self.pre_b.shape != (hidden,) or self.qlayer.n_qubits != hidden:
            raise ValidationError("QMLP pre-map and quantum layer widths disagree")
        if self.post_w.shape[0] != self.qlayer.width or self.post_b.shape != (self.post_w.shape[1],):
            raise ValidationError("QMLP post-map does not match quantum layer output")

    @classmethod
    def init(cls, in_dim, ratio, rng, depth=1, out_dim=None, bases=None, observables=None):
        hidden = in_dim * ratio
        out_dim = in_dim if out_dim is None else out_dim
        if hidden > MAX_HIDDEN_QUBITS:
            raise CapacityError(f"QMLP hidden width {hidden} exceeds {MAX_HIDDEN_QUBITS} qubits")
        qlayer = QuantumLayerParams.init(hidden, depth, rng, bases=bases, observables=observables)
        return cls(
            pre_w=trunc_normal(rng, (in_dim, hidden)),
            pre_b=np.zeros(hidden),
            qlayer=qlayer,
            post_w=trunc_normal(rng, (qlayer.width, out_dim)),
            post_b=np.zeros(out_dim),
        )

    @property
    def in_dim(self):
        return self.pre_w.shape[0]

    @property
    def hidden(self):
        return self.pre_w.shape[1]


def qmlp_fwd(x, p: QmlpParams, workers=None):
    if x.shape[-1] != p.in_dim:
        raise ValidationError(f"QMLP expects last dim {p.in_dim}, got {x.shape[-1]}")
    h1 = x @ p.pre_w + p.pre_b
    h2 = quantum_layer_forward(h1, p.qlayer, workers)
    out = h2 @ p.post_w + p.post_b
    return out, (x, h1, h2)


def qmlp_bwd(cache, g, p: QmlpParams, workers=None):
    x, h1, h2 = cache
    lead = tuple(range(g.ndim - 1))
    d_post_w = np.tensordot(h2, g, axes=(lead, lead))
    d_post_b = g.sum(axis=lead)
    dh2 = g @ p.post_w.T
    dh1, dtheta = quantum_layer_backward(h1, p.qlayer, dh2, workers)
    d_pre_w = np.tensordot(x, dh1, axes=(lead, lead))
    d_pre_b = dh1.sum(axis=lead)
    dx = dh1 @ p.pre_w.T
    grads = QmlpParams(d_pre_w, d_pre_b, p.qlayer.with_theta(dtheta), d_post_w, d_post_b)
    return dx, grads


def qmlp_forward(x, p: QmlpParams, workers=None):
    """Apply ``post(quantum_layer(pre(x)))`` to every token along the last axis."""
    return qmlp_fwd(np.asarray(x, dtype=np.float64), p, workers)[0]


def qmlp_backward(x, p: QmlpParams, g, workers=None):
    """VJP of :func:`qmlp_forward`; returns ``(dx, grads)`` with grads shaped like ``p``."""
    x = np.asarray(x, dtype=np.float64)
    _, cache = qmlp_fwd(x, p, workers)
    return qmlp_bwd(cache, np.asarray(g, dtype=np.float64), p, workers)
