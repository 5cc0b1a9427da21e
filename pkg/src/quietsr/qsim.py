"""Statevector and density-matrix simulation of small variational circuits.

Basis ordering is little-endian: qubit 0 is the least significant bit of a
basis index.  Rotations follow ``R(theta) = exp(-i theta sigma / 2)`` with
angles left unreduced.

The batched kernels work on arrays of shape ``[batch, 2**n]`` (pure states)
or ``[batch, 2**n, 2**n]`` (density matrices) so that every window/token of a
feature map runs as one batch of identical circuits.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import CapacityError, StructuralError, ValidationError

ROTATIONS = ("RX", "RY", "RZ")
PAULIS = ("X", "Y", "Z")
NOISE_KINDS = ("Depolarizing", "AmplitudeDamping", "PhaseDamping", "BitFlip")

MAX_QUBITS = 12
MAX_NOISY_QUBITS = 8
# Fixed work unit for batch execution; results never depend on worker count.
CHUNK = 512
# Rows per density-matrix pass; 8 qubits x 32 rows is about 32 MB of complex entries.
NOISY_CHUNK = 32

_HALF_PI = math.pi / 2

_active_noise: ContextVar = ContextVar("active_noise", default=None)
_grad_method: ContextVar = ContextVar("grad_method", default="shift")


@contextmanager
def gradient_method(method):
    """Select ``"shift"`` or ``"sweep"`` for every :func:`execute_grad` in this context."""
    if method not in ("shift", "sweep"):
        raise ValidationError(f"unknown gradient method {method!r}")
    token = _grad_method.set(method)
    try:
        yield method
    finally:
        _grad_method.reset(token)


def default_workers():
    return max(1, int(os.environ.get("QSR_WORKERS", "1")))


@contextmanager
def noisy(channel):
    """Route every :func:`execute` call in this context through the noisy path."""
    token = _active_noise.set(channel)
    try:
        yield channel
    finally:
        _active_noise.reset(token)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gate:
    kind: str
    target: int
    control: int | None = None
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ROTATIONS + ("CNOT",):
            raise ValidationError(f"unknown gate kind {self.kind!r}")
        if self.kind == "CNOT":
            if self.control is None:
                raise ValidationError("CNOT needs a control qubit")
            if self.control == self.target:
                raise StructuralError("CNOT control equals target")
        elif not math.isfinite(self.angle):
            raise ValidationError(f"non-finite rotation angle {self.angle}")


@dataclass(frozen=True)
class Observable:
    kind: str
    qubit: int

    def __post_init__(self):
        if self.kind not in PAULIS:
            raise ValidationError(f"unknown observable {self.kind!r}")


@dataclass
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise CapacityError(f"{self.n_qubits} qubits outside 1..{MAX_QUBITS}")
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (1 << self.n_qubits,):
            raise ValidationError("amplitude vector must have length 2**n_qubits")

    @classmethod
    def zero(cls, n_qubits):
        amps = np.zeros(1 << n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(n_qubits, amps)

    def norm_squared(self):
        return float(np.vdot(self.amplitudes, self.amplitudes).real)


@dataclass
class DensityMatrix:
    n_qubits: int
    entries: np.ndarray

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_NOISY_QUBITS:
            raise CapacityError(f"{self.n_qubits} qubits outside 1..{MAX_NOISY_QUBITS}")
        self.entries = np.asarray(self.entries, dtype=np.complex128)
        d = 1 << self.n_qubits
        if self.entries.shape != (d, d):
            raise ValidationError("density matrix must be 2**n x 2**n")

    @classmethod
    def from_state(cls, state: StateVector):
        a = state.amplitudes
        return cls(state.n_qubits, np.outer(a, a.conj()))

    def trace(self):
        return complex(np.trace(self.entries))


@dataclass(frozen=True)
class NoiseChannel:
    """Single-qubit noise channel given by its Kraus operators.

    Depolarizing uses the ``(1 - 3p/4) rho + p/4 (X rho X + Y rho Y + Z rho Z)``
    form, so ``p = 1`` sends any single-qubit state to ``I/2``.
    """

    kind: str
    strength: float

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"unknown noise channel {self.kind!r}")
        if not (0.0 <= self.strength <= 1.0):
            raise ValidationError(f"noise strength {self.strength} outside [0, 1]")

    @property
    def kraus(self):
        return _kraus(self.kind, float(self.strength))


@lru_cache(maxsize=None)
def _kraus(kind, p):
    eye = np.eye(2, dtype=np.complex128)
    x = np.array([[0, 1], [1, 0]], dtype=np.complex128)
    y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
    z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
    if kind == "Depolarizing":
        ops = [math.sqrt(1 - 3 * p / 4) * eye] + [math.sqrt(p / 4) * s for s in (x, y, z)]
    elif kind == "AmplitudeDamping":
        ops = [
            np.array([[1, 0], [0, math.sqrt(1 - p)]], dtype=np.complex128),
            np.array([[0, math.sqrt(p)], [0, 0]], dtype=np.complex128),
        ]
    elif kind == "PhaseDamping":
        ops = [
            np.array([[1, 0], [0, math.sqrt(1 - p)]], dtype=np.complex128),
            np.array([[0, 0], [0, math.sqrt(p)]], dtype=np.complex128),
        ]
    else:  # BitFlip
        ops = [math.sqrt(1 - p) * eye, math.sqrt(p) * x]
    ops = tuple(ops)
    for k in ops:
        k.setflags(write=False)
    return ops


@dataclass
class QuantumLayerParams:
    """Trainable angles and structure of one variational quantum layer.

    ``theta`` has shape ``[len(basis_set), depth, n_qubits]``.  The basis and
    observable sets follow the depth rule (``{RZ}``/``{Z}`` for depth 1, all
    three otherwise) unless ``bases``/``observables`` override them.
    """

    n_qubits: int
    depth: int
    theta: np.ndarray
    bases: tuple | None = None
    observables: tuple | None = None
    _program: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise CapacityError(f"{self.n_qubits} qubits outside 1..{MAX_QUBITS}")
        if self.depth < 1:
            raise ValidationError("circuit depth must be >= 1")
        if self.bases is not None:
            self.bases = tuple(self.bases)
            if not self.bases or any(b not in ROTATIONS for b in self.bases):
                raise ValidationError(f"bad rotation bases {self.bases}")
        if self.observables is not None:
            self.observables = tuple(self.observables)
            if not self.observables or any(o not in PAULIS for o in self.observables):
                raise ValidationError(f"bad observables {self.observables}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = (len(self.basis_set), self.depth, self.n_qubits)
        if self.theta.shape != expected:
            raise ValidationError(f"theta shape {self.theta.shape}, expected {expected}")
        self._program = _program(self.n_qubits, self.depth, self.basis_set)

    @classmethod
    def init(cls, n_qubits, depth, rng, bases=None, observables=None):
        n_bases = len(bases) if bases is not None else len(_default_bases(depth))
        theta = rng.uniform(0.0, 2 * math.pi, size=(n_bases, depth, n_qubits))
        return cls(n_qubits, depth, theta, bases, observables)

    @property
    def basis_set(self):
        return self.bases if self.bases is not None else _default_bases(self.depth)

    @property
    def observable_set(self):
        if self.observables is not None:
            return self.observables
        return ("Z",) if self.depth == 1 else PAULIS

    @property
    def width(self):
        return self.n_qubits * len(self.observable_set)

    @property
    def structure(self):
        return (self.n_qubits, self.depth, self.basis_set, self.observable_set)

    def with_theta(self, theta):
        return QuantumLayerParams(self.n_qubits, self.depth, theta, self.bases, self.observables)


def _default_bases(depth):
    return ("RZ",) if depth == 1 else ROTATIONS


# ---------------------------------------------------------------------------
# Circuit program: a flat list of rotation slots and entangler steps
# ---------------------------------------------------------------------------
#
# Angle column layout per basis block r (n = qubits, L = depth):
#   [embedding x_0..x_{n-1}] [theta[r, 0, :]] ... [theta[r, L-1, :]]
# A rotation op is (kind, qubit, column); an entangler op is None.


@lru_cache(maxsize=None)
def _program(n, depth, bases):
    ops = []
    col = 0
    for kind in bases:
        for q in range(n):
            ops.append((kind, q, col))
            col += 1
        for _ in range(depth):
            for q in range(n):
                ops.append((kind, q, col))
                col += 1
            ops.append(None)
    return tuple(ops)


def _n_columns(params):
    return len(params.basis_set) * params.n_qubits * (1 + params.depth)


def _embed_columns(params):
    n, L = params.n_qubits, params.depth
    block = n * (1 + L)
    return np.array([[r * block + q for q in range(n)] for r in range(len(params.basis_set))])


def _theta_columns(params):
    n, L = params.n_qubits, params.depth
    block = n * (1 + L)
    cols = np.empty(params.theta.shape, dtype=np.intp)
    for r in range(len(params.basis_set)):
        for l in range(L):
            cols[r, l] = r * block + n * (1 + l) + np.arange(n)
    return cols


def _angle_matrix(x, params):
    batch = x.shape[0]
    angles = np.empty((batch, _n_columns(params)))
    emb = _embed_columns(params)
    for r in range(emb.shape[0]):
        angles[:, emb[r]] = x
    angles[:, _theta_columns(params).ravel()] = params.theta.ravel()
    return angles


# ---------------------------------------------------------------------------
# Batched kernels
# ---------------------------------------------------------------------------


def _rotate(states, n, kind, qubit, angles):
    """Apply a rotation with per-row angles to ``states`` [B, 2**n]."""
    batch = states.shape[0]
    view = states.reshape(batch, 1 << (n - 1 - qubit), 2, 1 << qubit)
    a0 = view[:, :, 0, :]
    a1 = view[:, :, 1, :]
    half = np.asarray(angles, dtype=np.float64).reshape(-1, 1, 1) / 2
    c = np.cos(half)
    s = np.sin(half)
    out = np.empty_like(view)
    if kind == "RX":
        out[:, :, 0, :] = c * a0 - 1j * s * a1
        out[:, :, 1, :] = c * a1 - 1j * s * a0
    elif kind == "RY":
        out[:, :, 0, :] = c * a0 - s * a1
        out[:, :, 1, :] = s * a0 + c * a1
    else:
        out[:, :, 0, :] = (c - 1j * s) * a0
        out[:, :, 1, :] = (c + 1j * s) * a1
    return out.reshape(batch, -1)


@lru_cache(maxsize=None)
def _cnot_perm(n, control, target):
    idx = np.arange(1 << n)
    perm = idx ^ (((idx >> control) & 1) << target)
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=None)
def _chain_perm(n):
    """Composite permutation of CNOT(0,1), CNOT(1,2), ... applied in order."""
    perm = np.arange(1 << n)
    for i in range(n - 1):
        perm = perm[_cnot_perm(n, i, i + 1)]
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=None)
def _pauli_tables(n):
    idx = np.arange(1 << n)
    bits = (idx[None, :] >> np.arange(n)[:, None]) & 1  # [n, d]
    flip = idx[None, :] ^ (1 << np.arange(n))[:, None]
    z_sign = 1.0 - 2.0 * bits
    y_phase = np.where(bits == 0, -1j, 1j)
    for a in (bits, flip, z_sign, y_phase):
        a.setflags(write=False)
    return flip, z_sign, y_phase


def _rowsum(a):
    """Sum over the last axis (a power of two) by a fixed halving tree.

    Every row is reduced with the same sequence of elementwise additions, so a
    row's result does not depend on how many other rows share the array.
    """
    while a.shape[-1] > 1:
        h = a.shape[-1] // 2
        a = a[..., :h] + a[..., h:]
    return a[..., 0]


def _expvals(states, n, kinds):
    """Single-qubit Pauli expectations, kind-major then qubit-minor."""
    flip, z_sign, _ = _pauli_tables(n)
    bit_sign = -z_sign  # -1 where the qubit is 0, +1 where it is 1
    re, im = states.real, states.imag
    out = []
    for kind in kinds:
        if kind == "Z":
            probs = re * re + im * im
            out.append(_rowsum(probs[:, None, :] * z_sign[None]))
            continue
        cols = []
        for q in range(n):
            pr, pi = re[:, flip[q]], im[:, flip[q]]
            if kind == "X":
                # Re(conj(a) b)
                cols.append(_rowsum(re * pr + im * pi))
            else:
                # Y b = s * i * b_flip with s = -1 on |0>, +1 on |1>
                cols.append(_rowsum(bit_sign[q] * (im * pr - re * pi)))
        out.append(np.stack(cols, axis=1))
    return np.clip(np.concatenate(out, axis=1), -1.0, 1.0)


def _evolve(states, n, program, angles, start=0):
    chain = _chain_perm(n)
    for op in program[start:]:
        if op is None:
            states = states[:, chain]
        else:
            kind, q, col = op
            states = _rotate(states, n, kind, q, angles[:, col])
    return states


def _zero_states(batch, n):
    states = np.zeros((batch, 1 << n), dtype=np.complex128)
    states[:, 0] = 1.0
    return states


def _check_inputs(x, params):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x.reshape(1, -1) if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != params.n_qubits:
        raise ValidationError(
            f"inputs of shape {x.shape} do not match {params.n_qubits} qubits"
        )
    if not np.all(np.isfinite(x2)):
        raise ValidationError("non-finite circuit inputs")
    return x2, squeeze


def run_circuit_batch(x, params: QuantumLayerParams):
    """Expectations for every row of ``x`` [B, n] as one batch of circuits."""
    x, _ = _check_inputs(x, params)
    angles = _angle_matrix(x, params)
    n = params.n_qubits
    states = _evolve(_zero_states(x.shape[0], n), n, params._program, angles)
    return _expvals(states, n, params.observable_set)


def run_circuit(inputs, params: QuantumLayerParams):
    """Prepare ``prod_R V(theta_R) S_R(inputs) |0...0>`` and measure.

    Returns one expectation per observable, ordered basis-major then
    qubit-minor.  A 2-D ``inputs`` array runs each row as its own circuit.
    """
    x, squeeze = _check_inputs(inputs, params)
    out = run_circuit_batch(x, params)
    return out[0] if squeeze else out


def _shift_grad_angles(angles, n, program, kinds, cotangent):
    """d(cotangent . expvals)/d(angle column) for every row, by parameter shift."""
    batch = angles.shape[0]
    grads = np.zeros_like(angles)
    doubled = np.concatenate([angles, angles])
    cot2 = np.concatenate([cotangent, cotangent])
    chain = _chain_perm(n)
    states = _zero_states(batch, n)
    for pos, op in enumerate(program):
        if op is None:
            states = states[:, chain]
            continue
        kind, q, col = op
        shifted = np.concatenate([
            _rotate(states, n, kind, q, angles[:, col] + _HALF_PI),
            _rotate(states, n, kind, q, angles[:, col] - _HALF_PI),
        ])
        shifted = _evolve(shifted, n, program, doubled, start=pos + 1)
        f = np.sum(_expvals(shifted, n, kinds) * cot2, axis=1)
        grads[:, col] = 0.5 * (f[:batch] - f[batch:])
        states = _rotate(states, n, kind, q, angles[:, col])
    return grads


@lru_cache(maxsize=None)
def _inverse_chain(n):
    inv = np.argsort(_chain_perm(n))
    inv.setflags(write=False)
    return inv


def _apply_pauli(states, n, kind, qubit):
    flip, z_sign, y_phase = _pauli_tables(n)
    if kind == "Z":
        return states * z_sign[qubit]
    partner = states[:, flip[qubit]]
    return partner * y_phase[qubit] if kind == "Y" else partner


def _weighted_observable(states, n, kinds, cotangent):
    """``sum_j c_j O_j |psi>`` for per-row cotangents ``c`` [B, len(kinds)*n]."""
    out = np.zeros_like(states)
    for k, kind in enumerate(kinds):
        for q in range(n):
            out += cotangent[:, k * n + q, None] * _apply_pauli(states, n, kind, q)
    return out


_GENERATOR = {"RX": "X", "RY": "Y", "RZ": "Z"}


def _sweep_grad_angles(angles, n, program, kinds, cotangent):
    """Same quantity as :func:`_shift_grad_angles`, computed in one reverse sweep.

    With ``lam = U_after^dagger H U_after |psi_after>`` the two shifted
    expectations of a rotation about ``sigma`` satisfy
    ``f(phi + pi/2) - f(phi - pi/2) = 2 Im <lam| sigma |psi_after>``, so each
    gradient entry costs one inner product instead of two suffix simulations.
    """
    psi = _evolve(_zero_states(angles.shape[0], n), n, program, angles)
    lam = _weighted_observable(psi, n, kinds, cotangent)
    grads = np.zeros_like(angles)
    inv_chain = _inverse_chain(n)
    for op in reversed(program):
        if op is None:
            psi = psi[:, inv_chain]
            lam = lam[:, inv_chain]
            continue
        kind, q, col = op
        gen = _apply_pauli(psi, n, _GENERATOR[kind], q)
        grads[:, col] = np.sum(lam.conj() * gen, axis=1).imag
        psi = _rotate(psi, n, kind, q, -angles[:, col])
        lam = _rotate(lam, n, kind, q, -angles[:, col])
    return grads


GRAD_METHODS = {"shift": _shift_grad_angles, "sweep": _sweep_grad_angles}


def parameter_shift_grad(inputs, params: QuantumLayerParams, seed_cotangent, method="shift"):
    """Vector-Jacobian product of :func:`run_circuit` by the parameter-shift rule.

    Every rotation, embedding or trainable, is evaluated at ``phi +/- pi/2``;
    embedding gradients are summed over the bases that share an input.
    Returns ``(grad_inputs, grad_theta)``; for 2-D inputs ``grad_theta`` is
    accumulated over rows.

    ``method="shift"`` simulates both shifted circuits per angle;
    ``method="sweep"`` evaluates their difference in closed form (see
    :func:`_sweep_grad_angles`).  Both return the same numbers to rounding.
    """
    x, squeeze = _check_inputs(inputs, params)
    cot = np.asarray(seed_cotangent, dtype=np.float64).reshape(x.shape[0], -1)
    if cot.shape[1] != params.width:
        raise ValidationError(f"cotangent width {cot.shape[1]} != {params.width}")
    angles = _angle_matrix(x, params)
    if method not in GRAD_METHODS:
        raise ValidationError(f"unknown gradient method {method!r}")
    dangles = GRAD_METHODS[method](
        angles, params.n_qubits, params._program, params.observable_set, cot
    )
    dx = dangles[:, _embed_columns(params)].sum(axis=1)
    dtheta = dangles[:, _theta_columns(params)].sum(axis=0)
    return (dx[0] if squeeze else dx), dtheta


# ---------------------------------------------------------------------------
# Single-instance API
# ---------------------------------------------------------------------------


def _check_qubit(q, n):
    if not 0 <= q < n:
        raise StructuralError(f"qubit {q} out of range for {n} qubits")


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    n = state.n_qubits
    _check_qubit(gate.target, n)
    amps = state.amplitudes.reshape(1, -1)
    if gate.kind == "CNOT":
        _check_qubit(gate.control, n)
        out = amps[:, _cnot_perm(n, gate.control, gate.target)]
    else:
        out = _rotate(amps, n, gate.kind, gate.target, np.array([gate.angle]))
    return StateVector(n, out[0])


def expectation(state: StateVector, obs: Observable) -> float:
    _check_qubit(obs.qubit, state.n_qubits)
    vals = _expvals(state.amplitudes.reshape(1, -1), state.n_qubits, (obs.kind,))
    return float(vals[0, obs.qubit])


# ---------------------------------------------------------------------------
# Density matrices and noise
# ---------------------------------------------------------------------------


def _apply_1q_rows(rho, n, qubit, mats):
    """Left-multiply the ket index of ``rho`` [B, d, d] by 2x2 ``mats`` [B|1, 2, 2]."""
    batch, d, _ = rho.shape
    view = rho.reshape(batch, 1 << (n - 1 - qubit), 2, 1 << qubit, d)
    out = np.einsum("bij,bljrc->blirc", np.broadcast_to(mats, (batch, 2, 2)), view)
    return out.reshape(batch, d, d)


def _conjugate(rho, n, qubit, mats):
    """``K rho K^dagger`` for a single-qubit operator on ``qubit``."""
    rho = _apply_1q_rows(rho, n, qubit, mats)
    rho = np.conj(np.swapaxes(rho, 1, 2))
    rho = _apply_1q_rows(rho, n, qubit, mats)
    return np.conj(np.swapaxes(rho, 1, 2))


def _rotation_mats(kind, angles):
    half = np.asarray(angles, dtype=np.float64) / 2
    c, s = np.cos(half), np.sin(half)
    mats = np.zeros((half.size, 2, 2), dtype=np.complex128)
    if kind == "RX":
        mats[:, 0, 0] = mats[:, 1, 1] = c
        mats[:, 0, 1] = mats[:, 1, 0] = -1j * s
    elif kind == "RY":
        mats[:, 0, 0] = mats[:, 1, 1] = c
        mats[:, 0, 1] = -s
        mats[:, 1, 0] = s
    else:
        mats[:, 0, 0] = c - 1j * s
        mats[:, 1, 1] = c + 1j * s
    return mats


def _superop(kraus):
    """``S[i', j', i, j] = sum_k K[i', i] conj(K[j', j])`` for a one-qubit channel."""
    return sum(np.einsum("pi,qj->pqij", k, np.conj(k)) for k in kraus)


def _channel(rho, n, qubit, kraus):
    """Apply ``sum_k K rho K^dagger`` on ``qubit`` as one contraction over its ket/bra bits."""
    batch, d, _ = rho.shape
    hi, lo = 1 << (n - 1 - qubit), 1 << qubit
    view = rho.reshape(batch, hi, 2, lo, hi, 2, lo)
    out = np.einsum("pqij,baicejf->bapceqf", _superop(kraus), view, optimize=True)
    return out.reshape(batch, d, d)


def apply_channel(rho: DensityMatrix, ch: NoiseChannel, qubit: int) -> DensityMatrix:
    _check_qubit(qubit, rho.n_qubits)
    out = _channel(rho.entries[None], rho.n_qubits, qubit, ch.kraus)
    return DensityMatrix(rho.n_qubits, out[0])


def _density_expvals(rho, n, kinds):
    flip, z_sign, y_phase = _pauli_tables(n)
    diag = np.einsum("bii->bi", rho).real
    out = []
    idx = np.arange(1 << n)
    for kind in kinds:
        if kind == "Z":
            out.append(np.sum(diag[:, None, :] * z_sign[None], axis=2))
            continue
        cols = []
        for q in range(n):
            # tr(rho P) = sum_b rho[flip(b), b] * P[b, flip(b)]
            elems = rho[:, flip[q], idx]
            if kind == "Y":
                elems = elems * y_phase[q]
            cols.append(elems.sum(axis=1).real)
        out.append(np.stack(cols, axis=1))
    return np.clip(np.concatenate(out, axis=1), -1.0, 1.0)


def _reduced_pure(psi, n, q):
    """One-qubit reduced density matrices ``[B, 2, 2]`` of pure states ``[B, 2**n]``."""
    v = psi.reshape(psi.shape[0], 1 << (n - 1 - q), 2, 1 << q)
    return np.einsum("baic,bajc->bij", v, np.conj(v))


def _reduced_mixed(rho, n, q):
    hi, lo = 1 << (n - 1 - q), 1 << q
    v = rho.reshape(rho.shape[0], hi, 2, lo, hi, 2, lo)
    return np.einsum("baicajc->bij", v)


def _qubit_expvals(r, kind):
    if kind == "Z":
        return (r[:, 0, 0] - r[:, 1, 1]).real
    if kind == "X":
        return 2.0 * r[:, 0, 1].real
    return -2.0 * r[:, 0, 1].imag


def run_noisy_batch(x, params: QuantumLayerParams, noise: NoiseChannel):
    """Density-matrix execution with ``noise`` on every qubit after each entangler.

    Measurements are one-qubit Paulis and nothing after the last entangler couples
    qubits, so from there on each qubit is followed through its own 2x2 reduced
    state.  With a single entangler the full density matrix is never formed.
    """
    n = params.n_qubits
    if n > MAX_NOISY_QUBITS:
        raise CapacityError(f"noisy simulation limited to {MAX_NOISY_QUBITS} qubits, got {n}")
    x, _ = _check_inputs(x, params)
    if x.shape[0] > NOISY_CHUNK:
        return np.concatenate([run_noisy_batch(x[lo : lo + NOISY_CHUNK], params, noise)
                               for lo in range(0, x.shape[0], NOISY_CHUNK)])
    angles = _angle_matrix(x, params)
    program = params._program
    kraus = noise.kraus
    first = program.index(None)
    last = len(program) - 1 - program[::-1].index(None)
    # Everything up to the first entangler is noiseless, so it runs as a pure state.
    psi = _evolve(_zero_states(x.shape[0], n), n, program[: first + 1], angles)
    if first == last:
        reduced = [_reduced_pure(psi, n, q) for q in range(n)]
    else:
        rho = psi[:, :, None] * np.conj(psi[:, None, :])
        chain = _chain_perm(n)
        for q in range(n):
            rho = _channel(rho, n, q, kraus)
        for pos in range(first + 1, last + 1):
            op = program[pos]
            if op is None:
                rho = rho[:, chain][:, :, chain]
                if pos != last:  # the last layer's noise is applied per qubit below
                    for q in range(n):
                        rho = _channel(rho, n, q, kraus)
            else:
                kind, q, col = op
                rho = _conjugate(rho, n, q, _rotation_mats(kind, angles[:, col]))
        reduced = [_reduced_mixed(rho, n, q) for q in range(n)]
    cols = {}
    for q in range(n):
        r = _channel(reduced[q], 1, 0, kraus)
        for op in program[last + 1 :]:
            kind, oq, col = op
            if oq == q:
                r = _conjugate(r, 1, 0, _rotation_mats(kind, angles[:, col]))
        for kind in params.observable_set:
            cols[kind, q] = _qubit_expvals(r, kind)
    out = np.stack([cols[kind, q] for kind in params.observable_set for q in range(n)], axis=1)
    return np.clip(out, -1.0, 1.0)


def run_noisy_circuit(inputs, params: QuantumLayerParams, noise: NoiseChannel):
    x, squeeze = _check_inputs(inputs, params)
    out = run_noisy_batch(x, params, noise)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Parallel batch execution
# ---------------------------------------------------------------------------


def _map_chunks(fn, total, workers):
    bounds = [(lo, min(lo + CHUNK, total)) for lo in range(0, total, CHUNK)]
    if workers <= 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def execute(x, params: QuantumLayerParams, workers=None, noise: NoiseChannel | None = None):
    """Run every row of ``x`` through the same circuit, in fixed-size chunks.

    Chunking is independent of ``workers``, so output is bitwise identical
    for any worker count.  Without an explicit ``noise`` the channel set by
    :func:`noisy` (if any) is used.
    """
    x, _ = _check_inputs(x, params)
    workers = default_workers() if workers is None else workers
    noise = _active_noise.get() if noise is None else noise
    if x.shape[0] == 0:
        return np.zeros((0, params.width))
    if noise is None:
        fn = lambda lo, hi: run_circuit_batch(x[lo:hi], params)  # noqa: E731
    else:
        fn = lambda lo, hi: run_noisy_batch(x[lo:hi], params, noise)  # noqa: E731
    return np.concatenate(_map_chunks(fn, x.shape[0], workers))


def execute_grad(x, params: QuantumLayerParams, cotangent, workers=None, method=None):
    """Chunked :func:`parameter_shift_grad` with a deterministic reduction order."""
    x, _ = _check_inputs(x, params)
    workers = default_workers() if workers is None else workers
    method = _grad_method.get() if method is None else method
    cot = np.asarray(cotangent, dtype=np.float64).reshape(x.shape[0], -1)
    if x.shape[0] == 0:
        return np.zeros_like(x), np.zeros_like(params.theta)
    parts = _map_chunks(
        lambda lo, hi: parameter_shift_grad(x[lo:hi], params, cot[lo:hi], method),
        x.shape[0],
        workers,
    )
    dx = np.concatenate([p[0] for p in parts])
    dtheta = np.zeros_like(params.theta)
    for _, dt in parts:
        dtheta += dt
    return dx, dtheta


def batch_execute(instances, workers=None):
    """Evaluate a list of ``(inputs, params)`` pairs sharing one circuit structure.

    Each instance gets its own angle row; rows are evaluated in fixed-size
    vectorized chunks and returned in input order.
    """
    instances = list(instances)
    if not instances:
        return []
    structure = instances[0][1].structure
    for _, p in instances:
        if p.structure != structure:
            raise ValidationError("batch_execute needs instances with identical circuit structure")
    x = np.stack([_check_inputs(inp, p)[0][0] for inp, p in instances])
    theta = np.stack([p.theta for _, p in instances])
    workers = default_workers() if workers is None else workers
    params0 = instances[0][1]
    angles = np.concatenate([
        _angle_matrix(x[i : i + 1], params0.with_theta(theta[i])) for i in range(len(instances))
    ])
    n = params0.n_qubits

    def run(lo, hi):
        states = _evolve(_zero_states(hi - lo, n), n, params0._program, angles[lo:hi])
        return _expvals(states, n, params0.observable_set)

    out = np.concatenate(_map_chunks(run, len(instances), workers))
    return [row for row in out]
