"""Dense qubit / two-qubit state primitives.

Kets and density matrices are plain ``numpy`` complex arrays. The helpers in
this module validate and normalize them; nothing here mutates its inputs.

Basis convention: ``|0> == |H> == |up>`` and ``|1> == |V> == |down>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERM_TOL = 1e-10
TRACE_TOL = 1e-10
EIG_TOL = 1e-10

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)

#: Ordered operator basis sigma_0 = I, sigma_1 = X, sigma_2 = Y, sigma_3 = Z.
PAULIS = np.stack([I2, SX, SY, SZ])

_S2 = 1 / np.sqrt(2)
KET_H = np.array([1, 0], dtype=complex)
KET_V = np.array([0, 1], dtype=complex)
KET_UP = KET_H
KET_DOWN = KET_V
KET_PLUS = np.array([_S2, _S2], dtype=complex)
KET_MINUS = np.array([_S2, -_S2], dtype=complex)
KET_R = np.array([_S2, 1j * _S2], dtype=complex)
KET_L = np.array([_S2, -1j * _S2], dtype=complex)

PHI_PLUS = np.array([_S2, 0, 0, _S2], dtype=complex)
PHI_MINUS = np.array([_S2, 0, 0, -_S2], dtype=complex)
PSI_PLUS = np.array([0, _S2, _S2, 0], dtype=complex)
PSI_MINUS = np.array([0, _S2, -_S2, 0], dtype=complex)

MAXIMALLY_MIXED = I2 / 2


class StateError(ValueError):
    """Raised when an array is not a valid ket, density matrix or operator."""


@dataclass(frozen=True)
class BlochVector:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if self.x**2 + self.y**2 + self.z**2 > 1 + 1e-9:
            raise StateError(f"Bloch vector outside unit ball: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.x**2 + self.y**2 + self.z**2))


def ket(amplitudes) -> np.ndarray:
    """Normalized ket of length 2 or 4."""
    v = np.asarray(amplitudes, dtype=complex).reshape(-1)
    if v.size not in (2, 4):
        raise StateError(f"ket must have 2 or 4 amplitudes, got {v.size}")
    norm = np.linalg.norm(v)
    if norm < 1e-15:
        raise StateError("zero vector cannot be normalized")
    return v / norm


def projector(v) -> np.ndarray:
    v = ket(v)
    return np.outer(v, v.conj())


def density_matrix(m, check: bool = True) -> np.ndarray:
    """Re-Hermitize ``m`` and validate it as a density matrix of dim 2 or 4."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] not in (2, 4):
        raise StateError(f"density matrix must be 2x2 or 4x4, got {m.shape}")
    asym = np.max(np.abs(m - m.conj().T))
    if asym > 1e-8:
        raise StateError(f"matrix is not Hermitian (max asymmetry {asym:.2e})")
    rho = (m + m.conj().T) / 2
    if check:
        tr = np.trace(rho).real
        if abs(tr - 1) > TRACE_TOL:
            raise StateError(f"trace {tr!r} differs from 1")
        lo = np.linalg.eigvalsh(rho)[0]
        if lo < -EIG_TOL:
            raise StateError(f"negative eigenvalue {lo:.3e}")
    return rho


def is_density_matrix(m, tol: float = 1e-10) -> bool:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if np.max(np.abs(m - m.conj().T)) > tol:
        return False
    if abs(np.trace(m).real - 1) > tol:
        return False
    return bool(np.linalg.eigvalsh((m + m.conj().T) / 2)[0] >= -tol)


def _require_qubit(rho, name="rho"):
    if np.shape(rho) != (2, 2):
        raise StateError(f"{name} must be 2x2, got {np.shape(rho)}")


def tensor(a, b) -> np.ndarray:
    """Kronecker product of two qubit states; ``a`` is the slower index."""
    _require_qubit(a, "a")
    _require_qubit(b, "b")
    return np.kron(density_matrix(a), density_matrix(b))


def partial_trace(rho, keep: int) -> np.ndarray:
    """Reduced state of subsystem ``keep`` (0 = first, 1 = second) of a two-qubit state."""
    if keep not in (0, 1):
        raise StateError(f"keep must be 0 or 1, got {keep!r}")
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise StateError(f"partial_trace needs a 4x4 matrix, got {rho.shape}")
    r = rho.reshape(2, 2, 2, 2)
    if keep == 0:
        out = np.einsum("ijkj->ik", r)
    else:
        out = np.einsum("jijk->ik", r)
    return (out + out.conj().T) / 2


def is_unitary(u, tol: float = 1e-10) -> bool:
    u = np.asarray(u)
    return u.ndim == 2 and u.shape[0] == u.shape[1] and np.allclose(
        u.conj().T @ u, np.eye(u.shape[0]), atol=tol, rtol=0
    )


def apply_unitary(rho, u) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    u = np.asarray(u, dtype=complex)
    if u.shape != rho.shape:
        raise StateError(f"unitary shape {u.shape} does not match state {rho.shape}")
    if not is_unitary(u):
        raise StateError("operator is not unitary")
    out = u @ rho @ u.conj().T
    return (out + out.conj().T) / 2


def psd_sqrt(m) -> np.ndarray:
    """Square root of a Hermitian PSD matrix, clamping small negative eigenvalues."""
    w, v = np.linalg.eigh((m + np.conj(m).T) / 2)
    w = np.clip(w, 0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def fidelity(rho1, rho2) -> float:
    """Uhlmann fidelity ``(tr sqrt(sqrt(r1) r2 sqrt(r1)))**2``, clipped to [0, 1]."""
    rho1 = np.asarray(rho1, dtype=complex)
    rho2 = np.asarray(rho2, dtype=complex)
    if rho1.shape != rho2.shape:
        raise StateError(f"dimension mismatch: {rho1.shape} vs {rho2.shape}")
    s = psd_sqrt(rho1)
    inner = s @ rho2 @ s
    w = np.clip(np.linalg.eigvalsh((inner + inner.conj().T) / 2), 0, None)
    f = float(np.sum(np.sqrt(w)) ** 2)
    return min(max(f, 0.0), 1.0)


def bloch_vector(rho) -> BlochVector:
    _require_qubit(rho)
    rho = np.asarray(rho, dtype=complex)
    x, y, z = (float(np.trace(rho @ p).real) for p in PAULIS[1:])
    # clip tiny excursions from finite-precision pure states
    n = np.sqrt(x * x + y * y + z * z)
    if 1 < n <= 1 + 1e-9:
        x, y, z = x / n, y / n, z / n
    return BlochVector(x, y, z)


def from_bloch(r) -> np.ndarray:
    if isinstance(r, BlochVector):
        r = r.as_array()
    x, y, z = r
    return (I2 + x * SX + y * SY + z * SZ) / 2


def measure_projectors(rho, projs, tol: float = 1e-10) -> np.ndarray:
    """Born probabilities ``tr(rho P_i)`` for a complete set of effects."""
    rho = np.asarray(rho, dtype=complex)
    projs = [np.asarray(p, dtype=complex) for p in projs]
    total = sum(projs)
    if total.shape != rho.shape or not np.allclose(total, np.eye(rho.shape[0]), atol=tol, rtol=0):
        raise StateError("projectors do not sum to the identity")
    p = np.array([np.trace(rho @ q).real for q in projs])
    p[(p < 0) & (p > -1e-12)] = 0.0
    return p


def random_density_matrix(rng: np.random.Generator, dim: int = 2, rank: int | None = None) -> np.ndarray:
    """Random mixed state from the Ginibre ensemble."""
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    m = g @ g.conj().T
    return m / np.trace(m).real


def random_ket(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    return ket(rng.normal(size=dim) + 1j * rng.normal(size=dim))
