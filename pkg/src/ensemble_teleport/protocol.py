"""Noiseless quantum mechanics of the two-node teleportation sequence.

Node A: a write-out photon (1) is entangled with the A spinwave; projecting
photon 1 onto the state orthogonal to the target leaves the spinwave in the
target (remote state preparation). Node B: photon 3 is entangled with the B
spinwave. The A spinwave is read out as photon 2, photons 2 and 3 meet on a
polarizing beam splitter, and a D2/D3 coincidence analysed in the +/- basis
announces Phi+ or Phi-. Phi- is corrected with sigma_z on B.

Two-qubit states are ordered (photon, spinwave); the three-qubit state used
during the Bell measurement is ordered (photon 2, photon 3, spinwave B).
"""

from __future__ import annotations

import enum

import numpy as np

from . import qcore
from .qcore import I2, SZ, StateError


class TargetState(enum.Enum):
    UP = "Up"
    DOWN = "Down"
    PLUS = "Plus"
    MINUS = "Minus"
    R = "R"
    L = "L"

    @property
    def amplitudes(self) -> np.ndarray:
        return _AMPLITUDES[self].copy()

    @property
    def ket(self) -> np.ndarray:
        return self.amplitudes

    @property
    def rho(self) -> np.ndarray:
        return qcore.projector(self.amplitudes)

    @classmethod
    def from_label(cls, label: str) -> "TargetState":
        for t in cls:
            if t.value.lower() == label.strip().lower():
                return t
        raise ValueError(f"unknown target state {label!r}; expected one of {[t.value for t in cls]}")


_AMPLITUDES = {
    TargetState.UP: qcore.KET_UP,
    TargetState.DOWN: qcore.KET_DOWN,
    TargetState.PLUS: qcore.KET_PLUS,
    TargetState.MINUS: qcore.KET_MINUS,
    TargetState.R: qcore.KET_R,
    TargetState.L: qcore.KET_L,
}

#: The six inputs in the order used for tables and process tomography.
SIX_TARGETS = tuple(TargetState)


class BellOutcome(enum.Enum):
    PHI_PLUS = "PhiPlus"
    PHI_MINUS = "PhiMinus"
    NO_HERALD = "NoHerald"

    @property
    def is_herald(self) -> bool:
        return self is not BellOutcome.NO_HERALD


HERALDS = (BellOutcome.PHI_PLUS, BellOutcome.PHI_MINUS)


def make_rsp_pair() -> np.ndarray:
    """Singlet (|H,down> - |V,up>)/sqrt2 between write-out photon 1 and spinwave A."""
    v = qcore.ket([0, 1, -1, 0])
    return np.outer(v, v.conj())


def make_entangled_pair_B(visibility: float = 1.0) -> np.ndarray:
    """|Phi+> between photon 3 and spinwave B.

    ``visibility < 1`` mixes in the dephased state (|H,up><H,up| + |V,down><V,down|)/2.
    """
    phi = np.outer(qcore.PHI_PLUS, qcore.PHI_PLUS.conj())
    if visibility == 1.0:
        return phi
    classical = np.diag([0.5, 0, 0, 0.5]).astype(complex)
    return visibility * phi + (1 - visibility) * classical


def perp_state(target: TargetState | np.ndarray) -> np.ndarray:
    """beta* |H> - alpha* |V>, orthogonal to alpha|H> + beta|V>."""
    a, b = target.amplitudes if isinstance(target, TargetState) else qcore.ket(target)
    return np.array([np.conj(b), -np.conj(a)], dtype=complex)


def project_photon(pair, proj) -> tuple[float, np.ndarray]:
    """Project the photon of a (photon, spinwave) pair onto ``proj``.

    Returns the success probability and the normalized spinwave state.
    """
    pair = np.asarray(pair, dtype=complex)
    p = qcore.projector(proj)
    op = np.kron(p, I2)
    prob = float(np.trace(op @ pair).real)
    if prob < 1e-15:
        raise StateError("conditioning on a zero-probability photon outcome")
    post = op @ pair @ op
    return prob, qcore.partial_trace(post, 1) / prob


def readout_map(spinwave) -> np.ndarray:
    """Spinwave -> retrieved photon polarization (up -> H, down -> V)."""
    return qcore.density_matrix(spinwave)


_PROJ_HH = np.diag([1, 0, 0, 0]).astype(complex)
_PROJ_VV = np.diag([0, 0, 0, 1]).astype(complex)


def bsm_effects(visibility: float = 1.0) -> dict[BellOutcome, np.ndarray]:
    """POVM of the PBS Bell measurement on photons (2, 3).

    Only HH/VV components give a D2-D3 coincidence. With perfect two-photon
    interference the +/- analysis projects onto Phi+/Phi-; distinguishable
    photons (weight ``1 - visibility``) give uncorrelated +/- results.
    """
    dist = 0.5 * (_PROJ_HH + _PROJ_VV)
    e_plus = visibility * np.outer(qcore.PHI_PLUS, qcore.PHI_PLUS.conj()) + (1 - visibility) * dist
    e_minus = visibility * np.outer(qcore.PHI_MINUS, qcore.PHI_MINUS.conj()) + (1 - visibility) * dist
    return {
        BellOutcome.PHI_PLUS: e_plus,
        BellOutcome.PHI_MINUS: e_minus,
        BellOutcome.NO_HERALD: np.eye(4) - e_plus - e_minus,
    }


def pbs_bsm(joint, visibility: float = 1.0) -> dict[BellOutcome, tuple[float, np.ndarray | None]]:
    """Outcome distribution of the PBS Bell measurement.

    ``joint`` is either the 4x4 state of photons (2, 3) or the 8x8 state of
    (photon 2, photon 3, bystander). For the 8x8 form each outcome carries the
    normalized conditional bystander state (``None`` if the outcome is impossible).
    """
    joint = np.asarray(joint, dtype=complex)
    if joint.shape not in ((4, 4), (8, 8)):
        raise StateError(f"pbs_bsm needs a 4x4 or 8x8 state, got {joint.shape}")
    out = {}
    for outcome, eff in bsm_effects(visibility).items():
        if joint.shape == (4, 4):
            p = float(np.trace(eff @ joint).real)
            out[outcome] = (max(p, 0.0), None)
            continue
        m = (np.kron(eff, I2) @ joint).reshape(4, 2, 4, 2)
        cond = np.einsum("iaib->ab", m)
        cond = (cond + cond.conj().T) / 2
        p = float(np.trace(cond).real)
        out[outcome] = (max(p, 0.0), cond / p if p > 1e-15 else None)
    return out


def feed_forward(state_b, outcome: BellOutcome) -> np.ndarray:
    """Identity on Phi+, pi phase on |down> (sigma_z) on Phi-."""
    if outcome is BellOutcome.PHI_PLUS:
        return np.asarray(state_b, dtype=complex)
    if outcome is BellOutcome.PHI_MINUS:
        return qcore.apply_unitary(state_b, SZ)
    raise ValueError("feed_forward requires a heralding outcome")


def teleport_branches(
    photon2,
    pair_3b=None,
    visibility: float = 1.0,
    correct: bool = True,
) -> dict[BellOutcome, tuple[float, np.ndarray | None]]:
    """Run photon 2 through the Bell measurement with the (photon 3, B) pair.

    Returns ``{outcome: (probability, B state)}``; herald branches are
    feed-forward corrected when ``correct`` is true.
    """
    pair_3b = make_entangled_pair_B() if pair_3b is None else pair_3b
    joint = np.kron(np.asarray(photon2, dtype=complex), pair_3b)
    branches = pbs_bsm(joint, visibility)
    if correct:
        for h in HERALDS:
            p, st = branches[h]
            if st is not None:
                branches[h] = (p, feed_forward(st, h))
    return branches


def ideal_teleport(target: TargetState, correct: bool = True) -> dict[BellOutcome, np.ndarray]:
    """B state per herald for the noiseless protocol, starting from remote state preparation."""
    _, spin_a = project_photon(make_rsp_pair(), perp_state(target))
    branches = teleport_branches(readout_map(spin_a), correct=correct)
    return {h: branches[h][1] for h in HERALDS}
