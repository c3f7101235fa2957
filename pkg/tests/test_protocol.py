import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensemble_teleport import protocol, qcore
from ensemble_teleport.protocol import HERALDS, SIX_TARGETS, BellOutcome, TargetState

from strategies import density_matrices, kets


def test_target_labels():
    assert TargetState.from_label("plus") is TargetState.PLUS
    assert TargetState.from_label(" R ") is TargetState.R
    with pytest.raises(ValueError, match="unknown target"):
        TargetState.from_label("Psi")


def test_rsp_pair_is_singlet_with_anticorrelation():
    pair = protocol.make_rsp_pair()
    assert np.allclose(pair, qcore.projector(qcore.PSI_MINUS))
    # photon H <-> spinwave down in any basis
    for t in SIX_TARGETS:
        u = t.ket
        p = qcore.projector(np.kron(u, u))
        assert np.isclose(np.trace(p @ pair).real, 0)


@pytest.mark.parametrize("target", SIX_TARGETS)
def test_remote_state_preparation(target):
    prob, spin = protocol.project_photon(protocol.make_rsp_pair(), protocol.perp_state(target))
    assert np.isclose(prob, 0.5)
    assert np.isclose(qcore.fidelity(spin, target.rho), 1)


@given(kets())
def test_perp_state_is_orthogonal(v):
    assert np.isclose(abs(np.vdot(protocol.perp_state(v), v)), 0, atol=1e-12)


@pytest.mark.parametrize("target", SIX_TARGETS)
def test_ideal_teleport_all_targets_both_heralds(target):
    out = protocol.ideal_teleport(target)
    for h in HERALDS:
        assert qcore.fidelity(out[h], target.rho) > 1 - 1e-12


def test_without_feed_forward_phi_minus_carries_sigma_z():
    out = protocol.ideal_teleport(TargetState.PLUS, correct=False)
    assert np.isclose(qcore.fidelity(out[BellOutcome.PHI_PLUS], TargetState.PLUS.rho), 1)
    assert np.isclose(qcore.fidelity(out[BellOutcome.PHI_MINUS], TargetState.MINUS.rho), 1)


def test_herald_probabilities_ideal():
    branches = protocol.teleport_branches(TargetState.R.rho)
    probs = {o: p for o, (p, _) in branches.items()}
    assert np.isclose(probs[BellOutcome.PHI_PLUS], 0.25)
    assert np.isclose(probs[BellOutcome.PHI_MINUS], 0.25)
    assert np.isclose(probs[BellOutcome.NO_HERALD], 0.5)


@pytest.mark.parametrize("psi", [qcore.PSI_PLUS, qcore.PSI_MINUS])
def test_psi_states_never_herald(psi):
    res = protocol.pbs_bsm(qcore.projector(psi))
    assert res[BellOutcome.NO_HERALD][0] == pytest.approx(1)


@given(st.floats(0, 1))
def test_bsm_effects_form_a_povm(v):
    effects = protocol.bsm_effects(v)
    assert np.allclose(sum(effects.values()), np.eye(4))
    for e in effects.values():
        assert np.linalg.eigvalsh(e)[0] > -1e-12


@given(density_matrices())
def test_branches_sum_to_one_and_states_valid(photon2):
    branches = protocol.teleport_branches(photon2, protocol.make_entangled_pair_B(0.9), visibility=0.8)
    assert np.isclose(sum(p for p, _ in branches.values()), 1)
    for p, st_b in branches.values():
        if st_b is not None:
            assert qcore.is_density_matrix(st_b, tol=1e-9)


def test_distinguishable_photons_give_mixed_output():
    branches = protocol.teleport_branches(TargetState.PLUS.rho, visibility=0.0)
    for h in HERALDS:
        assert np.isclose(qcore.fidelity(branches[h][1], TargetState.PLUS.rho), 0.5)


def test_feed_forward_rejects_no_herald():
    with pytest.raises(ValueError):
        protocol.feed_forward(qcore.MAXIMALLY_MIXED, BellOutcome.NO_HERALD)


def test_pbs_bsm_shape_check():
    with pytest.raises(qcore.StateError):
        protocol.pbs_bsm(np.eye(2) / 2)
