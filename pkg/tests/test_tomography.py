import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensemble_teleport import qcore, tomography as tomo
from ensemble_teleport.protocol import SIX_TARGETS, TargetState
from ensemble_teleport.tomography import SETTINGS, TomoDataset

from strategies import density_matrices, seeds, unitaries

INPUTS = [t.rho for t in SIX_TARGETS]


def test_dataset_validation_and_arithmetic():
    with pytest.raises(ValueError):
        TomoDataset({"XY": (1, 1)})
    with pytest.raises(ValueError):
        TomoDataset({"HV": (-1, 1)})
    a = TomoDataset({"HV": (3, 1)})
    b = TomoDataset({"HV": (1, 1), "RL": (2, 0)})
    s = a + b
    assert s.counts == {"HV": (4, 2), "RL": (2, 0)}
    assert s.total_counts == 8 and not s.is_complete()


@given(density_matrices())
def test_linear_inversion_exact(rho):
    assert np.allclose(tomo.linear_inversion(tomo.exact_dataset(rho)), rho)


def test_linear_inversion_needs_all_settings():
    with pytest.raises(tomo.TomographyError):
        tomo.linear_inversion(TomoDataset({"HV": (5, 5)}))


@pytest.mark.parametrize("target", SIX_TARGETS)
def test_mle_recovers_pure_targets_from_exact_data(target):
    rep = tomo.mle_state(tomo.exact_dataset(target.rho, 1e4))
    assert rep.converged
    assert qcore.fidelity(rep.estimate, target.rho) > 1 - 1e-6


@given(seeds, st.integers(min_value=1, max_value=300))
def test_mle_output_is_always_physical(seed, n):
    rng = np.random.default_rng(seed)
    rho = qcore.random_density_matrix(rng)
    rep = tomo.mle_state(tomo.simulate_counts(rho, n, rng))
    assert qcore.is_density_matrix(rep.estimate, tol=1e-9)
    assert all(b >= a - 1e-9 for a, b in zip(rep.history, rep.history[1:]))


@given(seeds)
def test_mle_likelihood_beats_linear_inversion_projection(seed):
    rng = np.random.default_rng(seed)
    data = tomo.simulate_counts(qcore.random_density_matrix(rng), 200, rng)
    mle = tomo.mle_state(data)
    lin = tomo.project_psd(tomo.linear_inversion(data))
    assert mle.log_likelihood >= tomo.state_log_likelihood(lin, data) - 1e-6


def test_mle_with_no_counts_returns_mixed_state():
    rep = tomo.mle_state(TomoDataset({s: (0, 0) for s in SETTINGS}))
    assert np.allclose(rep.estimate, qcore.MAXIMALLY_MIXED)


def test_state_gradient_matches_finite_differences(rng):
    data = tomo.simulate_counts(TargetState.R.rho, 500, rng)
    x = rng.normal(size=4)
    g = tomo.state_gradient(x, data)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (tomo.state_log_likelihood(tomo.params_to_rho(x + e), data) - tomo.state_log_likelihood(tomo.params_to_rho(x - e), data)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-4)


@given(density_matrices())
def test_cholesky_parameter_round_trip(rho):
    rho = 0.98 * rho + 0.01 * np.eye(2)  # full rank
    assert np.allclose(tomo.params_to_rho(tomo.t_to_params(tomo.rho_to_t(rho))), rho, atol=1e-7)


def test_dataset_text_round_trip():
    data = {t.value: tomo.simulate_counts(t.rho, 50, np.random.default_rng(1)) for t in SIX_TARGETS}
    assert tomo.read_datasets(tomo.write_datasets(data)) == data


def test_report_json_round_trip():
    rep = tomo.mle_state(tomo.exact_dataset(TargetState.PLUS.rho, 100))
    back = tomo.ReconstructionReport.from_dict(json.loads(tomo.report_to_json(rep)))
    assert np.allclose(back.estimate, rep.estimate, atol=1e-11)
    assert back.converged == rep.converged


def _outputs(chi, n=1e6):
    return [tomo.exact_dataset(tomo.apply_chi(chi, r), n) for r in INPUTS]


@pytest.mark.parametrize(
    "chi, index",
    [(tomo.IDENTITY_CHI, 0), (tomo.SIGMA_Z_CHI, 3), (tomo.unitary_chi(qcore.SX), 1)],
)
def test_process_mle_recovers_unitaries(chi, index):
    rep = tomo.mle_process(INPUTS, _outputs(chi))
    assert rep.estimate[index, index].real > 0.999
    assert tomo.is_trace_preserving(rep.estimate)


def test_process_mle_depolarizing_and_fidelity():
    p = 0.8
    chi = p * tomo.IDENTITY_CHI + (1 - p) * tomo.DEPOLARIZING_CHI
    rep = tomo.mle_process(INPUTS, _outputs(chi))
    assert np.allclose(rep.estimate, chi, atol=1e-4)
    assert tomo.process_fidelity(rep.estimate) == pytest.approx(0.85, abs=1e-4)


@given(unitaries())
def test_unitary_chi_acts_like_the_unitary(u):
    chi = tomo.unitary_chi(u)
    assert tomo.is_trace_preserving(chi)
    for r in INPUTS:
        assert np.allclose(tomo.apply_chi(chi, r), qcore.apply_unitary(r, u), atol=1e-10)


@given(seeds)
def test_process_mle_output_is_physical_on_noisy_data(seed):
    rng = np.random.default_rng(seed)
    outputs = [tomo.simulate_counts(qcore.random_density_matrix(rng), 40, rng) for _ in INPUTS]
    rep = tomo.mle_process(INPUTS, outputs)
    assert np.linalg.eigvalsh(rep.estimate)[0] > -1e-9
    assert np.isclose(np.trace(rep.estimate).real, 1, atol=1e-8)
    assert tomo.is_trace_preserving(rep.estimate, tol=1e-7)


def test_process_mle_rejects_incomplete_inputs():
    with pytest.raises(tomo.TomographyError):
        tomo.mle_process(INPUTS[:2], _outputs(tomo.IDENTITY_CHI)[:2])


def test_bootstrap_error_scales_like_counting_noise(rng):
    rho = TargetState.PLUS.rho
    metric = lambda d: qcore.fidelity(tomo.mle_state(d).estimate, rho)  # noqa: E731
    small = tomo.bootstrap_errors(tomo.simulate_counts(0.9 * rho + 0.05 * np.eye(2), 100, rng), metric, 100, rng)
    large = tomo.bootstrap_errors(tomo.simulate_counts(0.9 * rho + 0.05 * np.eye(2), 10000, rng), metric, 100, rng)
    assert large < small
    with pytest.raises(ValueError):
        tomo.bootstrap_errors(tomo.exact_dataset(rho, 10), metric, 10, rng)


def test_bootstrap_error_at_small_sample_sizes():
    # a 0.96-fidelity state at ~60 counts per setting: error bars of a few percent
    rng = np.random.default_rng(472)
    rho = TargetState.PLUS.rho
    metric = lambda d: qcore.fidelity(tomo.mle_state(d).estimate, rho)  # noqa: E731
    err = tomo.bootstrap_errors(tomo.simulate_counts(0.92 * rho + 0.04 * np.eye(2), 60, rng), metric, 200, rng)
    assert 0.01 <= err <= 0.04


def test_average_state_fidelity():
    mean, each = tomo.average_state_fidelity([(t.rho, t.rho) for t in SIX_TARGETS])
    assert mean == pytest.approx(1) and len(each) == 6
