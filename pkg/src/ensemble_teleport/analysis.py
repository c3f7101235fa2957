"""End-to-end analyses: preparation check, teleportation, process tomography, rate budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import qcore, simulator, tomography
from .protocol import SIX_TARGETS, TargetState
from .simulator import NoiseConfig, RunSummary, TimingConfig
from .tomography import SETTINGS, FrequencyData, ReconstructionReport, TomoDataset


class InsufficientData(RuntimeError):
    pass


@dataclass
class StateResult:
    target: TargetState
    dataset: TomoDataset
    report: ReconstructionReport
    fidelity: float
    fidelity_std: float | None = None

    @property
    def bloch(self) -> qcore.BlochVector:
        return qcore.bloch_vector(self.report.estimate)


@dataclass
class ResultsBundle:
    kind: str
    summary: RunSummary | None = None
    prepared: dict[TargetState, StateResult] = field(default_factory=dict)
    teleported: dict[TargetState, StateResult] = field(default_factory=dict)
    chi: ReconstructionReport | None = None
    process_fidelity: float | None = None
    budget: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    sweep_rows: list[dict] = field(default_factory=list)

    @property
    def mean_prep_fidelity(self) -> float | None:
        return _mean(r.fidelity for r in self.prepared.values())

    @property
    def mean_teleport_fidelity(self) -> float | None:
        return _mean(r.fidelity for r in self.teleported.values())

    @property
    def mean_target_fidelity(self) -> float | None:
        """Teleported states against the ideal targets rather than the measured references."""
        return _mean(qcore.fidelity(r.report.estimate, t.rho) for t, r in self.teleported.items())

    @property
    def converged(self) -> bool:
        reports = [r.report for r in self.prepared.values()] + [r.report for r in self.teleported.values()]
        if self.chi is not None:
            reports.append(self.chi)
        return all(r.converged for r in reports)


def _mean(values):
    values = list(values)
    return float(np.mean(values)) if values else None


def _fidelity_metric(reference):
    def metric(data):
        return qcore.fidelity(tomography.mle_state(data).estimate, reference)

    return metric


def reconstruct(
    target: TargetState,
    data: TomoDataset,
    reference: np.ndarray,
    bootstrap: int,
    rng: np.random.Generator,
) -> StateResult:
    if data.total_counts == 0:
        raise InsufficientData(f"no tomography counts for target {target.value}")
    report = tomography.mle_state(data)
    fid = qcore.fidelity(report.estimate, reference)
    std = None
    if bootstrap:
        std = tomography.bootstrap_errors(data, _fidelity_metric(reference), bootstrap, rng)
        report.bootstrap_std["fidelity"] = std
    return StateResult(target, data, report, fid, std)


def _bootstrap_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9000 + tag,)))


def prepare(
    schedule: dict[TargetState, int],
    noise: NoiseConfig,
    timing: TimingConfig,
    seed: int,
    bootstrap: int = 0,
    workers: int = 1,
    stream: tuple[int, ...] = (),
) -> ResultsBundle:
    """Remote state preparation followed by immediate readout and state tomography."""
    res = simulator.run_experiment(None, schedule, noise, timing, seed, mode="prepare", workers=workers, stream=stream + (1,))
    rng = _bootstrap_rng(seed, 1)
    bundle = ResultsBundle("prepare", summary=res.summary)
    for t in schedule:
        bundle.prepared[t] = reconstruct(t, res.datasets[t], t.rho, bootstrap, rng)
    return bundle


def teleport(
    schedule: dict[TargetState, int],
    prep_schedule: dict[TargetState, int],
    noise: NoiseConfig,
    timing: TimingConfig,
    seed: int,
    bootstrap: int = 0,
    workers: int = 1,
    records: bool = False,
    stream: tuple[int, ...] = (),
    reference_noise: NoiseConfig | None = None,
) -> ResultsBundle:
    """Full protocol per target; fidelities are taken against the reconstructed prepared states.

    ``reference_noise`` sets the conditions of the preparation run that provides those
    references (defaults to ``noise``).
    """
    bundle = prepare(prep_schedule, reference_noise or noise, timing, seed, bootstrap, workers, stream)
    res = simulator.run_experiment(
        None, schedule, noise, timing, seed, mode="teleport", records=records, workers=workers, stream=stream + (2,)
    )
    bundle.kind = "teleport"
    bundle.summary = res.summary
    bundle.records = res.records
    rng = _bootstrap_rng(seed, 2)
    for t in schedule:
        data = res.datasets[t]
        if data.total_counts == 0:
            raise InsufficientData(f"no heralded photon-4 counts for target {t.value}")
        ref = bundle.prepared[t].report.estimate if t in bundle.prepared else t.rho
        bundle.teleported[t] = reconstruct(t, data, ref, bootstrap, rng)
    bundle.budget = rate_budget(noise, timing, res.summary, bundle.mean_teleport_fidelity)
    return bundle


def process_tomography(
    schedule: dict[TargetState, int],
    prep_schedule: dict[TargetState, int],
    noise: NoiseConfig,
    timing: TimingConfig,
    seed: int,
    bootstrap: int = 0,
    workers: int = 1,
    records: bool = False,
    stream: tuple[int, ...] = (),
    reference_noise: NoiseConfig | None = None,
) -> ResultsBundle:
    missing = [t.value for t in SIX_TARGETS if t not in schedule]
    if missing:
        raise ValueError(f"process tomography needs all six targets; missing {missing}")
    bundle = teleport(schedule, prep_schedule, noise, timing, seed, bootstrap, workers, records, stream, reference_noise)
    bundle.kind = "process-tomo"
    inputs = [t.rho for t in SIX_TARGETS]
    outputs = [bundle.teleported[t].dataset for t in SIX_TARGETS]
    bundle.chi = tomography.mle_process(inputs, outputs)
    bundle.process_fidelity = tomography.process_fidelity(bundle.chi.estimate)
    if bootstrap:
        rng = _bootstrap_rng(seed, 3)

        def metric(sample):
            return tomography.process_fidelity(tomography.mle_process(inputs, sample).estimate)

        bundle.chi.bootstrap_std["process_fidelity"] = tomography.bootstrap_errors(outputs, metric, bootstrap, rng)
    return bundle


def rate_budget(noise: NoiseConfig, timing: TimingConfig, summary: RunSummary | None = None, fidelity: float | None = None) -> dict:
    ab, aa, bb = simulator.bsm_contributions(noise)
    regime = simulator.regime_check(noise)
    wait = simulator.mean_entanglement_wait(noise, timing)
    out = {
        "bsm_contributions": {"AB": ab, "AA": aa, "BB": bb},
        "success_probability": simulator.success_probability(noise),
        "regime": {
            "P_A/P_B": regime.ratio_A_B,
            "P_B/eta_A": regime.ratio_B_eta,
            "threshold": regime.threshold,
            "pass_P_A<<P_B": regime.pass_A_B,
            "pass_P_B<<eta_A": regime.pass_B_eta,
        },
        "mean_entanglement_wait_us": wait,
        "memory_lifetime_us": timing.lifetime_tau,
        "memory_margin": simulator.memory_margin(noise, timing) if math.isfinite(wait) else 0.0,
        "window_entanglement_probability": simulator.window_entanglement_probability(noise, timing),
    }
    if summary is not None:
        out["mc_success_probability"] = summary.estimated_success_prob
        out["mc_mean_entanglement_wait_us"] = summary.mean_prep_time if summary.n_pairs_B else None
        out["mc_herald_breakdown"] = dict(zip(("AB", "AA", "BB"), summary.herald_breakdown))
        out["p23"] = summary.p23
        out["p234"] = summary.p234
        eta_her = None
        if summary.p23 > 0 and noise.eta_B > 0:
            eta_her = simulator.heralding_efficiency(summary, noise)
        out["heralding_efficiency"] = eta_her
        if fidelity is not None and eta_her is not None:
            out["heralded_fidelity"] = simulator.heralded_fidelity(fidelity, eta_her)
    return out


# ------------------------------------------------------------- exact expectations


def expected_frequencies(target: TargetState, noise: NoiseConfig, timing: TimingConfig, mode: str = "teleport") -> FrequencyData:
    """Infinite-statistics tomography frequencies per attempt."""
    counts = {s: [0.0, 0.0] for s in SETTINGS}
    if mode == "teleport":
        keys, probs = simulator.attempt_distribution(target, noise, timing)
        for (src, _o, d4, s, ph4, _p), p in zip(keys, probs):
            if src != "NONE" and d4:
                counts[s][ph4] += p
    else:
        keys, probs = simulator.preparation_distribution(target, noise, timing)
        for (click, s, out), p in zip(keys, probs):
            if click:
                counts[s][out] += p
    return FrequencyData({s: tuple(v) for s, v in counts.items()})


def expected_figures(noise: NoiseConfig, timing: TimingConfig, reference_noise: NoiseConfig | None = None) -> dict:
    """Infinite-count prepared/teleported fidelities, F_proc and heralding figures."""
    prep, tele, fids, prep_f = {}, {}, [], []
    for t in SIX_TARGETS:
        prep[t] = tomography.mle_state(expected_frequencies(t, reference_noise or noise, timing, "prepare")).estimate
        tele[t] = tomography.mle_state(expected_frequencies(t, noise, timing, "teleport")).estimate
        fids.append(qcore.fidelity(prep[t], tele[t]))
        prep_f.append(qcore.fidelity(prep[t], t.rho))
    scale = 1e9
    outputs = [
        TomoDataset({s: tuple(round(scale * x) for x in v) for s, v in expected_frequencies(t, noise, timing).counts.items()})
        for t in SIX_TARGETS
    ]
    chi = tomography.mle_process([t.rho for t in SIX_TARGETS], outputs).estimate
    p23 = p234 = 0.0
    keys, probs = simulator.attempt_distribution(TargetState.UP, noise, timing)
    for (src, _o, d4, *_), p in zip(keys, probs):
        if src != "NONE":
            p23 += p
            p234 += p * d4
    eta_her = p234 / (p23 * noise.eta_B) if p23 > 0 and noise.eta_B > 0 else float("nan")
    f_mean = float(np.mean(fids))
    return {
        "prep_fidelity": float(np.mean(prep_f)),
        "teleport_fidelity": f_mean,
        "teleport_fidelity_ideal": float(np.mean([qcore.fidelity(tele[t], t.rho) for t in SIX_TARGETS])),
        "per_state": fids,
        "process_fidelity": tomography.process_fidelity(chi),
        "heralding_efficiency": eta_her,
        "heralded_fidelity": f_mean * eta_her,
    }
