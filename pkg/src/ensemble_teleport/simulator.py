"""Stochastic trial engine and analytic rate budget.

Timing model. Each experimental cycle opens a detection window of
``window_duration``. Inside it, node A repeats write trials (``trial_A``)
until D1 clicks; the prepared spinwave is held for ``hold_A`` and read out
while node B performs one write trial (``trial_B``). That completes one
teleportation *attempt*; A is then re-prepared. Attempts that would end
after the window closes are lost. A window without a completed preparation
is a NoPrep cycle.

Per attempt the following independent events are drawn:

* D1 click is genuine with probability ``P_A / p_click``; a dark click leaves A
  with a background excitation in a random spinwave state.
* A readout gives the signal photon 2 (``eta_A``) and, independently, a noise
  photon of random polarization (``readout_noise_factor * P_A``).
* B creates one pair with ``p_pair_B`` and a second one with
  ``double_excitation_factor * p_pair_B**2``; each photon 3 survives the fibre
  and is detected with total probability ``P_B / p_pair_B``.
* D2 and D3 each fire spuriously with the dark/background probability.

Two or more photons at the Bell measurement form a coincidence candidate,
classified (in priority order) as BB (two B photons), AB (signal photon 2 and
a photon 3), AA (signal and noise photon 2) or Dark (anything involving only a
noise or spurious photon besides one signal). Only an AB event made of photon 2
and the single photon 3 of a single B pair carries the teleported state; every other case leaves B maximally mixed or
empty. D4 then fires with ``eta_B`` if B holds an excitation, on a B read-out
noise photon (``readout_noise_factor * P_B``) or spuriously; with several
sources present the recorded polarization comes from one of them at random.

Because all per-attempt events are independent of the attempt index, the
aggregate engine enumerates the exact outcome distribution of one attempt and
draws multinomial counts per block of cycles. :func:`run_cycle` simulates the
same model step by step and serves as its independent check.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import protocol, qcore
from .protocol import HERALDS, BellOutcome, TargetState
from .tomography import SETTING_EFFECTS, SETTINGS, TomoDataset

CHUNK_CYCLES = 1 << 16


class DecayLaw(enum.Enum):
    EXPONENTIAL = "exp"
    GAUSSIAN = "gauss"


class Classification(enum.Enum):
    NO_PREP = "NoPrep"
    PREP_ONLY = "PrepOnly"
    HERALD_AB = "Herald_AB"
    HERALD_AA = "Herald_AA"
    HERALD_BB = "Herald_BB"
    HERALD_DARK = "Herald_Dark"

    @property
    def is_herald(self) -> bool:
        return self.value.startswith("Herald")


_CLASS_BY_SOURCE = {
    "AB": Classification.HERALD_AB,
    "AA": Classification.HERALD_AA,
    "BB": Classification.HERALD_BB,
    "DARK": Classification.HERALD_DARK,
}


def _check_prob(name, v):
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {v!r}")


def euler_unitary(a: float, b: float, c: float) -> np.ndarray:
    """Rz(a) Ry(b) Rz(c)."""

    def rz(t):
        return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])

    ry = np.array([[np.cos(b / 2), -np.sin(b / 2)], [np.sin(b / 2), np.cos(b / 2)]], dtype=complex)
    return rz(a) @ ry @ rz(c)


@dataclass(frozen=True)
class NoiseConfig:
    """Efficiencies and noise probabilities (all dimensionless)."""

    eta_A: float = 0.07
    eta_B: float = 0.07
    P_A: float = 3e-3
    P_B: float = 3e-3
    p_pair_B: float = 0.01
    fiber_transmission: float = 0.886
    residual_rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rsp_rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dark_count_prob: float = 0.0
    background_prob: float = 0.0
    readout_noise_factor: float = 1.0
    double_excitation_factor: float = 1.0
    bsm_visibility: float = 1.0
    pair_visibility: float = 1.0
    p_b_includes_fiber: bool = True
    inject_sigma_z: bool = False

    def __post_init__(self):
        for name in (
            "eta_A",
            "eta_B",
            "P_A",
            "P_B",
            "p_pair_B",
            "fiber_transmission",
            "dark_count_prob",
            "background_prob",
            "bsm_visibility",
            "pair_visibility",
        ):
            _check_prob(name, getattr(self, name))
        if self.readout_noise_factor < 0 or self.double_excitation_factor < 0:
            raise ValueError("noise factors must be non-negative")
        for name in ("residual_rotation", "rsp_rotation"):
            angles = tuple(float(a) for a in getattr(self, name))
            if len(angles) != 3:
                raise ValueError(f"{name} takes three angles")
            object.__setattr__(self, name, angles)
        _check_prob("readout noise probability", self.readout_noise_factor * max(self.P_A, self.P_B))
        if self.P_B > 0 and self.p_pair_B == 0:
            raise ValueError("P_B > 0 requires p_pair_B > 0")
        _check_prob("double excitation probability", self.double_excitation_factor * self.p_pair_B**2)
        if self.double_excitation_factor * self.p_pair_B**2 > self.p_pair_B:
            raise ValueError("double excitation probability exceeds p_pair_B")
        _check_prob("photon-3 detector efficiency (P_B / p_pair_B / transmission)", self.detector_efficiency_3)

    @property
    def photon3_detection(self) -> float:
        """Probability that the photon 3 of a created pair is detected at the Bell measurement."""
        if self.p_pair_B == 0:
            return 0.0
        q = self.P_B / self.p_pair_B
        return q if self.p_b_includes_fiber else q * self.fiber_transmission

    @property
    def detector_efficiency_3(self) -> float:
        if self.fiber_transmission == 0:
            return 0.0 if self.photon3_detection == 0 else math.inf
        return self.photon3_detection / self.fiber_transmission

    @property
    def spurious_prob(self) -> float:
        """Spurious click probability of one detector in one gate."""
        return 1 - (1 - self.dark_count_prob) * (1 - self.background_prob)

    @property
    def readout_noise_B(self) -> float:
        """Probability of a read-out noise photon at D4."""
        return self.readout_noise_factor * self.P_B

    @property
    def p_click_A(self) -> float:
        return 1 - (1 - self.P_A) * (1 - self.dark_count_prob)

    def rotation(self) -> np.ndarray:
        """Residual fibre rotation on photon 3."""
        return euler_unitary(*self.residual_rotation)

    def rsp_unitary(self) -> np.ndarray:
        """Misalignment of the photon-1 analysis, carried over to the prepared spinwave."""
        return euler_unitary(*self.rsp_rotation)


@dataclass(frozen=True)
class TimingConfig:
    """Cycle timing. Units: Hz and ms for the cycle, ns for ``trial_B``, microseconds otherwise."""

    cycle_rate: float = 71.4
    trap_duration: float = 11.0
    window_duration: float = 3.0
    trial_A: float = 3.38
    trial_B: float = 975.0
    hold_A: float = 1.6
    hold_B: float = 1.0
    lifetime_tau: float = 129.0
    decay_law: DecayLaw = DecayLaw.EXPONENTIAL

    def __post_init__(self):
        if isinstance(self.decay_law, str):
            object.__setattr__(self, "decay_law", DecayLaw(self.decay_law))
        for name in ("cycle_rate", "window_duration", "trial_A", "trial_B", "lifetime_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("trap_duration", "hold_A", "hold_B"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        period_ms = 1e3 / self.cycle_rate
        if self.trap_duration + self.window_duration > period_ms + 1e-9:
            raise ValueError(
                f"trap_duration + window_duration = {self.trap_duration + self.window_duration} ms "
                f"exceeds the cycle period {period_ms:.4f} ms"
            )

    @property
    def window_us(self) -> float:
        return self.window_duration * 1e3

    @property
    def trial_B_us(self) -> float:
        return self.trial_B * 1e-3


@dataclass(frozen=True)
class TrialRecord:
    cycle: int
    attempt: int
    target: str
    t_prep_us: float | None
    d1: bool
    d2: bool
    d3: bool
    d4: bool
    classification: Classification
    outcome: BellOutcome
    basis: str | None = None
    photon4: int | None = None
    pair_created: bool = False
    prep_trials: int = 0

    def __post_init__(self):
        if self.classification.is_herald and not (self.d2 and self.d3):
            raise ValueError("herald records require a D2-D3 coincidence")

    LOG_FIELDS = (
        "cycle",
        "attempt",
        "target",
        "t_prep_us",
        "d1",
        "d2",
        "d3",
        "d4",
        "classification",
        "outcome",
        "basis",
        "photon4",
    )

    def to_log_line(self) -> str:
        vals = []
        for name in self.LOG_FIELDS:
            v = getattr(self, name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = f"{v:.3f}"
            elif v is None:
                v = "-"
            vals.append(str(v))
        return "\t".join(vals)


@dataclass
class RunSummary:
    n_cycles: int = 0
    n_noprep: int = 0
    n_prep: int = 0
    n_pairs_B: int = 0
    n_heralds: int = 0
    n_triples: int = 0
    herald_counts: dict[str, int] = field(default_factory=lambda: {"AB": 0, "AA": 0, "BB": 0, "DARK": 0})
    prep_trials_A: int = 0
    trial_B_us: float = 0.975
    trial_A_us: float = 3.38

    @property
    def p23(self) -> float:
        return self.n_heralds / self.n_prep if self.n_prep else 0.0

    @property
    def p234(self) -> float:
        return self.n_triples / self.n_prep if self.n_prep else 0.0

    @property
    def herald_breakdown(self) -> tuple[float, float, float]:
        n = self.n_heralds
        if n == 0:
            return (0.0, 0.0, 0.0)
        c = self.herald_counts
        return (c["AB"] / n, c["AA"] / n, c["BB"] / n)

    @property
    def estimated_success_prob(self) -> float:
        return self.herald_counts["AB"] / self.n_prep if self.n_prep else 0.0

    @property
    def mean_prep_time(self) -> float:
        """Mean B write time per created B pair (us)."""
        return self.n_prep * self.trial_B_us / self.n_pairs_B if self.n_pairs_B else math.inf

    @property
    def mean_prep_time_A(self) -> float:
        return self.prep_trials_A * self.trial_A_us / self.n_prep if self.n_prep else math.inf

    def merge(self, other: "RunSummary") -> "RunSummary":
        out = RunSummary(trial_B_us=self.trial_B_us, trial_A_us=self.trial_A_us)
        for name in ("n_cycles", "n_noprep", "n_prep", "n_pairs_B", "n_heralds", "n_triples", "prep_trials_A"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.herald_counts = {k: self.herald_counts[k] + other.herald_counts[k] for k in self.herald_counts}
        return out

    def to_dict(self) -> dict:
        d = {
            "n_cycles": self.n_cycles,
            "n_noprep": self.n_noprep,
            "n_prep": self.n_prep,
            "n_pairs_B": self.n_pairs_B,
            "n_heralds": self.n_heralds,
            "n_triples": self.n_triples,
            "herald_counts": dict(self.herald_counts),
            "p23": self.p23,
            "p234": self.p234,
            "herald_breakdown": list(self.herald_breakdown),
            "estimated_success_prob": self.estimated_success_prob,
            "mean_prep_time_us": self.mean_prep_time if self.n_pairs_B else None,
            "mean_prep_time_A_us": self.mean_prep_time_A if self.n_prep else None,
        }
        return d


# ------------------------------------------------------------- single channels


def coherence_factor(t: float, timing: TimingConfig) -> float:
    if t < 0:
        raise ValueError("storage time must be non-negative")
    tau = timing.lifetime_tau
    if timing.decay_law is DecayLaw.EXPONENTIAL:
        return math.exp(-t / tau)
    return math.exp(-(t * t) / (2 * tau * tau))


def decohere(rho, t: float, timing: TimingConfig) -> np.ndarray:
    """Scale the coherences of a stored spinwave by the dephasing factor at time ``t`` (us)."""
    d = coherence_factor(t, timing)
    out = np.array(rho, dtype=complex)
    out[0, 1] *= d
    out[1, 0] *= d
    return out


def fiber_transit(photon, noise: NoiseConfig, rng: np.random.Generator) -> tuple[bool, np.ndarray | None]:
    """Photon survives with the fibre transmission; survivors get the residual rotation."""
    if rng.random() >= noise.fiber_transmission:
        return False, None
    return True, qcore.apply_unitary(photon, noise.rotation())


# ---------------------------------------------------------------- per-target tables


@dataclass(frozen=True)
class _Tables:
    # BSM outcome probabilities per photon-2 source (0 genuine, 1 random), outcome index
    bsm: np.ndarray  # (2, 3)
    # probability of the first outcome of each analysis setting for the teleported B state
    p4: np.ndarray  # (2, 2, 3): source, herald index, setting
    p2: np.ndarray  # (3,): first-outcome probability of the genuine photon 2 per setting


_OUTCOMES = (BellOutcome.PHI_PLUS, BellOutcome.PHI_MINUS, BellOutcome.NO_HERALD)


def _first_outcome_probs(rho) -> np.ndarray:
    return np.array([min(max(np.trace(rho @ SETTING_EFFECTS[s][0]).real, 0.0), 1.0) for s in SETTINGS])


def prepared_state(target: TargetState, noise: NoiseConfig) -> np.ndarray:
    """Spinwave A after remote state preparation with the configured analysis misalignment."""
    _, spin = protocol.project_photon(protocol.make_rsp_pair(), protocol.perp_state(target))
    return qcore.apply_unitary(spin, noise.rsp_unitary())


def photon2_state(target: TargetState, noise: NoiseConfig, timing: TimingConfig) -> np.ndarray:
    return protocol.readout_map(decohere(prepared_state(target, noise), timing.hold_A, timing))


def teleported_states(target: TargetState, noise: NoiseConfig, timing: TimingConfig, random_source: bool = False):
    """``{herald: (probability, B state at readout)}`` for one photon 2 and one photon 3."""
    rho2 = qcore.MAXIMALLY_MIXED if random_source else photon2_state(target, noise, timing)
    u = np.kron(noise.rotation(), qcore.I2)
    pair = u @ protocol.make_entangled_pair_B(noise.pair_visibility) @ u.conj().T
    branches = protocol.teleport_branches(rho2, pair, noise.bsm_visibility, correct=True)
    out = {}
    for h in _OUTCOMES:
        p, st = branches[h]
        if h.is_herald:
            st = qcore.MAXIMALLY_MIXED if st is None else st
            if noise.inject_sigma_z:
                st = qcore.apply_unitary(st, qcore.SZ)
            st = decohere(st, timing.hold_B, timing)
        out[h] = (p, st)
    return out


@lru_cache(maxsize=256)
def _tables(target: TargetState, noise: NoiseConfig, timing: TimingConfig) -> _Tables:
    bsm = np.zeros((2, 3))
    p4 = np.full((2, 2, 3), 0.5)
    for src in (0, 1):
        tel = teleported_states(target, noise, timing, random_source=bool(src))
        for i, h in enumerate(_OUTCOMES):
            bsm[src, i] = tel[h][0]
            if h.is_herald:
                p4[src, i] = _first_outcome_probs(tel[h][1])
    bsm /= bsm.sum(axis=1, keepdims=True)
    return _Tables(bsm, p4, _first_outcome_probs(photon2_state(target, noise, timing)))


# ------------------------------------------------------------- exact distributions

_UNIFORM_BSM = np.array([0.25, 0.25, 0.5])


def _binom_pmf(n, p):
    return [math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(n + 1)]


@lru_cache(maxsize=256)
def attempt_distribution(target: TargetState, noise: NoiseConfig, timing: TimingConfig) -> tuple[tuple, np.ndarray]:
    """Exact outcome distribution of one teleportation attempt.

    Keys are ``(source, outcome, d4, setting, photon4, pair_created)`` where
    ``source`` is one of AB/AA/BB/DARK/NONE; ``setting`` and ``photon4`` are
    ``None`` unless D4 fired on a herald.
    """
    tab = _tables(target, noise, timing)
    p_gen = noise.P_A / noise.p_click_A if noise.p_click_A > 0 else 1.0
    f_noise = noise.readout_noise_factor * noise.P_A
    p_double = noise.double_excitation_factor * noise.p_pair_B**2
    pairs_pmf = (1 - noise.p_pair_B, noise.p_pair_B - p_double, p_double)
    q3 = noise.photon3_detection
    ps = noise.spurious_prob
    acc: dict[tuple, float] = Counter()

    for gen, sig, noi, npair in itertools.product((1, 0), (1, 0), (1, 0), (0, 1, 2)):
        w = (p_gen if gen else 1 - p_gen) * (noise.eta_A if sig else 1 - noise.eta_A)
        w *= (f_noise if noi else 1 - f_noise) * pairs_pmf[npair]
        if w == 0:
            continue
        for nb, wb in enumerate(_binom_pmf(npair, q3)):
            for nd, wd in enumerate(_binom_pmf(2, ps)):
                ww = w * wb * wd
                if ww == 0:
                    continue
                src = _coincidence_source(sig, noi, nb, nd)
                pair = npair >= 1
                if src == "NONE":
                    acc[("NONE", BellOutcome.NO_HERALD, False, None, None, pair)] += ww
                    continue
                # (weight, bsm probabilities, p4 row or None for mixed/empty B)
                branches = []
                if src == "AB" and nb == 1 and npair == 1:
                    if noi:
                        branches = [(0.5, 1 - gen), (0.5, 1)]
                    else:
                        branches = [(1.0, 1 - gen)]
                    branches = [(bw, tab.bsm[s], tab.p4[s]) for bw, s in branches]
                else:
                    branches = [(1.0, _UNIFORM_BSM, None)]
                for bw, probs, p4 in branches:
                    for oi, outcome in enumerate(_OUTCOMES):
                        wo = ww * bw * probs[oi]
                        if wo == 0:
                            continue
                        if not outcome.is_herald:
                            acc[("NONE", outcome, False, None, None, pair)] += wo
                            continue
                        _add_d4(acc, wo, src, outcome, pair, noise, None if p4 is None else p4[oi])
    keys = tuple(sorted(acc, key=_key_order))
    probs = np.array([acc[k] for k in keys])
    return keys, probs / probs.sum()


def _coincidence_source(sig: int, noi: int, nb: int, nd: int) -> str:
    if sig + noi + nb + nd < 2:
        return "NONE"
    if nb >= 2:
        return "BB"
    if sig and nb >= 1:
        return "AB"
    if sig and noi:
        return "AA"
    # readout-noise or spurious photon paired with anything else
    return "DARK"


def _d4_sources(pair, eta_b, p_noise4, ps):
    """Yield ``(weight, n_real, n_random)`` over present D4 sources."""
    p_real = eta_b if pair else 0.0
    for real, nz, sp in itertools.product((1, 0), repeat=3):
        w = (p_real if real else 1 - p_real) * (p_noise4 if nz else 1 - p_noise4) * (ps if sp else 1 - ps)
        if w > 0:
            yield w, real, nz + sp


def _add_d4(acc, w, src, outcome, pair, noise, p4_row):
    for wd, real, n_rand in _d4_sources(pair, noise.eta_B, noise.readout_noise_B, noise.spurious_prob):
        if real + n_rand == 0:
            acc[(src, outcome, False, None, None, pair)] += w * wd
            continue
        for si, s in enumerate(SETTINGS):
            born = 0.5 if p4_row is None else p4_row[si]
            # the recorded click comes from one present source chosen uniformly
            p_first = (real * born + n_rand * 0.5) / (real + n_rand)
            acc[(src, outcome, True, s, 0, pair)] += w * wd / 3 * p_first
            acc[(src, outcome, True, s, 1, pair)] += w * wd / 3 * (1 - p_first)


def _key_order(k):
    return tuple("" if x is None else str(getattr(x, "value", x)) for x in k)


@lru_cache(maxsize=256)
def preparation_distribution(target: TargetState, noise: NoiseConfig, timing: TimingConfig) -> tuple[tuple, np.ndarray]:
    """Outcome distribution of one preparation-verification attempt: keys ``(click, setting, outcome)``."""
    tab = _tables(target, noise, timing)
    p_gen = noise.P_A / noise.p_click_A if noise.p_click_A > 0 else 1.0
    f_noise = noise.readout_noise_factor * noise.P_A
    ps2 = 1 - (1 - noise.spurious_prob) ** 2
    acc: dict[tuple, float] = Counter()
    for gen, sig, noi, spur in itertools.product((1, 0), repeat=4):
        w = (p_gen if gen else 1 - p_gen) * (noise.eta_A if sig else 1 - noise.eta_A)
        w *= (f_noise if noi else 1 - f_noise) * (ps2 if spur else 1 - ps2)
        if w == 0:
            continue
        n_src = sig + noi + spur
        if n_src == 0:
            acc[(False, None, None)] += w
            continue
        for si, s in enumerate(SETTINGS):
            born = tab.p2[si] if gen else 0.5
            # the recorded click comes from one present source chosen uniformly
            p_first = (sig * born + (noi + spur) * 0.5) / n_src
            acc[(True, s, 0)] += w / 3 * p_first
            acc[(True, s, 1)] += w / 3 * (1 - p_first)
    keys = tuple(sorted(acc, key=_key_order))
    probs = np.array([acc[k] for k in keys])
    return keys, probs / probs.sum()


@lru_cache(maxsize=64)
def attempts_per_cycle_pmf(noise: NoiseConfig, timing: TimingConfig, overhead_us: float) -> np.ndarray:
    """Distribution of completed attempts per window.

    Attempt ``k`` ends at ``trial_A * (G_1 + ... + G_k) + k * overhead`` with
    geometric ``G_i``; it completes iff that is within the window.
    """
    p = noise.p_click_A
    w = timing.window_us
    tail = [1.0]  # P(N >= 0)
    k = 1
    while True:
        budget = w - k * overhead_us
        if budget < k * timing.trial_A - 1e-9 or p == 0:
            break
        m = math.floor(budget / timing.trial_A + 1e-9)
        # total trials for k clicks = k + NegBinom failures
        t = float(stats.nbinom.cdf(m - k, k, p)) if p < 1 else 1.0
        if t < 1e-300:
            break
        tail.append(t)
        k += 1
    tail.append(0.0)
    pmf = np.clip(-np.diff(np.array(tail)), 0, None)
    return pmf / pmf.sum()


def teleport_overhead(timing: TimingConfig) -> float:
    return timing.hold_A + timing.trial_B_us


def expected_prep_trials(noise: NoiseConfig) -> float:
    return 1 / noise.p_click_A if noise.p_click_A > 0 else math.inf


# ------------------------------------------------------------------- stepwise route


def _geometric(rng, p):
    return int(rng.geometric(p)) if p > 0 else 10**12


def _random_photon_outcome(rng):
    return int(rng.random() >= 0.5)


def run_cycle(
    target: TargetState,
    noise: NoiseConfig,
    timing: TimingConfig,
    rng: np.random.Generator,
    cycle: int = 0,
) -> list[TrialRecord]:
    """Simulate one detection window attempt by attempt.

    Returns one record per completed attempt, or a single NoPrep record when
    no preparation completed inside the window.
    """
    tab = _tables(target, noise, timing)
    p_click = noise.p_click_A
    p_gen = noise.P_A / p_click if p_click > 0 else 1.0
    ps = noise.spurious_prob
    q3 = noise.photon3_detection
    p_double = noise.double_excitation_factor * noise.p_pair_B**2
    overhead = teleport_overhead(timing)
    records = []
    t = 0.0
    attempt = 0
    while True:
        g = _geometric(rng, p_click)
        t_click = t + g * timing.trial_A
        t_end = t_click + overhead
        if t_end > timing.window_us + 1e-9:
            break
        t = t_end
        genuine = rng.random() < p_gen
        sig = rng.random() < noise.eta_A
        noi = rng.random() < noise.readout_noise_factor * noise.P_A
        u = rng.random()
        npair = 2 if u < p_double else (1 if u < noise.p_pair_B else 0)
        nb = 0
        for _ in range(npair):
            survived = rng.random() < noise.fiber_transmission
            detected = rng.random() < noise.detector_efficiency_3
            nb += survived and detected
        nd = int(rng.random() < ps) + int(rng.random() < ps)
        src = _coincidence_source(sig, noi, nb, nd)
        outcome = BellOutcome.NO_HERALD
        p4_row = None
        if src != "NONE":
            probs = _UNIFORM_BSM
            if src == "AB" and nb == 1 and npair == 1:
                use_signal = sig and (not noi or rng.random() < 0.5)
                s = (0 if genuine else 1) if use_signal else 1
                probs = tab.bsm[s]
                p4_row = tab.p4[s]
            oi = int(rng.choice(3, p=probs))
            outcome = _OUTCOMES[oi]
            if p4_row is not None and outcome.is_herald:
                p4_row = p4_row[oi]
            else:
                p4_row = None
        herald = outcome.is_herald
        d4 = False
        basis = None
        photon4 = None
        if herald:
            real = npair >= 1 and rng.random() < noise.eta_B
            n_rand = int(rng.random() < noise.readout_noise_B) + int(rng.random() < ps)
            d4 = real or n_rand > 0
            if d4:
                si = int(rng.integers(3))
                basis = SETTINGS[si]
                if real and rng.random() < 1 / (1 + n_rand):
                    born = 0.5 if p4_row is None else p4_row[si]
                    photon4 = int(rng.random() >= born)
                else:
                    photon4 = _random_photon_outcome(rng)
        cls = _CLASS_BY_SOURCE[src] if herald else Classification.PREP_ONLY
        records.append(
            TrialRecord(
                cycle=cycle,
                attempt=attempt,
                target=target.value,
                t_prep_us=t_click,
                d1=True,
                d2=herald,
                d3=herald,
                d4=d4,
                classification=cls,
                outcome=outcome,
                basis=basis,
                photon4=photon4,
                pair_created=npair >= 1,
                prep_trials=g,
            )
        )
        attempt += 1
    if not records:
        records.append(
            TrialRecord(cycle, 0, target.value, None, False, False, False, False, Classification.NO_PREP, BellOutcome.NO_HERALD)
        )
    return records


def summarize_records(records: Sequence[TrialRecord], timing: TimingConfig) -> RunSummary:
    s = RunSummary(trial_B_us=timing.trial_B_us, trial_A_us=timing.trial_A)
    cycles = set()
    for r in records:
        cycles.add(r.cycle)
        if r.classification is Classification.NO_PREP:
            s.n_noprep += 1
            continue
        s.n_prep += 1
        s.n_pairs_B += int(r.pair_created)
        s.prep_trials_A += r.prep_trials
        if r.classification.is_herald:
            s.n_heralds += 1
            s.n_triples += int(r.d4)
            s.herald_counts[r.classification.name.split("_", 1)[1]] += 1
    s.n_cycles = len(cycles)
    return s


# ------------------------------------------------------------------ aggregate engine


@dataclass
class ExperimentResult:
    summary: RunSummary
    datasets: dict[TargetState, TomoDataset]
    datasets_by_herald: dict[tuple[TargetState, BellOutcome], TomoDataset]
    records: list[TrialRecord] = field(default_factory=list)


def _chunk_rng(seed: int, stream: tuple[int, ...]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=stream)))


def _cycle_layout(rng, n_cycles, pmf):
    counts = rng.multinomial(n_cycles, pmf)
    return counts, int(np.dot(np.arange(len(pmf)), counts))


def _sample_prep_trials(rng, total_attempts, noise):
    """Total A write trials behind ``total_attempts`` clicks (ignores window truncation bias)."""
    if total_attempts == 0:
        return 0
    p = noise.p_click_A
    return int(total_attempts + rng.negative_binomial(total_attempts, p)) if p < 1 else total_attempts


def _conditional_prep_times(rng, k_attempts, noise, timing, overhead, max_tries=10000, batch=256):
    """Click times of a window that completed exactly ``k_attempts`` attempts (rejection sampling).

    Attempt i ends at sum_{j<=i} (gap_j * trial_A + overhead); the first k + 1 gaps
    decide whether a window holds exactly k attempts.
    """
    p = noise.p_click_A
    if p <= 0:
        return [None] * k_attempts
    w = timing.window_us + 1e-9
    for _ in range(0, max_tries, batch):
        gaps = rng.geometric(p, size=(batch, k_attempts + 1)) * timing.trial_A
        ends = np.cumsum(gaps + overhead, axis=1)
        ok = (ends[:, k_attempts] > w) & ((ends[:, k_attempts - 1] <= w) if k_attempts else True)
        hit = np.flatnonzero(ok)
        if hit.size:
            row = ends[hit[0], :k_attempts]
            return [float(t) for t in row - overhead]
    return [None] * k_attempts


def _simulate_chunk(args):
    mode, target, noise, timing, n_cycles, seed, stream, cycle_offset, want_records = args
    rng = _chunk_rng(seed, stream)
    overhead = teleport_overhead(timing) if mode == "teleport" else timing.hold_A
    pmf = attempts_per_cycle_pmf(noise, timing, overhead)
    layout, n_att = _cycle_layout(rng, n_cycles, pmf)
    summary = RunSummary(trial_B_us=timing.trial_B_us, trial_A_us=timing.trial_A)
    summary.n_cycles = n_cycles
    summary.n_noprep = int(layout[0])
    summary.n_prep = n_att
    summary.prep_trials_A = _sample_prep_trials(rng, n_att, noise)
    counts = np.zeros((2, 3, 2), dtype=np.int64)  # herald, setting, outcome
    records = []
    if mode == "teleport":
        keys, probs = attempt_distribution(target, noise, timing)
        draws = rng.multinomial(n_att, probs)
        herald_events = []
        for key, n in zip(keys, draws):
            if n == 0:
                continue
            src, outcome, d4, setting, ph4, pair = key
            summary.n_pairs_B += int(n) * pair
            if src == "NONE":
                continue
            summary.n_heralds += int(n)
            summary.herald_counts[src] += int(n)
            if d4:
                summary.n_triples += int(n)
                counts[HERALDS.index(outcome), SETTINGS.index(setting), ph4] += n
            if want_records:
                herald_events.extend([key] * int(n))
        if want_records and herald_events:
            records = _place_records(rng, herald_events, layout, n_cycles, cycle_offset, target, noise, timing, overhead)
    else:
        keys, probs = preparation_distribution(target, noise, timing)
        draws = rng.multinomial(n_att, probs)
        for (click, setting, out), n in zip(keys, draws):
            if click:
                counts[0, SETTINGS.index(setting), out] += n
    return summary, counts, records


def _place_records(rng, events, layout, n_cycles, cycle_offset, target, noise, timing, overhead):
    """Assign herald events to uniformly chosen distinct attempts of the chunk and give them times."""
    rec_rng = np.random.Generator(np.random.PCG64(rng.bit_generator.random_raw()))
    ks = np.arange(len(layout))
    block_ends = np.cumsum(ks * layout)  # attempts grouped by cycles holding k attempts
    chosen = np.sort(rec_rng.choice(int(block_ends[-1]), size=len(events), replace=False))
    k = np.searchsorted(block_ends, chosen, side="right")
    offset = chosen - np.where(k > 0, block_ends[k - 1], 0)
    local_cycle, attempt = np.divmod(offset, k)
    uniq, inv = np.unique(k * n_cycles + local_cycle, return_inverse=True)
    labels = rec_rng.choice(n_cycles, size=len(uniq), replace=False)
    times = [_conditional_prep_times(rec_rng, int(u // n_cycles), noise, timing, overhead) for u in uniq]
    order = rec_rng.permutation(len(events))
    out = []
    for j, ev_i in enumerate(order):
        src, outcome, d4, setting, ph4, _pair = events[ev_i]
        a = int(attempt[j])
        out.append(
            TrialRecord(
                cycle=cycle_offset + int(labels[inv[j]]),
                attempt=a,
                target=target.value,
                t_prep_us=times[inv[j]][a],
                d1=True,
                d2=True,
                d3=True,
                d4=bool(d4),
                classification=_CLASS_BY_SOURCE[src],
                outcome=outcome,
                basis=setting,
                photon4=ph4,
            )
        )
    out.sort(key=lambda r: (r.cycle, r.attempt))
    return out


def _counts_to_dataset(c: np.ndarray) -> TomoDataset:
    return TomoDataset({s: (int(c[i, 0]), int(c[i, 1])) for i, s in enumerate(SETTINGS)})


def run_experiment(
    n_cycles: int | None,
    schedule: Mapping[TargetState, int] | Sequence[TargetState],
    noise: NoiseConfig,
    timing: TimingConfig,
    seed: int,
    mode: str = "teleport",
    records: bool = False,
    workers: int = 1,
    stream: tuple[int, ...] = (),
) -> ExperimentResult:
    """Simulate a schedule of cycles and aggregate counts.

    ``schedule`` maps each target to its number of cycles; a plain sequence of
    targets shares ``n_cycles`` per target. Results depend only on
    ``(schedule, configs, seed, stream)``, never on ``workers``.
    """
    if mode not in ("teleport", "prepare"):
        raise ValueError(f"unknown mode {mode!r}")
    if not isinstance(schedule, Mapping):
        if n_cycles is None or n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        schedule = {t: n_cycles for t in schedule}
    if not schedule:
        raise ValueError("empty schedule")
    jobs = []
    offset = 0
    for ti, (target, n) in enumerate(schedule.items()):
        if n < 1:
            raise ValueError(f"schedule entry for {target.value} must be >= 1")
        for k, start in enumerate(range(0, n, CHUNK_CYCLES)):
            m = min(CHUNK_CYCLES, n - start)
            jobs.append((mode, target, noise, timing, m, seed, stream + (ti, k), offset + start, records))
        offset += n
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_simulate_chunk, jobs))
    else:
        results = [_simulate_chunk(j) for j in jobs]

    summary = RunSummary(trial_B_us=timing.trial_B_us, trial_A_us=timing.trial_A)
    per_target: dict[TargetState, np.ndarray] = {}
    all_records: list[TrialRecord] = []
    for job, (s, c, recs) in zip(jobs, results):
        summary = summary.merge(s)
        per_target[job[1]] = per_target.get(job[1], 0) + c
        all_records.extend(recs)
    all_records.sort(key=lambda r: (r.cycle, r.attempt))
    datasets = {t: _counts_to_dataset(c.sum(axis=0)) for t, c in per_target.items()}
    by_herald = {}
    if mode == "teleport":
        for t, c in per_target.items():
            for hi, h in enumerate(HERALDS):
                by_herald[(t, h)] = _counts_to_dataset(c[hi])
    return ExperimentResult(summary, datasets, by_herald, all_records)


# ------------------------------------------------------------------ rate budget


def bsm_contributions(noise: NoiseConfig) -> tuple[float, float, float]:
    """Leading-order coincidence probabilities per attempt from (A and B, A only, B only)."""
    ab = noise.eta_A * noise.P_B
    aa = noise.eta_A * noise.P_A * noise.readout_noise_factor
    bb = noise.P_B**2
    return ab, aa, bb


def success_probability(noise: NoiseConfig) -> float:
    return noise.eta_A * noise.P_B / 2


def heralding_efficiency(run: RunSummary, noise: NoiseConfig) -> float:
    if run.p23 <= 0 or noise.eta_B <= 0:
        raise ZeroDivisionError("heralding efficiency needs p23 > 0 and eta_B > 0")
    return run.p234 / (run.p23 * noise.eta_B)


def heralded_fidelity(f: float, eta_her: float) -> float:
    return f * eta_her


@dataclass(frozen=True)
class RegimeReport:
    ratio_A_B: float
    ratio_B_eta: float
    threshold: float

    @property
    def pass_A_B(self) -> bool:
        return self.ratio_A_B <= self.threshold

    @property
    def pass_B_eta(self) -> bool:
        return self.ratio_B_eta <= self.threshold

    @property
    def ok(self) -> bool:
        return self.pass_A_B and self.pass_B_eta


def regime_check(noise: NoiseConfig, threshold: float = 0.2) -> RegimeReport:
    """Ratios P_A/P_B and P_B/eta_A against a "much smaller than" threshold."""
    r1 = noise.P_A / noise.P_B if noise.P_B > 0 else (0.0 if noise.P_A == 0 else math.inf)
    r2 = noise.P_B / noise.eta_A if noise.eta_A > 0 else (0.0 if noise.P_B == 0 else math.inf)
    return RegimeReport(r1, r2, threshold)


def mean_entanglement_wait(noise: NoiseConfig, timing: TimingConfig) -> float:
    """Expected B write time per created pair (us)."""
    return timing.trial_B_us / noise.p_pair_B if noise.p_pair_B > 0 else math.inf


def memory_margin(noise: NoiseConfig, timing: TimingConfig) -> float:
    return timing.lifetime_tau / mean_entanglement_wait(noise, timing)


def window_entanglement_probability(noise: NoiseConfig, timing: TimingConfig) -> float:
    """Probability that back-to-back B trials create a pair before the window closes."""
    n = math.floor(timing.window_us / timing.trial_B_us + 1e-9)
    return 1 - (1 - noise.p_pair_B) ** n


def sample_entanglement_waits(n: int, noise: NoiseConfig, timing: TimingConfig, rng: np.random.Generator) -> np.ndarray:
    """Waiting times (us) of back-to-back B trials until the first pair; ``inf`` if the window closes first."""
    trials = rng.geometric(noise.p_pair_B, size=n).astype(float)
    n_max = math.floor(timing.window_us / timing.trial_B_us + 1e-9)
    trials[trials > n_max] = math.inf
    return trials * timing.trial_B_us


# ---------------------------------------------------------------- classical bound


def classical_benchmark(n_runs: int, rng: np.random.Generator, targets=protocol.SIX_TARGETS) -> dict[TargetState, float]:
    """Measure-and-prepare: measure photon 2 in a random setting, prepare the found eigenstate at B."""
    out = {}
    for t in targets:
        probs = _first_outcome_probs(t.rho)
        settings = rng.integers(3, size=n_runs)
        first = rng.random(n_runs) < probs[settings]
        fid = np.empty(n_runs)
        for si, s in enumerate(SETTINGS):
            for oi, eff in enumerate(SETTING_EFFECTS[s]):
                f = qcore.fidelity(eff, t.rho)
                mask = (settings == si) & (first == (oi == 0))
                fid[mask] = f
        out[t] = float(fid.mean())
    return out


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, enum.Enum):
            d[k] = v.value
        elif isinstance(v, tuple):
            d[k] = list(v)
    return d


def config_field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]

