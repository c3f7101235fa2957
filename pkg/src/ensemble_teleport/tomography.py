"""Single-qubit state tomography and Pauli-basis process tomography.

Counts are collected in the three polarization analysis settings HV, PM
(diagonal) and RL (circular). States are reconstructed by linear inversion or
by maximum likelihood over ``rho = T^dag T / tr(T^dag T)`` with lower
triangular ``T``; processes by maximum likelihood over positive, trace
preserving process matrices ``chi``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from . import qcore
from .qcore import PAULIS, StateError

SETTINGS = ("HV", "PM", "RL")

#: Analysis kets per setting, first outcome first.
SETTING_KETS = {
    "HV": (qcore.KET_H, qcore.KET_V),
    "PM": (qcore.KET_PLUS, qcore.KET_MINUS),
    "RL": (qcore.KET_R, qcore.KET_L),
}
SETTING_EFFECTS = {s: tuple(np.outer(k, k.conj()) for k in ks) for s, ks in SETTING_KETS.items()}
OUTCOME_LABELS = {"HV": ("H", "V"), "PM": ("P", "M"), "RL": ("R", "L")}
# Pauli index measured by each setting.
_SETTING_AXIS = {"HV": 3, "PM": 1, "RL": 2}

MAX_ITER = 5000
REL_TOL = 1e-10


class TomographyError(RuntimeError):
    pass


@dataclass(frozen=True)
class TomoDataset:
    """Outcome counts per analysis setting, e.g. ``{"HV": (n_H, n_V), ...}``."""

    counts: Mapping[str, tuple[int, int]]

    def __post_init__(self):
        clean = {}
        for s, pair in self.counts.items():
            if s not in SETTINGS:
                raise ValueError(f"unknown analysis setting {s!r}")
            a, b = (int(x) for x in pair)
            if a < 0 or b < 0:
                raise ValueError(f"negative counts in setting {s}: {pair}")
            clean[s] = (a, b)
        object.__setattr__(self, "counts", clean)

    def total(self, setting: str) -> int:
        return sum(self.counts.get(setting, (0, 0)))

    @property
    def total_counts(self) -> int:
        return sum(self.total(s) for s in self.counts)

    def is_complete(self) -> bool:
        return all(s in self.counts for s in SETTINGS)

    def scaled(self, factor: float) -> "TomoDataset":
        return TomoDataset({s: (round(a * factor), round(b * factor)) for s, (a, b) in self.counts.items()})

    def __add__(self, other: "TomoDataset") -> "TomoDataset":
        keys = sorted(set(self.counts) | set(other.counts), key=SETTINGS.index)
        out = {}
        for s in keys:
            a = self.counts.get(s, (0, 0))
            b = other.counts.get(s, (0, 0))
            out[s] = (a[0] + b[0], a[1] + b[1])
        return TomoDataset(out)


@dataclass
class ReconstructionReport:
    estimate: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)
    bootstrap_std: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimate": matrix_to_pairs(self.estimate),
            "log_likelihood": round(float(self.log_likelihood), 12),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "bootstrap_std": {k: round(float(v), 12) for k, v in sorted(self.bootstrap_std.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionReport":
        return cls(
            estimate=pairs_to_matrix(d["estimate"]),
            log_likelihood=d["log_likelihood"],
            iterations=d["iterations"],
            converged=d["converged"],
            bootstrap_std=dict(d.get("bootstrap_std", {})),
        )


# ---------------------------------------------------------------- I/O helpers


def matrix_to_pairs(m, precision: int = 12) -> list[list[list[float]]]:
    """Row-major nested list of ``[re, im]`` pairs rounded to ``precision`` digits."""
    m = np.asarray(m, dtype=complex)
    return [[[round(float(z.real), precision) + 0.0, round(float(z.imag), precision) + 0.0] for z in row] for row in m]


def pairs_to_matrix(pairs) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in pairs])


def report_to_json(report: ReconstructionReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2)


def dataset_lines(label: str, data: TomoDataset) -> list[str]:
    """One ``label setting outcome count`` line per outcome."""
    lines = []
    for s in SETTINGS:
        if s in data.counts:
            for name, n in zip(OUTCOME_LABELS[s], data.counts[s]):
                lines.append(f"{label} {s} {name} {n}")
    return lines


def write_datasets(datasets: Mapping[str, TomoDataset]) -> str:
    out = []
    for label, data in datasets.items():
        out.extend(dataset_lines(label, data))
    return "\n".join(out) + "\n"


def read_datasets(text: str) -> dict[str, TomoDataset]:
    raw: dict[str, dict[str, list[int]]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'label setting outcome count', got {line!r}")
        label, setting, outcome, count = parts
        if setting not in SETTINGS:
            raise ValueError(f"line {lineno}: unknown setting {setting!r}")
        try:
            idx = OUTCOME_LABELS[setting].index(outcome)
        except ValueError:
            raise ValueError(f"line {lineno}: unknown outcome {outcome!r} for setting {setting}") from None
        raw.setdefault(label, {}).setdefault(setting, [0, 0])[idx] = int(count)
    return {label: TomoDataset({s: tuple(v) for s, v in d.items()}) for label, d in raw.items()}


# -------------------------------------------------------------- simulation


def born_probabilities(rho) -> dict[str, np.ndarray]:
    return {s: qcore.measure_projectors(rho, SETTING_EFFECTS[s]) for s in SETTINGS}


def simulate_counts(rho, n_per_setting: int, rng: np.random.Generator) -> TomoDataset:
    """Binomial counts for ``n_per_setting`` detections in each analysis setting."""
    if n_per_setting < 1:
        raise ValueError("n_per_setting must be >= 1")
    counts = {}
    for s, p in born_probabilities(rho).items():
        k = int(rng.binomial(n_per_setting, min(max(p[0], 0.0), 1.0)))
        counts[s] = (k, n_per_setting - k)
    return TomoDataset(counts)


def exact_dataset(rho, n_per_setting: float = 1.0) -> "FrequencyData":
    """Noise-free frequencies (possibly non-integer) of ``rho``."""
    return FrequencyData({s: tuple(n_per_setting * p) for s, p in born_probabilities(rho).items()})


@dataclass(frozen=True)
class FrequencyData:
    """Real-valued stand-in for :class:`TomoDataset` used for exact-probability data."""

    counts: Mapping[str, tuple[float, float]]

    def total(self, setting: str) -> float:
        return float(sum(self.counts.get(setting, (0.0, 0.0))))

    @property
    def total_counts(self) -> float:
        return sum(self.total(s) for s in self.counts)

    def is_complete(self) -> bool:
        return all(s in self.counts for s in SETTINGS)


def _effects_and_counts(data) -> tuple[np.ndarray, np.ndarray]:
    effects, counts = [], []
    for s in SETTINGS:
        if s in data.counts:
            effects.extend(SETTING_EFFECTS[s])
            counts.extend(data.counts[s])
    return np.array(effects), np.array(counts, dtype=float)


# ------------------------------------------------------------ state estimators


def linear_inversion(data) -> np.ndarray:
    """``(I + sum_i r_i sigma_i) / 2`` from empirical expectations; not forced PSD."""
    r = np.zeros(3)
    for s in SETTINGS:
        if s not in data.counts or data.total(s) <= 0:
            raise TomographyError(f"setting {s} missing or empty")
        a, b = data.counts[s]
        r[_SETTING_AXIS[s] - 1] = (a - b) / (a + b)
    return qcore.from_bloch(r)


def is_physical(rho, tol: float = 1e-10) -> bool:
    return bool(np.linalg.eigvalsh(rho)[0] >= -tol)


def project_psd(m) -> np.ndarray:
    """Nearest (Frobenius) unit-trace PSD matrix by clipping eigenvalues and renormalizing."""
    w, v = np.linalg.eigh((m + np.conj(m).T) / 2)
    w = np.clip(w, 0, None)
    if w.sum() <= 0:
        return np.eye(len(w), dtype=complex) / len(w)
    w = w / w.sum()
    return (v * w) @ v.conj().T


def t_to_params(t: np.ndarray) -> np.ndarray:
    """Flatten a lower-triangular complex matrix (real diagonal) to real parameters."""
    d = t.shape[0]
    params = [t[i, i].real for i in range(d)]
    for i in range(d):
        for j in range(i):
            params.extend([t[i, j].real, t[i, j].imag])
    return np.array(params)


def params_to_t(params: np.ndarray, d: int) -> np.ndarray:
    t = np.zeros((d, d), dtype=complex)
    t[np.diag_indices(d)] = params[:d]
    k = d
    for i in range(d):
        for j in range(i):
            t[i, j] = params[k] + 1j * params[k + 1]
            k += 2
    return t


def rho_to_t(rho: np.ndarray) -> np.ndarray:
    """Lower triangular ``T`` with ``T^dag T = rho`` (rho must be positive definite)."""
    d = rho.shape[0]
    j = np.eye(d)[::-1]
    low = np.linalg.cholesky(j @ rho @ j)
    return j @ low.conj().T @ j


def params_to_rho(params: np.ndarray, d: int = 2) -> np.ndarray:
    t = params_to_t(params, d)
    m = t.conj().T @ t
    return m / np.trace(m).real


def state_log_likelihood(rho, data) -> float:
    effects, counts = _effects_and_counts(data)
    p = np.einsum("kij,ji->k", effects, rho).real
    mask = counts > 0
    return float(np.sum(counts[mask] * np.log(np.clip(p[mask], 1e-300, None))))


def _state_objective(params, effects, counts, total):
    """Negative log-likelihood per count and its analytic gradient."""
    t = params_to_t(params, 2)
    m = t.conj().T @ t
    z = np.trace(m).real
    p = np.einsum("kij,ji->k", effects, m).real / z
    p = np.clip(p, 1e-300, None)
    ll = np.sum(counts * np.log(p))
    w = counts / p
    r = np.einsum("k,kij->ij", w, effects) - counts.sum() * np.eye(2)
    g = r @ t.conj().T  # d ll / d T contracted as 2 Re tr(R T^dag dT) / z
    grad = 2 * np.array([g[0, 0].real, g[1, 1].real, g[0, 1].real, -g[0, 1].imag]) / z
    return -ll / total, -grad / total


def state_gradient(params, data) -> np.ndarray:
    """Analytic gradient of the log-likelihood w.r.t. the Cholesky parameters."""
    effects, counts = _effects_and_counts(data)
    _, g = _state_objective(params, effects, counts, 1.0)
    return -g


def mle_state(data, max_iter: int = MAX_ITER, rel_tol: float = REL_TOL) -> ReconstructionReport:
    """Maximum-likelihood density matrix for the counts in ``data``."""
    effects, counts = _effects_and_counts(data)
    total = counts.sum()
    if total <= 0:
        rho = qcore.MAXIMALLY_MIXED.copy()
        return ReconstructionReport(rho, 0.0, 0, True, [0.0])

    try:
        start = project_psd(linear_inversion(data))
    except TomographyError:
        start = qcore.MAXIMALLY_MIXED.copy()
    start = 0.9 * start + 0.1 * qcore.MAXIMALLY_MIXED
    x0 = t_to_params(rho_to_t(start))

    history: list[float] = []

    def cb(xk):
        history.append(-_state_objective(xk, effects, counts, total)[0] * total)

    history.append(-_state_objective(x0, effects, counts, total)[0] * total)
    res = minimize(
        _state_objective,
        x0,
        args=(effects, counts, total),
        jac=True,
        method="L-BFGS-B",
        callback=cb,
        options={"maxiter": max_iter, "ftol": rel_tol, "gtol": 1e-12},
    )
    rho = qcore.density_matrix(params_to_rho(res.x))
    ll = state_log_likelihood(rho, data)
    converged = bool(res.success) or _stalled(history, rel_tol)
    return ReconstructionReport(rho, ll, int(res.nit), converged, history)


def _stalled(history, rel_tol):
    if len(history) < 2:
        return True
    a, b = history[-2], history[-1]
    return abs(b - a) <= rel_tol * max(abs(b), 1.0)


# ------------------------------------------------------------ process matrices


def apply_chi(chi, rho_in) -> np.ndarray:
    """``sum_ij chi_ij sigma_i rho sigma_j``."""
    chi = np.asarray(chi, dtype=complex)
    out = np.einsum("ij,iab,bc,jcd->ad", chi, PAULIS, np.asarray(rho_in, dtype=complex), PAULIS)
    return (out + out.conj().T) / 2


def chi_tp_operator(chi) -> np.ndarray:
    """``sum_ij chi_ij sigma_j sigma_i``; equals I for trace-preserving chi."""
    return np.einsum("ij,jab,ibc->ac", np.asarray(chi, dtype=complex), PAULIS, PAULIS)


def is_trace_preserving(chi, tol: float = 1e-9) -> bool:
    return bool(np.allclose(chi_tp_operator(chi), np.eye(2), atol=tol, rtol=0))


def unitary_chi(u) -> np.ndarray:
    """Process matrix of the channel ``rho -> u rho u^dag``."""
    c = np.array([np.trace(p @ u) / 2 for p in PAULIS])
    return np.outer(c, c.conj())


IDENTITY_CHI = np.diag([1, 0, 0, 0]).astype(complex)
SIGMA_Z_CHI = np.diag([0, 0, 0, 1]).astype(complex)
DEPOLARIZING_CHI = np.eye(4, dtype=complex) / 4


def _normalize_tp(chi: np.ndarray) -> np.ndarray:
    """Map a positive chi to the trace-preserving chi of ``rho -> E(K^-1/2 rho K^-1/2)``."""
    k = chi_tp_operator(chi)
    w, v = np.linalg.eigh((k + k.conj().T) / 2)
    k_inv_sqrt = (v / np.sqrt(np.clip(w, 1e-300, None))) @ v.conj().T
    # sigma_i K^-1/2 = sum_m B_im sigma_m
    b = np.einsum("mab,ibc,ca->im", PAULIS, PAULIS, k_inv_sqrt) / 2
    out = b.T @ chi @ b.conj()
    return (out + out.conj().T) / 2


def _normalize_tni(chi: np.ndarray) -> np.ndarray:
    k = chi_tp_operator(chi)
    lam = np.linalg.eigvalsh((k + k.conj().T) / 2)[-1]
    return chi / max(lam, 1.0)


def _process_tensor(inputs: Sequence[np.ndarray], outputs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """``W[n, i, j] = tr(E_n sigma_i rho_n sigma_j)`` for every (input, effect) row n."""
    ws, counts = [], []
    for rho, data in zip(inputs, outputs):
        for s in SETTINGS:
            if s not in data.counts:
                continue
            for eff, n in zip(SETTING_EFFECTS[s], data.counts[s]):
                ws.append(np.einsum("ab,ibc,cd,jda->ij", eff, PAULIS, rho, PAULIS))
                counts.append(n)
    return np.array(ws), np.array(counts, dtype=float)


def _chi_hermitian_basis() -> np.ndarray:
    basis = []
    for i in range(4):
        e = np.zeros((4, 4), dtype=complex)
        e[i, i] = 1
        basis.append(e)
    for i in range(4):
        for j in range(i):
            e = np.zeros((4, 4), dtype=complex)
            e[i, j] = e[j, i] = 1
            basis.append(e)
            e = np.zeros((4, 4), dtype=complex)
            e[i, j], e[j, i] = 1j, -1j
            basis.append(e)
    return np.array(basis)


def chi_linear_inversion(inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Least-squares Hermitian chi mapping each input state to its output state."""
    basis = _chi_hermitian_basis()
    rows, rhs = [], []
    for rho_in, rho_out in zip(inputs, outputs):
        images = np.array([apply_chi(b, rho_in) for b in basis])
        for p in PAULIS:
            rows.append(np.einsum("kab,ba->k", images, p).real)
            rhs.append(np.trace(rho_out @ p).real)
    coef, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return np.einsum("k,kij->ij", coef, basis)


def _check_inputs(inputs):
    vecs = np.array([np.asarray(r, dtype=complex).reshape(-1) for r in inputs])
    if np.linalg.matrix_rank(vecs, tol=1e-8) < 4:
        raise TomographyError("input states do not span the qubit operator space")


def process_log_likelihood(chi, inputs, outputs) -> float:
    w, counts = _process_tensor(inputs, outputs)
    p = np.einsum("nij,ij->n", w, chi).real
    mask = counts > 0
    return float(np.sum(counts[mask] * np.log(np.clip(p[mask], 1e-300, None))))


def mle_process(
    inputs: Sequence[np.ndarray],
    outputs: Sequence,
    trace_preserving: bool = True,
    max_iter: int = MAX_ITER,
    rel_tol: float = REL_TOL,
) -> ReconstructionReport:
    """Maximum-likelihood positive process matrix from per-input tomography counts.

    Positivity comes from ``chi = T^dag T``; trace preservation is imposed
    exactly by renormalizing with ``K = sum chi_ij sigma_j sigma_i``.
    """
    if len(inputs) != len(outputs):
        raise ValueError("inputs and outputs differ in length")
    inputs = [qcore.density_matrix(r) for r in inputs]
    _check_inputs(inputs)
    w, counts = _process_tensor(inputs, outputs)
    total = counts.sum()
    if total <= 0:
        return ReconstructionReport(DEPOLARIZING_CHI.copy(), 0.0, 0, True, [0.0])
    normalize = _normalize_tp if trace_preserving else _normalize_tni

    def chi_of(params):
        t = params_to_t(params, 4)
        return normalize(t.conj().T @ t)

    def nll(params):
        p = np.einsum("nij,ij->n", w, chi_of(params)).real
        mask = counts > 0
        return -np.sum(counts[mask] * np.log(np.clip(p[mask], 1e-300, None))) / total

    def nll_and_grad(params, h=1e-7):
        f = nll(params)
        g = np.empty_like(params)
        for k in range(params.size):
            e = np.zeros_like(params)
            e[k] = h
            g[k] = (nll(params + e) - nll(params - e)) / (2 * h)
        return f, g

    # start from the positive part of the linear-inversion estimate
    est_out = []
    for d in outputs:
        try:
            est_out.append(project_psd(linear_inversion(d)))
        except TomographyError:
            est_out.append(qcore.MAXIMALLY_MIXED)
    chi0 = project_psd(chi_linear_inversion(inputs, est_out))
    chi0 = 0.9 * chi0 + 0.1 * DEPOLARIZING_CHI
    x0 = t_to_params(rho_to_t(chi0))

    history = [-nll(x0) * total]

    def cb(xk):
        history.append(-nll(xk) * total)

    res = minimize(
        nll_and_grad,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=cb,
        options={"maxiter": max_iter, "ftol": rel_tol, "gtol": 1e-10},
    )
    chi = chi_of(res.x)
    ll = process_log_likelihood(chi, inputs, outputs)
    converged = bool(res.success) or _stalled(history, rel_tol)
    return ReconstructionReport(chi, ll, int(res.nit), converged, history)


def process_fidelity(chi, chi_ideal=IDENTITY_CHI) -> float:
    f = float(np.trace(np.asarray(chi) @ np.asarray(chi_ideal)).real)
    return min(max(f, 0.0), 1.0)


# ---------------------------------------------------------------- statistics


def average_state_fidelity(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[float, list[float]]:
    fids = [qcore.fidelity(a, b) for a, b in pairs]
    if not fids:
        raise ValueError("no state pairs given")
    return float(np.mean(fids)), fids


def poisson_resample(data: TomoDataset, rng: np.random.Generator) -> TomoDataset:
    return TomoDataset({s: tuple(int(x) for x in rng.poisson(c)) for s, c in data.counts.items()})


def bootstrap_errors(
    data: TomoDataset | Sequence[TomoDataset],
    metric: Callable,
    n_resamples: int,
    rng: np.random.Generator,
    max_retries: int = 10,
) -> float:
    """Standard deviation of ``metric`` over Poisson-resampled counts.

    ``metric`` receives a resampled dataset (or a list of them, mirroring
    ``data``). A resample on which the metric raises is redrawn at most
    ``max_retries`` times.
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    bundle = not isinstance(data, TomoDataset)
    values = []
    for _ in range(n_resamples):
        for attempt in range(max_retries + 1):
            if bundle:
                sample = [poisson_resample(d, rng) for d in data]
            else:
                sample = poisson_resample(data, rng)
            try:
                v = float(metric(sample))
            except (TomographyError, StateError, np.linalg.LinAlgError, ZeroDivisionError):
                if attempt == max_retries:
                    raise
                continue
            if math.isfinite(v):
                values.append(v)
                break
    return float(np.std(values, ddof=1))
