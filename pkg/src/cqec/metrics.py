"""Figures of merit, baselines and protocol optimization."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import effective as ef
from . import quantum_core as qc
from .controller import ProtocolConfig
from .errors import ConfigError, DivergenceError, InputError

P_DESIRED = 0.99
CLASSICAL_COPIES = 3


def fidelity(rho, psi) -> float:
    """``<psi|rho|psi>`` for a density matrix and a normalized ket."""
    rho = np.asarray(rho, dtype=complex)
    psi = np.asarray(psi, dtype=complex)
    if abs(np.vdot(psi, psi).real - 1.0) > 1e-9:
        raise InputError("target ket is not normalized")
    if abs(np.trace(rho).real - 1.0) > 1e-9:
        raise InputError("density matrix is not normalized")
    return float(np.clip(np.vdot(psi, rho @ psi).real, 0.0, 1.0))


def final_target(schedule: qc.Schedule, L: int = 1, target: str = "schrodinger") -> np.ndarray:
    """Reference ket at ``t_op``: the evolved target or the problem ground state."""
    if target == "schrodinger":
        return ef.target_state(schedule, schedule.t_op, "schrodinger", L).amplitudes
    if target == "ground":
        h = qc.logical_hamiltonian(schedule, schedule.t_op, L)
        if schedule.omega0 == 0.0:
            return ef.initial_logical_state(schedule, L)
        return ef._ground_state(h)
    raise InputError(f"unknown target {target!r}")


def unencoded_baseline(gamma: float, schedule: qc.Schedule, method: str = "closed-form", L: int = 1,
                       target: str = "schrodinger", n_records: int = 2):
    """Final infidelity of ``L`` bare qubits flipping at rate ``gamma``.

    ``closed-form`` is the first-order linear-schedule value ``gamma t_op / 2``
    (one qubit only); ``simulate`` integrates the bare Lindblad equation with
    the logical Hamiltonian. With ``n_records > 2`` the simulated branch
    returns ``(t, infidelity)`` series instead of a number.
    """
    T = schedule.t_op
    if method == "closed-form":
        if gamma * T > 0.5:
            warnings.warn("gamma*t_op above 0.5: the first-order baseline is unreliable")
        if L != 1 or schedule.kind != "linear":
            raise InputError("closed-form baseline covers one qubit on the linear schedule")
        return gamma * T / 2.0
    if method != "simulate":
        raise InputError(f"unknown method {method!r}")
    t, rho, psi, _ = ef.integrate_logical(schedule, L, [gamma] * L, n_records=n_records)
    if target == "ground":
        ref = final_target(schedule, L, "ground")
        inf = 1.0 - np.einsum("i,tij,j->t", ref.conj(), rho, ref).real
    else:
        inf = 1.0 - np.einsum("ti,tij,tj->t", psi.conj(), rho, psi).real
    return (t, inf) if n_records > 2 else float(inf[-1])


def reduction_factor(unencoded, encoded):
    """``R = (1 - F_unenc) / (1 - F_enc)``; works elementwise on arrays."""
    enc = np.asarray(encoded, dtype=float)
    if np.any(enc <= 1e-12):
        raise InputError("encoded infidelity too small for a reduction factor")
    out = np.asarray(unencoded, dtype=float) / enc
    return float(out) if out.ndim == 0 else out


def classical_strategy_infidelity(p_s: float, m: int = CLASSICAL_COPIES) -> float:
    """Failure probability of ``m`` independent unencoded runs."""
    if m < 1:
        raise InputError("need at least one copy")
    if not 0.0 <= p_s <= 1.0:
        raise InputError("p_s must be a probability")
    return (1.0 - p_s) ** m


@dataclass(frozen=True)
class TTSInputs:
    t_op: float
    p_s: float
    p_d: float = P_DESIRED
    N: int = 1
    N_max: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_s < 1.0:
            raise InputError("p_s must lie in [0, 1)")
        if not 0.0 < self.p_d < 1.0:
            raise InputError("p_d must lie in (0, 1)")
        if not 0 < self.N <= self.N_max:
            raise InputError("need 0 < N <= N_max")
        if self.t_op <= 0:
            raise InputError("t_op must be positive")


def tts(inp: TTSInputs) -> float:
    """Time to solution; infinite when the run never succeeds."""
    if inp.p_s == 0.0:
        return math.inf
    reps = math.log(1.0 - inp.p_d) / math.log(1.0 - inp.p_s)
    return inp.t_op * reps * inp.N / inp.N_max


def tts_ratio(t_op: float, inf_cqec: float, inf_unenc: float, L: int = 1,
              m: int = CLASSICAL_COPIES, p_d: float = P_DESIRED) -> dict:
    """``TTS_classical / TTS_CQEC`` with both strategies charged ``3L`` qubits."""
    n = 3 * L
    p_c = 1.0 - classical_strategy_infidelity(1.0 - inf_unenc, m)
    t_c = tts(TTSInputs(t_op, p_c, p_d, n, n))
    t_q = tts(TTSInputs(t_op, 1.0 - inf_cqec, p_d, n, n))
    return {"t_op": t_op, "tts_classical": t_c, "tts_cqec": t_q, "ratio": t_c / t_q,
            "N_classical": n, "N_cqec": n, "N_max": n, "copies": m, "p_d": p_d}


def wonham_reference(gamma: float, tau_m: float) -> float:
    """Logical X rate of the linear Wonham-filter benchmark."""
    if gamma == 0.0:
        return 0.0
    if not gamma * tau_m < 2.0:
        raise InputError("requires gamma*tau_m < 2")
    return 3.0 * gamma**2 * tau_m * math.log(2.0 / (gamma * tau_m))


def equivalent_cycle_time(gamma_L: float, gamma: float) -> float:
    """Cycle time of discrete correction with the same logical X rate."""
    if not gamma > 0:
        raise InputError("gamma must be positive")
    return gamma_L / (3.0 * gamma**2)


# published fit formulas (units Gamma_m = 1)
def fit_gamma_L_opt(gamma, eta: float = 1.0):
    amp, ex = {1.0: (15.7580, 1.904), 0.5: (27.3208, 1.897)}[eta]
    return amp * np.asarray(gamma) ** ex


def fit_tau_memory(gamma):
    return -0.5192 * np.log(5.2891 * np.asarray(gamma))


def fit_tau_plateau(omega0):
    return -0.9079 * np.log(1.2408 * np.asarray(omega0))


def fit_r_plateau(omega0):
    return 2.512 / (np.asarray(omega0) * np.log(1.289 * np.asarray(omega0))) ** 2


def fit_cycle_time(gamma):
    gamma = np.asarray(gamma)
    return 5.2527 / gamma * gamma**0.904


# --------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class OptimizationSpec:
    objective: str = "memory"
    theta1_bounds: tuple = (-1.0, 0.0)
    theta2_bounds: tuple = (0.0, 0.8)
    tau_bounds_tm: tuple = (1.0, 100.0)
    grid: int = 9
    xatol: float = 1e-6
    fatol: float = 1e-14
    maxiter: int = 4000

    def __post_init__(self):
        if self.objective not in ("memory", "annealing"):
            raise InputError(f"unknown objective {self.objective!r}")
        if self.grid < 9:
            raise InputError("grid needs at least 9 points per axis")
        lo1, hi1 = self.theta1_bounds
        lo2, hi2 = self.theta2_bounds
        t0, t1 = self.tau_bounds_tm
        if not (-1.0 <= lo1 < hi1 <= 0.0 and 0.0 <= lo2 < hi2 <= 0.8 and 1.0 <= t0 < t1 <= 100.0):
            raise InputError("bounds must stay inside the protocol's admissible box")


@dataclass
class OptimizationResult:
    tau: float
    theta1: float
    theta2: float
    value: float
    active_bounds: dict
    n_evaluations: int
    grid_best: tuple
    objective: str
    extras: dict = field(default_factory=dict)

    @property
    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(self.tau, self.theta1, self.theta2, self.extras.get("mode", "conventional"))

    def to_dict(self) -> dict:
        return asdict(self)


def _objective(spec: OptimizationSpec, gamma, tau_m, schedule, c, mode):
    gamma = tuple(gamma)

    def f(tau, th1, th2):
        if th1 <= -1.0 or th1 >= th2:
            return math.inf
        try:
            if spec.objective == "memory":
                v = ef.logical_error_rate(gamma, tau, tau_m, th1, th2, c)
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    v = ef.closed_form_infidelity(schedule, gamma, ProtocolConfig(tau, th1, th2, mode),
                                                  tau_m, c)
        except DivergenceError:
            return math.inf
        if not np.isfinite(v):
            raise ConfigError(f"objective not finite at tau={tau}, theta=({th1}, {th2})")
        return float(v)

    return f


def optimize_protocol(spec: OptimizationSpec, gamma, tau_m: float = 0.5,
                      schedule: qc.Schedule | None = None, c: float = ef.C_FIT,
                      mode: str = "conventional") -> OptimizationResult:
    """Grid scan followed by a box-clamped Nelder-Mead refinement."""
    gamma = tuple(gamma) if np.ndim(gamma) else (float(gamma),) * 3
    if spec.objective == "annealing" and schedule is None:
        raise InputError("annealing objective needs a schedule")
    f = _objective(spec, gamma, tau_m, schedule, c, mode)
    tau_lo, tau_hi = (b * tau_m for b in spec.tau_bounds_tm)
    n = spec.grid
    taus = np.geomspace(tau_lo, tau_hi, n)
    th1s = np.linspace(*spec.theta1_bounds, n)
    th2s = np.linspace(*spec.theta2_bounds, n)
    vals = np.array([[[f(t, a, b) for b in th2s] for a in th1s] for t in taus])
    finite = np.isfinite(vals)
    if not finite.any():
        raise ConfigError("objective infeasible on the whole grid")
    best = np.min(vals[finite])
    # ties: lowest tau, then lowest theta1, then lowest theta2 (C order does exactly that)
    i, j, k = np.argwhere(vals == best)[0]
    n_eval = vals.size

    lo = np.array([math.log(tau_lo), spec.theta1_bounds[0], spec.theta2_bounds[0]])
    hi = np.array([math.log(tau_hi), spec.theta1_bounds[1], spec.theta2_bounds[1]])

    def g(x):
        x = np.clip(x, lo, hi)
        return f(math.exp(x[0]), x[1], x[2])

    x0 = np.array([math.log(taus[i]), th1s[j], th2s[k]])
    span = hi - lo
    simplex = [x0] + [np.clip(x0 + np.eye(3)[d] * 0.1 * span[d] * (1 if x0[d] < hi[d] - 0.1 * span[d] else -1),
                              lo, hi) for d in range(3)]
    res = minimize(g, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                   options={"xatol": spec.xatol, "fatol": spec.fatol * max(best, 1e-300),
                            "maxiter": spec.maxiter, "initial_simplex": np.array(simplex)})
    n_eval += res.nfev
    x = np.clip(res.x, lo, hi)
    value = g(x)
    if value > best:
        x, value = x0, best
    tau, th1, th2 = math.exp(x[0]), float(x[1]), float(x[2])
    tol = 1e-6
    active = {
        "tau_lower": bool(x[0] - lo[0] < tol), "tau_upper": bool(hi[0] - x[0] < tol),
        "theta1_lower": bool(th1 - lo[1] < tol), "theta1_upper": bool(hi[1] - th1 < tol),
        "theta2_lower": bool(th2 - lo[2] < tol), "theta2_upper": bool(hi[2] - th2 < tol),
    }
    return OptimizationResult(tau, th1, th2, float(value), active, int(n_eval),
                              (float(taus[i]), float(th1s[j]), float(th2s[k]), float(best)),
                              spec.objective, {"mode": mode, "gamma": list(gamma), "tau_m": tau_m, "c": c})


def power_law_fit(xs, ys):
    """Least-squares fit of ``y = A x**k`` in log-log space; returns ``(A, k)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < 3:
        raise InputError("need at least three (x, y) pairs")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise InputError("power-law fit needs positive data")
    k, logA = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(np.exp(logA)), float(k)


def plateau_reduction(omega0: float, tau_m: float = 0.5, gamma: float = 1e-9, t_op: float = 1000.0,
                      mode: str = "conventional") -> tuple[float, OptimizationResult]:
    """Small-``gamma`` limit of the optimized annealing reduction factor."""
    sch = qc.Schedule.linear(omega0, t_op)
    res = optimize_protocol(OptimizationSpec("annealing"), gamma, tau_m, sch, mode=mode)
    return reduction_factor(unencoded_baseline(gamma, sch), res.value), res
