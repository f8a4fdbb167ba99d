"""Effective open-system model of the protected logical qubit(s).

Rates and times are in units where the measurement strength is one unless a
``MeasurementConfig`` says otherwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson, solve_ivp

from . import _kernels as K
from . import quantum_core as qc
from .controller import ProtocolConfig
from .errors import ConfigError, DivergenceError, InputError

C_FIT = 1.607
C_ANALYTIC = float(np.sqrt(2.0 / np.pi))
SPURIOUS_COEFF = (3.0 * np.pi - 8.0) / 54.0

VARIANT_OF_MODE = {"conventional": "standard", "approximate": "approximate", "modified": "none"}


def detection_time(tau: float, theta1: float) -> float:
    """Noiseless time for a flipped signal to fall from +1 to ``theta1``."""
    if theta1 <= -1.0:
        raise DivergenceError("detection time diverges for theta1 <= -1")
    if theta1 > 1.0:
        raise InputError("theta1 must not exceed 1")
    return tau * np.log(2.0 / (1.0 + theta1))


def window_times(tau: float, theta1: float, theta2: float):
    """Two-error coincidence windows ``(dt12, dt23, dt13)``."""
    if not theta1 < theta2:
        raise InputError("need theta1 < theta2")
    t12 = detection_time(tau, theta1)
    t13 = tau * np.log((1.0 + theta2) / (1.0 + theta1))
    return t12, t12, t13


def misdiagnosis_prob(tau: float, tau_m: float, theta1: float, theta2: float,
                      c: float = C_FIT, q: int = 2) -> float:
    """Probability that a single ``X_q`` is corrected on the wrong qubit.

    Only the middle qubit flips both signals at once; the outer qubits are
    taken as never misdiagnosed.
    """
    if q in (1, 3):
        return 0.0
    if q != 2:
        raise InputError("q must be 1, 2 or 3 (position inside the block)")
    ratio = tau / tau_m
    if ratio < 1.0:
        warnings.warn("misdiagnosis estimate assumes tau >= tau_m")
    dth = theta2 - theta1
    if dth <= 0:
        raise InputError("need theta1 < theta2")
    p = c * np.exp(-dth * dth * ratio / 2.0) / (dth * np.sqrt(ratio))
    return float(min(p, np.nextafter(1.0, 0.0)))


def logical_error_rate(gamma, tau: float, tau_m: float, theta1: float, theta2: float,
                       c: float = C_FIT) -> float:
    """Logical X rate of one block with bit-flip rates ``gamma = (g1, g2, g3)``."""
    g1, g2, g3 = (float(g) for g in gamma)
    t12, t23, t13 = window_times(tau, theta1, theta2)
    p2 = misdiagnosis_prob(tau, tau_m, theta1, theta2, c, 2)
    return g2 * p2 + 2.0 * (g1 * g2 * t12 + g2 * g3 * t23 + g1 * g3 * t13)


@dataclass(frozen=True)
class EffectiveParams:
    t_det: tuple
    windows: tuple
    p_mis: tuple
    gamma_L: float
    c_fit: float = C_FIT

    @classmethod
    def build(cls, gamma, protocol: ProtocolConfig, tau_m: float, c: float = C_FIT):
        p = protocol
        td = detection_time(p.tau, p.theta1)
        win = window_times(p.tau, p.theta1, p.theta2)
        pm = tuple(misdiagnosis_prob(p.tau, tau_m, p.theta1, p.theta2, c, q) for q in (1, 2, 3))
        gl = logical_error_rate(gamma, p.tau, tau_m, p.theta1, p.theta2, c)
        return cls((td,) * 3, win, pm, gl, c)


def block_params(gamma, protocol: ProtocolConfig, tau_m: float, c: float = C_FIT):
    """One ``EffectiveParams`` per logical block of a rate vector of length 3L."""
    gamma = tuple(gamma)
    if len(gamma) % 3:
        raise InputError("rate vector length must be a multiple of 3")
    return [EffectiveParams.build(gamma[3 * l: 3 * l + 3], protocol, tau_m, c)
            for l in range(len(gamma) // 3)]


# --------------------------------------------------------------------------
# target evolution


@dataclass(frozen=True)
class SpuriousGeometry:
    theta: np.ndarray
    theta_tilde: np.ndarray
    omega_tilde: np.ndarray


def spurious_geometry(schedule: qc.Schedule, t) -> SpuriousGeometry:
    a, b = schedule.coefficients(t)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return SpuriousGeometry(np.arctan2(a, b), np.arctan2(3.0 * a, b),
                            schedule.omega0 * np.sqrt(a * a + b * b / 9.0))


@dataclass(frozen=True)
class TargetState:
    amplitudes: np.ndarray
    method: str

    def __post_init__(self):
        n = np.linalg.norm(self.amplitudes, axis=-1)
        if np.max(np.abs(n - 1.0)) > 1e-10:
            raise InputError("target state is not normalized")

    @property
    def alpha(self):
        return self.amplitudes[..., 0]

    @property
    def beta(self):
        return self.amplitudes[..., 1]


def _ground_state(h: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(h)
    psi = v[..., :, 0]
    # fix the global phase so the largest component is real and positive
    k = np.argmax(np.abs(psi), axis=-1)
    ph = np.take_along_axis(psi, k[..., None], axis=-1)
    return psi * (np.abs(ph) / ph)


def initial_logical_state(schedule: qc.Schedule, L: int = 1) -> np.ndarray:
    """Ground state of the logical Hamiltonian at t=0, or ``|0...0>`` for memory."""
    if schedule.kind == "memory" or schedule.omega0 == 0.0:
        psi = np.zeros(2**L, dtype=complex)
        psi[0] = 1.0
        return psi
    return _ground_state(qc.logical_hamiltonian(schedule, 0.0, L)).astype(complex)


def target_state(schedule: qc.Schedule, t, method: str = "schrodinger", L: int = 1) -> TargetState:
    """Ideal logical state at time(s) ``t``."""
    t_arr = np.asarray(t, dtype=float)
    schedule.check_time(t_arr)
    if method == "adiabatic":
        a, b = schedule.coefficients(t_arr)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if np.any((a == 0) & (b == 0)):
            raise InputError("ground-state angle undefined where a = b = 0")
        if L == 1:
            th = np.arctan2(a, b)
            amp = np.stack([np.cos(th / 2), np.sin(th / 2)], axis=-1).astype(complex)
        else:
            amp = _ground_state(qc.logical_hamiltonian(schedule, t_arr, L)).astype(complex)
        return TargetState(amp, method)
    if method != "schrodinger":
        raise InputError(f"unknown target method {method!r}")
    psi0 = initial_logical_state(schedule, L)
    if schedule.omega0 == 0.0:
        amp = np.broadcast_to(psi0, t_arr.shape + psi0.shape).copy()
        return TargetState(amp, method)
    A, B = qc.logical_hamiltonian_terms(L, schedule.coupling_sign)

    def rhs(s, y):
        a, b = schedule.coefficients(min(s, schedule.t_op))
        return -1j * (-schedule.omega0 * (a * A + b * B)) @ y

    flat = np.atleast_1d(t_arr).ravel()
    order = np.argsort(flat)
    ts = flat[order]
    sol = solve_ivp(rhs, (0.0, max(ts[-1], 1e-300)), psi0, method="DOP853",
                    t_eval=ts, rtol=1e-12, atol=1e-13)
    amp = np.empty((len(flat), len(psi0)), dtype=complex)
    amp[order] = sol.y.T
    amp /= np.linalg.norm(amp, axis=-1, keepdims=True)
    return TargetState(amp.reshape(t_arr.shape + psi0.shape), method)


# --------------------------------------------------------------------------
# spurious logical errors


def spurious_kraus(q: int, schedule: qc.Schedule, t, t_det: float, variant: str = "standard",
                   L: int = 1) -> np.ndarray:
    """Logical error operator left by spurious evolution while ``X_q`` is undetected."""
    hL = qc.logical_hamiltonian(schedule, t, L)
    if variant == "none":
        return np.broadcast_to(np.eye(2**L, dtype=complex), hL.shape).copy()
    hsp = qc.logical_hamiltonian(schedule, t, L, flipped=q)
    if variant == "standard":
        return qc.hermitian_expm(hL, -t_det) @ qc.hermitian_expm(hsp, t_det)
    if variant == "approximate":
        return (qc.hermitian_expm(hL, -t_det) @ qc.hermitian_expm(hL - hsp, t_det)
                @ qc.hermitian_expm(hsp, t_det))
    raise InputError(f"unknown spurious variant {variant!r}")


def _variant(protocol: ProtocolConfig, variant: str | None) -> str:
    return VARIANT_OF_MODE[protocol.mode] if variant is None else variant


# --------------------------------------------------------------------------
# effective master equation


@dataclass
class EffectiveResult:
    t: np.ndarray
    rho: np.ndarray
    psi: np.ndarray
    params: list
    step: float

    @property
    def fidelity(self) -> np.ndarray:
        return np.einsum("ti,tij,tj->t", self.psi.conj(), self.rho, self.psi).real

    @property
    def infidelity(self) -> np.ndarray:
        return 1.0 - self.fidelity

    def fidelity_to(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=complex)
        return np.einsum("i,tij,j->t", psi.conj(), self.rho, psi).real


class _Generator:
    """Vectorized Liouvillian (row-major vec) of

    ``-i[h, r] + sum_l x_l (sx_l r sx_l - r) + sum_q s_q (V_q r V_q^dag - r)``.
    """

    def __init__(self, schedule, L, x_rates, v_rates, t_det, variant):
        self.schedule = schedule
        self.L = L
        self.dL = 2**L
        self.variant = variant
        self.t_det = t_det
        self.rates = list(v_rates)
        self.eye = np.eye(self.dL)
        n2 = self.dL**2
        const = np.zeros((n2, n2), dtype=complex)
        for l, x in enumerate(x_rates):
            sx = qc.build_pauli_string(L, [(l + 1, "X")])
            const += x * (np.kron(sx, sx) - np.eye(n2))
        self.const = const
        self.static = schedule.omega0 == 0.0 or variant == "none" or not any(self.rates)

    def hamiltonian(self, t):
        if self.schedule.omega0 == 0.0:
            return np.zeros(np.shape(t) + (self.dL, self.dL), dtype=complex)
        return qc.logical_hamiltonian(self.schedule, t, self.L)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        h = self.hamiltonian(t)
        I = self.eye
        n2 = self.dL**2
        G = -1j * (np.einsum("...ij,kl->...ikjl", h, I) - np.einsum("ij,...lk->...ikjl", I, h))
        G = G.reshape(t.shape + (n2, n2)) + self.const
        if not self.static:
            for q, rate in enumerate(self.rates, start=1):
                if rate == 0.0:
                    continue
                V = spurious_kraus(q, self.schedule, t, self.t_det, self.variant, self.L)
                VV = np.einsum("...ij,...kl->...ikjl", V, V.conj()).reshape(t.shape + (n2, n2))
                G = G + rate * (VV - np.eye(n2))
        return np.ascontiguousarray(G), np.ascontiguousarray(h)


def _rk4_propagator(G1, G2, G3, h):
    n = G1.shape[-1]
    eye = np.eye(n)
    K1 = G1
    K2 = G2 @ (eye + 0.5 * h * K1)
    K3 = G2 @ (eye + 0.5 * h * K2)
    K4 = G3 @ (eye + h * K3)
    return eye + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)


def integrate_logical(schedule: qc.Schedule, L: int, x_rates, v_rates=None, t_det: float = 0.0,
                      variant: str = "none", rho0=None, step: float | None = None,
                      n_records: int = 201, chunk: int = 4096, t_end: float | None = None):
    """Fixed-step RK4 for a logical master equation with X and ``V_q`` jumps.

    Returns ``(t, rho, psi, h)`` where ``psi`` is the ideal ket advanced by
    the same integrator from the t=0 ground state.
    """
    T = schedule.t_op if t_end is None else t_end
    if step is None:
        step = min(1e-2, T / 1e4)
    n_steps = max(1, int(np.ceil(T / step - 1e-9)))
    v_rates = [0.0] * (3 * L) if v_rates is None else list(v_rates)
    gen = _Generator(schedule, L, list(x_rates), v_rates, t_det, variant)

    n_int = max(1, n_records - 1)
    stride = max(1, int(np.ceil(n_steps / n_int)))
    n_steps = stride * n_int
    h = T / n_steps

    # local error estimate by step doubling at a spread of times
    probe = np.linspace(0.0, T - h, 9)
    G = gen(np.minimum(np.stack([probe, probe + h / 4, probe + h / 2, probe + 3 * h / 4, probe + h], -1),
                       schedule.t_op))[0]
    full = _rk4_propagator(G[:, 0], G[:, 2], G[:, 4], h)
    half = _rk4_propagator(G[:, 2], G[:, 3], G[:, 4], h / 2) @ _rk4_propagator(G[:, 0], G[:, 1], G[:, 2], h / 2)
    err = float(np.max(np.abs(full - half)))
    if err > 1e-6:
        raise ConfigError(f"RK4 step {h:.3g} too large (local error {err:.2e})")

    n_rec = n_int + 1
    dL = 2**L
    psi = initial_logical_state(schedule, L)
    if rho0 is None:
        rho_init = np.outer(psi, psi.conj())
    else:
        rho_init = np.asarray(rho0, dtype=complex)
        if rho_init.ndim == 1:
            rho_init = np.outer(rho_init, rho_init.conj())
    y = rho_init.ravel().copy()
    out_y = np.zeros((n_rec, dL * dL), dtype=complex)
    out_p = np.zeros((n_rec, dL), dtype=complex)
    out_y[0] = y
    out_p[0] = psi
    for j0 in range(0, n_steps, chunk):
        j1 = min(n_steps, j0 + chunk)
        ts = np.minimum((j0 + 0.5 * np.arange(2 * (j1 - j0) + 1)) * h, schedule.t_op)
        Gs, hs = gen(ts)
        y, psi = K.rk4_linear(y, psi, Gs, hs, h, stride, out_y, out_p, j0)
    rho = out_y.reshape(n_rec, dL, dL)
    out_p /= np.linalg.norm(out_p, axis=-1, keepdims=True)
    t = np.arange(n_rec) * stride * h
    return t, rho, out_p, h


def evolve_effective(schedule: qc.Schedule, gamma, protocol: ProtocolConfig, tau_m: float = 0.5,
                     L: int = 1, variant: str | None = None, rho0=None, c: float = C_FIT,
                     step: float | None = None, n_records: int = 201,
                     chunk: int = 4096, t_end: float | None = None) -> EffectiveResult:
    """Integrate the effective logical master equation with classical RK4.

    ``gamma`` lists one bit-flip rate per physical qubit (length ``3L``) and
    ``variant`` selects the spurious-error operator (default follows the
    protocol's correction mode).
    """
    gamma = tuple(gamma)
    if len(gamma) != 3 * L:
        raise InputError("need 3L bit-flip rates")
    variant = _variant(protocol, variant)
    params = block_params(gamma, protocol, tau_m, c)
    x_rates = [par.gamma_L for par in params]
    v_rates = [gamma[q] * (1.0 - params[q // 3].p_mis[q % 3]) for q in range(3 * L)]
    t, rho, psi, h = integrate_logical(schedule, L, x_rates, v_rates, params[0].t_det[0], variant,
                                       rho0, step, n_records, chunk, t_end)
    return EffectiveResult(t, rho, psi, params, h)


# --------------------------------------------------------------------------
# closed forms


def closed_form_infidelity(schedule: qc.Schedule, gamma, protocol: ProtocolConfig, tau_m: float = 0.5,
                           c: float = C_FIT, variant: str | None = None, method: str = "auto",
                           panels: int = 10_000) -> float:
    """Final infidelity of one logical qubit to second order in ``omega0 t_det``.

    ``method="closed"`` uses the linear-schedule expression, ``"quadrature"``
    integrates the general-schedule integrands with composite Simpson.
    """
    gamma = tuple(gamma)
    if len(gamma) != 3:
        raise InputError("closed form covers a single logical qubit")
    variant = _variant(protocol, variant)
    par = EffectiveParams.build(gamma, protocol, tau_m, c)
    T = schedule.t_op
    if schedule.kind == "memory" or schedule.omega0 == 0.0:
        return par.gamma_L * T
    if schedule.omega0 * T < 10:
        warnings.warn("closed form assumes adiabatic evolution (omega0*t_op >> 1)")
    rates = [g * (1.0 - p) for g, p in zip(gamma, par.p_mis)]
    td = par.t_det[0]
    if method == "auto":
        method = "closed" if schedule.kind == "linear" and variant != "approximate" else "quadrature"
    if method == "closed":
        if variant == "approximate":
            raise InputError("no closed form for the approximate variant")
        spur = 0.0 if variant == "none" else sum(
            SPURIOUS_COEFF * r * (schedule.omega0 * td) ** 2 * T for r in rates)
        return par.gamma_L * T / 2.0 + spur
    if method != "quadrature":
        raise InputError(f"unknown method {method!r}")
    ts = np.linspace(0.0, T, 2 * panels + 1)
    geo = spurious_geometry(schedule, ts)
    total = par.gamma_L * simpson(np.cos(geo.theta) ** 2, x=ts)
    if variant == "standard":
        f = np.sin(geo.theta - geo.theta_tilde) ** 2 * np.sin(geo.omega_tilde * td) ** 2
        total += sum(rates) * simpson(f, x=ts)
    elif variant == "approximate":
        psi = target_state(schedule, ts, "adiabatic").amplitudes
        for q, r in enumerate(rates, start=1):
            V = spurious_kraus(q, schedule, ts, td, "approximate")
            ov = np.einsum("ti,tij,tj->t", psi.conj(), V, psi)
            total += r * simpson(1.0 - np.abs(ov) ** 2, x=ts)
    return float(total)


def single_jump_state(schedule: qc.Schedule, gamma, protocol: ProtocolConfig, tau_m: float = 0.5,
                      c: float = C_FIT, variant: str | None = None, n_steps: int | None = None):
    """Final logical state keeping at most one logical error event.

    Returns ``(rho, psi_final)``.
    """
    gamma = tuple(gamma)
    if len(gamma) != 3:
        raise InputError("single-jump expansion covers a single logical qubit")
    variant = _variant(protocol, variant)
    par = EffectiveParams.build(gamma, protocol, tau_m, c)
    T = schedule.t_op
    rates = [g * (1.0 - p) for g, p in zip(gamma, par.p_mis)]
    if (par.gamma_L + sum(gamma)) * T >= 0.3:
        warnings.warn("single-jump expansion used outside its small-rate regime")
    if n_steps is None:
        n_steps = max(2000, int(np.ceil(T / 0.02)))
    n_steps += n_steps % 2
    ts = np.linspace(0.0, T, n_steps + 1)
    h = ts[1] - ts[0]
    psi0 = initial_logical_state(schedule, 1)
    # propagators U(0, t_k) by midpoint exponentials
    U = np.empty((n_steps + 1, 2, 2), dtype=complex)
    U[0] = np.eye(2)
    if schedule.omega0 != 0.0:
        steps = qc.hermitian_expm(qc.logical_hamiltonian(schedule, ts[:-1] + h / 2), h)
        for k in range(n_steps):
            U[k + 1] = steps[k] @ U[k]
    else:
        U[:] = np.eye(2)
    psi_t = U @ psi0
    UT = U[-1]
    back = UT @ np.swapaxes(U, -1, -2).conj()
    psi_T = psi_t[-1]
    rho = (1.0 - par.gamma_L * T - sum(rates) * T) * np.outer(psi_T, psi_T.conj())

    def jump_term(ops):
        phi = back @ np.einsum("...ij,...j->...i", ops, psi_t)[..., None]
        dens = phi @ np.swapaxes(phi, -1, -2).conj()
        return simpson(dens, x=ts, axis=0)

    rho = rho + par.gamma_L * jump_term(np.broadcast_to(qc.SIGMA_X, (n_steps + 1, 2, 2)))
    if variant != "none" and schedule.omega0 != 0.0:
        for q, r in enumerate(rates, start=1):
            if r:
                V = spurious_kraus(q, schedule, ts, par.t_det[0], variant)
                rho = rho + r * jump_term(V)
    elif variant == "none" or schedule.omega0 == 0.0:
        rho = rho + sum(rates) * T * np.outer(psi_T, psi_T.conj())
    return rho, psi_T


# --------------------------------------------------------------------------
# Monte Carlo check of the misdiagnosis probability


@dataclass
class MisdiagResult:
    q: int
    p_hat: float
    ci: tuple
    n_misdiagnosed: int
    n_diagnosed: int
    n_timeout: int
    tags: dict

    @property
    def n_trials(self) -> int:
        return self.n_diagnosed + self.n_timeout


def monte_carlo_misdiag(q: int, protocol: ProtocolConfig, measurement=None, n_trials: int = 10_000,
                        seed: int = 0, warmup: float | None = None, max_wait: float | None = None,
                        block: int = 2048) -> MisdiagResult:
    """Estimate how often a single injected ``X_q`` is corrected on the wrong qubit.

    Each trial lets the filters reach their stationary noise for ``warmup``
    (controller off), injects ``X_q``, enables the controller and runs until
    the first diagnosis or ``max_wait`` (default ``100 tau``).
    """
    from scipy.stats import binomtest

    from .trajectory import ErrorModel, MeasurementConfig, TrajectoryConfig, _Runner, _Static

    if n_trials < 100:
        raise InputError("need at least 100 trials")
    if q not in (1, 2, 3):
        raise InputError("q must be 1, 2 or 3")
    m = measurement or MeasurementConfig()
    dt = m.dt
    warmup = 5.0 * protocol.tau if warmup is None else warmup
    max_wait = 100.0 * protocol.tau if max_wait is None else max_wait
    g_inj = int(round(warmup / dt))
    n_total = g_inj + int(np.ceil(max_wait / dt))
    T = n_total * dt
    cfg = TrajectoryConfig(
        measurement=m, errors=ErrorModel.uniform(0.0), protocol=protocol,
        schedule=qc.Schedule.memory(T), controller_start=g_inj * dt,
        record_stride=n_total, forced_errors=((g_inj * dt, q),),
        stop_on_first_diagnosis=True)
    static = _Static(cfg)
    psi_rec = static.target_records()
    ub = static.ublocks(0, 0)
    tags = {1: 0, 2: 0, 3: 0}
    timeouts = 0
    for i in range(n_trials):
        run = _Runner(static, (seed, i), psi_rec)
        g = 0
        while not run.done:
            g = min(n_total, g + block)
            run.advance(g, ub, 0)
        if run.stopped:
            tags[run.events[0].qubit] += 1
        else:
            timeouts += 1
    n_diag = n_trials - timeouts
    n_mis = n_diag - tags[q]
    if n_diag:
        ci = binomtest(n_mis, n_diag).proportion_ci(confidence_level=0.95, method="wilson")
        ci = (float(ci.low), float(ci.high))
        p_hat = n_mis / n_diag
    else:
        ci, p_hat = (0.0, 1.0), float("nan")
    return MisdiagResult(q, p_hat, ci, n_mis, n_diag, timeouts, tags)
