"""Conditioned evolution of the encoded register under weak stabilizer readout.

The public sub-step functions (``sample_readout``, ``bayesian_update``,
``hamiltonian_step``, ``decoherence_step``) are plain numpy and serve as the
reference semantics. ``run_trajectory`` and ``run_ensemble`` drive the fused
kernel in :mod:`cqec._kernels`, which performs the same sub-steps in the same
order.
"""

from __future__ import annotations

import csv
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from . import _kernels as K
from . import quantum_core as qc
from .controller import SYNDROMES, DiagnosisEvent, ProtocolConfig
from .errors import ConfigError, DegenerateExtractionError, InputError, InvariantViolation

DEFAULT_DT = 5e-3
CHUNK_STEPS = 8192
EVENT_BUFFER = 256


@dataclass(frozen=True)
class MeasurementConfig:
    gamma_m: float = 1.0
    eta: float = 1.0
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if not self.gamma_m > 0:
            raise InputError("gamma_m must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise InputError("eta must lie in (0, 1]")
        if not self.dt > 0:
            raise InputError("dt must be positive")
        if self.dt > 0.05 / self.gamma_m:
            warnings.warn("dt exceeds 0.05/gamma_m; the discretization may be inaccurate")

    @property
    def tau_m(self) -> float:
        return 1.0 / (2.0 * self.gamma_m * self.eta)

    @property
    def D(self) -> float:
        return self.tau_m / self.dt


@dataclass(frozen=True)
class ErrorModel:
    gamma: tuple
    mode: str = "lindblad"

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if len(self.gamma) not in (3, 6):
            raise InputError("need one rate per physical qubit (3 or 6)")
        if any(g < 0 for g in self.gamma):
            raise InputError("bit-flip rates must be non-negative")
        if self.mode not in ("lindblad", "jump"):
            raise InputError(f"unknown decoherence mode {self.mode!r}")

    @classmethod
    def uniform(cls, gamma: float, L: int = 1, mode: str = "lindblad") -> "ErrorModel":
        return cls((gamma,) * (3 * L), mode)

    @property
    def L(self) -> int:
        return len(self.gamma) // 3


@dataclass(frozen=True)
class SignalFrame:
    t: float
    i_bar: np.ndarray
    i_filt: np.ndarray


@dataclass(frozen=True)
class TrajectoryConfig:
    """Everything needed to reproduce one conditioned trajectory."""

    measurement: MeasurementConfig
    errors: ErrorModel
    protocol: ProtocolConfig
    schedule: qc.Schedule
    psi0: tuple | None = None
    controller: bool = True
    controller_start: float = 0.0
    record_stride: int = 100
    noiseless: bool = False
    forced_errors: tuple = ()
    stop_on_first_diagnosis: bool = False
    t_end: float | None = None
    check_every: int = 1000

    def __post_init__(self):
        if self.record_stride < 1:
            raise ConfigError("record_stride must be at least 1")
        if not self.measurement.dt < self.protocol.tau:
            raise ConfigError("dt must be smaller than tau")
        for g in self.errors.gamma:
            if g * self.measurement.dt > 0.01:
                warnings.warn("gamma*dt exceeds 0.01")
        n = self.n_steps
        if abs(n * self.measurement.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise ConfigError("simulated duration must be a multiple of dt")
        for t, q in self.forced_errors:
            if not 1 <= q <= 3 * self.L:
                raise ConfigError(f"forced error on unknown qubit {q}")

    @property
    def L(self) -> int:
        return self.errors.L

    @property
    def duration(self) -> float:
        return self.schedule.t_op if self.t_end is None else self.t_end

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.measurement.dt))

    @property
    def n_records(self) -> int:
        return self.n_steps // self.record_stride + 1

    def record_times(self) -> np.ndarray:
        return np.arange(self.n_records) * self.record_stride * self.measurement.dt


@dataclass
class TrajectoryRecord:
    seed: tuple
    t: np.ndarray
    p_code: np.ndarray
    fidelity: np.ndarray
    i_bar: np.ndarray
    i_filt: np.ndarray
    flags: np.ndarray
    events: list = field(default_factory=list)
    injected: list = field(default_factory=list)
    final_rho: np.ndarray | None = None
    steps_done: int = 0
    stopped: bool = False
    underflows: int = 0

    def frames(self):
        for k in range(len(self.t)):
            yield SignalFrame(self.t[k], self.i_bar[k], self.i_filt[k])

    def to_csv(self, path) -> None:
        n_det = self.i_bar.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["t"]
            head += [f"I{k + 1}_bar" for k in range(n_det)]
            head += [f"I{k + 1}_filt" for k in range(n_det)]
            w.writerow(head + ["p_code", "fidelity", "event_flag"])
            for k in range(len(self.t)):
                row = [self.t[k], *self.i_bar[k], *self.i_filt[k], self.p_code[k], self.fidelity[k]]
                w.writerow([f"{v:.17g}" for v in row] + [int(self.flags[k])])


# --------------------------------------------------------------------------
# reference sub-steps


def _detector_eigs(k: int, d: int) -> np.ndarray:
    L = {8: 1, 64: 2}.get(d)
    if L is None:
        raise InputError(f"unsupported register dimension {d}")
    ev = qc.stabilizer_eigenvalues(L)
    if not 0 <= k < ev.shape[0]:
        raise InputError(f"detector index {k} out of range")
    return ev[k]


def sample_readout(rho: np.ndarray, k: int, cfg: MeasurementConfig, rng=None, u=None, zeta=None):
    """Discretized readout of stabilizer ``k`` (0-based).

    ``u`` and ``zeta`` override the uniform and standard-normal deviates.
    """
    e = _detector_eigs(k, rho.shape[0])
    pop = rho.diagonal().real
    if u is None:
        u = rng.random()
    if zeta is None:
        zeta = rng.standard_normal()
    s = 1.0 if u * pop.sum() < pop[e > 0].sum() else -1.0
    return s + np.sqrt(cfg.D) * zeta


def bayesian_update(rho: np.ndarray, k: int, i_bar: float, cfg: MeasurementConfig,
                    return_flag: bool = False):
    """Condition the state on readout ``i_bar`` of stabilizer ``k``."""
    e = _detector_eigs(k, rho.shape[0])
    D = cfg.D
    c = i_bar / D
    half = 0.5 * (c * e - abs(c))
    w = np.exp(half[:, None] + half[None, :])
    gij = cfg.gamma_m * (1.0 - cfg.eta) * (e[:, None] - e[None, :]) ** 2 / 4.0
    num = rho * w
    denom = num.diagonal().real.sum()
    underflow = denom < K.UNDERFLOW_FLOOR
    if underflow:
        denom = K.UNDERFLOW_FLOOR
    out = num * np.exp(-gij * cfg.dt) / denom
    return (out, underflow) if return_flag else out


def hamiltonian_step(rho: np.ndarray, schedule: qc.Schedule, t: float, dt: float, L: int | None = None):
    """Midpoint-Magnus unitary step over ``[t, t+dt]``."""
    if L is None:
        L = {8: 1, 64: 2}[rho.shape[0]]
    H = qc.build_hamiltonian(schedule, t + 0.5 * dt, L)
    U = qc.hermitian_expm(H, dt)
    return U @ rho @ U.conj().T


def decoherence_step(rho: np.ndarray, em: ErrorModel, dt: float, rng=None, u=None):
    """Bit-flip decoherence; returns ``(rho, flipped_qubits)``.

    In jump mode ``u`` may supply one uniform deviate per qubit.
    """
    L = em.L
    if rho.shape[0] != 2 ** (3 * L):
        raise InputError("error model and state dimension disagree")
    gam = np.asarray(em.gamma)
    if np.any(gam * dt > 0.01):
        warnings.warn("gamma*dt exceeds 0.01")
    idx = np.arange(rho.shape[0])
    if em.mode == "lindblad":
        out = (1.0 - dt * gam.sum()) * rho
        for q, g in enumerate(gam, start=1):
            if g:
                p = idx ^ qc.flip_mask(q, L)
                out = out + dt * g * rho[np.ix_(p, p)]
        return out, []
    if u is None:
        u = rng.random(len(gam))
    flipped = []
    for q, g in enumerate(gam, start=1):
        if u[q - 1] < g * dt:
            p = idx ^ qc.flip_mask(q, L)
            rho = rho[np.ix_(p, p)]
            flipped.append(q)
    return rho, flipped


def extract_logical(rho: np.ndarray, L: int | None = None):
    """Normalized code-space block and the code-space probability."""
    if L is None:
        L = {8: 1, 64: 2}[rho.shape[0]]
    code = qc.code_indices(L)
    block = rho[np.ix_(code, code)]
    p = float(block.diagonal().real.sum())
    if p < 1e-12:
        raise DegenerateExtractionError(p)
    return block / p, p


def check_state(rho: np.ndarray, step=None) -> None:
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > 1e-10:
        raise InvariantViolation(f"state lost Hermiticity ({herm:.2e})", step)
    tr = np.trace(rho).real
    if abs(tr - 1.0) > 1e-9:
        raise InvariantViolation(f"trace drifted to {tr!r}", step)
    lo = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lo < -1e-8:
        raise InvariantViolation(f"negative eigenvalue {lo:.2e}", step)


# --------------------------------------------------------------------------
# trajectories


def trajectory_seed(seed) -> np.random.SeedSequence:
    """Seed sequence of a trajectory; ``(master, index)`` pairs hash stably."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        master, index = seed
        return np.random.SeedSequence(int(master), spawn_key=(int(index),))
    return np.random.SeedSequence(int(seed))


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(trajectory_seed(seed)))


def initial_ket(config: TrajectoryConfig) -> np.ndarray:
    if config.psi0 is not None:
        psi = np.asarray(config.psi0, dtype=complex)
        return psi / np.linalg.norm(psi)
    from .effective import initial_logical_state

    return initial_logical_state(config.schedule, config.L)


class _Static:
    """Quantities shared by every trajectory of a configuration."""

    def __init__(self, config: TrajectoryConfig):
        self.config = config
        L = config.L
        m = config.measurement
        self.L = L
        self.d = 2 ** (3 * L)
        # the kernel works in the sector-ordered basis: kernel index k <-> standard perm[k]
        self.sectors = np.ascontiguousarray(qc.sector_indices(L))
        self.perm = self.sectors.ravel()
        self.inv = np.argsort(self.perm)
        perm, inv = self.perm, self.inv
        self.evals = np.ascontiguousarray(qc.stabilizer_eigenvalues(L), dtype=float)
        self.n_det = self.evals.shape[0]
        e = self.evals
        rate = m.gamma_m * (1.0 - m.eta) * ((e[:, :, None] - e[:, None, :]) ** 2).sum(0) / 4.0
        self.dephase = np.exp(-rate * m.dt)
        self.k_evals = np.ascontiguousarray(e[:, perm])
        self.k_dephase = np.ascontiguousarray(self.dephase[np.ix_(perm, perm)])
        self.code = np.ascontiguousarray(qc.code_indices(L))
        self.k_code = np.arange(len(self.code), dtype=np.int64)
        self.masks = np.array([qc.flip_mask(q, L) for q in range(1, 3 * L + 1)], dtype=np.int64)
        self.k_flips = np.ascontiguousarray(inv[perm[None, :] ^ self.masks[:, None]])
        self.gammas = np.asarray(config.errors.gamma, dtype=float)
        self.jump = config.errors.mode == "jump"
        sch = config.schedule
        self.has_h = sch.omega0 != 0.0
        A, B = qc.hamiltonian_terms(L, sch.coupling_sign)
        self.A = np.ascontiguousarray(A)
        self.B = np.ascontiguousarray(B)
        self.k_A = np.ascontiguousarray(A[np.ix_(perm, perm)])
        self.k_B = np.ascontiguousarray(B[np.ix_(perm, perm)])
        self.Ab = qc.sector_blocks(A, L)
        self.Bb = qc.sector_blocks(B, L)
        n = config.n_steps
        t_end = (np.arange(n) + 1) * m.dt
        t_end = np.minimum(t_end, sch.t_op)
        a_end, b_end = sch.coefficients(t_end)
        self.a_end = np.ascontiguousarray(np.broadcast_to(a_end, (n,)), dtype=float)
        self.b_end = np.ascontiguousarray(np.broadcast_to(b_end, (n,)), dtype=float)
        self.forced = np.zeros(n, dtype=np.int64)
        for t, q in config.forced_errors:
            g = int(round(t / m.dt))
            if not 0 <= g < n:
                raise ConfigError(f"forced error at t={t} outside the run")
            self.forced[g] = q
        self.ctrl_from = int(np.ceil(config.controller_start / m.dt - 1e-9)) if config.controller else n + 1
        self.mode = {"conventional": K.MODE_CONVENTIONAL, "modified": K.MODE_MODIFIED,
                     "approximate": K.MODE_APPROXIMATE}[config.protocol.mode]
        from .effective import detection_time

        p = config.protocol
        self.t_det = detection_time(p.tau, p.theta1) if p.theta1 > -1 else 0.0
        self.n_u = 2 * self.n_det + (len(self.gammas) if self.jump else 0)
        self.psi0 = initial_ket(config)
        self._empty_u = np.zeros((1, 1, 1, 1), dtype=complex)

    def to_kernel(self, rho: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(rho[np.ix_(self.perm, self.perm)])

    def from_kernel(self, rho_k: np.ndarray) -> np.ndarray:
        return rho_k[np.ix_(self.inv, self.inv)]

    def ublocks(self, g0: int, g1: int) -> np.ndarray:
        if not self.has_h:
            return self._empty_u
        m = self.config.measurement
        sch = self.config.schedule
        t_mid = (np.arange(g0, g1) + 0.5) * m.dt
        sch.check_time(t_mid)
        a, b = sch.coefficients(t_mid)
        a = np.broadcast_to(a, t_mid.shape)[:, None, None, None]
        b = np.broadcast_to(b, t_mid.shape)[:, None, None, None]
        Hb = -sch.omega0 * (a * self.Ab + b * self.Bb)
        return np.ascontiguousarray(qc.hermitian_expm(Hb, m.dt))

    def new_target(self) -> tuple[np.ndarray, np.ndarray]:
        """Fresh ``(psi, records)`` buffers for the ideal logical ket."""
        out = np.empty((self.config.n_records, len(self.psi0)), dtype=complex)
        out[0] = self.psi0
        return self.psi0.copy(), out

    def advance_target(self, psi, out, ub, g0: int, g1: int) -> None:
        """Propagate the ideal ket over steps ``[g0, g1)`` and store its records."""
        stride = self.config.record_stride
        if self.has_h:
            K.propagate_ket(psi, np.ascontiguousarray(ub[:, 0]), out, stride, g0)
        else:
            first = (g0 // stride + 1) * stride
            for g in range(first, g1 + 1, stride):
                out[g // stride] = psi

    def target_records(self, chunk: int = CHUNK_STEPS) -> np.ndarray:
        psi, out = self.new_target()
        n = self.config.n_steps
        for g0 in range(0, n, chunk):
            g1 = min(n, g0 + chunk)
            self.advance_target(psi, out, self.ublocks(g0, g1), g0, g1)
        return out


class _Runner:
    """Mutable state of one trajectory between kernel calls."""

    def __init__(self, static: _Static, seed, psi_rec: np.ndarray):
        cfg = static.config
        self.s = static
        self.seed = seed
        self.rng = make_rng(seed)
        self.psi_rec = psi_rec
        psi = qc.encode(static.psi0, static.L)
        self.rho = static.to_kernel(np.outer(psi, psi.conj()))
        self.ifilt = np.ones(static.n_det)
        self.istate = np.zeros(3, dtype=np.int64)
        nr = cfg.n_records
        self.p_code = np.full(nr, np.nan)
        self.fid = np.full(nr, np.nan)
        self.ibar = np.full((nr, static.n_det), np.nan)
        self.ifilt_rec = np.full((nr, static.n_det), np.nan)
        self.flags = np.zeros(nr, dtype=np.int64)
        self.p_code[0] = 1.0
        self.fid[0] = 1.0
        self.ifilt_rec[0] = 1.0
        self.ev_buf = np.zeros((EVENT_BUFFER, 4), dtype=np.int64)
        self.events: list = []
        self.injected: list = []
        self.last_error = {}
        self.step = 0
        self.done = False
        self.stopped = False

    def _deviates(self, n: int):
        cfg = self.s.config
        u = self.rng.random((n, self.s.n_u))
        nd = self.s.n_det
        u_s = np.ascontiguousarray(u[:, :nd])
        if cfg.noiseless:
            zeta = np.zeros((n, nd))
        else:
            zeta = ndtri(np.clip(u[:, nd:2 * nd], 1e-300, None))
        if self.s.jump:
            u_j = np.ascontiguousarray(u[:, 2 * nd:])
        else:
            u_j = np.zeros((n, 1))
        return u_s, np.ascontiguousarray(zeta), u_j

    def _drain(self):
        s = self.s
        dt = s.config.measurement.dt
        mode = s.config.protocol.mode
        for k in range(self.istate[1]):
            g, kind, block, q = (int(v) for v in self.ev_buf[k])
            t = (g + 1) * dt
            if kind == K.EV_DIAGNOSIS:
                code = q - 3 * block
                t_err = self.last_error.pop(block, None)
                lat = None if t_err is None else t - t_err
                self.events.append(DiagnosisEvent(t, block, SYNDROMES[code], q, mode, lat))
            else:
                self.injected.append((t, q, "jump" if kind == K.EV_JUMP else "forced"))
                self.last_error[block] = t
        self.istate[1] = 0

    def advance(self, g1: int, ublocks: np.ndarray, g0_blocks: int) -> None:
        """Run until global step ``g1`` (exclusive) using blocks starting at ``g0_blocks``."""
        s = self.s
        cfg = s.config
        m = cfg.measurement
        p = cfg.protocol
        while not self.done and self.step < g1:
            n = g1 - self.step
            u_s, zeta, u_j = self._deviates(n)
            off = self.step - g0_blocks
            ub = ublocks[off: off + n] if s.has_h else ublocks
            pos = 0
            while pos < n:
                status, did = K.run_steps(
                    self.rho, self.ifilt, self.istate, self.step, n - pos,
                    s.k_evals, s.k_dephase, m.D,
                    s.has_h, ub[pos:] if s.has_h else ub,
                    s.jump, s.gammas, s.k_flips, m.dt,
                    u_s[pos:], zeta[pos:], u_j[pos:] if s.jump else u_j, s.forced,
                    s.ctrl_from, p.tau, p.theta1, p.theta2,
                    s.mode, s.k_A, s.k_B, cfg.schedule.omega0, s.a_end, s.b_end, s.t_det,
                    cfg.stop_on_first_diagnosis, cfg.record_stride, self.psi_rec, s.k_code,
                    self.p_code, self.fid, self.ibar, self.ifilt_rec, self.flags,
                    self.ev_buf, cfg.check_every)
                if status >= K.BAD_TRACE:
                    what = {K.BAD_TRACE: "trace drifted",
                            K.BAD_HERMITICITY: "state lost Hermiticity",
                            K.BAD_POSITIVITY: "state acquired a negative eigenvalue"}[status]
                    raise InvariantViolation(what, int(did))
                self._drain()
                pos += did
                self.step += did
                if status == K.STOPPED:
                    self.done = True
                    self.stopped = True
                    break
            if self.step >= cfg.n_steps:
                self.done = True

    def record(self) -> TrajectoryRecord:
        cfg = self.s.config
        t = cfg.record_times()
        return TrajectoryRecord(
            seed=self.seed, t=t, p_code=self.p_code, fidelity=self.fid,
            i_bar=self.ibar, i_filt=self.ifilt_rec, flags=self.flags,
            events=self.events, injected=self.injected, final_rho=self.s.from_kernel(self.rho),
            steps_done=self.step, stopped=self.stopped, underflows=int(self.istate[2]))


def _chunks(n: int, size: int):
    for g0 in range(0, n, size):
        yield g0, min(n, g0 + size)


def run_trajectory(config: TrajectoryConfig, seed, chunk: int = CHUNK_STEPS) -> TrajectoryRecord:
    """Simulate one conditioned trajectory; identical seeds give identical records."""
    static = _Static(config)
    psi, psi_rec = static.new_target()
    run = _Runner(static, seed, psi_rec)
    for g0, g1 in _chunks(config.n_steps, chunk):
        if run.done:
            break
        ub = static.ublocks(g0, g1)
        static.advance_target(psi, psi_rec, ub, g0, g1)
        run.advance(g1, ub, g0)
    return run.record()


def default_threads() -> int:
    env = os.environ.get("CQEC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class EnsembleResult:
    t: np.ndarray
    fidelity: np.ndarray
    fidelity_se: np.ndarray
    p_code: np.ndarray
    p_code_se: np.ndarray
    n_valid: np.ndarray
    n_trajectories: int
    master_seed: int
    mean_final_rho: np.ndarray
    n_corrections: int
    n_injected: int
    records: list | None = None

    @property
    def infidelity(self) -> np.ndarray:
        return 1.0 - self.fidelity


def run_ensemble(config: TrajectoryConfig, n_trajectories: int, master_seed: int,
                 threads: int | None = None, keep_records: bool = False,
                 chunk: int = CHUNK_STEPS) -> EnsembleResult:
    """Average ``n_trajectories`` independent trajectories.

    Trajectory ``i`` uses seed ``(master_seed, i)``; reductions run in index
    order so the result does not depend on the thread count.
    """
    if n_trajectories < 1:
        raise ConfigError("ensemble size must be at least 1")
    static = _Static(config)
    psi, psi_rec = static.new_target()
    runners = [_Runner(static, (master_seed, i), psi_rec) for i in range(n_trajectories)]
    threads = threads or default_threads()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for g0, g1 in _chunks(config.n_steps, chunk):
            ub = static.ublocks(g0, g1)
            static.advance_target(psi, psi_rec, ub, g0, g1)
            if pool is None:
                for r in runners:
                    r.advance(g1, ub, g0)
            else:
                list(pool.map(lambda r: r.advance(g1, ub, g0), runners))
    finally:
        if pool is not None:
            pool.shutdown()
    fid = np.array([r.fid for r in runners])
    pc = np.array([r.p_code for r in runners])
    n_valid = np.sum(np.isfinite(fid), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f_mean = np.nanmean(fid, axis=0)
        f_se = np.nanstd(fid, axis=0, ddof=1) / np.sqrt(n_valid) if n_trajectories > 1 else np.zeros_like(f_mean)
    pc_mean = pc.mean(axis=0)
    pc_se = pc.std(axis=0, ddof=1) / np.sqrt(n_trajectories) if n_trajectories > 1 else np.zeros_like(pc_mean)
    rho_mean = np.zeros_like(runners[0].rho)
    for r in runners:
        rho_mean += r.rho
    rho_mean = static.from_kernel(rho_mean / n_trajectories)
    recs = [r.record() for r in runners] if keep_records else None
    return EnsembleResult(
        t=config.record_times(), fidelity=f_mean, fidelity_se=np.nan_to_num(f_se),
        p_code=pc_mean, p_code_se=pc_se, n_valid=n_valid, n_trajectories=n_trajectories,
        master_seed=int(master_seed), mean_final_rho=rho_mean,
        n_corrections=sum(len(r.events) for r in runners),
        n_injected=sum(len(r.injected) for r in runners), records=recs)


def reference_trajectory(config: TrajectoryConfig, seed, n_steps: int | None = None):
    """Slow loop composed only of the public sub-steps (for cross-checking).

    Consumes deviates in the same layout as the compiled kernel, so the same
    seed reproduces the kernel's trajectory up to rounding.
    Returns ``(rho, i_filt, events)``.
    """
    from .controller import apply_correction, correction_operator, diagnose

    static = _Static(config)
    cfg = config
    m = cfg.measurement
    L = cfg.L
    n_steps = cfg.n_steps if n_steps is None else n_steps
    rng = make_rng(seed)
    psi = qc.encode(static.psi0, L)
    rho = np.outer(psi, psi.conj())
    ifilt = np.ones(static.n_det)
    nd = static.n_det
    events = []
    from .controller import filter_step

    for g in range(n_steps):
        u = rng.random((1, static.n_u))[0]
        zeta = np.zeros(nd) if cfg.noiseless else ndtri(np.clip(u[nd:2 * nd], 1e-300, None))
        ibar = np.empty(nd)
        for k in range(nd):
            ibar[k] = sample_readout(rho, k, m, u=u[k], zeta=zeta[k])
            rho = bayesian_update(rho, k, ibar[k], m)
        t = g * m.dt
        if static.has_h:
            rho = hamiltonian_step(rho, cfg.schedule, t, m.dt, L)
        rho, _ = decoherence_step(rho, cfg.errors, m.dt, u=u[2 * nd:] if static.jump else None)
        if static.forced[g]:
            X = qc.x_op(int(static.forced[g]), L)
            rho = X @ rho @ X
        ifilt = filter_step(ifilt, ibar, m.dt, cfg.protocol.tau)
        if g >= static.ctrl_from:
            for l in range(L):
                code = diagnose(ifilt[2 * l], ifilt[2 * l + 1], cfg.protocol)
                if code > 0:
                    q = 3 * l + code
                    C = correction_operator(q, cfg.protocol, cfg.schedule,
                                            min((g + 1) * m.dt, cfg.schedule.t_op), static.t_det, L)
                    rho, ifilt = apply_correction(rho, C, ifilt, block=l)
                    events.append((g, q))
    return rho, ifilt, events


def deterministic_lindblad(config: TrajectoryConfig, t_eval: Sequence[float] | None = None):
    """Unconditioned evolution ``-i[H, rho] + sum_q gamma_q D[X_q]`` with
    measurement dephasing, integrated by ``solve_ivp`` (DOP853).
    """
    from scipy.integrate import solve_ivp

    static = _Static(config)
    L = config.L
    d = static.d
    m = config.measurement
    sch = config.schedule
    A, B = static.A, static.B
    # averaging over readouts leaves dephasing at Gamma_m (e_i - e_j)^2 / 4 per detector
    e = static.evals
    deph = m.gamma_m * ((e[:, :, None] - e[:, None, :]) ** 2).sum(0) / 4.0
    idx = np.arange(d)
    perms = [idx ^ qc.flip_mask(q, L) for q in range(1, 3 * L + 1)]
    gam = static.gammas

    def rhs(t, y):
        rho = y.reshape(d, d)
        a, b = sch.coefficients(min(t, sch.t_op))
        H = -sch.omega0 * (a * A + b * B)
        out = -1j * (H @ rho - rho @ H) - deph * rho
        for p, g in zip(perms, gam):
            if g:
                out += g * (rho[np.ix_(p, p)] - rho)
        return out.ravel()

    psi = qc.encode(static.psi0, L)
    rho0 = np.outer(psi, psi.conj()).ravel()
    T = config.duration
    if t_eval is None:
        t_eval = [T]
    sol = solve_ivp(rhs, (0.0, T), rho0, method="DOP853", t_eval=t_eval, rtol=1e-10, atol=1e-12)
    return sol.y.T.reshape(-1, d, d)
