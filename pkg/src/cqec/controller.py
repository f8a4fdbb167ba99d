"""Double-threshold syndrome filtering, diagnosis and correction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import quantum_core as qc
from .errors import InputError

MODES = ("conventional", "modified", "approximate")

# syndrome codes returned by the compiled diagnosis
UNCERTAIN = -1
NO_ACTION = 0

SYNDROMES = {
    0: (+1, +1),
    1: (-1, +1),
    2: (-1, -1),
    3: (+1, -1),
}


@dataclass(frozen=True)
class ProtocolConfig:
    tau: float
    theta1: float
    theta2: float
    mode: str = "conventional"

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if not -1.0 <= self.theta1 < self.theta2 <= 1.0:
            raise InputError("thresholds must satisfy -1 <= theta1 < theta2 <= 1")
        if self.mode not in MODES:
            raise InputError(f"unknown correction mode {self.mode!r}")


@dataclass
class DiagnosisEvent:
    t: float
    block: int
    syndrome: tuple
    qubit: int
    correction_mode: str
    latency: float | None = None

    @property
    def correction_tag(self) -> str:
        return f"X{self.qubit}"


def filter_step(i_filt, i_bar, dt: float, tau: float):
    """One step of the discretized RC filter."""
    if not dt < tau:
        raise InputError("filter needs dt < tau")
    r = dt / tau
    return (1.0 - r) * i_filt + r * i_bar


def diagnose(i1: float, i2: float, cfg: ProtocolConfig) -> int:
    """Map a pair of filtered signals to a decision code.

    Returns ``0`` for the trivial syndrome, ``q`` in 1..3 when ``X_q`` should
    be applied, and ``-1`` while a signal sits in ``[theta1, theta2]``.
    """
    lo, hi = cfg.theta1, cfg.theta2
    hi1, hi2 = i1 > hi, i2 > hi
    lo1, lo2 = i1 < lo, i2 < lo
    if hi1 and hi2:
        return NO_ACTION
    if lo1 and hi2:
        return 1
    if lo1 and lo2:
        return 2
    if hi1 and lo2:
        return 3
    return UNCERTAIN


def correction_operator(q: int, cfg: ProtocolConfig, schedule: qc.Schedule, t: float,
                        t_det: float | None = None, L: int = 1) -> np.ndarray:
    """Unitary applied after ``X_q`` is diagnosed at time ``t``.

    ``q`` is the 1-based physical qubit index (up to ``3L``).
    """
    X = qc.x_op(q, L)
    if cfg.mode == "conventional":
        return X
    if t_det is None:
        raise InputError(f"{cfg.mode} corrections need the detection time")
    H = qc.build_hamiltonian(schedule, t, L)
    XHX = X @ H @ X
    if cfg.mode == "modified":
        return qc.hermitian_expm(H, t_det) @ qc.hermitian_expm(XHX, -t_det) @ X
    return qc.hermitian_expm(H - XHX, t_det) @ X


def approximate_exponent(q: int, schedule: qc.Schedule, t: float, L: int = 1) -> np.ndarray:
    """Generator ``X_q H X_q - H`` of the approximate correction."""
    H = qc.build_hamiltonian(schedule, t, L)
    X = qc.x_op(q, L)
    return X @ H @ X - H


def apply_correction(rho: np.ndarray, C: np.ndarray, i_filt, block: int | None = None):
    """Apply ``C`` to the register and reset the filtered signals.

    With ``block=None`` every filtered value is reset to +1; otherwise only
    the detector pair of that logical block is reset.
    """
    if not qc.is_unitary(C):
        raise InputError("correction operator is not unitary")
    rho = C @ rho @ C.conj().T
    i_filt = np.array(i_filt, dtype=float, copy=True)
    if block is None:
        i_filt[:] = 1.0
    else:
        i_filt[2 * block: 2 * block + 2] = 1.0
    return rho, i_filt


@dataclass
class EventLog:
    events: list = field(default_factory=list)

    def append(self, ev: DiagnosisEvent) -> None:
        self.events.append(ev)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "syndrome", "correction_mode", "correction_tag"])
            for ev in self.events:
                s = "".join("+" if v > 0 else "-" for v in ev.syndrome)
                w.writerow([f"{ev.t:.17g}", f"({s[0]},{s[1]})", ev.correction_mode, ev.correction_tag])
