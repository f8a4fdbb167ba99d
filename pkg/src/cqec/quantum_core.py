"""Dense operators for the three-qubit bit-flip code.

Physical qubits are numbered from 1 and qubit 1 is the most significant bit
of the computational-basis index, so ``Z_1 |q1 q2 q3> = (-1)**q1 |q1 q2 q3>``.
Logical qubit ``l`` (0-based) is encoded in physical qubits ``3l+1 .. 3l+3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, StructureError

HERMITIAN_ATOL = 1e-12
UNITARY_ATOL = 1e-10

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}
SIGMA_X = PAULI["X"]
SIGMA_Z = PAULI["Z"]


def build_pauli_string(n_qubits: int, spec: Sequence[tuple[int, str]]) -> np.ndarray:
    """Tensor product of single-site Paulis, identity on unlisted sites.

    >>> build_pauli_string(3, [(1, "Z"), (2, "Z")]).diagonal().real
    array([ 1.,  1., -1., -1., -1., -1.,  1.,  1.])
    """
    if n_qubits < 1:
        raise InputError("n_qubits must be positive")
    factors = ["I"] * n_qubits
    seen = set()
    for site, axis in spec:
        if not 1 <= site <= n_qubits:
            raise InputError(f"site {site} outside 1..{n_qubits}")
        if site in seen:
            raise InputError(f"site {site} listed twice")
        if axis not in ("X", "Y", "Z"):
            raise InputError(f"unknown Pauli axis {axis!r}")
        seen.add(site)
        factors[site - 1] = axis
    out = np.ones((1, 1), dtype=complex)
    for f in factors:
        out = np.kron(out, PAULI[f])
    return out


def n_physical(L: int) -> int:
    if L not in (1, 2):
        raise InputError("only one or two logical qubits are supported")
    return 3 * L


def flip_mask(q: int, L: int) -> int:
    """Bit mask of physical qubit ``q`` in the computational-basis index."""
    n = n_physical(L)
    if not 1 <= q <= n:
        raise InputError(f"qubit {q} outside 1..{n}")
    return 1 << (n - q)


def x_op(q: int, L: int = 1) -> np.ndarray:
    return build_pauli_string(n_physical(L), [(q, "X")])


def z_op(q: int, L: int = 1) -> np.ndarray:
    return build_pauli_string(n_physical(L), [(q, "Z")])


def stabilizers(L: int = 1) -> list[np.ndarray]:
    """``Z1Z2, Z2Z3`` for each logical block, in detector order."""
    n = n_physical(L)
    out = []
    for l in range(L):
        base = 3 * l
        out.append(build_pauli_string(n, [(base + 1, "Z"), (base + 2, "Z")]))
        out.append(build_pauli_string(n, [(base + 2, "Z"), (base + 3, "Z")]))
    return out


def logical_x(l: int = 0, L: int = 1) -> np.ndarray:
    base = 3 * l
    return build_pauli_string(n_physical(L), [(base + k, "X") for k in (1, 2, 3)])


def logical_z(l: int = 0, L: int = 1) -> np.ndarray:
    """Encoded Z as the average of the three physical Z operators."""
    base = 3 * l
    return sum(z_op(base + k, L) for k in (1, 2, 3)) / 3.0


@lru_cache(maxsize=None)
def stabilizer_eigenvalues(L: int = 1) -> np.ndarray:
    """Diagonal of every stabilizer, shape ``(2L, 2**(3L))``, entries +-1."""
    return np.array([s.diagonal().real for s in stabilizers(L)])


@lru_cache(maxsize=None)
def code_indices(L: int = 1) -> np.ndarray:
    """Basis indices of the logical computational states, logical qubit 0 first."""
    n = n_physical(L)
    out = []
    for logical in range(2**L):
        idx = 0
        for l in range(L):
            if (logical >> (L - 1 - l)) & 1:
                idx |= 0b111 << (n - 3 * (l + 1))
        out.append(idx)
    return np.array(out, dtype=np.int64)


@lru_cache(maxsize=None)
def sector_indices(L: int = 1) -> np.ndarray:
    """Basis indices of every syndrome sector, shape ``(4**L, 2**L)``.

    Sector ``sum_l q_l * 4**(L-1-l)`` holds the code states flipped by
    ``X_{3l+q_l}`` on each block (``q_l = 0`` meaning no flip), so sector 0 is
    the code space and, for one logical qubit, sector q is the image of X_q.
    """
    code = code_indices(L)
    rows = []
    for sector in range(4**L):
        mask = 0
        for l in range(L):
            q = (sector // 4 ** (L - 1 - l)) % 4
            if q:
                mask |= flip_mask(3 * l + q, L)
        rows.append(code ^ mask)
    return np.array(rows, dtype=np.int64)


def sector_of_index(L: int = 1) -> np.ndarray:
    out = np.empty(2 ** n_physical(L), dtype=np.int64)
    for s, row in enumerate(sector_indices(L)):
        out[row] = s
    return out


def is_hermitian(A: np.ndarray, atol: float = HERMITIAN_ATOL) -> bool:
    return bool(np.max(np.abs(A - np.swapaxes(A, -1, -2).conj()), initial=0.0) <= atol)


def is_unitary(U: np.ndarray, atol: float = UNITARY_ATOL) -> bool:
    eye = np.eye(U.shape[-1])
    return bool(np.max(np.abs(np.swapaxes(U, -1, -2).conj() @ U - eye)) <= atol)


def hermitian_expm(H: np.ndarray, t: float) -> np.ndarray:
    """``exp(-i H t)`` through the eigendecomposition of ``H``.

    Accepts a stack of matrices with shape ``(..., d, d)``.
    """
    H = np.asarray(H, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(H), initial=0.0)))
    if not is_hermitian(H, HERMITIAN_ATOL * scale):
        raise InputError("hermitian_expm needs a Hermitian matrix")
    if H.shape[-1] == 2:
        return _expm_2x2(H, t)
    w, v = np.linalg.eigh(H)
    phase = np.exp(-1j * w * t)
    return (v * phase[..., None, :]) @ np.swapaxes(v, -1, -2).conj()


def _expm_2x2(H: np.ndarray, t: float) -> np.ndarray:
    # H = h0 + n.sigma, so exp(-iHt) = exp(-i h0 t) [cos(|n|t) - i sin(|n|t) n.sigma/|n|]
    h0 = 0.5 * (H[..., 0, 0] + H[..., 1, 1]).real
    nz = 0.5 * (H[..., 0, 0] - H[..., 1, 1]).real
    nx = H[..., 0, 1].real
    ny = -H[..., 0, 1].imag
    r = np.sqrt(nx * nx + ny * ny + nz * nz)
    c = np.cos(r * t)
    sinc = t * np.sinc(r * t / np.pi)
    ph = np.exp(-1j * h0 * t)
    out = np.empty(H.shape, dtype=complex)
    out[..., 0, 0] = ph * (c - 1j * sinc * nz)
    out[..., 1, 1] = ph * (c + 1j * sinc * nz)
    out[..., 0, 1] = ph * (-1j * sinc * (nx - 1j * ny))
    out[..., 1, 0] = ph * (-1j * sinc * (nx + 1j * ny))
    return out


def check_block_diagonal(H: np.ndarray, L: int = 1, atol: float = HERMITIAN_ATOL) -> None:
    sec = sector_of_index(L)
    off = sec[:, None] != sec[None, :]
    worst = float(np.max(np.abs(H[..., off]), initial=0.0))
    if worst > atol:
        raise StructureError(
            f"operator couples different syndrome sectors (|element| = {worst:.2e})"
        )


def _as_conjugator(conjugate_by, L: int):
    if conjugate_by is None:
        return None
    if isinstance(conjugate_by, (int, np.integer)):
        return x_op(int(conjugate_by), L)
    if isinstance(conjugate_by, str) and conjugate_by.upper().startswith("X"):
        return x_op(int(conjugate_by[1:]), L)
    return np.asarray(conjugate_by, dtype=complex)


def logical_block(H: np.ndarray, conjugate_by=None, L: int = 1) -> np.ndarray:
    """Code-space block of ``H`` or, with ``conjugate_by=q``, of ``X_q H X_q``.

    The conjugated block is the Hamiltonian seen by the logical information
    while the register sits in the error subspace of ``X_q``.
    """
    H = np.asarray(H, dtype=complex)
    check_block_diagonal(H, L)
    E = _as_conjugator(conjugate_by, L)
    if E is not None:
        H = E @ H @ E
    code = code_indices(L)
    return H[np.ix_(code, code)]


def sector_blocks(H: np.ndarray, L: int = 1) -> np.ndarray:
    """Diagonal blocks of a sector-diagonal operator, shape ``(..., 4**L, 2**L, 2**L)``."""
    idx = sector_indices(L)
    return H[..., idx[:, :, None], idx[:, None, :]]


# --------------------------------------------------------------------------
# annealing schedules


def _linear_a(t, t_op):
    return 1.0 - np.asarray(t, dtype=float) / t_op


def _linear_b(t, t_op):
    return np.asarray(t, dtype=float) / t_op


@dataclass(frozen=True)
class Schedule:
    """``H(t) = -omega0 [a(t) X + b(t) Z]`` on the encoded register.

    ``a`` and ``b`` take ``(t, t_op)`` and must broadcast over arrays of times.
    ``coupling_sign`` multiplies the encoded ``sz(1) sz(2)`` term when two
    logical qubits are simulated.
    """

    omega0: float
    t_op: float
    a: Callable = _linear_a
    b: Callable = _linear_b
    coupling_sign: float = 1.0
    kind: str = "linear"

    def __post_init__(self):
        if self.t_op <= 0:
            raise InputError("t_op must be positive")
        if self.omega0 < 0:
            raise InputError("omega0 must be non-negative")

    @classmethod
    def linear(cls, omega0: float, t_op: float, coupling_sign: float = 1.0) -> "Schedule":
        return cls(omega0, t_op, coupling_sign=coupling_sign)

    @classmethod
    def memory(cls, t_op: float) -> "Schedule":
        return cls(0.0, t_op, kind="memory")

    def coefficients(self, t):
        return self.a(t, self.t_op), self.b(t, self.t_op)

    def check_time(self, t) -> None:
        t = np.asarray(t, dtype=float)
        slack = 1e-9 * max(1.0, self.t_op)
        if np.any(t < -slack) or np.any(t > self.t_op + slack):
            raise InputError(f"time outside [0, {self.t_op}]")


@lru_cache(maxsize=None)
def _hamiltonian_terms_cached(L: int, coupling_sign: float):
    if L == 1:
        return logical_x(0, 1), logical_z(0, 1)
    x_part = logical_x(0, 2) + logical_x(1, 2)
    z1, z2 = logical_z(0, 2), logical_z(1, 2)
    return x_part, z1 + z2 + coupling_sign * (z1 @ z2)


def hamiltonian_terms(L: int = 1, coupling_sign: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Matrices ``(A, B)`` with ``H(t) = -omega0 [a(t) A + b(t) B]``."""
    n_physical(L)
    A, B = _hamiltonian_terms_cached(L, float(coupling_sign))
    return A.copy(), B.copy()


def build_hamiltonian(schedule: Schedule, t, L: int = 1) -> np.ndarray:
    """Encoded annealing Hamiltonian at time ``t`` (array ``t`` gives a stack)."""
    schedule.check_time(t)
    A, B = hamiltonian_terms(L, schedule.coupling_sign)
    a, b = schedule.coefficients(t)
    a = np.asarray(a, dtype=float)[..., None, None]
    b = np.asarray(b, dtype=float)[..., None, None]
    return -schedule.omega0 * (a * A + b * B)


def logical_hamiltonian_terms(L: int = 1, coupling_sign: float = 1.0, flipped: int | None = None):
    """Code-space blocks of ``(A, B)``, optionally conjugated by ``X_flipped``."""
    A, B = hamiltonian_terms(L, coupling_sign)
    return logical_block(A, flipped, L), logical_block(B, flipped, L)


def logical_hamiltonian(schedule: Schedule, t, L: int = 1, flipped: int | None = None) -> np.ndarray:
    """``h_L(t)`` or, with ``flipped=q``, the spurious block seen after ``X_q``."""
    A, B = logical_hamiltonian_terms(L, schedule.coupling_sign, flipped)
    a, b = schedule.coefficients(t)
    a = np.asarray(a, dtype=float)[..., None, None]
    b = np.asarray(b, dtype=float)[..., None, None]
    return -schedule.omega0 * (a * A + b * B)


def ket_to_dm(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def encode(psi_logical, L: int = 1) -> np.ndarray:
    """Embed a ``2**L`` logical ket into the physical register."""
    psi_logical = np.asarray(psi_logical, dtype=complex)
    out = np.zeros(2 ** n_physical(L), dtype=complex)
    out[code_indices(L)] = psi_logical
    return out
