"""Compiled inner loops for the trajectory and effective-model integrators.

The Python modules hold the readable reference versions of every sub-step;
these kernels fuse them for speed and are tested against the references.
"""

import numpy as np
from numba import njit

# kernel status codes
OK = 0
STOPPED = 1
BUFFER_FULL = 2
BAD_TRACE = 3
BAD_HERMITICITY = 4
BAD_POSITIVITY = 5

FLAG_CORRECTION = 1
FLAG_JUMP = 2
FLAG_UNDERFLOW = 4
FLAG_FORCED = 8

EV_DIAGNOSIS = 0
EV_JUMP = 1
EV_FORCED = 2

MODE_CONVENTIONAL = 0
MODE_MODIFIED = 1
MODE_APPROXIMATE = 2

UNDERFLOW_FLOOR = 1e-300


@njit(cache=True, nogil=True)
def _diagnose_code(i1, i2, th1, th2):
    hi1 = i1 > th2
    hi2 = i2 > th2
    lo1 = i1 < th1
    lo2 = i2 < th1
    if hi1 and hi2:
        return 0
    if lo1 and hi2:
        return 1
    if lo1 and lo2:
        return 2
    if hi1 and lo2:
        return 3
    return -1


@njit(cache=True, nogil=True, fastmath=True)
def _flip(rho, f, tmp):
    d = rho.shape[0]
    for i in range(d):
        fi = f[i]
        for j in range(d):
            tmp[i, j] = rho[fi, f[j]]
    rho[:, :] = tmp


@njit(cache=True, nogil=True)
def _expm_herm(H, t):
    w, v = np.linalg.eigh(H)
    d = H.shape[0]
    out = np.zeros((d, d), dtype=np.complex128)
    for k in range(d):
        ph = np.exp(-1j * w[k] * t)
        for i in range(d):
            vik = v[i, k] * ph
            for j in range(d):
                out[i, j] += vik * np.conj(v[j, k])
    return out


@njit(cache=True, nogil=True)
def _correction_unitary(mode, A, B, omega0, a, b, f, t_det):
    """Block part ``W`` of the correction ``C = W X_q`` (identity for conventional)."""
    d = A.shape[0]
    H = -omega0 * (a * A + b * B)
    XHX = np.empty_like(H)
    for i in range(d):
        for j in range(d):
            XHX[i, j] = H[f[i], f[j]]
    if mode == MODE_MODIFIED:
        return _expm_herm(H, t_det) @ _expm_herm(XHX, -t_det)
    return _expm_herm(H - XHX, t_det)


@njit(cache=True, nogil=True, fastmath=True)
def _apply_blocks(rho, ub, tmp):
    """``rho <- U rho U^dag`` for block-diagonal ``U`` in the sector-ordered basis."""
    n_sec = ub.shape[0]
    b = ub.shape[1]
    d = rho.shape[0]
    for s in range(n_sec):
        o = s * b
        for r in range(b):
            row = tmp[o + r]
            for j in range(d):
                row[j] = 0j
            for c in range(b):
                u = ub[s, r, c]
                src = rho[o + c]
                for j in range(d):
                    row[j] += u * src[j]
    for i in range(d):
        src = tmp[i]
        dst = rho[i]
        for s in range(n_sec):
            o = s * b
            for r in range(b):
                acc = 0j
                for c in range(b):
                    acc += src[o + c] * np.conj(ub[s, r, c])
                dst[o + r] = acc


@njit(cache=True, nogil=True, fastmath=True)
def _lindblad_flips(rho, tmp, gammas, flips, dt, gsum):
    """Euler step of ``sum_q gamma_q (X_q rho X_q - rho)``."""
    d = rho.shape[0]
    keep = 1.0 - dt * gsum
    for i in range(d):
        for jj in range(d):
            tmp[i, jj] = keep * rho[i, jj]
    for q in range(flips.shape[0]):
        gq = dt * gammas[q]
        if gq == 0.0:
            continue
        f = flips[q]
        for i in range(d):
            src = rho[f[i]]
            dst = tmp[i]
            for jj in range(d):
                dst[jj] += gq * src[f[jj]]
    rho[:, :] = tmp


@njit(cache=True, nogil=True)
def propagate_ket(psi, ublocks0, out, stride, start):
    """Advance a logical ket with code-sector blocks; store every ``stride`` steps."""
    n = ublocks0.shape[0]
    b = psi.shape[0]
    tmp = np.empty(b, dtype=np.complex128)
    for j in range(n):
        for r in range(b):
            acc = 0j
            for c in range(b):
                acc += ublocks0[j, r, c] * psi[c]
            tmp[r] = acc
        psi[:] = tmp
        g = start + j + 1
        if g % stride == 0:
            out[g // stride, :] = psi


@njit(cache=True, nogil=True)
def run_steps(rho, ifilt, istate, step0, n_steps,
              evals, dephase, D,
              has_h, ublocks,
              jump_mode, gammas, flips, dt,
              u_s, zeta, u_jump, forced_q,
              ctrl_from, tau, th1, th2,
              mode, A, B, omega0, a_end, b_end, t_det,
              stop_on_diag, stride, psi_rec, code_idx,
              rec_pcode, rec_fid, rec_ibar, rec_ifilt, rec_flag,
              ev_buf, check_every):
    """Advance one trajectory by up to ``n_steps`` timesteps.

    The state lives in the sector-ordered basis (sector ``s`` occupies rows
    ``s*b .. s*b+b-1`` with ``b = 2**L``), and ``flips[q]`` is the index
    permutation of ``X_{q+1}`` in that basis. ``istate`` carries
    ``[pending_flag, event_count, underflow_count]`` across calls. Returns ``(status, steps_done)``; on an invariant failure the
    second value is the global index of the failing step.
    """
    d = rho.shape[0]
    n_det = evals.shape[0]
    n_phys = flips.shape[0]
    n_blocks = n_det // 2
    sqrtD = np.sqrt(D)
    r = dt / tau
    tmp = np.empty_like(rho)
    pop = np.empty(d)
    x = np.empty(d)
    w = np.empty(d)
    ibar = np.empty(n_det)
    gsum = 0.0
    for q in range(n_phys):
        gsum += gammas[q]
    max_ev = ev_buf.shape[0]

    for j in range(n_steps):
        g = step0 + j
        flag = istate[0]

        # measurement of every stabilizer, sampled sequentially
        for i in range(d):
            pop[i] = rho[i, i].real
            x[i] = 0.0
        for k in range(n_det):
            pplus = 0.0
            tot = 0.0
            for i in range(d):
                tot += pop[i]
                if evals[k, i] > 0:
                    pplus += pop[i]
            s = 1.0 if u_s[j, k] * tot < pplus else -1.0
            ib = s + sqrtD * zeta[j, k]
            ibar[k] = ib
            c = ib / D
            ac = abs(c)
            norm = 0.0
            for i in range(d):
                e = c * evals[k, i] - ac
                pop[i] *= np.exp(e)
                x[i] += 0.5 * e
                norm += pop[i]
            if norm < UNDERFLOW_FLOOR:
                norm = UNDERFLOW_FLOOR
                flag |= 4
                istate[2] += 1
            for i in range(d):
                pop[i] /= norm
        tr = 0.0
        for i in range(d):
            w[i] = np.exp(x[i])
            tr += rho[i, i].real * w[i] * w[i]
        if tr < UNDERFLOW_FLOOR:
            tr = UNDERFLOW_FLOOR
            flag |= 4
            istate[2] += 1
        for i in range(d):
            wi = w[i] / tr
            for jj in range(d):
                rho[i, jj] *= wi * w[jj] * dephase[i, jj]

        # Hamiltonian
        if has_h:
            _apply_blocks(rho, ublocks[j], tmp)

        # bit flips
        if jump_mode:
            for q in range(n_phys):
                if u_jump[j, q] < gammas[q] * dt:
                    _flip(rho, flips[q], tmp)
                    flag |= 2
                    n_ev = istate[1]
                    ev_buf[n_ev, 0] = g
                    ev_buf[n_ev, 1] = 1
                    ev_buf[n_ev, 2] = q // 3
                    ev_buf[n_ev, 3] = q + 1
                    istate[1] = n_ev + 1
        elif gsum > 0.0:
            _lindblad_flips(rho, tmp, gammas, flips, dt, gsum)
        fq = forced_q[g]
        if fq > 0:
            _flip(rho, flips[fq - 1], tmp)
            flag |= 8
            n_ev = istate[1]
            ev_buf[n_ev, 0] = g
            ev_buf[n_ev, 1] = 2
            ev_buf[n_ev, 2] = (fq - 1) // 3
            ev_buf[n_ev, 3] = fq
            istate[1] = n_ev + 1

        # filter, diagnosis, correction
        for k in range(n_det):
            ifilt[k] = (1.0 - r) * ifilt[k] + r * ibar[k]
        diagnosed = False
        if g >= ctrl_from:
            for l in range(n_blocks):
                code = _diagnose_code(ifilt[2 * l], ifilt[2 * l + 1], th1, th2)
                if code > 0:
                    q = 3 * l + code
                    f = flips[q - 1]
                    _flip(rho, f, tmp)
                    if mode != MODE_CONVENTIONAL:
                        W = _correction_unitary(mode, A, B, omega0, a_end[g], b_end[g], f, t_det)
                        rho[:, :] = W @ rho @ W.conj().T
                    ifilt[2 * l] = 1.0
                    ifilt[2 * l + 1] = 1.0
                    flag |= 1
                    n_ev = istate[1]
                    ev_buf[n_ev, 0] = g
                    ev_buf[n_ev, 1] = 0
                    ev_buf[n_ev, 2] = l
                    ev_buf[n_ev, 3] = q
                    istate[1] = n_ev + 1
                    diagnosed = True

        # invariants
        if (g + 1) % check_every == 0:
            herm = 0.0
            for i in range(d):
                for jj in range(i, d):
                    dev = abs(rho[i, jj] - np.conj(rho[jj, i]))
                    if dev > herm:
                        herm = dev
            if herm > 1e-10:
                return BAD_HERMITICITY, g
            tr = 0.0
            for i in range(d):
                rho[i, i] = rho[i, i].real
                tr += rho[i, i].real
                for jj in range(i + 1, d):
                    avg = 0.5 * (rho[i, jj] + np.conj(rho[jj, i]))
                    rho[i, jj] = avg
                    rho[jj, i] = np.conj(avg)
            if abs(tr - 1.0) > 1e-9:
                return BAD_TRACE, g
            if np.linalg.eigvalsh(rho)[0] < -1e-8:
                return BAD_POSITIVITY, g

        # records
        istate[0] = flag
        if (g + 1) % stride == 0:
            ri = (g + 1) // stride
            pc = 0.0
            nb = code_idx.shape[0]
            for a_ in range(nb):
                pc += rho[code_idx[a_], code_idx[a_]].real
            rec_pcode[ri] = pc
            if pc < 1e-12:
                rec_fid[ri] = np.nan
            else:
                f = 0j
                for a_ in range(nb):
                    for b_ in range(nb):
                        f += np.conj(psi_rec[ri, a_]) * rho[code_idx[a_], code_idx[b_]] * psi_rec[ri, b_]
                rec_fid[ri] = f.real / pc
            for k in range(n_det):
                rec_ibar[ri, k] = ibar[k]
                rec_ifilt[ri, k] = ifilt[k]
            rec_flag[ri] = flag
            istate[0] = 0

        if diagnosed and stop_on_diag:
            return STOPPED, j + 1
        if istate[1] + n_phys + n_blocks + 1 > max_ev:
            return BUFFER_FULL, j + 1
    return OK, n_steps


@njit(cache=True, nogil=True)
def rk4_linear(y, psi, gens, hs, h, stride, out_y, out_psi, start):
    """Classical RK4 for ``y' = G(t) y`` and ``psi' = -i h(t) psi``.

    ``gens`` and ``hs`` hold the generators at ``t, t+h/2, t+h, t+3h/2, ...``
    so step ``j`` uses rows ``2j, 2j+1, 2j+2``.
    """
    n = (gens.shape[0] - 1) // 2
    for j in range(n):
        G1 = gens[2 * j]
        G2 = gens[2 * j + 1]
        G3 = gens[2 * j + 2]
        k1 = G1 @ y
        k2 = G2 @ (y + 0.5 * h * k1)
        k3 = G2 @ (y + 0.5 * h * k2)
        k4 = G3 @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        H1 = -1j * hs[2 * j]
        H2 = -1j * hs[2 * j + 1]
        H3 = -1j * hs[2 * j + 2]
        p1 = H1 @ psi
        p2 = H2 @ (psi + 0.5 * h * p1)
        p3 = H2 @ (psi + 0.5 * h * p2)
        p4 = H3 @ (psi + h * p3)
        psi = psi + (h / 6.0) * (p1 + 2.0 * p2 + 2.0 * p3 + p4)
        g = start + j + 1
        if g % stride == 0:
            out_y[g // stride, :] = y
            out_psi[g // stride, :] = psi
    return y, psi
