import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from cqec import quantum_core as qc
from cqec.controller import ProtocolConfig
from cqec.effective import detection_time
from cqec.errors import ConfigError, DegenerateExtractionError, InputError, InvariantViolation
from cqec.trajectory import (ErrorModel, MeasurementConfig, TrajectoryConfig, bayesian_update,
                             check_state, decoherence_step, deterministic_lindblad,
                             extract_logical, hamiltonian_step, reference_trajectory,
                             run_ensemble, run_trajectory, sample_readout, trajectory_seed)

from conftest import random_state

MEAS = MeasurementConfig()
PROTO = ProtocolConfig(2.5, -0.54, 0.8)


def ket(bits):
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[int(bits, 2)] = 1.0
    return v


def dm(*kets):
    return sum(np.outer(k, k.conj()) for k in kets) / len(kets)


def config(gamma=0.02, omega0=0.1, t_op=20.0, L=1, mode="lindblad", protocol=PROTO, **kw):
    return TrajectoryConfig(MEAS, ErrorModel.uniform(gamma, L, mode), protocol,
                            qc.Schedule.linear(omega0, t_op, kw.pop("sign", 1.0)), **kw)


# -- configuration types

def test_tau_m_identity():
    m = MeasurementConfig(gamma_m=1.0, eta=0.5)
    assert m.tau_m == 1.0
    assert MEAS.tau_m == 0.5 and MEAS.D == pytest.approx(100.0)


def test_measurement_validation():
    with pytest.raises(InputError):
        MeasurementConfig(eta=0.0)
    with pytest.raises(InputError):
        MeasurementConfig(dt=-1.0)
    with pytest.warns(UserWarning):
        MeasurementConfig(dt=0.08)


def test_error_model_validation():
    with pytest.raises(InputError):
        ErrorModel((0.1, -0.1, 0.0))
    with pytest.raises(InputError):
        ErrorModel((0.1, 0.1))


def test_config_needs_whole_number_of_steps():
    with pytest.raises(ConfigError):
        config(t_op=20.0012)


def test_config_needs_dt_below_tau():
    with pytest.raises(ConfigError):
        config(protocol=ProtocolConfig(0.004, -0.5, 0.5))


# -- sample_readout

def test_readout_code_state_always_positive(rng):
    rho = dm(ket("000"))
    for u in (0.0, 0.5, 0.999999):
        assert sample_readout(rho, 0, MEAS, u=u, zeta=0.0) == 1.0
    assert sample_readout(rho, 1, MEAS, u=0.3, zeta=0.1) == pytest.approx(1.0 + 10.0 * 0.1)


def test_readout_sign_probability_half():
    rho = dm(ket("000"), ket("100"))
    assert sample_readout(rho, 0, MEAS, u=0.49, zeta=0.0) == 1.0
    assert sample_readout(rho, 0, MEAS, u=0.51, zeta=0.0) == -1.0
    # the second stabilizer does not see X1
    assert sample_readout(rho, 1, MEAS, u=0.99, zeta=0.0) == 1.0


def test_readout_mean_law_of_large_numbers():
    rng = np.random.default_rng(7)
    rho = dm(ket("000"))
    n = 100_000
    xs = np.array([sample_readout(rho, 0, MEAS, rng) for _ in range(n)])
    assert abs(xs.mean() - 1.0) < 3 * np.sqrt(MEAS.D) / np.sqrt(n)


def test_readout_sign_frequency():
    rng = np.random.default_rng(8)
    rho = dm(ket("000"), ket("100"))
    n = 20_000
    s = np.array([sample_readout(rho, 0, MEAS, rng, zeta=0.0) for _ in range(n)])
    assert abs(np.mean(s > 0) - 0.5) < 4 * 0.5 / np.sqrt(n)


# -- bayesian_update

@pytest.mark.parametrize("ibar", [-25.0, 0.3, 7.0])
def test_update_single_basis_state(ibar):
    rho = dm(ket("000"))
    assert np.allclose(bayesian_update(rho, 0, ibar, MEAS), rho, atol=1e-15)


def test_update_code_superposition_unchanged():
    psi = (ket("000") + ket("111")) / np.sqrt(2)
    rho = np.outer(psi, psi.conj())
    assert np.allclose(bayesian_update(rho, 0, -3.0, MEAS), rho, atol=1e-15)


def test_update_population_ratio():
    rho = dm(ket("000"), ket("100"))
    out = bayesian_update(rho, 0, 1.0, MEAS)
    # Gaussian likelihood ratio exp(2 I / (2 D)) with D = 100
    p0 = np.exp(0.01) / (np.exp(0.01) + np.exp(-0.01))
    assert out[0, 0].real == pytest.approx(p0, abs=1e-14)
    assert round(out[0, 0].real, 4) == 0.5050 and round(out[4, 4].real, 4) == 0.4950


def test_update_inefficient_detector_dephases():
    m = MeasurementConfig(eta=0.5)
    psi = (ket("000") + ket("100")) / np.sqrt(2)
    out = bayesian_update(np.outer(psi, psi.conj()), 0, 0.0, m)
    # gamma_ij = Gamma_m (1 - eta) (2)^2 / 4
    assert abs(out[0, 4]) == pytest.approx(0.5 * np.exp(-0.5 * m.dt), rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.integers(0, 1), st.floats(0.2, 1.0))
def test_update_preserves_trace_and_positivity(seed, ibar, k, eta):
    m = MeasurementConfig(eta=eta)
    rho = random_state(np.random.default_rng(seed), 8)
    out = bayesian_update(rho, k, ibar, m)
    assert abs(np.trace(out).real - 1.0) <= 1e-12
    assert np.max(np.abs(out - out.conj().T)) <= 1e-12
    assert np.linalg.eigvalsh(out)[0] >= -1e-12


@given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.floats(-50, 50), st.integers(0, 1))
def test_update_identity_inside_one_sector(seed, sector, ibar, k):
    idx = qc.sector_indices(1)[sector]
    small = random_state(np.random.default_rng(seed), 2)
    rho = np.zeros((8, 8), dtype=complex)
    rho[np.ix_(idx, idx)] = small
    assert np.allclose(bayesian_update(rho, k, ibar, MEAS), rho, atol=1e-13)


def test_update_underflow_is_flagged():
    rho = dm(ket("100"))
    rho = rho * 1e-310  # denormal populations only
    out, flag = bayesian_update(rho, 0, 1e4, MEAS, return_flag=True)
    assert flag and np.all(np.isfinite(out))


# -- hamiltonian_step

def test_no_hamiltonian_no_change(rng):
    rho = random_state(rng, 8)
    out = hamiltonian_step(rho, qc.Schedule.memory(10.0), 1.0, 0.005)
    assert np.allclose(out, rho, atol=1e-15)


def test_constant_hamiltonian_exact(rng):
    const = qc.Schedule(0.4, 10.0, a=lambda t, T: 0.3 + 0 * np.asarray(t),
                        b=lambda t, T: 0.8 + 0 * np.asarray(t), kind="constant")
    rho0 = random_state(rng, 8)
    rho = rho0
    dt = 0.05
    for g in range(200):
        rho = hamiltonian_step(rho, const, g * dt, dt)
    U = qc.hermitian_expm(qc.build_hamiltonian(const, 0.0), 200 * dt)
    assert np.max(np.abs(rho - U @ rho0 @ U.conj().T)) <= 1e-10


def test_linear_schedule_matches_logical_schrodinger():
    dt, n = 5e-3, 10_000
    s = qc.Schedule.linear(0.1, n * dt)
    psi0 = np.array([1, 1], dtype=complex) / np.sqrt(2)
    rho = qc.ket_to_dm(qc.encode(psi0))
    for g in range(n):
        rho = hamiltonian_step(rho, s, g * dt, dt)

    def rhs(t, y):
        return -1j * (qc.logical_hamiltonian(s, t) @ y)

    ref = solve_ivp(rhs, (0, n * dt), psi0, method="DOP853", rtol=1e-12, atol=1e-13).y[:, -1]
    rho_L, p = extract_logical(rho)
    assert p == pytest.approx(1.0, abs=1e-12)
    assert np.vdot(ref, rho_L @ ref).real == pytest.approx(1.0, abs=1e-6)


# -- decoherence_step

@pytest.mark.parametrize("mode", ["lindblad", "jump"])
def test_zero_rate_no_change(rng, mode):
    rho = random_state(rng, 8)
    out, flips = decoherence_step(rho, ErrorModel.uniform(0.0, 1, mode), 0.005, rng)
    assert np.array_equal(out, rho) and flips == []


@pytest.mark.parametrize("mode", ["lindblad", "jump"])
def test_maximally_mixed_fixed_point(rng, mode):
    rho = np.eye(8) / 8
    out, _ = decoherence_step(rho, ErrorModel.uniform(0.5, 1, mode), 0.01, u=np.zeros(3))
    assert np.allclose(out, rho)


def test_lindblad_population_loss():
    g, dt = 1.25e-3, 5e-3
    out, _ = decoherence_step(dm(ket("000")), ErrorModel.uniform(g), dt)
    assert out[0, 0].real == pytest.approx(1 - 3 * g * dt, abs=1e-16)
    assert out[4, 4].real == pytest.approx(g * dt, abs=1e-16)


def test_jump_applies_selected_flips():
    out, flips = decoherence_step(dm(ket("000")), ErrorModel.uniform(0.1, 1, "jump"), 0.01,
                                  u=np.array([0.5, 1e-4, 0.5]))
    assert flips == [2]
    assert out[2, 2].real == 1.0


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 2.0), min_size=3, max_size=3))
def test_lindblad_step_trace_preserving(seed, gam):
    rho = random_state(np.random.default_rng(seed), 8)
    out, _ = decoherence_step(rho, ErrorModel(tuple(gam)), 0.005)
    assert abs(np.trace(out).real - 1.0) <= 1e-12


def test_large_rate_warns():
    with pytest.warns(UserWarning):
        decoherence_step(np.eye(8) / 8, ErrorModel.uniform(5.0), 0.005)


# -- extract_logical

def test_extract_code_basis_state():
    rho_L, p = extract_logical(dm(ket("000")))
    assert p == 1.0 and np.allclose(rho_L, [[1, 0], [0, 0]])


def test_extract_code_superposition():
    psi = (ket("000") + ket("111")) / np.sqrt(2)
    rho_L, p = extract_logical(np.outer(psi, psi.conj()))
    assert p == pytest.approx(1.0) and np.allclose(rho_L, 0.5 * np.ones((2, 2)))


def test_extract_outside_code_space():
    with pytest.raises(DegenerateExtractionError) as err:
        extract_logical(dm(ket("100")))
    assert err.value.p_code == 0.0


def test_extract_normalizes_partial_weight():
    rho = 0.25 * dm(ket("000")) + 0.75 * dm(ket("100"))
    rho_L, p = extract_logical(rho)
    assert p == pytest.approx(0.25) and np.allclose(rho_L, [[1, 0], [0, 0]])


def test_check_state_reports_step():
    bad = np.diag([1.2, -0.2, 0, 0, 0, 0, 0, 0]).astype(complex)
    with pytest.raises(InvariantViolation) as err:
        check_state(bad, step=42)
    assert err.value.step == 42


# -- full trajectories

def test_same_seed_bit_identical():
    cfg = config(record_stride=7)
    r1, r2 = run_trajectory(cfg, (5, 3)), run_trajectory(cfg, (5, 3))
    for name in ("p_code", "fidelity", "i_bar", "i_filt", "flags"):
        assert np.array_equal(getattr(r1, name), getattr(r2, name), equal_nan=True)
    assert np.array_equal(r1.final_rho, r2.final_rho)
    assert [e.t for e in r1.events] == [e.t for e in r2.events]


def test_different_seeds_differ():
    cfg = config()
    assert not np.array_equal(run_trajectory(cfg, 1).i_bar, run_trajectory(cfg, 2).i_bar,
                              equal_nan=True)


def test_seed_derivation_is_stable():
    a = trajectory_seed((11, 4)).generate_state(2)
    b = trajectory_seed((11, 4)).generate_state(2)
    c = trajectory_seed((11, 5)).generate_state(2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("L", [1, 2])
def test_code_space_invariance_under_measurement(L):
    cfg = TrajectoryConfig(MEAS, ErrorModel.uniform(0.0, L), PROTO, qc.Schedule.memory(30.0),
                           psi0=tuple(np.ones(2 ** L) / 2 ** (L / 2)), record_stride=10)
    rec = run_trajectory(cfg, 99)
    assert np.all(np.abs(rec.fidelity - 1.0) <= 1e-12)
    assert np.all(np.abs(rec.p_code - 1.0) <= 1e-12)
    assert rec.events == []


@pytest.mark.parametrize("mode", ["conventional", "modified", "approximate"])
@pytest.mark.parametrize("L,em,gamma", [(1, "lindblad", 0.02), (1, "jump", 0.05), (2, "lindblad", 0.02)])
def test_kernel_matches_reference_loop(mode, L, em, gamma):
    proto = ProtocolConfig(2.5, -0.54, 0.62, mode)
    cfg = config(gamma, 0.1, 20.0 if L == 1 else 6.0, L, em, proto, record_stride=10, check_every=7)
    rec = run_trajectory(cfg, (3, 1))
    rho, ifilt, events = reference_trajectory(cfg, (3, 1))
    assert np.max(np.abs(rho - rec.final_rho)) <= 1e-10
    assert np.max(np.abs(ifilt - rec.i_filt[-1])) <= 1e-10
    assert [q for _, q in events] == [e.qubit for e in rec.events]


def test_reference_loop_sees_corrections():
    cfg = config(0.05, 0.1, 20.0, mode="jump", protocol=ProtocolConfig(2.5, -0.54, 0.62))
    _, _, events = reference_trajectory(cfg, (3, 1))
    assert len(events) > 0


@pytest.mark.parametrize("chunk", [1, 37, 1000])
def test_chunk_size_does_not_change_result(chunk):
    cfg = config(0.05, 0.2, 10.0, mode="jump", record_stride=3)
    ref = run_trajectory(cfg, 8)
    rec = run_trajectory(cfg, 8, chunk=chunk)
    assert np.array_equal(ref.fidelity, rec.fidelity, equal_nan=True)
    assert np.array_equal(ref.final_rho, rec.final_rho)


def test_ensemble_member_matches_single_run():
    cfg = config(0.05, 0.2, 10.0, mode="jump", record_stride=5)
    ens = run_ensemble(cfg, 6, 21, threads=1, keep_records=True, chunk=300)
    for i in (0, 4):
        rec = run_trajectory(cfg, (21, i))
        assert np.array_equal(ens.records[i].fidelity, rec.fidelity, equal_nan=True)
        assert np.array_equal(ens.records[i].final_rho, rec.final_rho)


def test_ensemble_independent_of_thread_count():
    cfg = config(0.05, 0.2, 10.0, mode="jump", record_stride=5)
    a = run_ensemble(cfg, 9, 3, threads=1, chunk=500)
    b = run_ensemble(cfg, 9, 3, threads=4, chunk=500)
    assert np.array_equal(a.fidelity, b.fidelity)
    assert np.array_equal(a.mean_final_rho, b.mean_final_rho)
    assert a.n_corrections == b.n_corrections


def test_ensemble_rejects_empty():
    with pytest.raises(ConfigError):
        run_ensemble(config(), 0, 1)


def test_record_csv_columns(tmp_path):
    rec = run_trajectory(config(t_op=1.0, record_stride=50), 1)
    p = tmp_path / "traj.csv"
    rec.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,I1_bar,I2_bar,I1_filt,I2_filt,p_code,fidelity,event_flag"
    assert len(lines) == 1 + rec.t.size


def test_noiseless_detection_latency():
    tau, th1 = 2.5, -0.54
    proto = ProtocolConfig(tau, th1, 0.8)
    cfg = TrajectoryConfig(MEAS, ErrorModel.uniform(0.0, 1, "jump"), proto,
                           qc.Schedule.memory(40.0), noiseless=True, forced_errors=((10.0, 2),),
                           record_stride=100)
    rec = run_trajectory(cfg, 0)
    assert len(rec.events) == 1
    ev = rec.events[0]
    assert ev.qubit == 2 and ev.syndrome == (-1, -1)
    assert ev.latency == pytest.approx(detection_time(tau, th1), abs=MEAS.dt + 1e-12)
    # corrected back into the code space with unit fidelity
    assert rec.fidelity[-1] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("q,syn", [(1, (-1, 1)), (3, (1, -1))])
def test_noiseless_outer_flips_diagnosed(q, syn):
    cfg = TrajectoryConfig(MEAS, ErrorModel.uniform(0.0, 1, "jump"), PROTO,
                           qc.Schedule.memory(40.0), noiseless=True, forced_errors=((10.0, q),))
    ev = run_trajectory(cfg, 0).events
    assert [e.qubit for e in ev] == [q] and ev[0].syndrome == syn


def test_stop_on_first_diagnosis():
    cfg = TrajectoryConfig(MEAS, ErrorModel.uniform(0.0, 1, "jump"), PROTO,
                           qc.Schedule.memory(40.0), noiseless=True, forced_errors=((10.0, 2),),
                           stop_on_first_diagnosis=True)
    rec = run_trajectory(cfg, 0)
    assert rec.stopped and rec.steps_done < cfg.n_steps


def test_reset_only_on_correction():
    cfg = config(0.02, 0.1, 80.0, mode="jump", record_stride=1)
    rec = run_trajectory(cfg, 17)
    reset_steps = set(int(round(e.t / MEAS.dt)) for e in rec.events)
    assert reset_steps
    for g in range(1, rec.t.size):
        both_one = np.all(rec.i_filt[g] == 1.0)
        assert both_one == (g in reset_steps)


def test_unconditioned_average_matches_master_equation():
    cfg = config(0.05, 0.2, 6.0, controller=False, record_stride=1200)
    n = 400
    ens = run_ensemble(cfg, n, 5, keep_records=True)
    finals = np.array([r.final_rho for r in ens.records])
    se = finals.std(axis=0) / np.sqrt(n) + 1e-6
    exact = deterministic_lindblad(cfg)[-1]
    assert np.max(np.abs(ens.mean_final_rho - exact) / se) < 4.5


def test_jump_and_lindblad_averages_agree():
    kw = dict(controller=False, record_stride=1200)
    n = 500
    lin = run_ensemble(config(0.05, 0.2, 6.0, **kw), n, 6, keep_records=True)
    jmp = run_ensemble(config(0.05, 0.2, 6.0, mode="jump", **kw), n, 6, keep_records=True)
    a = np.array([r.final_rho for r in lin.records])
    b = np.array([r.final_rho for r in jmp.records])
    se = np.sqrt(a.var(axis=0) / n + b.var(axis=0) / n) + 1e-6
    assert np.max(np.abs(a.mean(0) - b.mean(0)) / se) < 4.5


def test_fidelity_nan_when_code_space_empty():
    # a forced flip with the controller off leaves no code-space weight
    cfg = TrajectoryConfig(MEAS, ErrorModel.uniform(0.0, 1, "jump"), PROTO,
                           qc.Schedule.memory(1.0), controller=False,
                           forced_errors=((0.5, 1),), record_stride=10)
    rec = run_trajectory(cfg, 0)
    assert rec.p_code[-1] == 0.0 and np.isnan(rec.fidelity[-1])
    assert rec.fidelity[0] == 1.0
