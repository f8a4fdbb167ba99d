"""Command-line front end: ``cqec <subcommand> --config cfg.json --out dir``.

All rates and times in configuration files are in units with Gamma_m = 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import effective as ef
from . import metrics as M
from . import quantum_core as qc
from .controller import MODES, ProtocolConfig
from .errors import CQECError, InvariantViolation
from .trajectory import ErrorModel, MeasurementConfig, TrajectoryConfig, run_ensemble

SUBCOMMANDS = ("trajectories", "effective", "compare", "optimize", "misdiag", "glrate", "tts")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_numlist = {"type": "array", "items": _num, "minItems": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "cqec experiment",
    "description": "Units: Gamma_m = 1; every rate and time is dimensionless in these units.",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(SUBCOMMANDS)},
        "L": {"enum": [1, 2]},
        "measurement": {
            "type": "object", "additionalProperties": False,
            "properties": {"eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "dt": _pos, "gamma_m": {"const": 1}},
        },
        "errors": {
            "type": "object", "additionalProperties": False, "required": ["gamma"],
            "properties": {
                "gamma": {"oneOf": [{"type": "number", "minimum": 0},
                                    {"type": "array", "items": {"type": "number", "minimum": 0},
                                     "minItems": 3, "maxItems": 6}]},
                "mode": {"enum": ["lindblad", "jump"]},
            },
        },
        "schedule": {
            "type": "object", "additionalProperties": False, "required": ["t_op"],
            "properties": {"kind": {"enum": ["linear", "memory"]}, "omega0": {"type": "number", "minimum": 0},
                           "t_op": _pos, "coupling_sign": {"enum": [1, -1]}},
        },
        "protocol": {
            "type": "object", "additionalProperties": False,
            "properties": {"tau": _pos, "theta1": {"type": "number", "minimum": -1, "maximum": 1},
                           "theta2": {"type": "number", "minimum": -1, "maximum": 1},
                           "mode": {"enum": list(MODES)}},
        },
        "ensemble": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "record_stride": {"type": "integer", "minimum": 1},
        "c_fit": _pos,
        "n_records": {"type": "integer", "minimum": 2},
        "misdiag": {
            "type": "object", "additionalProperties": False,
            "properties": {"qubits": {"type": "array", "items": {"enum": [1, 2, 3]}, "minItems": 1},
                           "tau_over_tau_m": _numlist, "n_trials": {"type": "integer", "minimum": 100}},
        },
        "glrate": {
            "type": "object", "additionalProperties": False,
            "properties": {"tau_over_tau_m": _numlist, "gammas": _numlist},
        },
        "optimize": {
            "type": "object", "additionalProperties": False,
            "properties": {"objective": {"enum": ["memory", "annealing"]}, "grid": {"type": "integer", "minimum": 9}},
        },
        "tts": {
            "type": "object", "additionalProperties": False,
            "properties": {"t_op": _numlist, "modes": {"type": "array", "items": {"enum": list(MODES)}},
                           "tau_L2": _pos, "target": {"enum": ["ground", "schrodinger"]}},
        },
    },
}


class SchemaError(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def validate(cfg: dict) -> None:
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
        raise SchemaError(path, e.message)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --------------------------------------------------------------------------
# building blocks from a config dict


class Experiment:
    def __init__(self, cfg: dict, seed: int | None, ensemble: int | None):
        self.cfg = cfg
        self.L = cfg.get("L", 1)
        m = cfg.get("measurement", {})
        self.measurement = MeasurementConfig(1.0, m.get("eta", 1.0), m.get("dt", 5e-3))
        e = cfg.get("errors", {"gamma": 0.0})
        g = e["gamma"]
        self.gamma = tuple(g) if isinstance(g, list) else (float(g),) * (3 * self.L)
        if len(self.gamma) != 3 * self.L:
            raise SchemaError("$.errors.gamma", f"need {3 * self.L} rates for L={self.L}")
        self.error_mode = e.get("mode", "lindblad")
        s = cfg.get("schedule", {"t_op": 500.0})
        kind = s.get("kind", "linear")
        if kind == "memory":
            self.schedule = qc.Schedule.memory(s["t_op"])
        else:
            self.schedule = qc.Schedule.linear(s.get("omega0", 0.1), s["t_op"], s.get("coupling_sign", 1))
        p = cfg.get("protocol", {})
        self.protocol = ProtocolConfig(p.get("tau", 2.5), p.get("theta1", -0.54), p.get("theta2", 0.8),
                                       p.get("mode", "conventional"))
        self.seed = cfg.get("seed", 0) if seed is None else seed
        self.ensemble = cfg.get("ensemble", 100) if ensemble is None else ensemble
        self.c = cfg.get("c_fit", ef.C_FIT)
        self.n_records = cfg.get("n_records", 201)

    def trajectory_config(self) -> TrajectoryConfig:
        return TrajectoryConfig(self.measurement, ErrorModel(self.gamma, self.error_mode), self.protocol,
                                self.schedule, record_stride=self.cfg.get("record_stride", 100))

    def effective(self, n_records=None):
        return ef.evolve_effective(self.schedule, self.gamma, self.protocol, self.measurement.tau_m,
                                   self.L, rho0=None, c=self.c, n_records=n_records or self.n_records)


def cmd_trajectories(ex: Experiment, out: Path) -> dict:
    res = run_ensemble(ex.trajectory_config(), ex.ensemble, ex.seed)
    write_csv(out / "trajectories.csv",
              ["t", "fidelity", "fidelity_se", "infidelity", "p_code", "p_code_se", "n_valid"],
              zip(res.t, res.fidelity, res.fidelity_se, res.infidelity, res.p_code, res.p_code_se, res.n_valid))
    return {"final_infidelity": float(res.infidelity[-1]), "final_se": float(res.fidelity_se[-1]),
            "n_corrections": res.n_corrections, "n_injected": res.n_injected}


def cmd_effective(ex: Experiment, out: Path) -> dict:
    r = ex.effective()
    write_csv(out / "effective.csv", ["t", "fidelity", "infidelity"], zip(r.t, r.fidelity, r.infidelity))
    return {"final_infidelity": float(r.infidelity[-1]), "gamma_L": [p.gamma_L for p in r.params],
            "step": r.step}


def cmd_compare(ex: Experiment, out: Path) -> dict:
    tc = ex.trajectory_config()
    res = run_ensemble(tc, ex.ensemble, ex.seed)
    eff = ex.effective(n_records=tc.n_records)
    inf_eff = np.interp(res.t, eff.t, eff.infidelity)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = np.where(inf_eff > 0, (res.infidelity - inf_eff) / inf_eff, 0.0)
    write_csv(out / "compare.csv",
              ["t", "infidelity_numerics", "infidelity_se", "infidelity_effective", "relative_deviation"],
              zip(res.t, res.infidelity, res.fidelity_se, inf_eff, dev))
    return {"final_relative_deviation": float(dev[-1]), "final_infidelity_numerics": float(res.infidelity[-1]),
            "final_infidelity_effective": float(inf_eff[-1])}


def cmd_optimize(ex: Experiment, out: Path) -> dict:
    o = ex.cfg.get("optimize", {})
    spec = M.OptimizationSpec(o.get("objective", "memory"), grid=o.get("grid", 9))
    res = M.optimize_protocol(spec, ex.gamma[:3], ex.measurement.tau_m,
                              ex.schedule if spec.objective == "annealing" else None, ex.c, ex.protocol.mode)
    d = res.to_dict()
    with open(out / "optimize.json", "w") as fh:
        json.dump(d, fh, indent=2)
    return d


def cmd_misdiag(ex: Experiment, out: Path) -> dict:
    o = ex.cfg.get("misdiag", {})
    tm = ex.measurement.tau_m
    rows = []
    for ratio in o.get("tau_over_tau_m", [3, 5, 8]):
        p = ProtocolConfig(ratio * tm, ex.protocol.theta1, ex.protocol.theta2)
        for q in o.get("qubits", [2]):
            r = ef.monte_carlo_misdiag(q, p, ex.measurement, o.get("n_trials", 10_000), ex.seed)
            p_cf = ef.misdiagnosis_prob(p.tau, tm, p.theta1, p.theta2, ex.c, q)
            rows.append([ratio, q, r.p_hat, r.ci[0], r.ci[1], r.n_misdiagnosed, r.n_diagnosed,
                         r.n_timeout, p_cf])
    write_csv(out / "misdiag.csv", ["tau_over_tau_m", "qubit", "p_hat", "ci_low", "ci_high",
                                    "n_misdiagnosed", "n_diagnosed", "n_timeout", "p_closed_form"], rows)
    return {"rows": len(rows)}


def cmd_glrate(ex: Experiment, out: Path) -> dict:
    o = ex.cfg.get("glrate", {})
    tm = ex.measurement.tau_m
    p = ex.protocol
    g3 = ex.gamma[:3]
    ratios = o.get("tau_over_tau_m", list(np.geomspace(1, 100, 41)))
    write_csv(out / "glrate_tau.csv", ["tau", "gamma_L"],
              [[r * tm, ef.logical_error_rate(g3, r * tm, tm, p.theta1, p.theta2, ex.c)] for r in ratios])
    rows = []
    for g in o.get("gammas", list(np.geomspace(1e-6, 1e-4, 9))):
        res = M.optimize_protocol(M.OptimizationSpec("memory"), g, tm, c=ex.c)
        rows.append([g, res.value, res.tau, res.theta1, res.theta2, M.wonham_reference(g, tm),
                     M.equivalent_cycle_time(res.value, g)])
    write_csv(out / "glrate_gamma.csv",
              ["gamma", "gamma_L_opt", "tau_opt", "theta1_opt", "theta2_opt", "gamma_L_wonham", "t_cycle"], rows)
    A, k = M.power_law_fit([r[0] for r in rows], [r[1] for r in rows])
    return {"power_law_amplitude": A, "power_law_exponent": k}


def cmd_tts(ex: Experiment, out: Path) -> dict:
    o = ex.cfg.get("tts", {})
    target = o.get("target", "ground")
    rows = []
    omega0 = ex.schedule.omega0
    g = ex.gamma[0]
    for mode in o.get("modes", ["modified"]):
        for L in (1, 2):
            tau = ex.protocol.tau if L == 1 else o.get("tau_L2", 2.1)
            p = ProtocolConfig(tau, ex.protocol.theta1, ex.protocol.theta2, mode)
            for t_op in o.get("t_op", list(np.geomspace(100, 2000, 8))):
                sch = qc.Schedule.linear(omega0, float(t_op))
                r = ef.evolve_effective(sch, (g,) * (3 * L), p, ex.measurement.tau_m, L, c=ex.c, n_records=2)
                ref = M.final_target(sch, L, target)
                inf_q = 1.0 - float(r.fidelity_to(ref)[-1])
                inf_u = M.unencoded_baseline(g, sch, "simulate", L, target)
                d = M.tts_ratio(float(t_op), inf_q, inf_u, L)
                rows.append([L, mode, t_op, inf_q, inf_u, inf_u**3, d["tts_classical"], d["tts_cqec"], d["ratio"]])
    write_csv(out / "tts.csv", ["L", "mode", "t_op", "infidelity_cqec", "infidelity_unencoded",
                                "infidelity_classical", "tts_classical", "tts_cqec", "ratio"], rows)
    return {"convention": {"N_cqec": "3L", "N_classical": "3L", "N_max": "3L", "copies": 3,
                           "p_d": M.P_DESIRED, "target": target}}


COMMANDS = {"trajectories": cmd_trajectories, "effective": cmd_effective, "compare": cmd_compare,
            "optimize": cmd_optimize, "misdiag": cmd_misdiag, "glrate": cmd_glrate, "tts": cmd_tts}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cqec", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--ensemble", type=int)
    args = ap.parse_args(argv)

    try:
        cfg = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return 2
    try:
        validate(cfg)
        if args.ensemble is not None and args.ensemble < 1:
            raise SchemaError("--ensemble", "must be at least 1")
        ex = Experiment(cfg, args.seed, args.ensemble)
    except SchemaError as exc:
        print(f"invalid configuration at {exc}", file=sys.stderr)
        return 2
    except CQECError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2

    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        result = COMMANDS[args.subcommand](ex, args.out)
    except InvariantViolation as exc:
        print(f"invariant violated at step {exc.step}: {exc}", file=sys.stderr)
        return 3
    except CQECError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = {"subcommand": args.subcommand, "version": version_string(), "seed": ex.seed,
               "ensemble": ex.ensemble, "wall_time_s": time.perf_counter() - t0, "config": cfg,
               "result": result}
    with open(args.out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    return 0


if __name__ == "__main__":
    sys.exit(main())
