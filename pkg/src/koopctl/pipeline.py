"""Staged execution: identify, design, simulate, report.

Every stage reads the run configuration plus the artifacts persisted by
earlier stages in the output directory, so stages can be re-run on their
own. Artifacts:

``model.json``       lifted bilinear model (identify)
``koopman.json``     EDMD matrix and spectrum (identify)
``clf.json``         quadratic CLF and design attempts (design)
``trajectories/``    one CSV per simulated trajectory (simulate)
``simulation.json``  per-trajectory outcomes (simulate)
``summary.json``     aggregated statistics (report)
``manifest.json``    config hash, timings and diagnostics of every stage
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .clf import (
    CONTROLLER_KINDS,
    GAMMA_SCHEDULE,
    ControllerSpec,
    QuadraticCLF,
    check_stabilizability,
    closed_loop_controller,
    lqr_reference,
    solve_clf_sdp,
)
from .dynamics import generate_snapshots, integrate, make_system
from .edmd import build_gram, fit_koopman, make_dictionary, spectrum
from .errors import (
    ConfigurationError,
    DependencyError,
    DesignFailureError,
    DivergenceError,
    ParseError,
    SpanViolationError,
)
from .lifting import BilinearModel, _dump_json, _load_json, build_A, build_B_exact, build_B_lsq, lift, realify

__all__ = [
    "RunConfig",
    "load_config",
    "default_config",
    "cmd_identify",
    "cmd_design",
    "cmd_simulate",
    "cmd_report",
    "convergence_time",
    "count_v_increases",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "design_clf",
    "run_all",
]

log = logging.getLogger("koopctl")

CONVERGENCE_RADIUS = 0.05
V_INCREASE_RTOL = 1e-6

# Data regions and horizons used for each benchmark when the config omits them.
SYSTEM_PRESETS = {
    "pendulum": {"box": [[-1, 1], [-1, 1]], "T_final": 10.0, "dt": 1e-3},
    "vanderpol": {"box": [[-3, 3], [-4, 4]], "T_final": 10.0, "dt": 1e-4},
    "lorenz": {"box": [[-5, 5], [-5, 5], [0, 20]], "T_final": 5.0, "dt": 1e-3},
}

SCHEMA = {
    "system": {"name": str, "params": dict},
    "data": {"mode": str, "sampling": str, "box": list, "M": int, "n_traj": int,
             "T_final": float, "dt": float, "seed": int},
    "dictionary": {"D": int, "normalize": bool},
    "lifting": {"svd_threshold": float, "constant_mode_tol": float, "A_variant": str,
                "B_method": str, "lsq_samples": int},
    "clf": {"gamma": float, "c_min": float, "c_max": float, "controller": str, "gain": float,
            "q_weight": float, "n_samples": int, "tol": float, "gamma_schedule": list, "seed": int},
    "simulate": {"initial_conditions": list, "box": list, "count": int, "seed": int, "T": float,
                 "dt": float, "method": str, "blowup": float, "open_loop": bool, "lqr": dict},
    "output": str,
}

DEFAULTS = {
    "data": {"mode": "exact_flow", "sampling": "trajectory", "n_traj": 100, "seed": 0},
    "dictionary": {"D": 5, "normalize": False},
    "lifting": {"svd_threshold": 1e-10, "constant_mode_tol": 1e-6, "A_variant": "continuous",
                "B_method": "auto", "lsq_samples": 2000},
    "clf": {"gamma": 2.0, "c_min": 0.1, "c_max": 100.0, "controller": "gradient", "gain": 10.0,
            "q_weight": 1.0, "n_samples": 10_000, "tol": 1e-8, "gamma_schedule": list(GAMMA_SCHEDULE),
            "seed": 0},
    "simulate": {"count": 10, "seed": 1, "T": 10.0, "dt": 1e-3, "method": "rk4", "blowup": 1e6,
                 "open_loop": True},
    "output": "run",
}


def _check_type(value, kind, where):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigurationError(f"{where}: expected {kind.__name__}, got {value!r}")


def _box(value, n, where):
    arr = np.asarray(value, dtype=float) if isinstance(value, list) else None
    if arr is None or arr.shape != (n, 2) or not np.all(np.isfinite(arr)) or np.any(arr[:, 1] <= arr[:, 0]):
        raise ConfigurationError(f"{where}: expected {n} [low, high] pairs with low < high")
    return arr.tolist()


@dataclass
class RunConfig:
    """Validated, fully defaulted run configuration."""

    raw: dict
    resolved: dict

    @property
    def output(self):
        return self.resolved["output"]

    def section(self, name):
        return self.resolved[name]

    def with_output(self, out):
        if out is None:
            return self
        resolved = copy.deepcopy(self.resolved)
        resolved["output"] = str(out)
        return RunConfig(self.raw, resolved)

    @property
    def digest(self):
        body = {k: v for k, v in self.resolved.items() if k != "output"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
            spec = SCHEMA[key]
            if isinstance(spec, dict):
                if not isinstance(value, dict):
                    raise ConfigurationError(f"{key}: expected an object")
                for sub, v in value.items():
                    if sub not in spec:
                        raise ConfigurationError(f"unknown config key {key}.{sub}")
                    _check_type(v, spec[sub], f"{key}.{sub}")
            else:
                _check_type(value, spec, key)
        if "system" not in raw or "name" not in raw["system"]:
            raise ConfigurationError("system.name is required")

        res = copy.deepcopy(DEFAULTS)
        res["system"] = {"name": raw["system"]["name"], "params": dict(raw["system"].get("params", {}))}
        system = make_system(res["system"]["name"], res["system"]["params"])
        preset = SYSTEM_PRESETS.get(system.name, {})
        res["data"].update({k: v for k, v in preset.items()})
        for key in ("data", "dictionary", "lifting", "clf", "simulate"):
            res[key].update(copy.deepcopy(raw.get(key, {})))
        if "output" in raw:
            res["output"] = raw["output"]

        n = system.n
        data = res["data"]
        for k in ("box", "dt"):
            if k not in data:
                raise ConfigurationError(f"data.{k} is required for system {system.name!r}")
        data["box"] = _box(data["box"], n, "data.box")
        if data["mode"] not in ("exact_flow", "euler"):
            raise ConfigurationError(f"data.mode must be exact_flow or euler, got {data['mode']!r}")
        if data["sampling"] == "scatter":
            if data.get("M", 0) < 1:
                raise ConfigurationError("data.M >= 1 is required for scatter sampling")
        elif data["sampling"] == "trajectory":
            if "T_final" not in data or data["T_final"] < data["dt"] or data["n_traj"] < 1:
                raise ConfigurationError("trajectory sampling needs n_traj >= 1 and T_final >= dt")
        else:
            raise ConfigurationError(f"data.sampling must be scatter or trajectory, got {data['sampling']!r}")
        if not data["dt"] > 0:
            raise ConfigurationError("data.dt must be positive")
        if res["dictionary"]["D"] < 1:
            raise ConfigurationError("dictionary.D must be >= 1")
        lift_cfg = res["lifting"]
        if lift_cfg["A_variant"] not in ("continuous", "discrete"):
            raise ConfigurationError("lifting.A_variant must be continuous or discrete")
        if lift_cfg["B_method"] not in ("auto", "exact", "lsq"):
            raise ConfigurationError("lifting.B_method must be auto, exact or lsq")
        if not lift_cfg["svd_threshold"] > 0 or not lift_cfg["constant_mode_tol"] >= 0:
            raise ConfigurationError("lifting tolerances must be positive")
        clf = res["clf"]
        if clf["controller"] not in CONTROLLER_KINDS:
            raise ConfigurationError(f"clf.controller must be one of {CONTROLLER_KINDS}")
        if not 0 < clf["c_min"] < clf["c_max"]:
            raise ConfigurationError("clf needs 0 < c_min < c_max")
        if clf["gamma"] < 0 or clf["gain"] < 0 or clf["q_weight"] < 0:
            raise ConfigurationError("clf.gamma, clf.gain and clf.q_weight must be nonnegative")
        sched = clf["gamma_schedule"]
        if not sched or len(sched) > 8 or any(not isinstance(g, (int, float)) or g < 0 for g in sched):
            raise ConfigurationError("clf.gamma_schedule must list 1 to 8 nonnegative numbers")
        sim = res["simulate"]
        if "initial_conditions" in sim:
            ics = sim["initial_conditions"]
            arr = np.asarray(ics, dtype=float) if ics else None
            if arr is None or arr.ndim != 2 or arr.shape[1] != n or not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"simulate.initial_conditions must be a list of {n}-vectors")
        else:
            sim["box"] = _box(sim.get("box", data["box"]), n, "simulate.box")
            if sim["count"] < 1:
                raise ConfigurationError("simulate.count must be >= 1")
        if sim["method"] not in ("rk4", "rk45"):
            raise ConfigurationError("simulate.method must be rk4 or rk45")
        if not (sim["dt"] > 0 and sim["T"] >= sim["dt"] and sim["blowup"] > 0):
            raise ConfigurationError("simulate needs dt > 0, T >= dt and blowup > 0")
        if "lqr" in sim:
            lq = sim["lqr"]
            unknown = set(lq) - {"Q", "R"}
            if unknown:
                raise ConfigurationError(f"unknown config key simulate.lqr.{sorted(unknown)[0]}")
            try:
                Q = np.asarray(lq.get("Q", np.eye(n).tolist()), dtype=float)
                R = np.asarray(lq.get("R", 1.0), dtype=float)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"simulate.lqr: {exc}") from exc
            if Q.shape != (n, n) or R.size != 1:
                raise ConfigurationError("simulate.lqr needs Q of shape (n, n) and scalar R")
            sim["lqr"] = {"Q": Q.tolist(), "R": float(R.reshape(-1)[0])}
        return cls(raw, res)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc})", str(path)) from exc
    return RunConfig.from_dict(raw)


def default_config(name: str, **sections) -> dict:
    """Minimal raw config for a built-in system; ``sections`` override keys."""
    raw = {"system": {"name": name}}
    for key, value in sections.items():
        raw[key] = value
    return raw


# ---------------------------------------------------------------------------
# manifest


def _update_manifest(cfg: RunConfig, stage: str, record: dict):
    out = cfg.output
    path = os.path.join(out, "manifest.json")
    manifest = _load_json(path) if os.path.exists(path) else {}
    manifest["config_hash"] = cfg.digest
    manifest["config"] = cfg.resolved
    manifest.setdefault("stages", {})[stage] = record
    _dump_json(manifest, path)


def _require(path, stage):
    if not os.path.exists(path):
        raise DependencyError(f"{os.path.basename(path)} not found; run `koopctl {stage}` first")
    return path


def _system(cfg):
    s = cfg.section("system")
    return make_system(s["name"], s["params"])


# ---------------------------------------------------------------------------
# identify


def cmd_identify(cfg: RunConfig) -> BilinearModel:
    """Snapshots, EDMD fit, realification and the lifted model; writes ``model.json``."""
    os.makedirs(cfg.output, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    system = _system(cfg)
    data = cfg.section("data")
    ds = generate_snapshots(
        system, data["box"], M=data.get("M"), dt=data["dt"], mode=data["mode"], seed=data["seed"],
        sampling=data["sampling"], n_traj=data["n_traj"], T_final=data.get("T_final"),
    )
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dcfg = cfg.section("dictionary")
    box = np.asarray(data["box"])
    scale = np.max(np.abs(box), axis=1) if dcfg["normalize"] else None
    dictionary = make_dictionary(system.n, dcfg["D"], scale)
    G, A = build_gram(ds, dictionary)
    lcfg = cfg.section("lifting")
    K = fit_koopman(G, A, lcfg["svd_threshold"])
    residual = float(np.linalg.norm(G @ K - A))
    mu, V = spectrum(K)
    timings["edmd"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    basis = realify(mu, V, ds.dt, dictionary, constant_mode_tol=lcfg["constant_mode_tol"])
    Amat = build_A(basis, lcfg["A_variant"])
    method = lcfg["B_method"]
    path = "exact"
    if method in ("auto", "exact"):
        try:
            B, b, span = build_B_exact(basis, system.input_poly)
        except SpanViolationError:
            if method == "exact":
                raise
            path = "lsq"
    else:
        path = "lsq"
    if path == "lsq":
        rng = np.random.default_rng(data["seed"] + 1)
        samples = box[:, :1] + (box[:, 1:] - box[:, :1]) * rng.random((system.n, lcfg["lsq_samples"]))
        B, b, span = build_B_lsq(basis, system.g, samples)
    timings["lift"] = time.perf_counter() - t0

    model = BilinearModel(Amat, B, b, basis, span, {"system": system.name, "B_path": path,
                                                    "A_variant": lcfg["A_variant"]})
    model.save(os.path.join(cfg.output, "model.json"))
    _dump_json({
        "K": K.tolist(),
        "dt": ds.dt,
        "eigenvalues": [[float(m.real), float(m.imag)] for m in mu],
        "dictionary": dictionary.to_dict(),
        "residual": residual,
    }, os.path.join(cfg.output, "koopman.json"))
    _update_manifest(cfg, "identify", {
        "timings": timings,
        "samples": ds.M,
        "edmd_residual": residual,
        "span_residual": span,
        "B_path": path,
        "dimension": basis.dim,
        "basis_condition": basis.cond,
        "max_real_eigenvalue": float(np.max(basis.coordinate_eigenvalues.real)),
    })
    log.info("identify: %d samples, %d lifted coordinates, residual %.3g", ds.M, basis.dim, residual)
    return model


# ---------------------------------------------------------------------------
# design


def _lift_radius(model: BilinearModel, box):
    """Largest ``||z||`` over a grid of the state box (region for the offset test)."""
    box = np.asarray(box, dtype=float)
    n = box.shape[0]
    k = max(2, int(round(4096 ** (1.0 / n))))
    axes = [np.linspace(lo, hi, k) for lo, hi in box]
    X = np.array(np.meshgrid(*axes, indexing="ij")).reshape(n, -1)
    return float(np.max(np.linalg.norm(lift(model.basis, X), axis=0)))


def design_clf(model: BilinearModel, clf_cfg: dict, radius: float = np.inf):
    """Solve the SDP for each weight in the schedule until the check passes.

    The first weight tried is ``clf_cfg['gamma']``, followed by the rest of
    the schedule. Returns ``(clf, attempts)``; raises
    :class:`DesignFailureError` with every witness if no weight passes.
    """
    schedule = [float(clf_cfg["gamma"])] + [float(g) for g in clf_cfg["gamma_schedule"]
                                            if float(g) != float(clf_cfg["gamma"])]
    schedule = schedule[:8]
    attempts, witnesses = [], []
    for gamma in schedule:
        clf = solve_clf_sdp(model.A, model.B, gamma, clf_cfg["c_min"], clf_cfg["c_max"])
        check = check_stabilizability(clf.P, model.A, model.B, clf_cfg["n_samples"], clf_cfg["tol"],
                                      seed=clf_cfg["seed"])
        offset_check = check_stabilizability(clf.P, model.A, model.B, clf_cfg["n_samples"], clf_cfg["tol"],
                                             seed=clf_cfg["seed"], offset=model.input_offset, radius=radius)
        attempts.append({"gamma": gamma, "t_opt": clf.t_opt, "solver": dict(clf.diagnostics),
                         "check": check.to_json(), "offset_check": offset_check.to_json()})
        if check.passed:
            clf.diagnostics.update({"attempts": attempts, "certificate": check.level,
                                    "offset_certificate": offset_check.level})
            return clf, attempts
        witnesses.append(check.witness.tolist())
    raise DesignFailureError(f"no gamma in {schedule} passed the stabilizability check", witnesses)


def cmd_design(cfg: RunConfig) -> QuadraticCLF:
    """Load ``model.json``, design the CLF with the retry schedule and write ``clf.json``."""
    path = _require(os.path.join(cfg.output, "model.json"), "identify")
    model = BilinearModel.load(path)
    t0 = time.perf_counter()
    radius = np.inf
    if model.basis is not None:
        radius = _lift_radius(model, cfg.section("data")["box"])
    try:
        clf, attempts = design_clf(model, cfg.section("clf"), radius)
    except DesignFailureError as exc:
        _update_manifest(cfg, "design", {"status": "failed", "error": str(exc), "witnesses": exc.witnesses})
        raise
    clf.save(os.path.join(cfg.output, "clf.json"))
    _update_manifest(cfg, "design", {
        "status": "ok",
        "timings": {"design": time.perf_counter() - t0},
        "gamma": clf.gamma,
        "t_opt": clf.t_opt,
        "attempts": attempts,
        "certificate": clf.diagnostics.get("certificate"),
        "lift_radius": radius,
    })
    log.info("design: gamma=%g t=%.6g after %d attempt(s)", clf.gamma, clf.t_opt, len(attempts))
    return clf


# ---------------------------------------------------------------------------
# simulate


def convergence_time(times, states, radius: float = CONVERGENCE_RADIUS) -> Optional[float]:
    """First ``t`` from which ``||x|| < radius`` holds for the rest of the record."""
    norms = np.linalg.norm(np.atleast_2d(states), axis=1)
    outside = np.flatnonzero(norms >= radius)
    if outside.size == 0:
        return float(times[0])
    k = outside[-1] + 1
    return float(times[k]) if k < len(times) else None


def count_v_increases(V, rtol: float = V_INCREASE_RTOL) -> int:
    """Steps where ``V(t_k+1) > V(t_k) + rtol (1 + V(t_k))``."""
    V = np.asarray(V, dtype=float)
    return int(np.sum(V[1:] > V[:-1] + rtol * (1.0 + V[:-1])))


def write_trajectory_csv(path, times, states, inputs, V):
    n = states.shape[1]
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + ["u", "V"]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(times)):
            row = [times[k], *states[k], inputs[k], V[k]]
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_trajectory_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


def _initial_conditions(sim, n):
    if "initial_conditions" in sim:
        return np.asarray(sim["initial_conditions"], dtype=float).reshape(-1, n)
    box = np.asarray(sim["box"], dtype=float)
    rng = np.random.default_rng(sim["seed"])
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((sim["count"], n))


def _threads():
    raw = os.environ.get("KOOPCTL_THREADS")
    if raw is None:
        return min(8, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"KOOPCTL_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigurationError("KOOPCTL_THREADS must be >= 1")
    return value


def _run_one(system, x0, controller, sim, value, label):
    record = {"label": label, "x0": x0.tolist(), "diverged": False}
    try:
        traj = integrate(system, x0, controller, dt=sim["dt"], T=sim["T"], method=sim["method"],
                         blowup=sim["blowup"])
    except DivergenceError as exc:
        traj = exc.trajectory
        record["diverged"] = True
        record["error"] = str(exc)
    if traj is None:
        return record, None
    V = value(traj.states) if value is not None else np.full(len(traj), np.nan)
    record.update({
        "final_norm": float(np.linalg.norm(traj.states[-1])),
        "convergence_time": None if record["diverged"] else convergence_time(traj.times, traj.states),
        "v_increases": count_v_increases(V) if value is not None else None,
        "max_abs_u": float(np.max(np.abs(traj.inputs))),
    })
    return record, (traj.times, traj.states, traj.inputs, V)


def cmd_simulate(cfg: RunConfig) -> dict:
    """Closed-loop, open-loop and optional LQR runs from every initial condition."""
    out = cfg.output
    model = BilinearModel.load(_require(os.path.join(out, "model.json"), "identify"))
    clf = QuadraticCLF.load(_require(os.path.join(out, "clf.json"), "design"))
    if model.basis is None:
        raise DependencyError("model.json carries no eigenfunction basis; re-run identify")
    ccfg = cfg.section("clf")
    sim = cfg.section("simulate")
    system = _system(cfg)
    weight = float(ccfg["q_weight"])
    spec = ControllerSpec(ccfg["controller"], clf, model, gain=float(ccfg["gain"]),
                          q=lambda z: weight * float(z @ z))
    controller = closed_loop_controller(spec, model.basis)

    def value(states):
        return clf.value(lift(model.basis, states.T))

    jobs = []
    ics = _initial_conditions(sim, system.n)
    for i, x0 in enumerate(ics):
        jobs.append((f"closed_{i:03d}", x0, controller))
        if sim["open_loop"]:
            jobs.append((f"open_{i:03d}", x0, None))
    lqr_gain = None
    if "lqr" in sim:
        lqr_gain = lqr_reference(_linearize(system), system.g(np.zeros(system.n)),
                                 np.asarray(sim["lqr"]["Q"]), np.asarray([[sim["lqr"]["R"]]]))

        def lqr_controller(x, k=lqr_gain):
            return -float(k @ x)

        for i, x0 in enumerate(ics):
            jobs.append((f"lqr_{i:03d}", x0, lqr_controller))

    traj_dir = os.path.join(out, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda job: _run_one(system, job[1], job[2], sim, value, job[0]), jobs))
    records = []
    for (label, _, _), (record, data) in zip(jobs, results):
        if data is not None:
            write_trajectory_csv(os.path.join(traj_dir, f"{label}.csv"), *data)
            record["csv"] = os.path.join("trajectories", f"{label}.csv")
        records.append(record)
    summary = {
        "controller": spec.kind,
        "gain": spec.gain,
        "lqr_gain": None if lqr_gain is None else np.asarray(lqr_gain).tolist(),
        "trajectories": records,
        "diverged": [r["label"] for r in records if r["diverged"] and r["label"].startswith("closed")],
    }
    _dump_json(summary, os.path.join(out, "simulation.json"))
    _update_manifest(cfg, "simulate", {
        "timings": {"simulate": time.perf_counter() - t0},
        "convergence_times": {r["label"]: r.get("convergence_time") for r in records},
        "diverged": summary["diverged"],
    })
    return summary


def _linearize(system, eps=1e-6):
    n = system.n
    J = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        J[:, i] = (system.f(e) - system.f(-e)) / (2 * eps)
    return J


# ---------------------------------------------------------------------------
# report


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"count": 0, "converged": 0}
    return {"count": len(values), "converged": len(vals), "mean": float(np.mean(vals)),
            "max": float(np.max(vals)), "min": float(np.min(vals))}


def cmd_report(cfg: RunConfig) -> dict:
    """Aggregate ``simulation.json`` into ``summary.json`` plus overlay CSVs."""
    out = cfg.output
    if not os.path.isdir(out):
        raise DependencyError(f"run directory {out} does not exist")
    sim = _load_json(_require(os.path.join(out, "simulation.json"), "simulate"))
    records = sim["trajectories"]
    groups = {}
    for r in records:
        groups.setdefault(r["label"].split("_")[0], []).append(r)
    summary = {"controller": sim["controller"], "groups": {}}
    for name, recs in groups.items():
        summary["groups"][name] = {
            "convergence_time": _stats([r.get("convergence_time") for r in recs]),
            "final_norm_max": max((r.get("final_norm", np.inf) for r in recs), default=None),
            "v_increases": int(sum(r.get("v_increases") or 0 for r in recs)),
            "diverged": [r["label"] for r in recs if r["diverged"]],
        }
    if "closed" in groups and "lqr" in groups:
        summary["lqr_comparison"] = {
            "clf_max_convergence_time": summary["groups"]["closed"]["convergence_time"].get("max"),
            "lqr_max_convergence_time": summary["groups"]["lqr"]["convergence_time"].get("max"),
        }
    summary["warnings"] = [f"{label} diverged" for g in summary["groups"].values() for label in g["diverged"]]

    overlay_dir = os.path.join(out, "overlays")
    os.makedirs(overlay_dir, exist_ok=True)
    by_label = {r["label"]: r for r in records}
    for r in groups.get("closed", []):
        idx = r["label"].split("_")[1]
        parts = [("closed", r)] + [(k, by_label.get(f"{k}_{idx}")) for k in ("open", "lqr")]
        _write_overlay(out, os.path.join(overlay_dir, f"ic_{idx}.csv"), parts)
    _dump_json(summary, os.path.join(out, "summary.json"))
    _update_manifest(cfg, "report", {"warnings": summary["warnings"]})
    return summary


def _write_overlay(out, path, parts):
    """Side-by-side ``t`` and ``||x||`` columns of the runs sharing one initial condition."""
    columns, names = [], []
    for name, rec in parts:
        if rec is None or "csv" not in rec:
            continue
        _, data = read_trajectory_csv(os.path.join(out, rec["csv"]))
        n = data.shape[1] - 3
        columns.append((data[:, 0], np.linalg.norm(data[:, 1:1 + n], axis=1)))
        names.append(name)
    if not columns:
        return
    length = max(len(c[0]) for c in columns)
    header = ["t"] + [f"norm_{nm}" for nm in names]
    t_ref = max(columns, key=lambda c: len(c[0]))[0]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(length):
            row = [f"{t_ref[k]:.17g}"] + [f"{c[1][k]:.17g}" if k < len(c[1]) else "" for c in columns]
            fh.write(",".join(row) + "\n")


def run_all(cfg: RunConfig):
    """All four stages in order (convenience for tests and scripts)."""
    model = cmd_identify(cfg)
    clf = cmd_design(cfg)
    sim = cmd_simulate(cfg)
    summary = cmd_report(cfg)
    return model, clf, sim, summary
