"""Benchmark control-affine systems, ODE integration and snapshot generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigurationError, DivergenceError, NumericalError, ValidationError

__all__ = [
    "ControlAffineSystem",
    "Trajectory",
    "SnapshotDataset",
    "make_system",
    "integrate",
    "generate_snapshots",
    "SYSTEM_DEFAULTS",
]

BLOWUP_BOUND = 1e6
RK45_RTOL = 1e-6
RK45_ATOL = 1e-9
# Largest internal rk4 step used by exact_flow snapshots.
EXACT_FLOW_MAX_STEP = 1e-3

SYSTEM_DEFAULTS = {
    "pendulum": {"damping": 0.01},
    "vanderpol": {"mu": 1.0},
    "lorenz": {"rho": 28.0, "sigma": 10.0, "beta": 8.0 / 3.0},
}


@dataclass(frozen=True)
class ControlAffineSystem:
    """``xdot = f(x) + g(x) u`` with a scalar input.

    ``f`` and ``g`` accept either a single state of shape ``(n,)`` or a batch
    of column states of shape ``(n, m)`` and return an array of the same
    shape.

    ``input_poly`` describes ``g`` as polynomials, one ``{exponent: coeff}``
    mapping per state component. It is what the exact bilinear construction
    consumes; it is ``None`` when ``g`` has no known polynomial form.
    """

    n: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)
    input_poly: Optional[tuple] = None

    def rhs(self, x, u):
        return self.f(x) + self.g(x) * u


def _constant_field(vec):
    vec = np.asarray(vec, dtype=float)

    def g(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return vec.copy()
        return np.repeat(vec[:, None], x.shape[1], axis=1)

    return g


def _constant_poly(vec):
    n = len(vec)
    zero = (0,) * n
    return tuple({zero: float(c)} if c != 0.0 else {} for c in vec)


def make_system(name: str, params: Optional[Mapping[str, object]] = None) -> ControlAffineSystem:
    """Build one of the benchmark systems.

    Supported names are ``pendulum``, ``vanderpol`` and ``lorenz`` (input on
    the second state equation for all three) plus ``linear``, which takes a
    matrix ``A`` and optional input vector ``g`` (default ``e_1`` of the last
    coordinate when n == 1, ``e_2`` otherwise).
    """
    params = dict(params or {})
    if name == "linear":
        if "A" not in params:
            raise ConfigurationError("linear system requires parameter 'A'")
        Amat = np.atleast_2d(np.asarray(params["A"], dtype=float))
        n = Amat.shape[0]
        if Amat.shape != (n, n):
            raise ValidationError("linear system matrix must be square")
        gvec = np.asarray(params.get("g", np.eye(n)[min(1, n - 1)]), dtype=float).reshape(n)
        if not (np.all(np.isfinite(Amat)) and np.all(np.isfinite(gvec))):
            raise ValidationError("non-finite parameters for linear system")

        def f(x):
            return Amat @ np.asarray(x, dtype=float)

        return ControlAffineSystem(
            n, f, _constant_field(gvec), "linear",
            {"A": Amat.tolist(), "g": gvec.tolist()}, _constant_poly(gvec),
        )

    if name not in SYSTEM_DEFAULTS:
        raise ConfigurationError(f"unknown system {name!r}")
    unknown = set(params) - set(SYSTEM_DEFAULTS[name])
    if unknown:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(unknown)}")
    p = {**SYSTEM_DEFAULTS[name], **params}
    for key, val in p.items():
        try:
            fval = float(val)
        except (TypeError, ValueError):
            raise ValidationError(f"parameter {key!r} must be a number") from None
        if not math.isfinite(fval):
            raise ValidationError(f"parameter {key!r} is not finite")
        p[key] = fval

    if name == "pendulum":
        c = p["damping"]

        def f(x):
            x = np.asarray(x, dtype=float)
            return np.array([x[1], c * x[1] - np.sin(x[0])])

        n = 2
    elif name == "vanderpol":
        mu = p["mu"]

        def f(x):
            x = np.asarray(x, dtype=float)
            return np.array([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0]])

        n = 2
    else:
        rho, sigma, beta = p["rho"], p["sigma"], p["beta"]

        def f(x):
            x = np.asarray(x, dtype=float)
            return np.array([
                sigma * (x[1] - x[0]),
                x[0] * (rho - x[2]) - x[1],
                x[0] * x[1] - beta * x[2],
            ])

        n = 3

    gvec = np.zeros(n)
    gvec[1] = 1.0
    return ControlAffineSystem(n, f, _constant_field(gvec), name, p, _constant_poly(gvec))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len, n)
    inputs: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValidationError("times and states must have equal length")
        if self.inputs.shape[0] < self.times.shape[0] - 1:
            raise ValidationError("inputs must cover every step")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must be strictly increasing")
        for arr in (self.times, self.states, self.inputs):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("trajectory contains non-finite entries")

    def __len__(self):
        return self.times.shape[0]

    @property
    def final_state(self):
        return self.states[-1]


@dataclass
class SnapshotDataset:
    """Paired samples stored column-wise: ``Y[:, i]`` is the image of ``X[:, i]``."""

    X: np.ndarray
    Y: np.ndarray
    dt: float

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape != self.Y.shape:
            raise ValidationError(f"X {self.X.shape} and Y {self.Y.shape} differ in shape")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.X.shape[1] < 1:
            raise ValidationError("dataset needs at least one sample")

    @property
    def M(self):
        return self.X.shape[1]

    @property
    def n(self):
        return self.X.shape[0]

    def to_csv(self, path):
        rows = np.vstack([self.X, self.Y]).T
        with open(path, "w", newline="\n") as fh:
            fh.write(f"dt={self.dt:.17g}\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            header = fh.readline().strip()
            if not header.startswith("dt="):
                raise ValidationError("snapshot CSV must start with a 'dt=<value>' header")
            dt = float(header[3:])
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.shape[1] % 2:
            raise ValidationError("snapshot CSV rows must hold x and y halves")
        n = data.shape[1] // 2
        return cls(data[:, :n].T, data[:, n:].T, dt)


def _time_grid(dt, T):
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if not T >= dt:
        raise ValidationError("T must be at least dt")
    steps = int(math.floor(T / dt + 1e-9))
    return np.arange(steps + 1) * dt


def _rk4_step(fun, x, h):
    k1 = fun(x)
    k2 = fun(x + 0.5 * h * k1)
    k3 = fun(x + 0.5 * h * k2)
    k4 = fun(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    system: ControlAffineSystem,
    x0,
    controller: Optional[Callable[[np.ndarray], float]] = None,
    dt: float = 0.01,
    T: float = 1.0,
    method: str = "rk4",
    blowup: float = BLOWUP_BOUND,
) -> Trajectory:
    """Integrate the closed loop ``xdot = f(x) + g(x) k(x)`` on a uniform grid.

    ``controller=None`` means ``u = 0``. With ``rk4`` the feedback is
    re-evaluated at every stage; with ``rk45`` scipy's adaptive Dormand-Prince
    solver runs underneath and the grid is filled from its dense output.

    Raises
    ------
    DivergenceError
        If ``||x||`` exceeds ``blowup``; ``err.trajectory`` holds the samples
        computed so far.
    """
    x0 = np.asarray(x0, dtype=float).reshape(system.n)
    if not np.all(np.isfinite(x0)):
        raise ValidationError("x0 must be finite")
    times = _time_grid(dt, T)
    k = controller if controller is not None else (lambda x: 0.0)

    def fun(x):
        return system.f(x) + system.g(x) * float(k(x))

    if method == "rk4":
        states = np.empty((times.size, system.n))
        states[0] = x0
        x = x0
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(1, times.size):
                try:
                    x = _rk4_step(fun, x, dt)
                except NumericalError:
                    x = np.full(system.n, np.nan)
                norm = np.sqrt(x @ x)
                if not norm <= blowup:
                    raise DivergenceError(
                        f"state norm exceeded {blowup:g} at t={times[i]:.6g}",
                        _partial(times[:i], states[:i], k),
                    )
                states[i] = x
    elif method == "rk45":
        def blew_up(t, x):
            if not np.all(np.isfinite(x)):
                return -1.0
            return blowup - np.linalg.norm(x)

        blew_up.terminal = True
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                sol = solve_ivp(
                    lambda t, x: fun(x), (0.0, times[-1]), x0, method="RK45",
                    t_eval=times, rtol=RK45_RTOL, atol=RK45_ATOL, events=blew_up,
                )
        except NumericalError as exc:
            raise DivergenceError(f"rk45 failed: {exc}", None) from exc
        states = sol.y.T
        if sol.status == 1 or states.shape[0] < times.size:
            m = states.shape[0]
            raise DivergenceError(
                f"state norm exceeded {blowup:g} before t={times[-1]:.6g}",
                _partial(times[:m], states[:m], k) if m else None,
            )
        if sol.status < 0:
            raise DivergenceError(f"rk45 failed: {sol.message}", _partial(times[:1], states[:1], k))
    else:
        raise ConfigurationError(f"unknown integration method {method!r}")

    inputs = np.array([float(k(s)) for s in states])
    return Trajectory(times, states, inputs)


def _partial(times, states, k):
    if len(times) == 0:
        return None
    try:
        return Trajectory(times, states, [float(k(s)) for s in states])
    except ValidationError:
        return None


def _flow_map(system, X, dt, substeps):
    h = dt / substeps
    for _ in range(substeps):
        X = _rk4_step(system.f, X, h)
    return X


def _euler_map(system, X, dt):
    return X + system.f(X) * dt


def generate_snapshots(
    system: ControlAffineSystem,
    box: Sequence[Sequence[float]],
    M: Optional[int] = None,
    dt: float = 0.01,
    mode: str = "exact_flow",
    seed: int = 0,
    sampling: str = "scatter",
    n_traj: int = 100,
    T_final: Optional[float] = None,
) -> SnapshotDataset:
    """Sample snapshot pairs ``(x_i, y_i)`` of the uncontrolled drift.

    ``scatter`` draws ``M`` points i.i.d. uniformly from ``box`` and maps each
    one step forward. ``trajectory`` draws ``n_traj`` initial conditions from
    ``box``, runs each for ``T_final`` seconds and slices consecutive pairs,
    giving ``n_traj * floor(T_final / dt)`` samples.

    ``mode='euler'`` uses ``y = x + f(x) dt``; ``mode='exact_flow'`` uses
    rk4 substeps no longer than ``EXACT_FLOW_MAX_STEP``.
    """
    box = np.asarray(box, dtype=float)
    if box.shape != (system.n, 2):
        raise ValidationError(f"box must have shape ({system.n}, 2)")
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValidationError("box must be nondegenerate")
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if mode not in ("euler", "exact_flow"):
        raise ConfigurationError(f"unknown snapshot mode {mode!r}")
    rng = np.random.default_rng(seed)
    substeps = max(1, math.ceil(dt / EXACT_FLOW_MAX_STEP - 1e-9))

    def step(X):
        if mode == "euler":
            return _euler_map(system, X, dt)
        return _flow_map(system, X, dt, substeps)

    if sampling == "scatter":
        if M is None or M < 1:
            raise ValidationError("scatter sampling needs M >= 1")
        X = box[:, :1] + (box[:, 1:] - box[:, :1]) * rng.random((system.n, M))
        return SnapshotDataset(X, step(X), dt)

    if sampling != "trajectory":
        raise ConfigurationError(f"unknown sampling strategy {sampling!r}")
    if T_final is None or n_traj < 1:
        raise ValidationError("trajectory sampling needs n_traj >= 1 and T_final")
    steps = int(math.floor(T_final / dt + 1e-9))
    if steps < 1:
        raise ValidationError("T_final must be at least dt")
    x = box[:, :1] + (box[:, 1:] - box[:, :1]) * rng.random((system.n, n_traj))
    # column index = step * n_traj + trajectory
    S = np.empty((system.n, (steps + 1) * n_traj))
    S[:, :n_traj] = x
    for i in range(1, steps + 1):
        x = step(x)
        if not np.all(np.isfinite(x)) or np.max(np.linalg.norm(x, axis=0)) > BLOWUP_BOUND:
            raise DivergenceError(f"snapshot trajectory diverged at t={i * dt:.6g}")
        S[:, i * n_traj:(i + 1) * n_traj] = x
    return SnapshotDataset(S[:, :-n_traj], S[:, n_traj:], dt)
