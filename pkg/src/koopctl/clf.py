"""Quadratic control Lyapunov functions for the lifted bilinear model.

The design problem is the semidefinite program::

    minimize    t - gamma * trace(P B)
    subject to  t I - (P A + A^T P) >= 0
                c_max I - P >= 0
                P - c_min I >= 0

solved by a primal-dual interior-point method (HKM search direction,
Mehrotra predictor-corrector) written for this fixed block structure.
With ``V(z) = z^T P z`` the controllers use

    a(z) = z^T (P A + A^T P) z,      b(z) = z^T (P B + B^T P) z + 2 z^T P b0

where ``b0`` is the model's input offset (zero for a purely bilinear model).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import ModelError, NumericalError, ParseError, SolverError, ValidationError
from .edmd import eval_dictionary
from .lifting import BilinearModel, RealEigenbasis, _dump_json, _load_json, _matrix

__all__ = [
    "QuadraticCLF",
    "ControllerSpec",
    "StabilizabilityResult",
    "CONTROLLER_KINDS",
    "GAMMA_SCHEDULE",
    "solve_clf_sdp",
    "check_stabilizability",
    "control_input",
    "clf_derivative",
    "closed_loop_controller",
    "lqr_reference",
]

DEFAULT_GAMMA = 2.0
DEFAULT_C_MIN = 0.1
DEFAULT_C_MAX = 100.0
DEFAULT_SAMPLES = 10_000
DEFAULT_TOL = 1e-8
B_TOL_FACTOR = 1e-9
GAMMA_SCHEDULE = (2.0, 4.0, 1.0, 8.0, 0.5, 16.0, 0.25, 32.0)
CONTROLLER_KINDS = ("sign", "gradient", "sontag", "modified_sontag")


# ---------------------------------------------------------------------------
# SDP


class _SymBasis:
    """Orthonormal basis ``E_k`` of symmetric ``N x N`` matrices.

    ``E_k = s_k (e_a e_b^T + e_b e_a^T)`` with ``s = 1/2`` on the diagonal
    and ``1/sqrt(2)`` off it.
    """

    def __init__(self, N):
        a, b = np.triu_indices(N)
        self.N = N
        self.a, self.b = a, b
        self.s = np.where(a == b, 0.5, np.sqrt(0.5))

    @property
    def m(self):
        return self.a.size

    def to_mat(self, p):
        P = np.zeros((self.N, self.N))
        np.add.at(P, (self.a, self.b), self.s * p)
        np.add.at(P, (self.b, self.a), self.s * p)
        return P

    def adj(self, Z):
        """``trace(E_k Z)`` for every ``k`` (``Z`` need not be symmetric)."""
        return self.s * (Z[self.a, self.b] + Z[self.b, self.a])

    def kron(self, U, R):
        """``trace(E_i U E_j R)`` as an ``m x m`` matrix."""
        a, b = self.a, self.b
        # trace(e_p e_q^T U e_r e_w^T R) = U[q, r] R[w, p]
        K = (U[np.ix_(b, a)] * R[np.ix_(b, a)].T
             + U[np.ix_(b, b)] * R[np.ix_(a, a)].T
             + U[np.ix_(a, a)] * R[np.ix_(b, b)].T
             + U[np.ix_(a, b)] * R[np.ix_(a, b)].T)
        return np.outer(self.s, self.s) * K


class _ClfProblem:
    """Block data of the dual-form LMI ``S = C - sum_i y_i A_i >= 0``.

    ``y = (t, p)`` with ``P = sum_k p_k E_k``; the objective ``max b^T y``
    is the negated design objective.
    """

    def __init__(self, A, B, gamma, c_min, c_max):
        self.N = A.shape[0]
        self.A = A
        self.basis = _SymBasis(self.N)
        I = np.eye(self.N)
        self.C = [np.zeros((self.N, self.N)), c_max * I, -c_min * I]
        self.b = np.concatenate([[-1.0], gamma * self.basis.adj(B)])

    def op(self, X):
        """``(<A_i, X>)_i`` for the block triple ``X``."""
        X1, X2, X3 = X
        A = self.A
        head = -np.trace(X1)
        tail = self.basis.adj(A @ X1 + X1 @ A.T) + self.basis.adj(X2) - self.basis.adj(X3)
        return np.concatenate([[head], tail])

    def adjoint(self, y):
        """``sum_i y_i A_i`` as a block triple."""
        t, P = y[0], self.basis.to_mat(y[1:])
        L = P @ self.A + self.A.T @ P
        return [L - t * np.eye(self.N), P, -P]

    def slack(self, y):
        return [C - Z for C, Z in zip(self.C, self.adjoint(y))]

    def schur(self, X, W):
        """``M_ij = trace(A_i X A_j W)`` summed over blocks."""
        A = self.A
        sb = self.basis
        X1, W1 = X[0], W[0]
        AX, AW = A @ X1, A @ W1
        M = np.empty((sb.m + 1, sb.m + 1))
        M[0, 0] = np.trace(X1 @ W1)
        WX = W1 @ X1
        row = -sb.adj(A @ WX + WX @ A.T)
        M[0, 1:] = row
        M[1:, 0] = row
        M[1:, 1:] = (sb.kron(AX, AW) + sb.kron(AX @ A.T, W1) + sb.kron(X1, AW @ A.T)
                     + sb.kron(X1 @ A.T, W1 @ A.T) + sb.kron(X[1], W[1]) + sb.kron(X[2], W[2]))
        return 0.5 * (M + M.T)


def _sym(M):
    return 0.5 * (M + M.T)


def _inner(X, S):
    return sum(float(np.sum(x * s)) for x, s in zip(X, S))


def _max_step(X, dX):
    """Largest ``alpha`` keeping every block of ``X + alpha dX`` positive definite."""
    alpha = np.inf
    for x, d in zip(X, dX):
        L = np.linalg.cholesky(x)
        Li = scipy.linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        lam = np.linalg.eigvalsh(_sym(Li @ d @ Li.T))[0]
        if lam < 0:
            alpha = min(alpha, -1.0 / lam)
    return alpha


def _interior_point(prob, max_iter=100, tol=1e-10):
    N = prob.N
    nu = 3 * N
    bnorm = 1.0 + np.linalg.norm(prob.b)
    Cnorm = 1.0 + np.sqrt(sum(np.sum(c * c) for c in prob.C))
    Anorm = 1.0 + 2.0 * np.linalg.norm(prob.A, 2)
    xi = max(10.0, np.sqrt(nu), nu * bnorm / Anorm)
    eta = max(10.0, np.sqrt(nu), Anorm, Cnorm)
    X = [xi * np.eye(N) for _ in range(3)]
    S = [eta * np.eye(N) for _ in range(3)]
    y = np.zeros(prob.b.size)
    history = []
    status = "max_iter"
    for it in range(1, max_iter + 1):
        Rp = prob.b - prob.op(X)
        Rd = [c - s - z for c, s, z in zip(prob.C, S, prob.adjoint(y))]
        mu = _inner(X, S) / nu
        pobj = -_inner(prob.C, X)
        dobj = -float(prob.b @ y)
        pinf = np.linalg.norm(Rp) / bnorm
        dinf = np.sqrt(sum(np.sum(r * r) for r in Rd)) / Cnorm
        gap = abs(_inner(X, S)) / (1.0 + abs(pobj) + abs(dobj))
        history.append((gap, pinf, dinf))
        if gap < tol and pinf < tol and dinf < tol:
            status = "optimal"
            break
        W = [np.linalg.inv(s) for s in S]
        W = [_sym(w) for w in W]
        M = prob.schur(X, W)
        try:
            factor = scipy.linalg.cho_factor(M)
            solve = lambda r: scipy.linalg.cho_solve(factor, r)  # noqa: E731
        except np.linalg.LinAlgError:
            lu = scipy.linalg.lu_factor(M + 1e-14 * np.trace(M) * np.eye(M.shape[0]))
            solve = lambda r: scipy.linalg.lu_solve(lu, r)  # noqa: E731
        base = prob.b + prob.op([x @ r @ w for x, r, w in zip(X, Rd, W)])
        opW = prob.op(W)

        def direction(sigma, corr):
            rhs = base - sigma * mu * opW
            if corr is not None:
                rhs = rhs + prob.op(corr)
            dy = solve(rhs)
            dS = [r - z for r, z in zip(Rd, prob.adjoint(dy))]
            dX = []
            for k in range(3):
                d = sigma * mu * W[k] - X[k] - X[k] @ dS[k] @ W[k]
                if corr is not None:
                    d = d - corr[k]
                dX.append(_sym(d))
            return dX, dy, dS

        dXa, dya, dSa = direction(0.0, None)
        ap = min(1.0, _max_step(X, dXa))
        ad = min(1.0, _max_step(S, dSa))
        mu_a = _inner([x + ap * d for x, d in zip(X, dXa)], [s + ad * d for s, d in zip(S, dSa)]) / nu
        sigma = min(1.0, (max(mu_a, 0.0) / mu) ** 3)
        corr = [dx @ ds @ w for dx, ds, w in zip(dXa, dSa, W)]
        dX, dy, dS = direction(sigma, corr)
        if not (np.all(np.isfinite(dy)) and all(np.all(np.isfinite(d)) for d in dX)):
            status = "breakdown"
            break
        ap = min(1.0, 0.98 * _max_step(X, dX))
        ad = min(1.0, 0.98 * _max_step(S, dS))
        X = [x + ap * d for x, d in zip(X, dX)]
        y = y + ad * dy
        S = [_sym(s + ad * d) for s, d in zip(S, dS)]
    return y, status, it, history


def _project_box(P, c_min, c_max):
    w, U = np.linalg.eigh(_sym(P))
    return _sym((U * np.clip(w, c_min, c_max)) @ U.T)


def _lmax(M):
    return float(np.linalg.eigvalsh(_sym(M))[-1])


def _subgradient(A, B, gamma, c_min, c_max, iters=5000):
    """Projected subgradient on ``lambda_max(PA + A^T P) - gamma trace(PB)``."""
    N = A.shape[0]
    P = c_min * np.eye(N)
    Bs = _sym(B)

    def f(P):
        return _lmax(P @ A + A.T @ P) - gamma * float(np.trace(P @ B))

    best, best_f = P, f(P)
    scale = (c_max - c_min) * np.sqrt(N)
    for k in range(1, iters + 1):
        w, U = np.linalg.eigh(_sym(P @ A + A.T @ P))
        v = U[:, -1]
        Av = A @ v
        G = np.outer(v, Av) + np.outer(Av, v) - gamma * Bs
        gn = np.linalg.norm(G)
        if gn == 0:
            break
        P = _project_box(P - scale / np.sqrt(k) * G / gn, c_min, c_max)
        fk = f(P)
        if fk < best_f:
            best, best_f = P, fk
    return best, iters


@dataclass
class QuadraticCLF:
    """``V(z) = z^T P z`` with the bounds and weight it was designed with."""

    P: np.ndarray
    c_min: float
    c_max: float
    gamma: float
    t_opt: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = _sym(np.atleast_2d(np.asarray(self.P, dtype=float)))

    @property
    def N(self):
        return self.P.shape[0]

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return float(z @ self.P @ z)
        return np.einsum("im,ij,jm->m", z, self.P, z)

    def to_json(self):
        return {
            "P": self.P.tolist(),
            "c_min": self.c_min,
            "c_max": self.c_max,
            "gamma": self.gamma,
            "t_opt": self.t_opt,
            "diagnostics": self.diagnostics,
        }

    def save(self, path):
        _dump_json(self.to_json(), path)

    @classmethod
    def from_json(cls, d):
        if not isinstance(d, dict):
            raise ParseError("CLF file must hold a JSON object")
        P = _matrix(d, "P")
        out = {}
        for key in ("c_min", "c_max", "gamma", "t_opt"):
            try:
                out[key] = float(d[key])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError("missing or non-numeric", key) from exc
        return cls(P, diagnostics=dict(d.get("diagnostics", {})), **out)

    @classmethod
    def load(cls, path):
        return cls.from_json(_load_json(path))


def solve_clf_sdp(A, B, gamma: float = DEFAULT_GAMMA, c_min: float = DEFAULT_C_MIN,
                  c_max: float = DEFAULT_C_MAX, max_iter: int = 100, tol: float = 1e-10) -> QuadraticCLF:
    """Solve the CLF design SDP.

    The interior-point iterate is polished onto the feasible set: the
    eigenvalues of ``P`` are clipped to ``[c_min, c_max]`` and ``t`` is set
    to ``lambda_max(PA + A^T P)``, so the returned pair satisfies all three
    inequalities up to rounding. If the Newton iteration stalls, a projected
    subgradient method takes over; if that also yields nothing finite a
    :class:`SolverError` is raised.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    N = A.shape[0]
    if A.shape != (N, N) or B.shape != (N, N):
        raise ValidationError("A and B must be square and of equal size")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValidationError("A and B must be finite")
    if not (0 < c_min < c_max) or not np.isfinite(c_max):
        raise ValidationError("need 0 < c_min < c_max < inf")
    if not gamma >= 0 or not np.isfinite(gamma):
        raise ValidationError("gamma must be finite and nonnegative")

    prob = _ClfProblem(A, B, float(gamma), float(c_min), float(c_max))
    method = "interior_point"
    try:
        y, status, iters, history = _interior_point(prob, max_iter=max_iter, tol=tol)
    except (np.linalg.LinAlgError, FloatingPointError):
        y, status, iters, history = None, "breakdown", 0, []
    if status == "optimal" or (y is not None and history and max(history[-1]) < 1e-6):
        P = prob.basis.to_mat(y[1:])
    else:
        method = "subgradient"
        P, iters = _subgradient(A, B, float(gamma), float(c_min), float(c_max))
    if not np.all(np.isfinite(P)):
        raise SolverError("SDP solver produced a non-finite iterate",
                          iterate=None if y is None else y.tolist())
    P = _project_box(P, c_min, c_max)
    t = _lmax(P @ A + A.T @ P)
    diag = {
        "method": method,
        "status": status,
        "iterations": int(iters),
    }
    if history:
        gap, pinf, dinf = history[-1]
        diag.update({"gap": gap, "primal_infeasibility": pinf, "dual_infeasibility": dinf})
    return QuadraticCLF(P, float(c_min), float(c_max), float(gamma), t, diag)


# ---------------------------------------------------------------------------
# Stabilizability check


@dataclass
class StabilizabilityResult:
    """Outcome of the sampled stabilizability test.

    ``level`` is ``"sampled"`` on a pass (a sampled certificate, not a
    proof) and ``"refuted"`` on a failure, with ``witness`` set.
    """

    passed: bool
    witness: Optional[np.ndarray]
    n_tested: int
    level: str

    def __bool__(self):
        return self.passed

    def to_json(self):
        return {
            "passed": self.passed,
            "level": self.level,
            "n_tested": self.n_tested,
            "witness": None if self.witness is None else self.witness.tolist(),
        }


def check_stabilizability(P, A, B, n_samples: int = DEFAULT_SAMPLES, tol: float = DEFAULT_TOL,
                          seed: int = 0, offset=None, radius: float = np.inf) -> StabilizabilityResult:
    """Search for ``z != 0`` where no input can make ``V`` decrease.

    Without ``offset`` the test points are ``n_samples`` unit vectors plus
    the eigenvectors of ``PA + A^T P`` and ``PB + B^T P``; a point fails
    when ``a(z) >= -tol`` and ``|b(z)| <= tol``.

    With an input offset ``b0`` the input gain ``b`` is no longer
    homogeneous, so along every tested direction ``u`` the radius where
    ``b(r u) = 0`` is solved for exactly; a point within ``radius`` where
    also ``a >= -tol`` is a witness.
    """
    P = _sym(np.atleast_2d(np.asarray(P, dtype=float)))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    N = P.shape[0]
    Qa = _sym(P @ A + A.T @ P)
    Qb = _sym(P @ B + B.T @ P)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((N, n_samples))
    Z /= np.linalg.norm(Z, axis=0)
    Z = np.hstack([Z, np.linalg.eigh(Qa)[1], np.linalg.eigh(Qb)[1]])
    a = np.einsum("im,ij,jm->m", Z, Qa, Z)
    q = np.einsum("im,ij,jm->m", Z, Qb, Z)
    n_tested = Z.shape[1]

    if offset is None or not np.any(offset):
        bad = np.flatnonzero((a >= -tol) & (np.abs(q) <= tol))
        if bad.size:
            return StabilizabilityResult(False, Z[:, bad[0]].copy(), n_tested, "refuted")
        return StabilizabilityResult(True, None, n_tested, "sampled")

    lin = 2.0 * (P @ np.asarray(offset, dtype=float)) @ Z  # b(r u) = r^2 q + r lin
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(np.abs(q) > tol, -lin / q, np.inf)
    hit = (a >= -tol) & (((r > 0) & (r <= radius)) | ((np.abs(q) <= tol) & (np.abs(lin) <= tol)))
    bad = np.flatnonzero(hit)
    if bad.size:
        k = bad[0]
        scale = r[k] if np.isfinite(r[k]) else 1.0
        return StabilizabilityResult(False, scale * Z[:, k], n_tested, "refuted")
    return StabilizabilityResult(True, None, n_tested, "sampled")


# ---------------------------------------------------------------------------
# Controllers


def _default_q(z):
    return float(z @ z)


@dataclass
class ControllerSpec:
    kind: str
    clf: QuadraticCLF
    model: BilinearModel
    gain: float = 10.0
    q: Callable = _default_q

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValidationError(f"unknown controller kind {self.kind!r}; expected one of {CONTROLLER_KINDS}")
        if self.kind in ("sign", "gradient") and not self.gain > 0:
            raise ValidationError("controller gain must be positive")
        if self.clf.N != self.model.N:
            raise ValidationError("CLF and model dimensions differ")
        P, m = self.clf.P, self.model
        self._Qa = _sym(P @ m.A + m.A.T @ P)
        self._Qb = _sym(P @ m.B + m.B.T @ P)
        self._lb = 2.0 * P @ m.input_offset
        self._lie = np.stack([self._Qa, self._Qb])
        self._bnorm = float(np.linalg.norm(np.column_stack([self._Qb, self._lb]), 2))

    def lie_terms(self, z):
        """``(a(z), b(z))``: drift and input parts of the derivative of ``V``."""
        z = np.asarray(z, dtype=float)
        qa, qb = self._lie @ z
        return float(qa @ z), float((qb + self._lb) @ z)

    def b_tol(self, z):
        z = np.asarray(z, dtype=float)
        return B_TOL_FACTOR * (1.0 + float(z @ z)) * self._bnorm


def control_input(spec: ControllerSpec, z) -> float:
    """Feedback ``u`` at lifted state ``z``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericalError("lifted state is not finite")
    a, b = spec.lie_terms(z)
    kind = spec.kind
    if kind == "sign":
        u = -spec.gain * float(np.sign(b))
    elif kind == "gradient":
        u = -spec.gain * b
    else:
        if abs(b) <= spec.b_tol(z):
            return 0.0
        if kind == "sontag":
            u = -(a + np.sqrt(a * a + b ** 4)) / b
        else:
            qz = float(spec.q(z))
            if qz < 0:
                raise ValidationError("state cost q(z) must be nonnegative")
            u = -(a + np.sqrt(a * a + qz * b * b)) / b
    if not np.isfinite(u):
        raise NumericalError(f"non-finite control input ({kind})")
    return float(u)


def clf_derivative(spec: ControllerSpec, z, u: float) -> float:
    """``dV/dt = a(z) + u b(z)`` along the lifted model."""
    a, b = spec.lie_terms(z)
    return a + float(u) * b


def closed_loop_controller(spec: ControllerSpec, basis: Optional[RealEigenbasis] = None):
    """State feedback ``x -> control_input(spec, lift(x))``."""
    basis = basis if basis is not None else spec.model.basis
    if basis is None:
        raise ValidationError("closed-loop controller needs an eigenfunction basis")
    if basis.dim != spec.model.N:
        raise ValidationError("basis and model dimensions differ")

    Vt = np.ascontiguousarray(basis.V_r.T)
    offset = basis.offset

    def controller(x):
        return control_input(spec, Vt @ eval_dictionary(basis.dictionary, x) - offset)

    return controller


# ---------------------------------------------------------------------------
# LQR


def lqr_reference(A_lin, B_lin, Q, R):
    """Continuous-time LQR gain ``K = R^-1 B^T P`` (``u = -K x``).

    ``P`` comes from the stable invariant subspace of the Hamiltonian
    matrix. A pair that is not stabilizable, or a Hamiltonian with
    eigenvalues on the imaginary axis, raises :class:`ModelError`.
    """
    A = np.atleast_2d(np.asarray(A_lin, dtype=float))
    n = A.shape[0]
    Bm = np.asarray(B_lin, dtype=float).reshape(n, -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (Bm.shape[1],) * 2:
        raise ValidationError("inconsistent LQR dimensions")
    for lam in np.linalg.eigvals(A):
        if lam.real >= 0:
            pbh = np.hstack([A - lam * np.eye(n), Bm])
            if np.linalg.matrix_rank(pbh, tol=1e-9 * max(1.0, np.linalg.norm(pbh))) < n:
                raise ModelError(f"(A, B) is not stabilizable: uncontrollable mode {lam:.6g}")
    Rinv = np.linalg.inv(R)
    H = np.block([[A, -Bm @ Rinv @ Bm.T], [-Q, -A.T]])
    w, U = np.linalg.eig(H)
    scale = max(1.0, np.max(np.abs(w)))
    if np.any(np.abs(w.real) <= 1e-10 * scale):
        raise ModelError("Hamiltonian has eigenvalues on the imaginary axis")
    stable = U[:, w.real < 0]
    if stable.shape[1] != n:
        raise ModelError("Hamiltonian stable subspace has the wrong dimension")
    U1, U2 = stable[:n], stable[n:]
    try:
        P = np.real(np.linalg.solve(U1.T, U2.T).T)
    except np.linalg.LinAlgError as exc:
        raise ModelError("Riccati solution does not exist") from exc
    P = _sym(P)
    return (Rinv @ Bm.T @ P).reshape(-1) if Bm.shape[1] == 1 else Rinv @ Bm.T @ P
