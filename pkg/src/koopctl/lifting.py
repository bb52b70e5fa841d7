"""Real eigenfunction coordinates and the bilinear lifted model.

The lifted state is ``z = Psi(x) - Psi(0)`` where ``Psi = V_r^T H`` collects
the realified, non-constant eigenfunctions. Constant eigenfunctions are not
coordinates; they re-enter as the trailing ``1`` of the homogeneous vector
``zbar = (z, 1)``, in which the input term is exactly bilinear::

    zdot = A z + u (B z + b)      <=>      zbar' = Abar zbar + u Bbar zbar

with ``Bbar = [[B, b], [0, 0]]``. ``b`` is the input offset: the derivative
of the eigenfunctions along ``g`` at the origin.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .edmd import MonomialDictionary, eval_dictionary, eval_dictionary_jacobian
from .errors import (
    DegenerateSamplingError,
    IllConditionedBasisError,
    LogSingularityError,
    ParseError,
    ValidationError,
)

__all__ = [
    "RealEigenbasis",
    "BilinearModel",
    "realify",
    "build_A",
    "build_B_exact",
    "build_B_lsq",
    "lift",
    "decode",
]

CONSTANT_MODE_TOL = 1e-6
COND_MAX = 1e12
LOG_FLOOR = 1e-12


@dataclass
class RealEigenbasis:
    """Realified eigenvector matrix and the bookkeeping around it.

    ``V`` holds all ``N`` realified columns (constant modes included) so it
    stays square. ``retained`` indexes the columns used as lifted
    coordinates.
    """

    V: np.ndarray
    kinds: list
    continuous_eigenvalues: np.ndarray
    discrete_eigenvalues: np.ndarray
    retained: np.ndarray
    offset: np.ndarray
    dictionary: MonomialDictionary
    dt: float
    cond: float = float("nan")

    @property
    def dim(self):
        return int(self.retained.size)

    @property
    def V_r(self):
        return self.V[:, self.retained]

    @property
    def coordinate_kinds(self):
        return [self.kinds[i] for i in self.retained]

    @property
    def coordinate_eigenvalues(self):
        return self.continuous_eigenvalues[self.retained]

    def homogeneous_matrix(self):
        """``C`` with ``(z(x), 1) = C^T H(x)``."""
        N = self.V.shape[0]
        e1 = np.zeros(N)
        e1[0] = 1.0
        return np.column_stack([self.V_r - np.outer(e1, self.offset), e1])


def realify(eigenvalues, eigenvectors, dt, dictionary: Optional[MonomialDictionary] = None,
            constant_mode_tol: float = CONSTANT_MODE_TOL, cond_max: float = COND_MAX) -> RealEigenbasis:
    """Turn a sorted complex spectrum into real coordinates.

    A real eigenvector is kept as is; a conjugate pair ``(v, conj(v))`` with
    ``Im(mu) > 0`` first becomes the columns ``2 Re v`` and ``-2 Im v``.
    Continuous eigenvalues are ``log(mu) / dt`` (principal branch).
    A coordinate is treated as constant and dropped when ``|mu - 1| <=
    constant_mode_tol`` and its eigenvector is dominated by the constant
    monomial.
    """
    mu = np.asarray(eigenvalues, dtype=complex)
    W = np.asarray(eigenvectors, dtype=complex)
    N = mu.size
    if W.shape != (N, N):
        raise ValidationError("eigenvector matrix must be N x N")
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if np.any(np.abs(mu) <= LOG_FLOOR):
        raise LogSingularityError("eigenvalue with |mu| <= 1e-12 has no logarithm")

    V = np.empty((N, N))
    kinds = []
    j = 0
    while j < N:
        if mu[j].imag != 0.0:
            if j + 1 >= N or not np.isclose(mu[j + 1], np.conj(mu[j]), rtol=0, atol=1e-12 * max(1.0, abs(mu[j]))):
                raise ValidationError(f"eigenvalue {j} is not followed by its conjugate")
            V[:, j] = 2.0 * W[:, j].real
            V[:, j + 1] = -2.0 * W[:, j].imag
            kinds += ["complex_re", "complex_im"]
            j += 2
        else:
            V[:, j] = W[:, j].real
            kinds.append("real")
            j += 1

    cond = float(np.linalg.cond(V))
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedBasisError(f"eigenvector matrix condition number {cond:.3g} exceeds {cond_max:.3g}")

    lam = np.log(mu) / dt
    constant = np.zeros(N, dtype=bool)
    for i in range(N):
        if kinds[i] == "real" and abs(mu[i] - 1.0) <= constant_mode_tol:
            col = V[:, i]
            constant[i] = abs(col[0]) >= 0.99 * np.linalg.norm(col)
    retained = np.flatnonzero(~constant)
    offset = V[0, retained].copy()  # Psi(0) = V^T H(0) and H(0) = e_1
    return RealEigenbasis(V, kinds, lam, mu, retained, offset, dictionary, float(dt), cond)


def lift(basis: RealEigenbasis, x) -> np.ndarray:
    """``z = Psi(x) - Psi(0)``; batched over columns when ``x`` is ``(n, M)``."""
    H = eval_dictionary(basis.dictionary, x)
    if H.ndim == 1:
        return basis.V_r.T @ H - basis.offset
    return basis.V_r.T @ H - basis.offset[:, None]


def decode(basis: RealEigenbasis, z) -> np.ndarray:
    """Recover ``x`` from ``z`` through the linear monomials of ``H``."""
    C = basis.homogeneous_matrix()
    if C.shape[0] != C.shape[1]:
        raise ValidationError("decode needs exactly one dropped constant mode")
    z = np.asarray(z, dtype=float)
    zbar = np.concatenate([z, np.ones((1,) + z.shape[1:])])
    H = np.linalg.solve(C.T, zbar)
    d = basis.dictionary
    rows = [d.index(np.eye(d.n, dtype=int)[i]) for i in range(d.n)]
    return H[rows] * (d.scale if H.ndim == 1 else d.scale[:, None])


def build_A(basis: RealEigenbasis, variant: str = "continuous") -> np.ndarray:
    """Block-diagonal drift matrix on the retained coordinates.

    ``continuous`` uses ``lambda = log(mu)/dt``: ``[lambda]`` for real modes
    and ``[[Re, Im], [-Im, Re]]`` for pairs. ``discrete`` puts the discrete
    ``mu`` in the same pattern (kept only for comparison runs).
    """
    if variant == "continuous":
        lam = basis.continuous_eigenvalues
    elif variant == "discrete":
        lam = basis.discrete_eigenvalues
    else:
        raise ValidationError(f"unknown A variant {variant!r}")
    N = lam.size
    Afull = np.zeros((N, N))
    j = 0
    while j < N:
        if basis.kinds[j] == "complex_re":
            re, im = lam[j].real, lam[j].imag
            Afull[j:j + 2, j:j + 2] = [[re, im], [-im, re]]
            j += 2
        else:
            Afull[j, j] = lam[j].real
            j += 1
    r = basis.retained
    return Afull[np.ix_(r, r)]


def _field_poly(g, n):
    """Normalize ``g`` (constant vector or per-component polynomial dicts)."""
    if isinstance(g, (list, tuple)) and g and isinstance(g[0], dict):
        return [dict(c) for c in g]
    vec = np.asarray(g, dtype=float).reshape(n)
    zero = (0,) * n
    return [{zero: float(c)} if c != 0.0 else {} for c in vec]


def build_B_exact(basis: RealEigenbasis, g):
    """Exact input matrices from exponent arithmetic.

    ``C^T (dH/dx) g = C^T Dg H = (C^T Dg C^{-T}) (z, 1)``, so
    ``Bbar = C^T Dg C^{-T}`` with the homogeneous basis matrix ``C``.
    Returns ``(B, b, 0.0)``.
    """
    d = basis.dictionary
    Dg = d.derivation_matrix(_field_poly(g, d.n))
    C = basis.homogeneous_matrix()
    if C.shape[0] != C.shape[1]:
        raise ValidationError("exact construction needs exactly one dropped constant mode")
    lu = scipy.linalg.lu_factor(C)
    rcond = 1.0 / np.linalg.cond(C)
    if rcond < 1.0 / COND_MAX:
        raise IllConditionedBasisError(f"homogeneous basis condition number {1 / rcond:.3g} exceeds {COND_MAX:.3g}")
    Btilde = C.T @ Dg
    # Bbar = Btilde C^{-T}  <=>  C Bbar^T = Btilde^T
    Bbar = scipy.linalg.lu_solve(lu, Btilde.T).T
    m = basis.dim
    return Bbar[:m, :m], Bbar[:m, m].copy(), 0.0


def build_B_lsq(basis: RealEigenbasis, g, samples):
    """Least-squares input matrices from sampled states ``samples`` of shape ``(n, S)``.

    Minimizes ``sum_s ||V_r^T J_H(x_s) g(x_s) - B z_s - b||^2``. Returns
    ``(B, b, relative_residual)``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    d = basis.dictionary
    if X.shape[0] != d.n:
        raise ValidationError("samples must have shape (n, S)")
    m = basis.dim
    J = eval_dictionary_jacobian(d, X)  # (N, n, S)
    if callable(g):
        Gx = np.asarray(g(X), dtype=float).reshape(d.n, -1)
    else:
        Gx = _eval_field(_field_poly(g, d.n), X)
    target = np.einsum("kis,is->ks", J, Gx)
    Y = basis.V_r.T @ target  # (m, S)
    Phi = np.vstack([lift(basis, X), np.ones((1, X.shape[1]))])
    if X.shape[1] < m + 1:
        raise DegenerateSamplingError(f"need at least {m + 1} samples, got {X.shape[1]}")
    sol, _, rank, sv = np.linalg.lstsq(Phi.T, Y.T, rcond=None)
    if rank < m + 1:
        raise DegenerateSamplingError(f"regressor rank {rank} < {m + 1}")
    Bbar = sol.T
    ynorm = np.linalg.norm(Y)
    res = 0.0 if ynorm == 0 else float(np.linalg.norm(Y - Bbar @ Phi) / ynorm)
    return Bbar[:, :m].copy(), Bbar[:, m].copy(), res


def _eval_field(poly, X):
    out = np.zeros_like(X)
    for i, comp in enumerate(poly):
        for beta, coeff in comp.items():
            out[i] += coeff * np.prod(X ** np.asarray(beta)[:, None], axis=0)
    return out


@dataclass
class BilinearModel:
    """``zdot = A z + u (B z + b)`` on the lifted coordinates."""

    A: np.ndarray
    B: np.ndarray
    input_offset: np.ndarray
    basis: Optional[RealEigenbasis] = None
    span_residual: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        N = self.A.shape[0]
        if self.input_offset is None:
            self.input_offset = np.zeros(N)
        self.input_offset = np.asarray(self.input_offset, dtype=float).reshape(-1)
        if self.A.shape != (N, N) or self.B.shape != (N, N) or self.input_offset.shape != (N,):
            raise ValidationError("A, B must be N x N and the input offset length N")

    @property
    def N(self):
        return self.A.shape[0]

    def homogeneous(self):
        """``(Abar, Bbar)`` acting on ``zbar = (z, 1)``."""
        N = self.N
        Abar = np.zeros((N + 1, N + 1))
        Abar[:N, :N] = self.A
        Bbar = np.zeros((N + 1, N + 1))
        Bbar[:N, :N] = self.B
        Bbar[:N, N] = self.input_offset
        return Abar, Bbar

    def lift(self, x):
        if self.basis is None:
            raise ValidationError("model has no eigenfunction basis attached")
        return lift(self.basis, x)

    def to_json(self):
        out = {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "input_offset": self.input_offset.tolist(),
            "span_residual": self.span_residual,
        }
        b = self.basis
        if b is not None:
            out.update({
                "V": b.V.tolist(),
                "retained": b.retained.tolist(),
                "kinds": list(b.kinds),
                "offset": b.offset.tolist(),
                "dt": b.dt,
                "dictionary": b.dictionary.to_dict(),
                "eigenvalues": [[float(m.real), float(m.imag)] for m in b.discrete_eigenvalues],
                "continuous_eigenvalues": [[float(l.real), float(l.imag)] for l in b.continuous_eigenvalues],
                "cond": b.cond,
            })
        out.update(self.meta)
        return out

    def save(self, path):
        _dump_json(self.to_json(), path)

    @classmethod
    def from_json(cls, d):
        if not isinstance(d, dict):
            raise ParseError("model file must hold a JSON object")
        A = _matrix(d, "A")
        B = _matrix(d, "B")
        N = A.shape[0]
        offset_in = d.get("input_offset")
        b_in = np.zeros(N) if offset_in is None else _vector(d, "input_offset", N)
        basis = None
        if "V" in d:
            V = _matrix(d, "V")
            try:
                dictionary = MonomialDictionary.from_dict(d["dictionary"])
                dt = float(d["dt"])
                mu = np.array([complex(r, i) for r, i in d["eigenvalues"]])
                lam = np.array([complex(r, i) for r, i in d["continuous_eigenvalues"]])
                retained = np.asarray(d["retained"], dtype=int)
                kinds = list(d["kinds"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"incomplete basis description ({exc})") from exc
            offset = _vector(d, "offset", retained.size)
            basis = RealEigenbasis(V, kinds, lam, mu, retained, offset, dictionary, dt,
                                   float(d.get("cond", float("nan"))))
            if basis.dim != N:
                raise ParseError("retained coordinates do not match A", "retained")
        return cls(A, B, b_in, basis, float(d.get("span_residual", 0.0)))

    @classmethod
    def load(cls, path):
        return cls.from_json(_load_json(path))


def _matrix(d, key):
    if key not in d:
        raise ParseError("missing field", key)
    try:
        M = np.array(d[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"not a numeric matrix ({exc})", key) from exc
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise ParseError("must be a finite square matrix", key)
    return M


def _vector(d, key, n):
    try:
        v = np.array(d[key], dtype=float).reshape(-1)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"not a numeric vector ({exc})", key) from exc
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ParseError(f"must be a finite vector of length {n}", key)
    return v


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc
    except FileNotFoundError as exc:
        raise ParseError(f"{path}: file not found") from exc


def _dump_json(obj, path):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
