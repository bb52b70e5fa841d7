"""Monomial dictionaries and the EDMD approximation of the Koopman operator."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional, Sequence

import numpy as np

from .dynamics import SnapshotDataset
from .errors import DegenerateDataError, NumericalError, SpanViolationError, ValidationError

__all__ = [
    "MonomialDictionary",
    "KoopmanModel",
    "make_dictionary",
    "eval_dictionary",
    "eval_dictionary_jacobian",
    "build_gram",
    "fit_koopman",
    "spectrum",
    "eval_eigenfunction",
    "identify_koopman",
]

DEFAULT_SVD_THRESHOLD = 1e-10
GRAM_CHUNK = 65536


def _graded_lex(n, D):
    """Exponents with |alpha| <= D, by degree, then lexicographically descending."""
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for k in range(remaining, -1, -1):
            rec(prefix + (k,), remaining - k, slots - 1)

    for d in range(D + 1):
        rec((), d, n)
    return out


class MonomialDictionary:
    """Monomials ``prod_i (x_i / s_i)^alpha_i`` with ``|alpha| <= D``.

    ``scale`` defaults to ones (raw states). A non-unit scale is the
    normalization toggle: the span is unchanged, only the conditioning of
    the Gram matrices improves.
    """

    def __init__(self, n: int, D: int, scale: Optional[Sequence[float]] = None):
        if n < 1 or D < 1:
            raise ValidationError("dictionary needs n >= 1 and D >= 1")
        self.n = int(n)
        self.D = int(D)
        self.exponents = np.array(_graded_lex(self.n, self.D), dtype=np.int64)
        self.scale = np.ones(self.n) if scale is None else np.asarray(scale, dtype=float).reshape(self.n)
        if np.any(self.scale <= 0) or not np.all(np.isfinite(self.scale)):
            raise ValidationError("dictionary scale must be positive and finite")
        self._index = {tuple(a): k for k, a in enumerate(self.exponents.tolist())}

    @property
    def N(self):
        return self.exponents.shape[0]

    def index(self, alpha):
        return self._index.get(tuple(int(a) for a in alpha))

    def __len__(self):
        return self.N

    def __eq__(self, other):
        return (
            isinstance(other, MonomialDictionary)
            and self.n == other.n and self.D == other.D
            and np.array_equal(self.scale, other.scale)
        )

    def __repr__(self):
        return f"MonomialDictionary(n={self.n}, D={self.D}, N={self.N})"

    def to_dict(self):
        out = {"n": self.n, "D": self.D}
        if np.any(self.scale != 1.0):
            out["scale"] = self.scale.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n"]), int(d["D"]), d.get("scale"))

    def _powers(self, X):
        # P[i, d, m] = (x_i / s_i)^d
        Xs = X / self.scale[:, None]
        P = np.empty((self.n, self.D + 1, X.shape[1]))
        P[:, 0] = 1.0
        for d in range(1, self.D + 1):
            P[:, d] = P[:, d - 1] * Xs
        return P

    def __call__(self, x):
        return eval_dictionary(self, x)

    def derivation_matrix(self, field):
        """Matrix ``Dg`` with ``(dH/dx)(x) g(x) = Dg @ H(x)`` for polynomial ``g``.

        ``field`` holds one ``{exponent: coeff}`` mapping per state component,
        in raw (unscaled) coordinates. Raises :class:`SpanViolationError`
        when some product has degree above ``D``.
        """
        if len(field) != self.n:
            raise ValidationError(f"input field needs {self.n} components")
        N = self.N
        Dg = np.zeros((N, N))
        for k, alpha in enumerate(self.exponents):
            for i in range(self.n):
                if alpha[i] == 0:
                    continue
                base = alpha.copy()
                base[i] -= 1
                # d/dx_i (x/s)^alpha = alpha_i / s_i * (x/s)^(alpha - e_i)
                factor = alpha[i] / self.scale[i]
                for beta, coeff in field[i].items():
                    if coeff == 0.0:
                        continue
                    beta = np.asarray(beta, dtype=np.int64)
                    gamma = base + beta
                    j = self.index(gamma)
                    if j is None:
                        raise SpanViolationError(
                            f"d h_{k}/dx_{i} * g_{i} has degree {int(gamma.sum())} > D={self.D}; "
                            "use the least-squares construction instead"
                        )
                    # x^beta = s^beta (x/s)^beta
                    Dg[k, j] += factor * coeff * float(np.prod(self.scale ** beta))
        return Dg


def make_dictionary(n: int, D: int, scale=None) -> MonomialDictionary:
    return MonomialDictionary(n, D, scale)


def eval_dictionary(dictionary: MonomialDictionary, x) -> np.ndarray:
    """Evaluate ``H(x)``; ``x`` of shape ``(n,)`` gives ``(N,)``, ``(n, M)`` gives ``(N, M)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dictionary.n:
            raise ValidationError(f"state must have length {dictionary.n}")
        # same multiplication order as the batched path, so results match bitwise
        P = np.ones((dictionary.n, dictionary.D + 1))
        P[:, 1:] = np.cumprod(np.repeat((x / dictionary.scale)[:, None], dictionary.D, axis=1), axis=1)
        F = P[np.arange(dictionary.n), dictionary.exponents]
        out = F[:, 0].copy()
        for i in range(1, dictionary.n):
            out *= F[:, i]
        return out
    X = x.reshape(dictionary.n, -1)
    P = dictionary._powers(X)
    E = dictionary.exponents
    out = np.ones((dictionary.N, X.shape[1]))
    for i in range(dictionary.n):
        out *= P[i, E[:, i]]
    return out


def eval_dictionary_jacobian(dictionary: MonomialDictionary, x) -> np.ndarray:
    """Exact ``dH/dx`` as an ``(N, n)`` matrix (``(N, n, M)`` for a batch)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(dictionary.n, -1)
    P = dictionary._powers(X)
    E = dictionary.exponents
    N, n = E.shape
    J = np.empty((N, n, X.shape[1]))
    for i in range(n):
        col = np.ones((N, X.shape[1]))
        for l in range(n):
            if l == i:
                lowered = np.maximum(E[:, i] - 1, 0)
                col *= (E[:, i] / dictionary.scale[i])[:, None] * P[i, lowered]
            else:
                col *= P[l, E[:, l]]
        J[:, i] = col
    return J[:, :, 0] if single else J


def build_gram(dataset: SnapshotDataset, dictionary: MonomialDictionary, chunk: int = GRAM_CHUNK):
    """Return ``G = mean H(x)H(x)^T`` and ``A = mean H(x)H(y)^T``.

    Accumulated over fixed-size column chunks so the summation order, and
    hence the result, depends only on the data.
    """
    if dataset.n != dictionary.n:
        raise ValidationError("dataset and dictionary dimensions differ")
    N = dictionary.N
    G = np.zeros((N, N))
    A = np.zeros((N, N))
    for start in range(0, dataset.M, chunk):
        HX = eval_dictionary(dictionary, dataset.X[:, start:start + chunk])
        HY = eval_dictionary(dictionary, dataset.Y[:, start:start + chunk])
        Gc = HX @ HX.T
        Gc = np.triu(Gc) + np.triu(Gc, 1).T
        G += Gc
        # identical images give the same block, keeping G == A exact
        A += Gc if np.array_equal(HX, HY) else HX @ HY.T
    G /= dataset.M
    A /= dataset.M
    return G, A


def fit_koopman(G, A, svd_threshold: float = DEFAULT_SVD_THRESHOLD) -> np.ndarray:
    """``K = pinv(G) @ A`` with singular values below ``svd_threshold * s_max`` dropped."""
    G = np.asarray(G, dtype=float)
    A = np.asarray(A, dtype=float)
    if not np.any(G):
        raise DegenerateDataError("Gram matrix is identically zero")
    U, s, Vt = np.linalg.svd(G)
    keep = s > svd_threshold * s[0]
    Ginv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return Ginv @ A


def _normalize(v):
    v = v / np.linalg.norm(v)
    mags = np.abs(v)
    lead = int(np.argmax(mags > 1e-8 * mags.max()))
    return v * (np.conj(v[lead]) / mags[lead])


def spectrum(K):
    """Eigenvalues and unit right eigenvectors of ``K``.

    Sorted by descending modulus, then descending real part; the member of
    a conjugate pair with positive imaginary part comes first and its
    partner is stored as the exact conjugate. Each eigenvector is rotated so
    that its first non-negligible component is real and positive.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or not np.all(np.isfinite(K)):
        raise ValidationError("K must be a finite square matrix")
    try:
        w, V = np.linalg.eig(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    w = np.asarray(w, dtype=complex)
    V = np.asarray(V, dtype=complex)

    units = []  # (eigenvalue, eigenvector, paired)
    j = 0
    while j < w.size:
        if w[j].imag > 0:
            units.append((w[j], _normalize(V[:, j]), True))
            j += 2  # LAPACK stores the conjugate right after
        elif w[j].imag < 0:
            units.append((np.conj(w[j]), _normalize(np.conj(V[:, j])), True))
            j += 2
        else:
            units.append((complex(w[j].real, 0.0), _normalize(V[:, j].real.astype(complex)), False))
            j += 1
    units.sort(key=lambda u: (-abs(u[0]), -u[0].real, -u[0].imag))

    vals, vecs = [], []
    for mu, v, paired in units:
        vals.append(mu)
        vecs.append(v)
        if paired:
            vals.append(np.conj(mu))
            vecs.append(np.conj(v))
    return np.array(vals), np.column_stack(vecs)


@dataclass
class KoopmanModel:
    K: np.ndarray
    dt: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    dictionary: MonomialDictionary
    residual: float = float("nan")

    def eigenfunction(self, j, x):
        return eval_eigenfunction(self, j, x)


def eval_eigenfunction(model: KoopmanModel, j: int, x):
    """``psi_j(x) = H(x)^T v_j`` (complex)."""
    if not 0 <= j < model.eigenvalues.size:
        raise IndexError(f"eigenfunction index {j} out of range")
    return eval_dictionary(model.dictionary, x).T @ model.eigenvectors[:, j]


def identify_koopman(dataset: SnapshotDataset, dictionary: MonomialDictionary,
                     svd_threshold: float = DEFAULT_SVD_THRESHOLD) -> KoopmanModel:
    """Gram assembly, pseudoinverse fit and eigendecomposition in one call."""
    G, A = build_gram(dataset, dictionary)
    K = fit_koopman(G, A, svd_threshold)
    mu, V = spectrum(K)
    residual = float(np.linalg.norm(G @ K - A))
    return KoopmanModel(K, dataset.dt, mu, V, dictionary, residual)
