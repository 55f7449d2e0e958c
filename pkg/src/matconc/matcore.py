"""Hermitian matrix algebra.

Eigendecompositions, standard matrix functions, Schatten and induced norms,
the semidefinite order, the Hermitian dilation, and superoperator
(vectorized) representations of left/right multiplication.
"""
from __future__ import annotations

import json
import math
from typing import Callable, Iterable

import numpy as np

# Anti-Hermitian residual above this relative level is treated as user error
# rather than roundoff.
HERMITIAN_REJECT_RTOL = 1e-8

# Default tolerance for semidefinite-order checks; scaled by 1 + ||A|| + ||B||.
PSD_TOL = 1e-9

_EIG_TIE_RTOL = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class DomainError(ValueError):
    """A scalar function was applied outside its domain."""


class ParameterError(ValueError):
    """A parameter is outside its documented range."""


class PreconditionError(ValueError):
    """A documented precondition does not hold for the given inputs."""


def _opnorm(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


class HermitianMatrix:
    """A dense Hermitian matrix.

    The constructor symmetrizes its input via (M + M*)/2 and rejects input
    whose anti-Hermitian part exceeds ``HERMITIAN_REJECT_RTOL * ||M||``.
    The stored array is read-only; instances are immutable values.
    """

    __slots__ = ("a", "_eig")

    def __init__(self, entries, reject_rtol: float = HERMITIAN_REJECT_RTOL):
        m = np.array(entries, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"expected a square matrix, got shape {m.shape}")
        if m.shape[0] == 0:
            raise ShapeError("empty matrix")
        if not np.all(np.isfinite(m.view(np.float64))):
            raise DomainError("matrix entries must be finite")
        anti = (m - m.conj().T) / 2
        resid = _opnorm(anti)
        if resid > reject_rtol * _opnorm(m):
            raise ShapeError(
                f"input is not Hermitian: anti-Hermitian residual {resid:.3e} "
                f"exceeds {reject_rtol:.1e} * ||M||"
            )
        h = (m + m.conj().T) / 2
        h.setflags(write=False)
        self.a = h
        self._eig = None

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def eig(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues (ascending) and matching eigenvectors, canonicalized."""
        if self._eig is None:
            self._eig = eigh_canonical(self.a)
        return self._eig

    def eigvals(self) -> np.ndarray:
        return self.eig()[0]

    def trace(self) -> float:
        return float(np.trace(self.a).real)

    def norm(self) -> float:
        """Operator norm (largest singular value)."""
        w = self.eigvals()
        return float(np.max(np.abs(w))) if w.size else 0.0

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "real": self.a.real.ravel().tolist(),
            "imag": self.a.imag.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HermitianMatrix":
        d = int(obj["dim"])
        m = np.array(obj["real"], dtype=float).reshape(d, d) + 1j * np.array(
            obj["imag"], dtype=float
        ).reshape(d, d)
        return cls(m)

    def __repr__(self) -> str:
        return f"HermitianMatrix(dim={self.dim})"


class RectMatrix:
    """A rectangular complex matrix (no symmetry constraint)."""

    __slots__ = ("a",)

    def __init__(self, entries):
        m = np.array(entries, dtype=np.complex128)
        if m.ndim != 2:
            raise ShapeError(f"expected a 2-d array, got ndim {m.ndim}")
        if not np.all(np.isfinite(m.view(np.float64))):
            raise DomainError("matrix entries must be finite")
        m.setflags(write=False)
        self.a = m

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "real": self.a.real.ravel().tolist(),
            "imag": self.a.imag.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RectMatrix":
        r, c = int(obj["rows"]), int(obj["cols"])
        m = np.array(obj["real"], dtype=float).reshape(r, c) + 1j * np.array(
            obj["imag"], dtype=float
        ).reshape(r, c)
        return cls(m)

    def __repr__(self) -> str:
        return f"RectMatrix({self.rows}x{self.cols})"


def _as_herm_array(x) -> np.ndarray:
    if isinstance(x, HermitianMatrix):
        return x.a
    return HermitianMatrix(x).a


def _as_array(x) -> np.ndarray:
    if isinstance(x, (HermitianMatrix, RectMatrix)):
        return x.a
    return np.asarray(x, dtype=np.complex128)


def eigh_canonical(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hermitian eigendecomposition with a reproducible eigenvector gauge.

    Eigenvalues come back sorted ascending.  Each eigenvector's phase is fixed
    so its largest-magnitude entry is real positive, and within a degenerate
    eigenvalue cluster columns are ordered lexicographically by their rounded
    entries, so repeated runs and reports agree bit for bit.
    """
    w, v = np.linalg.eigh(a)
    v = v.copy()
    for k in range(v.shape[1]):
        col = v[:, k]
        j = int(np.argmax(np.abs(col)))
        piv = col[j]
        if abs(piv) > 0:
            col *= piv.conjugate() / abs(piv)
        # pin the pivot's imaginary part, which is zero up to roundoff
        v[j, k] = abs(piv)
    scale = max(abs(w[0]), abs(w[-1]), 1.0) if w.size else 1.0
    tol = _EIG_TIE_RTOL * scale
    start = 0
    for k in range(1, w.size + 1):
        if k == w.size or w[k] - w[start] > tol:
            if k - start > 1:
                cols = sorted(
                    range(start, k),
                    key=lambda i: tuple(
                        np.round(
                            np.column_stack((v[:, i].real, v[:, i].imag)).ravel(), 9
                        )
                    ),
                )
                v[:, start:k] = v[:, cols]
            start = k
    return w, v


def matrix_function(A, f: Callable) -> HermitianMatrix:
    """Standard matrix function: apply a scalar f to the spectrum of A.

    Parameters
    ----------
    A : HermitianMatrix or array_like
    f : callable mapping reals to reals, vectorized or scalar.

    Returns sum_k f(lambda_k) u_k u_k* as a HermitianMatrix.  If f is not
    finite on some eigenvalue, raises DomainError naming it.
    """
    a = _as_herm_array(A)
    if isinstance(A, HermitianMatrix):
        w, v = A.eig()
    else:
        w, v = eigh_canonical(a)
    with np.errstate(all="ignore"):
        try:
            fw = np.asarray(f(w), dtype=np.complex128)
            if fw.shape != w.shape:
                raise TypeError
        except Exception:
            fw = np.array([complex(f(x)) for x in w])
    bad = ~np.isfinite(fw) | (np.abs(fw.imag) > 1e-12 * (1 + np.abs(fw.real)))
    if np.any(bad):
        lam = w[np.argmax(bad)]
        raise DomainError(f"f is not real-valued and finite at eigenvalue {lam!r}")
    out = (v * fw.real) @ v.conj().T
    return HermitianMatrix((out + out.conj().T) / 2)


def expm(A) -> HermitianMatrix:
    return matrix_function(A, np.exp)


def pos_part(A) -> HermitianMatrix:
    """Positive part (A)_+ = sum over nonnegative eigenvalues."""
    return matrix_function(A, lambda x: np.maximum(x, 0.0))


def neg_part(A) -> HermitianMatrix:
    """Negative part (A)_- with (A)_+ - (A)_- = A and both PSD."""
    return matrix_function(A, lambda x: np.maximum(-x, 0.0))


def ntrace(M) -> float:
    """Normalized trace tr(M)/d."""
    a = _as_array(M)
    return float(np.trace(a).real) / a.shape[0]


def schatten_norm(B, p) -> float:
    """Schatten p-norm: the l^p norm of the singular value vector.

    p may be any real >= 1 or inf (operator norm).
    """
    p = float(p)
    if not p >= 1:
        raise ParameterError(f"Schatten norm needs p >= 1, got {p}")
    s = np.linalg.svd(_as_array(B), compute_uv=False)
    if s.size == 0:
        return 0.0
    if math.isinf(p):
        return float(s[0])
    return float(np.sum(s**p) ** (1.0 / p))


def induced_norm(B, p) -> float:
    """Induced 1-norm (max column abs sum) or inf-norm (max row abs sum)."""
    p = float(p)
    a = _as_array(B)
    if p == 1:
        return float(np.max(np.sum(np.abs(a), axis=0)))
    if math.isinf(p):
        return float(np.max(np.sum(np.abs(a), axis=1)))
    raise ParameterError(f"only p in {{1, inf}} is implemented, got {p}")


def dilation(B) -> HermitianMatrix:
    """Hermitian dilation [[0, B], [B*, 0]]; spectrum is +-singular values."""
    b = _as_array(B)
    d1, d2 = b.shape
    out = np.zeros((d1 + d2, d1 + d2), dtype=np.complex128)
    out[:d1, d1:] = b
    out[d1:, :d1] = b.conj().T
    return HermitianMatrix(out)


def psd_leq(A, B, tol: float = PSD_TOL) -> bool:
    """Semidefinite order A <= B, i.e. lambda_min(B - A) >= -tol * scale.

    The tolerance is relative: scale = 1 + ||A|| + ||B||.
    """
    a = _as_herm_array(A)
    b = _as_herm_array(B)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    scale = 1.0 + _opnorm(a) + _opnorm(b)
    lam_min = float(np.linalg.eigvalsh(b - a)[0])
    return lam_min >= -tol * scale


def real_part(M) -> HermitianMatrix:
    """Re(M) = (M + M*)/2 for a square complex M."""
    m = _as_array(M)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected square, got {m.shape}")
    return HermitianMatrix((m + m.conj().T) / 2)


def imag_part(M) -> HermitianMatrix:
    """Im(M) = (M - M*)/(2i); Hermitian, and M = Re(M) + i Im(M)."""
    m = _as_array(M)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected square, got {m.shape}")
    return HermitianMatrix((m - m.conj().T) / 2j)


def vec(M) -> np.ndarray:
    """Column-stacking vectorization."""
    return _as_array(M).reshape(-1, order="F")


def unvec(x: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(x).reshape((d, d), order="F")


class SuperOperator:
    """A linear map on d x d matrices in its vectorized d^2 x d^2 form.

    Vectorization is column-stacking, so left multiplication by A is
    kron(I, A) and right multiplication by B is kron(B^T, I).
    """

    __slots__ = ("mat", "dim", "self_adjoint")

    def __init__(self, mat):
        m = np.array(mat, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"expected square, got {m.shape}")
        d = math.isqrt(m.shape[0])
        if d * d != m.shape[0]:
            raise ShapeError(f"side {m.shape[0]} is not a perfect square")
        m.setflags(write=False)
        self.mat = m
        self.dim = d
        scale = _opnorm(m)
        self.self_adjoint = _opnorm(m - m.conj().T) <= 1e-12 * max(1.0, scale)

    def apply(self, M) -> np.ndarray:
        """Evaluate the map on a d x d matrix."""
        m = _as_array(M)
        if m.shape != (self.dim, self.dim):
            raise ShapeError(f"expected {self.dim}x{self.dim}, got {m.shape}")
        return unvec(self.mat @ vec(m), self.dim)

    def compose(self, other: "SuperOperator") -> "SuperOperator":
        if self.dim != other.dim:
            raise ShapeError("dimension mismatch")
        return SuperOperator(self.mat @ other.mat)

    def __repr__(self) -> str:
        return f"SuperOperator(dim={self.dim}, self_adjoint={self.self_adjoint})"


def left_mult_op(A) -> SuperOperator:
    """The map M -> A M in vectorized form, kron(I, A)."""
    a = _as_array(A)
    return SuperOperator(np.kron(np.eye(a.shape[0]), a))


def right_mult_op(B) -> SuperOperator:
    """The map M -> M B in vectorized form, kron(B^T, I)."""
    b = _as_array(B)
    return SuperOperator(np.kron(b.T, np.eye(b.shape[0])))


def compose(S: SuperOperator, T: SuperOperator) -> SuperOperator:
    return S.compose(T)


def superop_function(S: SuperOperator, f: Callable) -> SuperOperator:
    """Apply a scalar function to a self-adjoint superoperator's spectrum."""
    if not S.self_adjoint:
        raise PreconditionError("superoperator is not self-adjoint")
    return SuperOperator(matrix_function(HermitianMatrix(S.mat), f).a)


def superop_abs(S: SuperOperator) -> SuperOperator:
    """|S| from the Jordan decomposition S_+ + S_- of a self-adjoint S."""
    return superop_function(S, np.abs)


def trace_inner(M, N) -> complex:
    """Trace inner product <M, N> = tr(M* N)."""
    return complex(np.trace(_as_array(M).conj().T @ _as_array(N)))


def hermitian_from_json_str(s: str) -> HermitianMatrix:
    return HermitianMatrix.from_json(json.loads(s))
