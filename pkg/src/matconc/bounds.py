"""Closed-form tail and expectation bounds for random Hermitian matrices.

Every calculator reports the raw bound value (which may exceed 1, exactly as
the formulas read) next to a clamped probability; comparisons in the test
harness use raw values so the formula semantics stay exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .matcore import (
    HermitianMatrix,
    ParameterError,
    PreconditionError,
    ShapeError,
    induced_norm,
    _as_herm_array,
    _opnorm,
)

SQRT3 = math.sqrt(3.0)


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class GaussExpParams:
    """Dimension d with variance scale v and size scale c, all nonnegative."""

    d: int
    v: float
    c: float

    def __post_init__(self):
        if self.d < 1:
            raise ParameterError(f"d must be a positive integer, got {self.d}")
        if self.v < 0 or self.c < 0:
            raise ParameterError(f"v and c must be nonnegative, got v={self.v} c={self.c}")


@dataclass(frozen=True, eq=False)
class BoundedDiffSpec:
    """Per-coordinate difference bounds A_1..A_n with sigma^2 = ||sum A_j^2||."""

    difference_bounds: tuple

    def __post_init__(self):
        mats = tuple(
            a if isinstance(a, HermitianMatrix) else HermitianMatrix(a)
            for a in self.difference_bounds
        )
        if not mats:
            raise ParameterError("need at least one difference bound")
        d = mats[0].dim
        for a in mats:
            if a.dim != d:
                raise ShapeError(f"dimension mismatch: {a.dim} vs {d}")
        object.__setattr__(self, "difference_bounds", mats)

    @property
    def sigma2(self) -> float:
        return bounded_diff_sigma(self.difference_bounds)

    @property
    def dim(self) -> int:
        return self.difference_bounds[0].dim


@dataclass(frozen=True, eq=False)
class DobrushinSpec:
    """Interdependence matrix D (nonnegative, zero diagonal) plus sigma^2.

    Requires max(||D||_1->1, ||D||_inf->inf) < 1; b = 1/(1 - (||D||_1 + ||D||_inf)/2).
    """

    D: np.ndarray
    sigma2: float

    def __post_init__(self):
        d = np.array(self.D, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ShapeError(f"D must be square, got {d.shape}")
        if np.any(d < 0):
            raise ParameterError("D must be entrywise nonnegative")
        if np.any(np.abs(np.diag(d)) > 0):
            raise ParameterError("D must have zero diagonal")
        if self.sigma2 < 0:
            raise ParameterError(f"sigma2 must be nonnegative, got {self.sigma2}")
        n1 = induced_norm(d, 1)
        ninf = induced_norm(d, math.inf)
        if n1 >= 1:
            raise PreconditionError(f"||D||_1->1 = {n1} must be < 1")
        if ninf >= 1:
            raise PreconditionError(f"||D||_inf->inf = {ninf} must be < 1")
        d.setflags(write=False)
        object.__setattr__(self, "D", d)

    @property
    def b(self) -> float:
        n1 = induced_norm(self.D, 1)
        ninf = induced_norm(self.D, math.inf)
        return 1.0 / (1.0 - 0.5 * (n1 + ninf))


@dataclass(frozen=True, eq=False)
class CompoundCovSpec:
    """Row dim p, column count n, entry variance sigma2 <= L^2, Hermitian B (n x n)."""

    p: int
    n: int
    sigma2: float
    L: float
    B: HermitianMatrix

    def __post_init__(self):
        if self.p < 1 or self.n < 1:
            raise ParameterError(f"p and n must be positive, got p={self.p} n={self.n}")
        if self.L <= 0:
            raise ParameterError(f"L must be positive, got {self.L}")
        if not 0 <= self.sigma2 <= self.L**2 * (1 + 1e-12):
            raise ParameterError(
                f"need 0 <= sigma2 <= L^2, got sigma2={self.sigma2} L={self.L}"
            )
        b = self.B if isinstance(self.B, HermitianMatrix) else HermitianMatrix(self.B)
        if b.dim != self.n:
            raise ShapeError(f"B must be {self.n}x{self.n}, got dim {b.dim}")
        object.__setattr__(self, "B", b)


@dataclass(frozen=True)
class HaarSpec:
    """Uniform bound R, step scale S, and total-variation sequence tv_i."""

    R: float
    S: float
    tv_seq: tuple
    d: int

    def __post_init__(self):
        if self.R < 0:
            raise ParameterError(f"R must be nonnegative, got {self.R}")
        if self.S <= 0:
            raise ParameterError(f"S must be positive, got {self.S}")
        if self.d < 1:
            raise ParameterError(f"d must be a positive integer, got {self.d}")
        tv = tuple(float(x) for x in self.tv_seq)
        for x in tv:
            if not 0 <= x <= 1:
                raise ParameterError(f"tv values must lie in [0,1], got {x}")
        object.__setattr__(self, "tv_seq", tv)

    @property
    def sigma2(self) -> float:
        ratio = 4.0 * self.R / self.S
        return 0.5 * self.S**2 * sum(min(1.0, ratio * t) for t in self.tv_seq)


@dataclass(eq=False)
class BoundCurve:
    """A named map t -> tail bound with parameter provenance.

    ``raw`` is the formula value (can exceed 1); ``prob`` clamps to [0,1].
    """

    name: str
    params: dict
    raw: Callable[[float], float]

    def prob(self, t: float) -> float:
        return _clamp01(self.raw(t))

    def sample(self, t_grid: Sequence[float]):
        return [(float(t), self.raw(t), self.prob(t)) for t in t_grid]

    def write_csv(self, fh, t_grid: Sequence[float]):
        kv = " ".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))
        fh.write(f"# bound={self.name} {kv}\n")
        fh.write("t,raw,clamped\n")
        for t, raw, clamped in self.sample(t_grid):
            fh.write(f"{t!r},{raw!r},{clamped!r}\n")


# ---------------------------------------------------------------------------
# moment-method bounds


def chebyshev_tail(moments, t: float) -> dict:
    """Tail and mean bounds from a list of (p, E||X||_p^p) Schatten moments.

    tail is inf over the list of t^-p * moment; mean_bound is inf of
    moment^(1/p).  Any sublist gives a valid (weaker) bound.
    """
    moments = list(moments)
    if not moments:
        raise ParameterError("need at least one (p, moment) pair")
    if not t > 0:
        raise ParameterError(f"t must be positive, got {t}")
    for p, m in moments:
        if p < 1:
            raise ParameterError(f"moment order must be >= 1, got {p}")
        if m < 0:
            raise ParameterError(f"moments must be nonnegative, got {m}")
    tail_raw = min(m / t**p for p, m in moments)
    mean = min(m ** (1.0 / p) for p, m in moments)
    return {"tail_raw": tail_raw, "tail": _clamp01(tail_raw), "mean_bound": mean}


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f: Callable[[float], float], lo: float, hi: float, iters: int = 120):
    """Golden-section minimum of a scalar function on [lo, hi]."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
        if b - a <= 1e-14 * (1 + abs(a) + abs(b)):
            break
    return (c, fc) if fc < fd else (d, fd)


def _grid_min(f: Callable[[float], float], pts: np.ndarray) -> float:
    """Min of f over grid points, tightened by golden search in the best cell."""
    vals = np.array([f(t) for t in pts])
    i = int(np.argmin(vals))
    best = float(vals[i])
    lo = pts[i - 1] if i > 0 else pts[i]
    hi = pts[i + 1] if i + 1 < len(pts) else pts[i]
    if hi > lo:
        _, refined = _golden_min(f, float(lo), float(hi))
        best = min(best, refined)
    return best


def laplace_bounds(log_mgf: Callable[[float], float], d: int, t: float, theta_grid) -> dict:
    """Tail and mean bounds from the trace mgf via the Laplace transform method.

    Optimizes over the supplied grid (positive thetas for the upper
    quantities, negative for the lower ones) with golden-section refinement
    inside the best bracketing cell; any grid yields valid, conservative
    bounds.  A side with no grid points of the right sign comes back vacuous
    (inf for upper quantities, -inf for lower_mean).
    """
    grid = np.asarray(sorted(float(x) for x in theta_grid))
    if grid.size == 0:
        raise ParameterError("theta_grid is empty")
    pos = grid[grid > 0]
    neg = grid[grid < 0]
    if pos.size == 0 and neg.size == 0:
        raise ParameterError("theta_grid contains only theta=0")
    if d < 1:
        raise ParameterError(f"d must be a positive integer, got {d}")

    logd = math.log(d)
    out = {}
    if pos.size:
        g = _grid_min(lambda th: -th * t + log_mgf(th), pos)
        out["upper_tail_raw"] = d * math.exp(g)
        out["upper_mean"] = _grid_min(lambda th: (logd + log_mgf(th)) / th, pos)
    else:
        out["upper_tail_raw"] = math.inf
        out["upper_mean"] = math.inf
    if neg.size:
        # lower tail comes from the upper bound applied to -X: theta flips sign
        g = _grid_min(lambda th: th * t + log_mgf(th), neg)
        out["lower_tail_raw"] = d * math.exp(g)
        # sup of (log d + log m(theta))/theta over theta < 0
        out["lower_mean"] = -_grid_min(lambda th: -(logd + log_mgf(th)) / th, neg)
    else:
        out["lower_tail_raw"] = math.inf
        out["lower_mean"] = -math.inf
    out["upper_tail"] = _clamp01(out["upper_tail_raw"])
    out["lower_tail"] = _clamp01(out["lower_tail_raw"])
    return out


# ---------------------------------------------------------------------------
# exponential-form tail bounds


def _exp_tail(d_factor: float, t: float, denom: float) -> float:
    # denom = 0 means a deterministic matrix: zero tail off the origin
    if t < 0:
        raise ParameterError(f"t must be nonnegative, got {t}")
    if denom <= 0:
        return float(d_factor) if t == 0 else 0.0
    return d_factor * math.exp(-(t**2) / denom)


def gaussexp_bounds(params: GaussExpParams, t: float) -> dict:
    """Tail d*exp(-t^2/(2v + 2ct)) and mean bound sqrt(2v log d) + c log d."""
    d, v, c = params.d, params.v, params.c
    raw = _exp_tail(d, t, 2 * v + 2 * c * t)
    logd = math.log(d)
    return {
        "tail_raw": raw,
        "tail": _clamp01(raw),
        "mean_bound": math.sqrt(2 * v * logd) + c * logd,
    }


def efron_stein_poly_rhs(p: int, v_moment: float) -> float:
    """sqrt(2(2p-1)) * (E||V||_p^p)^(1/2p), bounding (E||X||_2p^2p)^(1/2p)."""
    if int(p) != p or p < 1:
        raise ParameterError(f"p must be an integer >= 1, got {p}")
    if v_moment < 0:
        raise ParameterError(f"moment must be nonnegative, got {v_moment}")
    return math.sqrt(2.0 * (2 * p - 1)) * v_moment ** (1.0 / (2 * p))


def efron_stein_exp_rhs(theta: float, psi: float, log_mgf_v: float) -> float:
    """(theta^2/psi)/(1 - 2 theta^2/psi) * log E tr-bar exp(psi V).

    Valid for |theta| <= sqrt(psi/2); the boundary gives an infinite bound.
    """
    if psi <= 0:
        raise ParameterError(f"psi must be positive, got {psi}")
    if abs(theta) > math.sqrt(psi / 2):
        raise PreconditionError(
            f"|theta|={abs(theta)} exceeds sqrt(psi/2)={math.sqrt(psi / 2)}"
        )
    if log_mgf_v < 0:
        raise ParameterError(f"log mgf of a PSD proxy is nonnegative, got {log_mgf_v}")
    ratio = theta**2 / psi
    denom = 1.0 - 2.0 * ratio
    if denom <= 0:
        return 0.0 if log_mgf_v == 0 else math.inf
    return ratio / denom * log_mgf_v


def self_bounded_bounds(d: int, v: float, c: float, t: float) -> dict:
    """Bounds under V <= vI + cX: tail d*exp(-t^2/(4v+6ct)), mean sqrt(4v log d)+3c log d."""
    if d < 1:
        raise ParameterError(f"d must be a positive integer, got {d}")
    if v < 0 or c < 0:
        raise ParameterError(f"v and c must be nonnegative, got v={v} c={c}")
    raw = _exp_tail(d, t, 4 * v + 6 * c * t)
    logd = math.log(d)
    return {
        "tail_raw": raw,
        "tail": _clamp01(raw),
        "mean_bound": math.sqrt(4 * v * logd) + 3 * c * logd,
    }


def bounded_diff_sigma(difference_bounds) -> float:
    """Boundedness parameter sigma^2 = ||sum_j A_j^2|| for Hermitian A_j."""
    mats = [_as_herm_array(a) for a in difference_bounds]
    if not mats:
        raise ParameterError("need at least one difference bound")
    d = mats[0].shape[0]
    acc = np.zeros((d, d), dtype=np.complex128)
    for a in mats:
        if a.shape[0] != d:
            raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {d}")
        acc += a @ a
    return _opnorm(acc)


def bounded_diff_bounds(d: int, sigma2: float, t: float) -> dict:
    """Bounded-differences bounds: tail d*exp(-t^2/(2 sigma^2)), mean sigma*sqrt(2 log d)."""
    if d < 1:
        raise ParameterError(f"d must be a positive integer, got {d}")
    if sigma2 < 0:
        raise ParameterError(f"sigma2 must be nonnegative, got {sigma2}")
    raw = _exp_tail(d, t, 2 * sigma2)
    return {
        "tail_raw": raw,
        "tail": _clamp01(raw),
        "mean_bound": math.sqrt(sigma2) * math.sqrt(2 * math.log(d)),
    }


def dobrushin_bounds(spec: DobrushinSpec, d: int, t: float) -> dict:
    """Weakly dependent bounded differences: tail d*exp(-t^2/(b sigma^2))."""
    if d < 1:
        raise ParameterError(f"d must be a positive integer, got {d}")
    b = spec.b
    raw = _exp_tail(d, t, b * spec.sigma2)
    return {
        "tail_raw": raw,
        "tail": _clamp01(raw),
        "mean_bound": math.sqrt(spec.sigma2) * math.sqrt(b * math.log(d)),
        "b": b,
    }


def compound_cov_bounds(spec: CompoundCovSpec, t: float) -> dict:
    """Tail and mean bounds for X = Z B Z* - E[Z B Z*], Z p x n with iid entries.

    tail = 2p * exp(-t^2 / (44(p sigma^2 + L^2)||B||_F^2 + 32 sqrt3 L p ||B|| t)).
    The stated formula covers general L directly; it agrees with the L=1 case
    under the homogeneity substitution (sigma2 -> sigma2/L^2, B -> L B).
    """
    if t < 0:
        raise ParameterError(f"t must be nonnegative, got {t}")
    p, s2, L = spec.p, spec.sigma2, spec.L
    fro2 = float(np.sum(np.abs(spec.B.a) ** 2))
    op = spec.B.norm()
    denom = 44.0 * (p * s2 + L**2) * fro2 + 32.0 * SQRT3 * L * p * op * t
    raw = _exp_tail(2.0 * p, t, denom)
    logp = math.log(p)
    mean = 2.0 * math.sqrt(44.0 * (p * s2 + L**2) * logp * fro2) + 32.0 * SQRT3 * L * p * logp * op
    return {"tail_raw": raw, "tail": _clamp01(raw), "mean_bound": mean}


def compound_psd_mgf(A, p: int, sigma2: float, theta: float) -> float:
    """Log trace-mgf bound for Z A Z* - E[Z A Z*] with PSD A and unit entry bound.

    Returns 8 theta^2 tr(A) (p sigma^2 ||A|| + max_j a_jj) / (1 - 24 p ||A|| theta)
    for 0 <= theta < 1/(24 p ||A||).
    """
    a = A if isinstance(A, HermitianMatrix) else HermitianMatrix(A)
    if p < 1:
        raise ParameterError(f"p must be a positive integer, got {p}")
    if sigma2 < 0:
        raise ParameterError(f"sigma2 must be nonnegative, got {sigma2}")
    lam = a.eigvals()
    if lam[0] < -1e-10 * max(1.0, abs(lam[-1])):
        raise PreconditionError(f"A must be PSD; lambda_min = {lam[0]}")
    norm_a = a.norm()
    if theta < 0 or (norm_a > 0 and theta >= 1.0 / (24.0 * p * norm_a)):
        raise PreconditionError(
            f"theta={theta} outside [0, 1/(24 p ||A||)) = [0, {1.0 / (24.0 * p * norm_a) if norm_a else math.inf})"
        )
    if norm_a == 0 or theta == 0:
        return 0.0
    max_diag = float(np.max(a.a.diagonal().real))
    return (
        8.0 * theta**2 * a.trace() * (p * sigma2 * norm_a + max_diag)
        / (1.0 - 24.0 * p * norm_a * theta)
    )


def haar_bounds(spec: HaarSpec, t: float) -> dict:
    """Bounds from the total-variation series sigma^2 = S^2/2 sum min(1, 4R tv_i/S)."""
    s2 = spec.sigma2
    raw = _exp_tail(spec.d, t, 2 * s2)
    return {
        "tail_raw": raw,
        "tail": _clamp01(raw),
        "mean_bound": math.sqrt(s2) * math.sqrt(2 * math.log(spec.d)),
        "sigma2": s2,
    }


def rectangularize(model):
    """Wrap a rectangular-valued model so all Hermitian machinery applies.

    The new model's H is the Hermitian dilation of the old one; centering
    commutes with dilation, so the dilated X is the dilation of the original
    centered rectangular matrix and ||X_rect|| = lambda_max of the dilated X.
    """
    from .stein import dilate_model

    return dilate_model(model)


# named curve registry for the CLI and the tail harness

_CURVE_PARAMS = {
    "gaussexp": ("d", "v", "c"),
    "self_bounded": ("d", "v", "c"),
    "bounded_diff": ("d", "sigma2"),
    "dobrushin": ("d", "sigma2", "D"),
    "compound_cov": ("spec",),
    "haar": ("R", "S", "tv_seq", "d"),
}


def make_curve(name: str, **params) -> BoundCurve:
    """Build a BoundCurve for one of the named closed-form tail bounds."""
    required = _CURVE_PARAMS.get(name)
    if required is not None:
        missing = [k for k in required if k not in params]
        if missing:
            raise ParameterError(f"{name} curve needs parameters {missing}")
    if name == "gaussexp":
        gp = GaussExpParams(int(params["d"]), float(params["v"]), float(params["c"]))
        return BoundCurve(name, dict(params), lambda t: gaussexp_bounds(gp, t)["tail_raw"])
    if name == "self_bounded":
        d, v, c = int(params["d"]), float(params["v"]), float(params["c"])
        return BoundCurve(name, dict(params), lambda t: self_bounded_bounds(d, v, c, t)["tail_raw"])
    if name == "bounded_diff":
        d, s2 = int(params["d"]), float(params["sigma2"])
        return BoundCurve(name, dict(params), lambda t: bounded_diff_bounds(d, s2, t)["tail_raw"])
    if name == "dobrushin":
        spec = DobrushinSpec(params["D"], float(params["sigma2"]))
        d = int(params["d"])
        return BoundCurve(name, {"d": d, "sigma2": spec.sigma2, "b": spec.b},
                          lambda t: dobrushin_bounds(spec, d, t)["tail_raw"])
    if name == "compound_cov":
        spec = params["spec"]
        if not isinstance(spec, CompoundCovSpec):
            raise ParameterError("compound_cov curve needs spec=CompoundCovSpec")
        prov = {"p": spec.p, "n": spec.n, "sigma2": spec.sigma2, "L": spec.L}
        return BoundCurve(name, prov, lambda t: compound_cov_bounds(spec, t)["tail_raw"])
    if name == "haar":
        spec = HaarSpec(float(params["R"]), float(params["S"]), params["tv_seq"], int(params["d"]))
        return BoundCurve(name, {"d": spec.d, "sigma2": spec.sigma2},
                          lambda t: haar_bounds(spec, t)["tail_raw"])
    raise ParameterError(f"unknown bound name {name!r}")
