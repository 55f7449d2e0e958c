"""Exchangeable pairs, kernels, couplings, and variance proxies.

Models are product distributions Z = (Z_1, ..., Z_n) with a Hermitian-valued
map H; the centered matrix of interest is X = H(Z) - E H(Z).  Everything is
exact (full enumeration) on finite product spaces below a cardinality cutoff
and seeded Monte Carlo otherwise.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel
from .matcore import (
    HermitianMatrix,
    ParameterError,
    PreconditionError,
    RectMatrix,
    ShapeError,
    _opnorm,
    dilation,
)

# Above this product-space cardinality, enumeration gives way to Monte Carlo.
ENUM_CUTOFF = 100_000

_MEAN_MC_SAMPLES = 20_000


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# product distributions


class FiniteCoord:
    """A finite coordinate support: values with probabilities summing to 1."""

    __slots__ = ("values", "probs", "_cum")

    def __init__(self, pairs):
        vals, probs = [], []
        for v, p in pairs:
            vals.append(float(v))
            probs.append(float(p))
        p = np.array(probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ParameterError(f"probabilities must be nonnegative and sum to 1, got {probs}")
        self.values = np.array(vals, dtype=float)
        self.probs = p
        self._cum = np.cumsum(p)

    def sample(self, rng: np.random.Generator, size=None):
        u = rng.random(size)
        idx = np.searchsorted(self._cum, u, side="right")
        idx = np.minimum(idx, len(self.values) - 1)
        return self.values[idx]

    def __len__(self):
        return len(self.values)


class SampledCoord:
    """A coordinate with a named sampler instead of a finite support."""

    __slots__ = ("name", "sampler")

    def __init__(self, name: str, sampler: Callable):
        self.name = name
        self.sampler = sampler

    def sample(self, rng: np.random.Generator, size=None):
        return self.sampler(rng, size)


class ProductDistribution:
    """Mutually independent coordinates, each finite or sampler-backed."""

    def __init__(self, coords: Sequence):
        if not coords:
            raise ParameterError("need at least one coordinate")
        self.coords = tuple(coords)
        self.finite = all(isinstance(c, FiniteCoord) for c in self.coords)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def cardinality(self) -> int:
        if not self.finite:
            raise PreconditionError("cardinality is defined for finite distributions only")
        out = 1
        for c in self.coords:
            out *= len(c)
        return out

    def sample(self, rng: np.random.Generator) -> tuple:
        return tuple(float(c.sample(rng)) for c in self.coords)

    def sample_many(self, rng: np.random.Generator, count: int) -> np.ndarray:
        cols = [np.asarray(c.sample(rng, count), dtype=float) for c in self.coords]
        return np.column_stack(cols)

    def outcomes(self):
        """Iterate (z, probability) over the whole product space."""
        if not self.finite:
            raise PreconditionError("outcomes() needs a finite distribution")
        supports = [list(zip(c.values, c.probs)) for c in self.coords]
        for combo in itertools.product(*supports):
            z = tuple(v for v, _ in combo)
            pr = 1.0
            for _, p in combo:
                pr *= p
            yield z, pr

    @classmethod
    def uniform_pm1(cls, n: int) -> "ProductDistribution":
        return cls([FiniteCoord([(-1.0, 0.5), (1.0, 0.5)]) for _ in range(n)])

    def to_json(self) -> dict:
        if not self.finite:
            raise PreconditionError("only finite distributions serialize")
        return {
            "n": self.n,
            "coords": [
                [[float(v), float(p)] for v, p in zip(c.values, c.probs)]
                for c in self.coords
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProductDistribution":
        return cls([FiniteCoord(pairs) for pairs in obj["coords"]])


# ---------------------------------------------------------------------------
# matrix models


def _zkey(z) -> str:
    return json.dumps([float(v) for v in z])


class MatrixModel:
    """A product distribution with a Hermitian-valued map H.

    H may return a HermitianMatrix or a plain complex array.  The mean E H(Z)
    is exact (full enumeration) for finite models under the cardinality
    cutoff, else a seeded Monte Carlo estimate whose provenance is recorded.
    """

    def __init__(self, dist: ProductDistribution, H: Callable, d: int,
                 name: str = "", enum_cutoff: int = ENUM_CUTOFF,
                 mean_samples: int = _MEAN_MC_SAMPLES, mean_seed: int = 0,
                 H_batch: Callable | None = None):
        self.dist = dist
        self._H = H
        self.d = int(d)
        self.name = name or "model"
        self.enum_cutoff = int(enum_cutoff)
        self.mean_samples = int(mean_samples)
        self.mean_seed = int(mean_seed)
        self._H_batch = H_batch
        self._mean = None
        self.mean_provenance = None
        self._h_cache: dict = {}

    # -- evaluation

    def H(self, z) -> np.ndarray:
        key = tuple(z)
        got = self._h_cache.get(key)
        if got is None:
            raw = self._H(key)
            a = raw.a if isinstance(raw, HermitianMatrix) else np.asarray(raw, dtype=np.complex128)
            if a.shape != (self.d, self.d):
                raise ShapeError(f"H returned shape {a.shape}, expected ({self.d},{self.d})")
            got = (a + a.conj().T) / 2
            if len(self._h_cache) < 4 * ENUM_CUTOFF:
                self._h_cache[key] = got
        return got

    @property
    def exact(self) -> bool:
        return self.dist.finite and self.dist.cardinality <= self.enum_cutoff

    def mean(self) -> np.ndarray:
        if self._mean is None:
            if self.exact:
                acc = np.zeros((self.d, self.d), dtype=np.complex128)
                for z, pr in self.dist.outcomes():
                    acc += pr * self.H(z)
                self._mean = acc
                self.mean_provenance = {"method": "exact"}
            else:
                rng = _rng(self.mean_seed)
                zs = self.dist.sample_many(rng, self.mean_samples)
                acc = np.zeros((self.d, self.d), dtype=np.complex128)
                for row in zs:
                    acc += self.H(tuple(row))
                self._mean = acc / self.mean_samples
                self.mean_provenance = {
                    "method": "mc",
                    "samples": self.mean_samples,
                    "seed": self.mean_seed,
                }
        return self._mean

    def X(self, z) -> np.ndarray:
        return self.H(z) - self.mean()

    def max_h_norm(self) -> float:
        """max over the support of ||H(z)||; finite models only."""
        if not self.exact:
            raise PreconditionError("max_h_norm needs a finite model under the cutoff")
        return max(_opnorm(self.H(z)) for z, _ in self.dist.outcomes())

    def sample_X(self, count: int, seed: int) -> np.ndarray:
        """Draw ``count`` centered samples X = H(Z) - E H(Z), shape (count, d, d)."""
        rng = _rng(seed)
        zs = self.dist.sample_many(rng, count)
        mean = self.mean()
        if self._H_batch is not None:
            hs = np.asarray(self._H_batch(zs), dtype=np.complex128)
        else:
            hs = np.empty((count, self.d, self.d), dtype=np.complex128)
            for i in range(count):
                hs[i] = self.H(tuple(zs[i]))
        return hs - mean

    # -- coordinate surgery

    def replace(self, z: tuple, j: int, v: float) -> tuple:
        out = list(z)
        out[j] = float(v)
        return tuple(out)

    def to_json(self) -> dict:
        if not self.dist.finite:
            raise PreconditionError("only finite models serialize")
        table = {}
        for z, _ in self.dist.outcomes():
            h = self.H(z)
            table[_zkey(z)] = {
                "real": h.real.ravel().tolist(),
                "imag": h.imag.ravel().tolist(),
            }
        return {
            "name": self.name,
            "d": self.d,
            "dist": self.dist.to_json(),
            "H": table,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MatrixModel":
        dist = ProductDistribution.from_json(obj["dist"])
        d = int(obj["d"])
        table = {
            key: np.array(v["real"], dtype=float).reshape(d, d)
            + 1j * np.array(v["imag"], dtype=float).reshape(d, d)
            for key, v in obj["H"].items()
        }

        def H(z):
            return table[_zkey(z)]

        return cls(dist, H, d, name=obj.get("name", "model"))


class RectangularModel:
    """Like MatrixModel but H takes rectangular values."""

    def __init__(self, dist: ProductDistribution, H: Callable, rows: int, cols: int,
                 name: str = "", enum_cutoff: int = ENUM_CUTOFF):
        self.dist = dist
        self._H = H
        self.rows = int(rows)
        self.cols = int(cols)
        self.name = name or "rect_model"
        self.enum_cutoff = int(enum_cutoff)
        self._mean = None

    def H(self, z) -> np.ndarray:
        raw = self._H(tuple(z))
        a = raw.a if isinstance(raw, RectMatrix) else np.asarray(raw, dtype=np.complex128)
        if a.shape != (self.rows, self.cols):
            raise ShapeError(f"H returned {a.shape}, expected ({self.rows},{self.cols})")
        return a

    @property
    def exact(self) -> bool:
        return self.dist.finite and self.dist.cardinality <= self.enum_cutoff

    def mean(self) -> np.ndarray:
        if self._mean is None:
            if not self.exact:
                raise PreconditionError("rectangular models are enumerated exactly only")
            acc = np.zeros((self.rows, self.cols), dtype=np.complex128)
            for z, pr in self.dist.outcomes():
                acc += pr * self.H(z)
            self._mean = acc
        return self._mean

    def X(self, z) -> np.ndarray:
        return self.H(z) - self.mean()


def dilate_model(model: RectangularModel) -> MatrixModel:
    """Hermitian model whose H is the dilation of the rectangular H."""

    def H(z):
        return dilation(model.H(z)).a

    return MatrixModel(model.dist, H, model.rows + model.cols,
                       name=f"dilated({model.name})", enum_cutoff=model.enum_cutoff)


# ---------------------------------------------------------------------------
# builtins


def hypercube_sum(n: int, d: int = 2) -> MatrixModel:
    """H(z) = (sum_j z_j) E_11 on uniform {+-1}^n; E H = 0."""
    if n < 1 or d < 1:
        raise ParameterError(f"need n >= 1 and d >= 1, got n={n} d={d}")

    def H(z):
        out = np.zeros((d, d), dtype=np.complex128)
        out[0, 0] = sum(z)
        return out

    def H_batch(zs):
        out = np.zeros((zs.shape[0], d, d), dtype=np.complex128)
        out[:, 0, 0] = zs.sum(axis=1)
        return out

    return MatrixModel(ProductDistribution.uniform_pm1(n), H, d,
                       name=f"hypercube_sum(n={n},d={d})", H_batch=H_batch)


def bounded_diff_demo(n: int = 3, d: int = 2) -> MatrixModel:
    """H(z) = sum_j z_j M_j with fixed Hermitian M_j and z uniform on {+-1}^n.

    The model records per-coordinate difference bounds A_j = 2|M_j| (since
    (H - H^(j))^2 = (z_j - z'_j)^2 M_j^2 <= 4 M_j^2).
    """
    rng = _rng(20_240_501)
    mats = []
    for _ in range(n):
        g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        mats.append((g + g.conj().T) / 2)

    def H(z):
        acc = np.zeros((d, d), dtype=np.complex128)
        for zj, m in zip(z, mats):
            acc += zj * m
        return acc

    def H_batch(zs):
        stack = np.stack(mats)
        return np.einsum("kj,jab->kab", zs, stack)

    model = MatrixModel(ProductDistribution.uniform_pm1(n), H, d,
                        name=f"bounded_diff_demo(n={n},d={d})", H_batch=H_batch)
    abs_mats = []
    for m in mats:
        w, v = np.linalg.eigh(m)
        abs_mats.append(HermitianMatrix((v * (2 * np.abs(w))) @ v.conj().T))
    model.difference_bounds = abs_mats
    return model


def compound_covariance(p: int, n: int, B=None, entry_dist: str = "pm1",
                        sigma2: float = 1.0, L: float = 1.0) -> MatrixModel:
    """H(z) = Z B Z* with Z the p x n matrix of the iid coordinates.

    entry_dist "pm1" is the finite uniform {+-1} case (sigma2 = L = 1);
    "uniform" draws entries uniformly from [-L, L] (sigma2 = L^2/3) and the
    model falls back to Monte Carlo means.
    """
    if B is None:
        B = np.eye(n)
    Bh = B if isinstance(B, HermitianMatrix) else HermitianMatrix(B)
    if Bh.dim != n:
        raise ShapeError(f"B must be {n}x{n}, got {Bh.dim}")
    if entry_dist == "pm1":
        coords = [FiniteCoord([(-L, 0.5), (L, 0.5)]) for _ in range(p * n)]
    elif entry_dist == "uniform":
        coords = [SampledCoord("uniform", lambda rng, size=None: rng.uniform(-L, L, size))
                  for _ in range(p * n)]
    else:
        raise ParameterError(f"unknown entry_dist {entry_dist!r}")

    Ba = Bh.a

    def H(z):
        Z = np.asarray(z, dtype=np.complex128).reshape(p, n)
        return Z @ Ba @ Z.conj().T

    def H_batch(zs):
        Z = zs.reshape(-1, p, n).astype(np.complex128)
        return np.einsum("kpn,nm,kqm->kpq", Z, Ba, Z.conj())

    return MatrixModel(ProductDistribution(coords), H, p,
                       name=f"compound_covariance(p={p},n={n},{entry_dist})",
                       H_batch=H_batch)


def rect_demo(n: int = 3) -> RectangularModel:
    """A small rectangular-valued model on {+-1}^n with 2 x 3 values."""

    def H(z):
        z = list(z) + [1.0] * max(0, 3 - len(z))
        return np.array(
            [
                [z[0], z[1], z[2]],
                [z[2] * z[0], z[0] * z[1], z[1] * z[2]],
            ],
            dtype=np.complex128,
        )

    return RectangularModel(ProductDistribution.uniform_pm1(n), H, 2, 3,
                            name=f"rect_demo(n={n})")


def random_finite_model(n: int, d: int, seed: int) -> MatrixModel:
    """Binary-coordinate model with an independent random Hermitian per outcome."""
    if n < 1 or d < 1:
        raise ParameterError(f"need n >= 1 and d >= 1, got n={n} d={d}")
    rng = _rng(seed)
    dist = ProductDistribution.uniform_pm1(n)
    table = {}
    for z, _ in dist.outcomes():
        g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        table[z] = (g + g.conj().T) / 2

    def H(z):
        return table[tuple(z)]

    return MatrixModel(dist, H, d, name=f"random_finite(n={n},d={d},seed={seed})")


BUILTIN_MODELS = {
    "hypercube_sum": hypercube_sum,
    "bounded_diff": bounded_diff_demo,
    "compound_covariance": compound_covariance,
    "random_finite": random_finite_model,
}


# ---------------------------------------------------------------------------
# exchangeable pairs


class ExchangeablePair:
    """Sampler for (Z, Z') with Z' = Z with one uniformly chosen coordinate
    replaced by an independent copy."""

    def __init__(self, model: MatrixModel, seed: int):
        self.model = model
        self.seed = int(seed)
        self._gen = _rng(seed)

    def sample(self) -> tuple:
        model = self.model
        z = model.dist.sample(self._gen)
        j = int(self._gen.integers(0, model.dist.n))
        v = float(model.dist.coords[j].sample(self._gen))
        return z, model.replace(z, j, v)

    def joint_pmf(self) -> dict:
        """Exact joint pmf of (Z, Z') as a dict keyed by the pair of tuples.

        Each cell is assembled as base * (p_a * p_b) / n with the replaced
        coordinate's two probabilities multiplied first, so the table is
        symmetric under swap bitwise, not just up to rounding.
        """
        model = self.model
        if not model.exact:
            raise PreconditionError("joint pmf needs a finite model")
        dist = model.dist
        n = dist.n
        pmf: dict = {}
        for j, coord in enumerate(dist.coords):
            others = [list(zip(c.values, c.probs)) for k, c in enumerate(dist.coords)
                      if k != j]
            for combo in itertools.product(*others):
                base = 1.0
                for _, p in combo:
                    base *= p
                rest = [v for v, _ in combo]
                for a, pa in zip(coord.values, coord.probs):
                    za = tuple(rest[:j]) + (float(a),) + tuple(rest[j:])
                    for b, pb in zip(coord.values, coord.probs):
                        zb = tuple(rest[:j]) + (float(b),) + tuple(rest[j:])
                        key = (za, zb)
                        pmf[key] = pmf.get(key, 0.0) + base * (pa * pb) / n
        return pmf


def make_exchangeable_pair(model: MatrixModel, seed: int) -> ExchangeablePair:
    return ExchangeablePair(model, seed)


# ---------------------------------------------------------------------------
# variance proxy


@dataclass(eq=False)
class VarianceProxy:
    """Map z -> V(z) with provenance (exact enumeration or Monte Carlo)."""

    values: dict
    provenance: dict

    def at(self, z) -> HermitianMatrix:
        return self.values[tuple(z)]


def _variance_proxy_array(model: MatrixModel, z, samples: int | None,
                          seed: int | None) -> np.ndarray:
    z = tuple(z)
    hz = model.H(z)
    acc = np.zeros_like(hz)
    if model.dist.finite:
        for j, coord in enumerate(model.dist.coords):
            for v, pj in zip(coord.values, coord.probs):
                diff = hz - model.H(model.replace(z, j, float(v)))
                acc += pj * (diff @ diff)
    else:
        if samples is None or seed is None:
            raise ParameterError("sampled coordinates need samples and seed")
        rng = _rng(seed)
        for j, coord in enumerate(model.dist.coords):
            vs = np.atleast_1d(coord.sample(rng, samples))
            sub = np.zeros_like(hz)
            for v in vs:
                diff = hz - model.H(model.replace(z, j, float(v)))
                sub += diff @ diff
            acc += sub / samples
    return acc / 2.0


def variance_proxy(model: MatrixModel, z, samples: int | None = None,
                   seed: int | None = None) -> HermitianMatrix:
    """V(z) = (1/2) sum_j E[(H(z) - H(z with coord j resampled))^2]."""
    return HermitianMatrix(_variance_proxy_array(model, z, samples, seed))


def variance_proxy_map(model: MatrixModel, samples: int | None = None,
                       seed: int | None = None) -> VarianceProxy:
    """The variance proxy over every outcome of a finite model."""
    if not model.exact:
        raise PreconditionError("variance_proxy_map enumerates finite models only")
    values = {
        z: HermitianMatrix(_variance_proxy_array(model, z, samples, seed))
        for z, _ in model.dist.outcomes()
    }
    return VarianceProxy(values, {"method": "exact"})


# ---------------------------------------------------------------------------
# kernels


class ExactKernel:
    """The coupling kernel on a finite model, computed to machine precision.

    Iterates the pair-chain averaging operator on the difference function
    D_0(z, z') = H(z) - H(z'), accumulating K = sum_i T^i D_0.  The iteration
    contracts geometrically at rate (1 - 1/n), so the residual after the loop
    is at floating-point scale; the table is antisymmetric exactly.
    """

    def __init__(self, model: MatrixModel, tol: float = 1e-14, max_iter: int = 20_000):
        if not model.exact:
            raise PreconditionError("ExactKernel needs a finite model under the cutoff")
        self.model = model
        outs = [z for z, _ in model.dist.outcomes()]
        self.outcomes = outs
        self.index = {z: i for i, z in enumerate(outs)}
        S = len(outs)
        d = model.d
        n = model.dist.n

        D0 = np.empty((S, S, d, d), dtype=np.complex128)
        H = np.stack([model.H(z) for z in outs])
        D0[:] = H[:, None] - H[None, :]

        # replacement index tables: rep[j][v] maps outcome index to the index
        # with coordinate j set to v
        reps = []
        for j, coord in enumerate(model.dist.coords):
            per_v = []
            for v in coord.values:
                per_v.append(np.array(
                    [self.index[model.replace(z, j, float(v))] for z in outs],
                    dtype=np.intp,
                ))
            reps.append(per_v)

        scale = max(1.0, float(np.max(np.abs(D0))))
        K = np.zeros_like(D0)
        M = D0
        done = 0
        for it in range(max_iter):
            K += M
            done = it + 1
            if float(np.max(np.abs(M))) <= tol * scale:
                break
            nxt = np.zeros_like(M)
            for j, coord in enumerate(model.dist.coords):
                for v_idx, pj in enumerate(coord.probs):
                    r = reps[j][v_idx]
                    nxt += (pj / n) * M[np.ix_(r, r)]
            M = nxt
        else:
            raise RuntimeError("kernel iteration did not converge")
        self.table = K
        self.iterations = done

    def at(self, z, zp) -> np.ndarray:
        return self.table[self.index[tuple(z)], self.index[tuple(zp)]]


class DifferenceKernel:
    """The matrix Stein pair kernel K = (X - X') / alpha."""

    def __init__(self, model: MatrixModel, alpha: float):
        if alpha == 0:
            raise ParameterError("alpha must be nonzero")
        self.model = model
        self.alpha = float(alpha)

    def at(self, z, zp) -> np.ndarray:
        return (self.model.X(z) - self.model.X(zp)) / self.alpha


@dataclass(eq=False)
class KernelEstimate:
    """Truncated-series Monte Carlo estimate of K(z, z')."""

    z: tuple
    zp: tuple
    horizon: int
    samples: int
    seed: int
    estimate: HermitianMatrix
    truncation_error_bound: float
    se_norm: float

    def at(self, z, zp) -> np.ndarray:
        if tuple(z) == self.z and tuple(zp) == self.zp:
            return self.estimate.a
        if tuple(z) == self.zp and tuple(zp) == self.z:
            return -self.estimate.a
        raise ParameterError("estimate only covers its own (z, z') pair")


def _pair_seed(base: int, z: tuple, zp: tuple) -> int:
    """Seed derived from the unordered pair, stable across processes."""
    key = json.dumps(sorted([list(z), list(zp)])).encode()
    digest = hashlib.blake2s(key, digest_size=8).digest()
    return (int(base) << 24) ^ int.from_bytes(digest, "little")


def default_horizon(n: int, h_max: float, tol: float = 1e-10) -> int:
    """Smallest I with n (1 - 1/n)^(I/2) * 2 h_max < tol."""
    if n == 1:
        return 1
    ratio = 1.0 - 1.0 / n
    lead = 2.0 * n * h_max
    if lead < tol:
        return 1
    # solve lead * ratio^(I/2) < tol
    need = 2.0 * math.log(tol / lead) / math.log(ratio)
    return max(1, int(math.ceil(need)))


def estimate_kernel(model: MatrixModel, z, zp, horizon: int, samples: int,
                    seed: int, h_max: float | None = None) -> KernelEstimate:
    """Monte Carlo estimate of the coupling kernel at one pair of states.

    Runs ``samples`` coupled chain pairs for ``horizon`` steps with shared
    randomness and averages the summed differences.  The shared draws depend
    only on (seed, sample index), never on the argument order, so swapping
    (z, z') negates the estimate exactly.
    """
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon}")
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    z = tuple(float(v) for v in z)
    zp = tuple(float(v) for v in zp)
    n = model.dist.n
    d = model.d
    if h_max is None:
        h_max = model.max_h_norm() if model.exact else None
    if h_max is None:
        raise ParameterError("h_max is required for models that cannot be enumerated")

    acc = np.zeros((d, d), dtype=np.complex128)
    acc_sq = 0.0
    for s in range(samples):
        rng = _rng((seed << 20) + s)
        a, b = z, zp
        total = model.H(a) - model.H(b) if a != b else np.zeros((d, d), np.complex128)
        for _ in range(horizon):
            if a == b:
                break
            j = int(rng.integers(0, n))
            v = float(model.dist.coords[j].sample(rng))
            a = model.replace(a, j, v)
            b = model.replace(b, j, v)
            if a != b:
                total = total + (model.H(a) - model.H(b))
        acc += total
        acc_sq += float(np.linalg.norm(total)) ** 2
    est = acc / samples
    if samples > 1:
        var = max(0.0, acc_sq / samples - float(np.linalg.norm(est)) ** 2)
        se = math.sqrt(var / (samples - 1))
    else:
        se = math.inf
    trunc = 2.0 * h_max * n * n * (1.0 - 1.0 / n) ** (horizon + 1)
    return KernelEstimate(z, zp, horizon, samples, int(seed),
                          HermitianMatrix(est), trunc, se)


class EstimatedKernel:
    """Kernel served by on-demand truncated estimation, one pair at a time.

    The per-pair seed is a digest of the unordered pair, so querying (z, z')
    and (z', z) replays the same coupled chains and the answers negate
    bitwise.  Estimates are cached.
    """

    def __init__(self, model: MatrixModel, horizon: int, samples: int, seed: int,
                 h_max: float | None = None):
        self.model = model
        self.horizon = int(horizon)
        self.samples = int(samples)
        self.seed = int(seed)
        self.h_max = model.max_h_norm() if h_max is None else float(h_max)
        self._cache: dict = {}

    def details(self, z, zp) -> KernelEstimate:
        z = tuple(float(v) for v in z)
        zp = tuple(float(v) for v in zp)
        key = (min(z, zp), max(z, zp))
        got = self._cache.get(key)
        if got is None:
            got = estimate_kernel(self.model, key[0], key[1], self.horizon,
                                  self.samples, _pair_seed(self.seed, *key),
                                  h_max=self.h_max)
            self._cache[key] = got
        return got

    def at(self, z, zp) -> np.ndarray:
        z = tuple(float(v) for v in z)
        zp = tuple(float(v) for v in zp)
        if z == zp:
            return np.zeros((self.model.d, self.model.d), dtype=np.complex128)
        return self.details(z, zp).at(z, zp)

    def radius(self, z, zp) -> float:
        if tuple(z) == tuple(zp):
            return 0.0
        est = self.details(z, zp)
        return est.se_norm + est.truncation_error_bound


# ---------------------------------------------------------------------------
# conditional variances and identities


@dataclass(eq=False)
class ConditionalVariances:
    """V_X(z) = E[(X-X')^2|Z=z]/2 and V^K(z) = E[K(Z,Z')^2|Z=z]/2."""

    z: tuple
    v_x: HermitianMatrix
    v_k: HermitianMatrix


def conditional_variances(model: MatrixModel, pair, kernel, z) -> ConditionalVariances:
    """Both conditional variances at z, by enumeration over (J, replacement).

    ``pair`` fixes the conditional law of Z' given Z; passing None uses the
    single-coordinate replacement law directly.
    """
    if pair is not None and pair.model is not model:
        raise PreconditionError("pair was built for a different model")
    z = tuple(float(v) for v in z)
    if not model.dist.finite:
        raise PreconditionError("conditional variances need finite coordinates")
    n = model.dist.n
    xz = model.X(z)
    vx = np.zeros_like(xz)
    vk = np.zeros_like(xz)
    for j, coord in enumerate(model.dist.coords):
        for v, pj in zip(coord.values, coord.probs):
            zp = model.replace(z, j, float(v))
            w = pj / n
            dx = xz - model.X(zp)
            vx += w * (dx @ dx)
            k = np.asarray(kernel.at(z, zp))
            vk += w * (k @ k)
    return ConditionalVariances(z, HermitianMatrix(vx / 2), HermitianMatrix(vk / 2))


def conditional_variance_map(model: MatrixModel, pair, kernel) -> dict:
    """ConditionalVariances at every outcome of a finite model."""
    if not model.exact:
        raise PreconditionError("needs a finite model under the cutoff")
    return {z: conditional_variances(model, pair, kernel, z)
            for z, _ in model.dist.outcomes()}


@dataclass(frozen=True)
class SteinCheck:
    residual: float
    radius: float


def check_stein_identity(model: MatrixModel, kernel) -> SteinCheck:
    """max_z || E[K(z, Z')|Z=z] - X(z) ||, with an MC radius for estimates.

    The conditional law of Z' given Z=z replaces a uniform coordinate J by an
    independent copy; on finite models the expectation is an exact sum.  For
    an EstimatedKernel the radius is the largest accumulated standard-error
    plus truncation budget over z; exact kernels report radius 0.
    """
    if not model.exact:
        raise PreconditionError("identity check enumerates finite models")
    n = model.dist.n
    worst = 0.0
    radius = 0.0
    for z, _ in model.dist.outcomes():
        acc = np.zeros((model.d, model.d), dtype=np.complex128)
        r_here = 0.0
        for j, coord in enumerate(model.dist.coords):
            for v, pj in zip(coord.values, coord.probs):
                zp = model.replace(z, j, float(v))
                acc += (pj / n) * np.asarray(kernel.at(z, zp))
                if isinstance(kernel, EstimatedKernel):
                    r_here += (pj / n) * kernel.radius(z, zp)
        worst = max(worst, _opnorm(acc - model.X(z)))
        radius = max(radius, r_here)
    return SteinCheck(worst, radius)


def exchangeable_pairs_identity(model: MatrixModel, kernel, F: Callable) -> float:
    """|| E[X F(X)] - E[K(Z,Z')(F(X) - F(X'))]/2 || by full enumeration."""
    if not model.exact:
        raise PreconditionError("identity check enumerates finite models")
    n = model.dist.n
    lhs = np.zeros((model.d, model.d), dtype=np.complex128)
    rhs = np.zeros_like(lhs)
    fx = {z: np.asarray(F(model.X(z)), dtype=np.complex128)
          for z, _ in model.dist.outcomes()}
    for z, pr in model.dist.outcomes():
        lhs += pr * (model.X(z) @ fx[z])
        for j, coord in enumerate(model.dist.coords):
            for v, pj in zip(coord.values, coord.probs):
                zp = model.replace(z, j, float(v))
                w = pr * pj / n
                rhs += 0.5 * w * (np.asarray(kernel.at(z, zp)) @ (fx[z] - fx[zp]))
    return _opnorm(lhs - rhs)


def kernel_mean_norm(model: MatrixModel, kernel) -> float:
    """|| E K(Z, Z') || over the joint exchangeable-pair law."""
    if not model.exact:
        raise PreconditionError("needs a finite model")
    n = model.dist.n
    acc = np.zeros((model.d, model.d), dtype=np.complex128)
    for z, pr in model.dist.outcomes():
        for j, coord in enumerate(model.dist.coords):
            for v, pj in zip(coord.values, coord.probs):
                zp = model.replace(z, j, float(v))
                acc += (pr * pj / n) * np.asarray(kernel.at(z, zp))
    return _opnorm(acc)


def r_psi(model: MatrixModel, cond_vars: dict, psi: float, s_grid) -> dict:
    """r(psi) = (1/psi) min over s of log E tr-bar exp((psi/2)(s V_X + V^K / s)).

    Expectation is exact on finite models.  s values whose exponent would
    overflow are skipped and reported.
    """
    if psi <= 0:
        raise ParameterError(f"psi must be positive, got {psi}")
    s_grid = [float(s) for s in s_grid]
    if not s_grid or any(s <= 0 for s in s_grid):
        raise ParameterError("s_grid must be nonempty and positive")
    if not model.exact:
        raise PreconditionError("r_psi enumerates finite models")
    probs = {z: pr for z, pr in model.dist.outcomes()}
    best = math.inf
    best_s = None
    skipped = []
    for s in s_grid:
        acc = 0.0
        ok = True
        for z, cv in cond_vars.items():
            m = (psi / 2.0) * (s * cv.v_x.a + cv.v_k.a / s)
            w = np.linalg.eigvalsh(m)
            if w[-1] > 700.0:
                ok = False
                break
            acc += probs[z] * float(np.mean(np.exp(w)))
        if not ok:
            skipped.append(s)
            continue
        val = math.log(acc)
        if val < best:
            best, best_s = val, s
    return {"r": best / psi if best < math.inf else math.inf,
            "argmin_s": best_s, "skipped_s": skipped}


# ---------------------------------------------------------------------------
# kernel coupling simulation


@dataclass(eq=False)
class CouplingRun:
    """One trajectory of the coordinate-replacement kernel coupling."""

    trajectory: list
    draws: list
    coupling_time: int
    first_all_drawn: int
    seed: int
    difference_norms: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "coupling_time": self.coupling_time,
            "first_all_drawn": self.first_all_drawn,
            "draws": [[int(j), float(v)] for j, v in self.draws],
            "trajectory": [[list(a), list(b)] for a, b in self.trajectory],
            "difference_norms": self.difference_norms,
        }, sort_keys=True)


def simulate_kernel_coupling(model: MatrixModel, z, zp, max_steps: int,
                             seed: int) -> CouplingRun:
    """Run both chains with the same (J, replacement) driver each step.

    Refreshed coordinates agree from then on, so the chains meet exactly when
    every initially-differing coordinate has been drawn; coupling_time is the
    first such step (0 if the starts agree, -1 if max_steps runs out).
    """
    z = tuple(float(v) for v in z)
    zp = tuple(float(v) for v in zp)
    n = model.dist.n
    rng = _rng(seed)
    a, b = z, zp
    traj = [(a, b)]
    draws = []
    diffs = [_opnorm(model.H(a) - model.H(b))]
    coupling_time = 0 if a == b else -1
    drawn = set()
    first_all = -1
    for step in range(1, max_steps + 1):
        j = int(rng.integers(0, n))
        v = float(model.dist.coords[j].sample(rng))
        a = model.replace(a, j, v)
        b = model.replace(b, j, v)
        draws.append((j, v))
        traj.append((a, b))
        diffs.append(_opnorm(model.H(a) - model.H(b)))
        drawn.add(j)
        if first_all < 0 and len(drawn) == n:
            first_all = step
        if coupling_time < 0 and a == b:
            coupling_time = step
        if coupling_time >= 0 and first_all >= 0:
            break
    return CouplingRun(traj, draws, coupling_time, first_all, int(seed), diffs)


def sample_coupling_times(n: int, runs: int, seed: int,
                          diff_mask=None, max_steps: int = 1_000_000) -> np.ndarray:
    """Coupling times for ``runs`` antipodal (or masked) starts, in bulk.

    The chains meet exactly when the uniform draw stream has covered every
    initially-differing coordinate, so the bulk simulation reduces to
    coverage scans over shared draw arrays (see _accel for the backends).
    """
    if diff_mask is None:
        diff_mask = np.ones(n, dtype=bool)
    return _accel.coverage_times(n, np.asarray(diff_mask, dtype=bool), runs,
                                 seed, max_steps=max_steps)


def coupling_premise_bound(model: MatrixModel) -> dict:
    """The summability premise constant for the coordinate-replacement coupling.

    For this coupling the per-step deviation decays geometrically, and the
    coupon-collector argument gives sum_i ||E[H(Z_(i)) - H(Z'_(i))]|| <=
    2 max||H|| n (1 + log n).  For user-supplied couplings no constructive
    constant is available and the check is reported as skipped.
    """
    if not model.exact:
        return {"checked": False, "reason": "model not enumerable"}
    h = model.max_h_norm()
    n = model.dist.n
    return {"checked": True, "L": 2.0 * h * n * (1.0 + math.log(n))}
