"""Exact-enumeration theorem checks, trace-inequality fuzzing, tail harness.

Fuzz suites report the most negative normalized slack (RHS - LHS divided by
max(1, |RHS| + |LHS|)) over all trials together with a serialized worst case
that can be replayed bit-exactly.  Exact checks enumerate the product space
and compare both sides of the target inequality at tolerance 1e-10.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bounds, stein
from .matcore import (
    HermitianMatrix,
    ParameterError,
    RectMatrix,
    SuperOperator,
    _opnorm,
    expm,
    left_mult_op,
    matrix_function,
    ntrace,
    right_mult_op,
    schatten_norm,
    superop_abs,
    superop_function,
)

FUZZ_TOL = 1e-9
EXACT_TOL = 1e-10
SCHEMA_VERSION = 1

# geometric grid for inf-over-s bounds; any grid gives a valid weaker check
DEFAULT_S_GRID = tuple(float(2.0 ** k) for k in np.linspace(-10.0, 10.0, 41))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _as_dims(d_range) -> list:
    if isinstance(d_range, (int, np.integer)):
        return [int(d_range)]
    out = [int(d) for d in d_range]
    if not out:
        raise ParameterError("empty dimension range")
    return out


def _norm_slack(lhs: float, rhs: float) -> float:
    return (rhs - lhs) / max(1.0, abs(rhs) + abs(lhs))


# ---------------------------------------------------------------------------
# random ensembles

# Naive Gaussian triples rarely land near the tightness region of a trace
# inequality, so a fixed share of trials comes from adversarial families.
_KINDS = ("gaussian", "near_commuting", "rank1", "gapped")
_SPLIT = (0.7, 0.1, 0.1, 0.1)


def _pick_kind(rng) -> str:
    u = rng.random()
    acc = 0.0
    for kind, w in zip(_KINDS, _SPLIT):
        acc += w
        if u < acc:
            return kind
    return _KINDS[-1]


def _gauss_herm(rng, d):
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return (g + g.conj().T) / 2


def _rank1_herm(rng, d):
    v = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    scale = rng.standard_normal()
    return scale * np.outer(v, v.conj())


def _haar_basis(rng, d):
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diagonal(r))


def _gapped_herm(rng, d):
    u = _haar_basis(rng, d)
    lo = rng.standard_normal(d // 2) * 0.1 - 4.0
    hi = rng.standard_normal(d - d // 2) * 0.1 + 4.0
    w = np.concatenate([lo, hi])
    return (u * w) @ u.conj().T


def _draw_triple(rng, d):
    """(A, B, C, kind) from the mixed ensemble."""
    kind = _pick_kind(rng)
    if kind == "gaussian":
        return _gauss_herm(rng, d), _gauss_herm(rng, d), _gauss_herm(rng, d), kind
    if kind == "near_commuting":
        u = _haar_basis(rng, d)
        a = (u * rng.standard_normal(d)) @ u.conj().T
        b = (u * rng.standard_normal(d)) @ u.conj().T + 1e-3 * _gauss_herm(rng, d)
        return a, b, _gauss_herm(rng, d), kind
    if kind == "rank1":
        return _rank1_herm(rng, d), _rank1_herm(rng, d), _rank1_herm(rng, d), kind
    return _gapped_herm(rng, d), _gapped_herm(rng, d), _gauss_herm(rng, d), kind


# ---------------------------------------------------------------------------
# fuzz reports


@dataclass(eq=False)
class FuzzReport:
    """Outcome of one fuzz sweep; pass means min_slack >= -tolerance."""

    inequality: str
    trials: int
    dims: list
    min_slack: float
    worst_case: dict
    passed: bool
    tolerance: float = FUZZ_TOL
    min_slack_by_dim: dict = field(default_factory=dict)
    near_misses: list = field(default_factory=list)
    sections: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "inequality": self.inequality,
            "trials": self.trials,
            "dims": list(self.dims),
            "min_slack": self.min_slack,
            "min_slack_by_dim": {str(k): v for k, v in self.min_slack_by_dim.items()},
            "worst_case": self.worst_case,
            "near_misses": self.near_misses,
            "pass": self.passed,
            "tolerance": self.tolerance,
        }
        if self.sections:
            out["sections"] = self.sections
        return out


def _herm_json(a) -> dict:
    return HermitianMatrix(a).to_json()


def _rect_json(a) -> dict:
    return RectMatrix(a).to_json()


class _WorstTracker:
    """Keeps the global minimum slack and the few worst serialized cases."""

    def __init__(self, keep: int = 5):
        self.min_slack = math.inf
        self.by_dim: dict = {}
        self.cases: list = []
        self.keep = keep

    def offer(self, slack: float, d: int, case_fn) -> None:
        prev = self.by_dim.get(d, math.inf)
        if slack < prev:
            self.by_dim[d] = slack
        if slack < self.min_slack:
            self.min_slack = slack
        if len(self.cases) < self.keep or slack < self.cases[-1][0]:
            case = case_fn()
            case["slack"] = slack
            self.cases.append((slack, case))
            self.cases.sort(key=lambda t: t[0])
            del self.cases[self.keep:]

    def report(self, inequality: str, trials: int, dims: list,
               tolerance: float = FUZZ_TOL) -> FuzzReport:
        worst = self.cases[0][1] if self.cases else {}
        return FuzzReport(
            inequality=inequality,
            trials=trials,
            dims=dims,
            min_slack=self.min_slack if self.cases else math.inf,
            worst_case=worst,
            passed=bool(self.min_slack >= -tolerance),
            tolerance=tolerance,
            min_slack_by_dim=dict(sorted(self.by_dim.items())),
            near_misses=[c for _, c in self.cases[1:]],
        )


# ---------------------------------------------------------------------------
# single-case evaluators (shared by the fuzz loops and replay)


def eval_pmvti(A, B, C, q: int, s: float) -> tuple:
    """|tr[C (A^q - B^q)]| vs (q/4) tr[(s(A-B)^2 + C^2/s)(|A|^{q-1} + |B|^{q-1})]."""
    Aq = matrix_function(A, lambda w: w ** q).a
    Bq = matrix_function(B, lambda w: w ** q).a
    absA = matrix_function(A, lambda w: np.abs(w) ** (q - 1)).a
    absB = matrix_function(B, lambda w: np.abs(w) ** (q - 1)).a
    D = np.asarray(A, dtype=np.complex128) - np.asarray(B)
    C = np.asarray(C, dtype=np.complex128)
    lhs = abs(np.trace(C @ (Aq - Bq)).real)
    inner = s * (D @ D) + (C @ C) / s
    rhs = (q / 4.0) * np.trace(inner @ (absA + absB)).real
    return lhs, rhs


def eval_emvti(A, B, C, s: float) -> tuple:
    """|tr-bar[C (e^A - e^B)]| vs (1/4) tr-bar[(s(A-B)^2 + C^2/s)(e^A + e^B)]."""
    eA = expm(A).a
    eB = expm(B).a
    D = np.asarray(A, dtype=np.complex128) - np.asarray(B)
    C = np.asarray(C, dtype=np.complex128)
    lhs = abs(ntrace(C @ (eA - eB)))
    inner = s * (D @ D) + (C @ C) / s
    rhs = 0.25 * ntrace(inner @ (eA + eB))
    return lhs, rhs


def eval_young_commuting(A, B, p: float) -> tuple:
    """Normalized lambda_min slack of (1/p)|LA|^p + (1/q)|RB|^q - LA RB >= 0.

    LA, RB are the commuting left/right multiplication operators on d x d
    matrices, handled as d^2 x d^2 Hermitian matrices.
    """
    if not 1.0 < p < math.inf:
        raise ParameterError(f"p must lie in (1, inf), got {p}")
    q = p / (p - 1.0)
    la = left_mult_op(A)
    rb = right_mult_op(np.asarray(B, dtype=np.complex128))
    prod = la.compose(rb).mat
    rhs = (superop_function(la, lambda w: np.abs(w) ** p).mat / p
           + superop_function(rb, lambda w: np.abs(w) ** q).mat / q)
    gap = float(np.linalg.eigvalsh(rhs - prod)[0])
    scale = max(1.0, _opnorm(prod) + _opnorm(rhs))
    return gap, scale


def eval_operator_cs(S, M, N) -> tuple:
    """|<M, S(N)>| vs sqrt(<M,|S|M> <N,|S|N>) for self-adjoint S."""
    op = S if isinstance(S, SuperOperator) else SuperOperator(S)
    if not op.self_adjoint:
        raise ParameterError("operator must be self-adjoint")
    ab = superop_abs(op)
    m = np.asarray(M, dtype=np.complex128)
    n = np.asarray(N, dtype=np.complex128)
    lhs = abs(np.trace(m.conj().T @ op.apply(n)))
    qm = np.trace(m.conj().T @ ab.apply(m)).real
    qn = np.trace(n.conj().T @ ab.apply(n)).real
    rhs = math.sqrt(max(qm, 0.0) * max(qn, 0.0))
    return lhs, rhs


def _xlogx(w):
    out = np.zeros_like(w, dtype=float)
    mask = w > 0
    out[mask] = w[mask] * np.log(w[mask])
    return out


def eval_matrix_entropy_young(Us, Ws) -> tuple:
    """E tr-bar(UW) vs log E tr-bar e^U + E tr-bar[W log W] on a finite ensemble.

    The (U, W) atoms are equally weighted; W must be PSD with E tr-bar W = 1.
    """
    if len(Us) != len(Ws) or not Us:
        raise ParameterError("need equally many U and W atoms")
    lhs = 0.0
    mgf = 0.0
    ent = 0.0
    for U, W in zip(Us, Ws):
        U = np.asarray(U, dtype=np.complex128)
        W = np.asarray(W, dtype=np.complex128)
        lhs += ntrace(U @ W)
        mgf += ntrace(expm(U))
        ent += ntrace(matrix_function(W, _xlogx))
    k = len(Us)
    return lhs / k, math.log(mgf / k) + ent / k


def eval_conjecture(A, B, C, q: int, s: float) -> dict:
    """Signed one-sided forms: exponential and degree-q polynomial slacks.

    One eigendecomposition per matrix; the sweep calls this in a tight loop.
    """
    A = np.asarray(A, dtype=np.complex128)
    B = np.asarray(B, dtype=np.complex128)
    C = np.asarray(C, dtype=np.complex128)
    wA, uA = np.linalg.eigh(A)
    wB, uB = np.linalg.eigh(B)
    wD, uD = np.linalg.eigh(A - B)
    wC, uC = np.linalg.eigh(C)

    def apply(w, u, vals):
        return (u * vals) @ u.conj().T

    plus = (s * apply(wD, uD, np.maximum(wD, 0.0) ** 2)
            + apply(wC, uC, np.maximum(wC, 0.0) ** 2) / s)
    minus = (s * apply(wD, uD, np.maximum(-wD, 0.0) ** 2)
             + apply(wC, uC, np.maximum(-wC, 0.0) ** 2) / s)

    eA = apply(wA, uA, np.exp(wA))
    eB = apply(wB, uB, np.exp(wB))
    lhs_e = np.trace(C @ (eA - eB)).real
    rhs_e = 0.5 * np.trace(plus @ eA + minus @ eB).real

    Aq = apply(wA, uA, wA ** q)
    Bq = apply(wB, uB, wB ** q)
    absA = apply(wA, uA, np.abs(wA) ** (q - 1))
    absB = apply(wB, uB, np.abs(wB) ** (q - 1))
    lhs_p = np.trace(C @ (Aq - Bq)).real
    rhs_p = (q / 2.0) * np.trace(plus @ absA + minus @ absB).real
    return {
        "exp": (lhs_e, rhs_e),
        "poly": (lhs_p, rhs_p),
    }


# ---------------------------------------------------------------------------
# fuzz suites


def fuzz_pmvti(d_range, q_range, s_values, trials: int, seed: int) -> FuzzReport:
    """Degree-q polynomial mean value trace inequality over random triples."""
    dims = _as_dims(d_range)
    qs = [int(q) for q in (q_range if not isinstance(q_range, int) else [q_range])]
    if any(q < 1 for q in qs):
        raise ParameterError("q must be a positive integer")
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = _rng(seed)
    tracker = _WorstTracker()
    for _ in range(trials):
        d = dims[int(rng.integers(0, len(dims)))]
        q = qs[int(rng.integers(0, len(qs)))]
        A, B, C, kind = _draw_triple(rng, d)
        for s in s_values:
            lhs, rhs = eval_pmvti(A, B, C, q, float(s))
            slack = _norm_slack(lhs, rhs)
            tracker.offer(slack, d, lambda A=A, B=B, C=C, q=q, s=s, kind=kind: {
                "ineq": "pmvti", "kind": kind, "q": q, "s": float(s),
                "A": _herm_json(A), "B": _herm_json(B), "C": _herm_json(C),
            })
    return tracker.report("pmvti", trials, dims)


def fuzz_emvti(d_range, s_values, trials: int, seed: int) -> FuzzReport:
    """Exponential mean value trace inequality over random triples."""
    dims = _as_dims(d_range)
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = _rng(seed)
    tracker = _WorstTracker()
    for _ in range(trials):
        d = dims[int(rng.integers(0, len(dims)))]
        A, B, C, kind = _draw_triple(rng, d)
        for s in s_values:
            lhs, rhs = eval_emvti(A, B, C, float(s))
            slack = _norm_slack(lhs, rhs)
            tracker.offer(slack, d, lambda A=A, B=B, C=C, s=s, kind=kind: {
                "ineq": "emvti", "kind": kind, "s": float(s),
                "A": _herm_json(A), "B": _herm_json(B), "C": _herm_json(C),
            })
    return tracker.report("emvti", trials, dims)


def fuzz_young_commuting(d_range, p: float, trials: int, seed: int) -> FuzzReport:
    """Operator Young inequality for commuting left/right multiplications."""
    dims = _as_dims(d_range)
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = _rng(seed)
    tracker = _WorstTracker()
    for _ in range(trials):
        d = dims[int(rng.integers(0, len(dims)))]
        A, B, _, kind = _draw_triple(rng, d)
        gap, scale = eval_young_commuting(A, B, p)
        slack = gap / scale
        tracker.offer(slack, d, lambda A=A, B=B, kind=kind: {
            "ineq": "young_commuting", "kind": kind, "p": float(p),
            "A": _herm_json(A), "B": _herm_json(B),
        })
    return tracker.report(f"young_commuting(p={p})", trials, dims)


def fuzz_operator_cs(d_range, trials: int, seed: int) -> FuzzReport:
    """Cauchy-Schwarz for a self-adjoint operator on matrices."""
    dims = _as_dims(d_range)
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = _rng(seed)
    tracker = _WorstTracker()
    for _ in range(trials):
        d = dims[int(rng.integers(0, len(dims)))]
        raw = rng.standard_normal((d * d, d * d)) + 1j * rng.standard_normal((d * d, d * d))
        S = SuperOperator((raw + raw.conj().T) / 2)
        if rng.random() < 0.1:
            # rank-1 arguments probe the equality direction
            M = _rank1_herm(rng, d)
            N = _rank1_herm(rng, d)
        else:
            M = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
            N = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        lhs, rhs = eval_operator_cs(S, M, N)
        slack = _norm_slack(lhs, rhs)
        tracker.offer(slack, d, lambda S=S, M=M, N=N: {
            "ineq": "operator_cs",
            "S": _rect_json(S.mat), "M": _rect_json(M), "N": _rect_json(N),
        })
    return tracker.report("operator_cs", trials, dims)


def fuzz_matrix_entropy_young(d_range, ensemble_size: int, trials: int,
                              seed: int) -> FuzzReport:
    """Duality bound for matrix entropy on finite equally-weighted ensembles."""
    dims = _as_dims(d_range)
    if ensemble_size < 1:
        raise ParameterError(f"ensemble_size must be >= 1, got {ensemble_size}")
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = _rng(seed)
    tracker = _WorstTracker()
    for _ in range(trials):
        d = dims[int(rng.integers(0, len(dims)))]
        Us = [_gauss_herm(rng, d) for _ in range(ensemble_size)]
        raws = []
        for _ in range(ensemble_size):
            g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
            raws.append(g @ g.conj().T)
        # normalize so the ensemble mean of tr-bar W is exactly 1
        total = sum(ntrace(r).real for r in raws) / ensemble_size
        Ws = [r / total for r in raws]
        lhs, rhs = eval_matrix_entropy_young(Us, Ws)
        slack = _norm_slack(lhs, rhs)
        tracker.offer(slack, d, lambda Us=Us, Ws=Ws: {
            "ineq": "matrix_entropy_young",
            "U": [_herm_json(u) for u in Us],
            "W": [_herm_json(w) for w in Ws],
        })
    return tracker.report("matrix_entropy_young", trials, dims)


def explore_conjecture(d_range, q_range, s_values, trials: int, seed: int) -> FuzzReport:
    """Sweep the signed trace-inequality forms; reports, never raises.

    Both one-sided forms are evaluated on every triple and tracked
    separately, because they behave differently already in the scalar case:
    the exponential form holds there (a case split over sign(a - b) and
    sign(c) reduces it to Young's inequality against e^{max(a,b)}), while
    the polynomial form fails outright, e.g. d=1, q=2, s=1 with
    a=0, b=-2, c=-1 gives lhs 4 > rhs 2.  The report therefore carries a
    per-form section next to the pooled summary, and the pooled pass flag
    is advisory only.
    """
    dims = _as_dims(d_range)
    qs = [int(q) for q in (q_range if not isinstance(q_range, int) else [q_range])]
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = _rng(seed)
    trackers = {form: _WorstTracker(keep=4) for form in ("exp", "poly")}
    for _ in range(trials):
        d = dims[int(rng.integers(0, len(dims)))]
        q = qs[int(rng.integers(0, len(qs)))]
        A, B, C, kind = _draw_triple(rng, d)
        for s in s_values:
            both = eval_conjecture(A, B, C, q, float(s))
            for form, (lhs, rhs) in both.items():
                slack = _norm_slack(lhs, rhs)
                trackers[form].offer(slack, d, lambda A=A, B=B, C=C, q=q, s=s,
                                     kind=kind, form=form: {
                    "ineq": f"conjecture_{form}", "kind": kind, "q": q,
                    "s": float(s),
                    "A": _herm_json(A), "B": _herm_json(B), "C": _herm_json(C),
                })
    per_form = {form: t.report(f"conjecture_{form}", trials, dims)
                for form, t in trackers.items()}
    return _pool_conjecture(per_form, trials, dims)


def _pool_conjecture(per_form: dict, trials: int, dims: list) -> FuzzReport:
    cases = []
    by_dim: dict = {}
    sections = {}
    for form, r in sorted(per_form.items()):
        if r.worst_case:
            cases.append((r.worst_case["slack"], r.worst_case))
        cases.extend((c["slack"], c) for c in r.near_misses)
        for d, s in r.min_slack_by_dim.items():
            by_dim[d] = min(by_dim.get(d, math.inf), s)
        sections[form] = {
            "min_slack": r.min_slack,
            "min_slack_by_dim": {str(k): v for k, v in r.min_slack_by_dim.items()},
            "worst_case": r.worst_case,
            "pass": r.passed,
        }
    cases.sort(key=lambda t: t[0])
    del cases[8:]
    min_slack = cases[0][0] if cases else math.inf
    return FuzzReport(
        inequality="signed_mvti_conjecture",
        trials=trials,
        dims=dims,
        min_slack=min_slack,
        worst_case=cases[0][1] if cases else {},
        passed=bool(min_slack >= -FUZZ_TOL),
        min_slack_by_dim=dict(sorted(by_dim.items())),
        near_misses=[c for _, c in cases[1:]],
        sections=sections,
    )


def merge_fuzz_reports(reports) -> FuzzReport:
    """Combine chunked sweeps of the same inequality, in list order."""
    reports = list(reports)
    if not reports:
        raise ParameterError("nothing to merge")
    name = reports[0].inequality
    tol = reports[0].tolerance
    if any(r.inequality != name or r.tolerance != tol for r in reports):
        raise ParameterError("cannot merge reports of different suites")
    cases = []
    by_dim: dict = {}
    sections: dict = {}
    for r in reports:
        if r.worst_case:
            cases.append((r.worst_case["slack"], r.worst_case))
        for c in r.near_misses:
            cases.append((c["slack"], c))
        for d, s in r.min_slack_by_dim.items():
            d = int(d)
            by_dim[d] = min(by_dim.get(d, math.inf), s)
        for form, sec in r.sections.items():
            cur = sections.get(form)
            if cur is None:
                sections[form] = dict(sec)
                continue
            merged = {int(k): v for k, v in cur["min_slack_by_dim"].items()}
            for k, v in sec["min_slack_by_dim"].items():
                k = int(k)
                merged[k] = min(merged.get(k, math.inf), v)
            cur["min_slack_by_dim"] = {str(k): v for k, v in sorted(merged.items())}
            if sec["min_slack"] < cur["min_slack"]:
                cur["min_slack"] = sec["min_slack"]
                cur["worst_case"] = sec["worst_case"]
            cur["pass"] = bool(cur["pass"] and sec["pass"])
    cases.sort(key=lambda t: t[0])
    del cases[5:]
    min_slack = cases[0][0] if cases else math.inf
    dims = sorted({int(d) for r in reports for d in r.dims})
    return FuzzReport(
        inequality=name,
        trials=sum(r.trials for r in reports),
        dims=dims,
        min_slack=min_slack,
        worst_case=cases[0][1] if cases else {},
        passed=bool(min_slack >= -tol),
        tolerance=tol,
        min_slack_by_dim=dict(sorted(by_dim.items())),
        near_misses=[c for _, c in cases[1:]],
        sections=sections,
    )


def replay_case(case: dict) -> dict:
    """Re-evaluate one serialized worst case; returns lhs/rhs/slack."""
    ineq = case.get("ineq")
    if ineq == "pmvti":
        A = HermitianMatrix.from_json(case["A"]).a
        B = HermitianMatrix.from_json(case["B"]).a
        C = HermitianMatrix.from_json(case["C"]).a
        lhs, rhs = eval_pmvti(A, B, C, int(case["q"]), float(case["s"]))
    elif ineq == "emvti":
        A = HermitianMatrix.from_json(case["A"]).a
        B = HermitianMatrix.from_json(case["B"]).a
        C = HermitianMatrix.from_json(case["C"]).a
        lhs, rhs = eval_emvti(A, B, C, float(case["s"]))
    elif ineq == "young_commuting":
        A = HermitianMatrix.from_json(case["A"]).a
        B = HermitianMatrix.from_json(case["B"]).a
        lhs, rhs = eval_young_commuting(A, B, float(case["p"]))
        return {"ineq": ineq, "lambda_min_gap": lhs, "scale": rhs,
                "slack": lhs / rhs}
    elif ineq == "operator_cs":
        S = RectMatrix.from_json(case["S"]).a
        M = RectMatrix.from_json(case["M"]).a
        N = RectMatrix.from_json(case["N"]).a
        lhs, rhs = eval_operator_cs(S, M, N)
    elif ineq == "matrix_entropy_young":
        Us = [HermitianMatrix.from_json(u).a for u in case["U"]]
        Ws = [HermitianMatrix.from_json(w).a for w in case["W"]]
        lhs, rhs = eval_matrix_entropy_young(Us, Ws)
    elif ineq in ("conjecture_exp", "conjecture_poly"):
        A = HermitianMatrix.from_json(case["A"]).a
        B = HermitianMatrix.from_json(case["B"]).a
        C = HermitianMatrix.from_json(case["C"]).a
        both = eval_conjecture(A, B, C, int(case["q"]), float(case["s"]))
        lhs, rhs = both["exp"] if ineq.endswith("exp") else both["poly"]
    else:
        raise ParameterError(f"unknown inequality {ineq!r}")
    return {"ineq": ineq, "lhs": lhs, "rhs": rhs, "slack": _norm_slack(lhs, rhs)}


# ---------------------------------------------------------------------------
# exact theorem checks on finite models


def _exact_x_moment(model: stein.MatrixModel, order: int) -> float:
    """E ||X||_order^order by product-space sweep."""
    acc = 0.0
    for z, pr in model.dist.outcomes():
        acc += pr * schatten_norm(model.X(z), order) ** order
    return acc


def verify_poly_efron_stein(model: stein.MatrixModel, p_list,
                            tol: float = EXACT_TOL) -> dict:
    """(E ||X||_{2p}^{2p})^{1/2p} vs sqrt(2(2p-1)) (E ||V||_p^p)^{1/2p}, exactly."""
    if not model.exact:
        raise ParameterError("model is too large to enumerate")
    vmap = {z: stein.variance_proxy(model, z) for z, _ in model.dist.outcomes()}
    results = []
    for p in p_list:
        p = int(p)
        lhs = _exact_x_moment(model, 2 * p) ** (1.0 / (2 * p))
        v_mom = sum(pr * schatten_norm(vmap[z].a, p) ** p
                    for z, pr in model.dist.outcomes())
        rhs = bounds.efron_stein_poly_rhs(p, v_mom)
        slack = rhs - lhs
        results.append({"p": p, "lhs": lhs, "rhs": rhs, "slack": slack,
                        "pass": bool(slack >= -tol)})
    return {
        "schema_version": SCHEMA_VERSION,
        "check": "poly_efron_stein",
        "model": model.name,
        "tolerance": tol,
        "results": results,
        "pass": all(r["pass"] for r in results),
    }


def _log_trace_mgf(model: stein.MatrixModel, matrices: dict, scale: float) -> float:
    """log E tr-bar e^{scale * M(z)} over the finite model."""
    acc = 0.0
    for z, pr in model.dist.outcomes():
        acc += pr * ntrace(expm(scale * matrices[z]))
    return math.log(acc)


def verify_exp_efron_stein(model: stein.MatrixModel, theta_grid, psi_grid,
                           tol: float = EXACT_TOL) -> dict:
    """Exponential moment domination on the admissible (theta, psi) pairs."""
    if not model.exact:
        raise ParameterError("model is too large to enumerate")
    xs = {z: model.X(z) for z, _ in model.dist.outcomes()}
    vs = {z: stein.variance_proxy(model, z).a for z, _ in model.dist.outcomes()}
    results = []
    skipped = []
    for psi in psi_grid:
        psi = float(psi)
        log_mgf_v = _log_trace_mgf(model, vs, psi)
        for theta in theta_grid:
            theta = float(theta)
            if abs(theta) > math.sqrt(psi / 2.0):
                skipped.append({"theta": theta, "psi": psi})
                continue
            lhs = _log_trace_mgf(model, xs, theta)
            rhs = bounds.efron_stein_exp_rhs(theta, psi, log_mgf_v)
            slack = rhs - lhs
            results.append({"theta": theta, "psi": psi, "lhs": lhs, "rhs": rhs,
                            "slack": slack, "pass": bool(slack >= -tol)})
    return {
        "schema_version": SCHEMA_VERSION,
        "check": "exp_efron_stein",
        "model": model.name,
        "tolerance": tol,
        "results": results,
        "skipped": skipped,
        "pass": all(r["pass"] for r in results),
    }


def verify_kernel_poly_moments(model: stein.MatrixModel, kernel, p_list, s_grid,
                               tol: float = EXACT_TOL) -> dict:
    """Moment bound through the kernel conditional variances, for each (p, s).

    With an estimated kernel the true V^K is only known up to the per-pair
    standard-error plus truncation budget; the check inflates V^K by that
    radius times the identity, which weakens the bound but keeps it valid.
    """
    if not model.exact:
        raise ParameterError("model is too large to enumerate")
    pair = stein.make_exchangeable_pair(model, seed=0)
    cv = stein.conditional_variance_map(model, pair, kernel)
    inflation = 0.0
    if isinstance(kernel, stein.EstimatedKernel):
        n = model.dist.n
        for z, _ in model.dist.outcomes():
            acc = 0.0
            for j, coord in enumerate(model.dist.coords):
                for v, pj in zip(coord.values, coord.probs):
                    zp = model.replace(z, j, float(v))
                    r = kernel.radius(z, zp)
                    knorm = _opnorm(np.asarray(kernel.at(z, zp)))
                    acc += (pj / n) * (2.0 * knorm * r + r * r) / 2.0
            inflation = max(inflation, acc)
    eye = np.eye(model.d)
    results = []
    for p in p_list:
        p = int(p)
        lhs = _exact_x_moment(model, 2 * p) ** (1.0 / (2 * p))
        per_s = []
        for s in s_grid:
            s = float(s)
            v_mom = 0.0
            for z, pr in model.dist.outcomes():
                m = 0.5 * (s * cv[z].v_x.a + (cv[z].v_k.a + inflation * eye) / s)
                v_mom += pr * schatten_norm(m, p) ** p
            rhs = math.sqrt(2 * p - 1) * v_mom ** (1.0 / (2 * p))
            per_s.append({"s": s, "rhs": rhs, "slack": rhs - lhs,
                          "pass": bool(rhs - lhs >= -tol)})
        best = min(per_s, key=lambda r: r["rhs"])
        results.append({"p": p, "lhs": lhs, "best_rhs": best["rhs"],
                        "best_s": best["s"], "grid": per_s,
                        "pass": all(r["pass"] for r in per_s)})
    return {
        "schema_version": SCHEMA_VERSION,
        "check": "kernel_poly_moments",
        "model": model.name,
        "tolerance": tol,
        "kernel_inflation": inflation,
        "results": results,
        "pass": all(r["pass"] for r in results),
    }


def variance_domination(model: stein.MatrixModel, kernel, tol: float = 1e-9) -> dict:
    """Var[X] vs (1/2) E[V_X + V^K] in the semidefinite order."""
    if not model.exact:
        raise ParameterError("model is too large to enumerate")
    pair = stein.make_exchangeable_pair(model, seed=0)
    cv = stein.conditional_variance_map(model, pair, kernel)
    var = np.zeros((model.d, model.d), dtype=np.complex128)
    half = np.zeros_like(var)
    for z, pr in model.dist.outcomes():
        x = model.X(z)
        var += pr * (x @ x)
        half += pr * 0.5 * (cv[z].v_x.a + cv[z].v_k.a)
    gap = float(np.linalg.eigvalsh(half - var)[0])
    return {"lambda_min_gap": gap, "pass": bool(gap >= -tol)}


# ---------------------------------------------------------------------------
# empirical tails


def dkw_radius(samples: int, alpha: float) -> float:
    """Two-sided uniform band half-width sqrt(log(2/alpha) / (2N))."""
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * samples))


@dataclass(eq=False)
class TailComparison:
    """Empirical survival curve with its uniform band, vs an optional bound."""

    statistic: str
    t_grid: np.ndarray
    survival: np.ndarray
    radius: float
    alpha: float
    samples: int
    seed: int
    bound_name: str | None = None
    bound_values: np.ndarray | None = None
    violations: list = field(default_factory=list)

    @property
    def dominated(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "statistic": self.statistic,
            "t_grid": [float(t) for t in self.t_grid],
            "survival": [float(v) for v in self.survival],
            "dkw_radius": self.radius,
            "alpha": self.alpha,
            "samples": self.samples,
            "seed": self.seed,
            "violations": [float(t) for t in self.violations],
        }
        if self.bound_name is not None:
            out["bound"] = self.bound_name
            out["bound_values"] = [float(v) for v in self.bound_values]
        return out


def sample_statistics(model, samples: int, seed: int, statistic: str) -> np.ndarray:
    """Per-sample lambda_max or operator norm of the centered matrix."""
    if isinstance(model, stein.RectangularModel):
        rng = _rng(seed)
        zs = model.dist.sample_many(rng, samples)
        mean = model.mean()
        vals = np.empty(samples)
        for i in range(samples):
            x = model.H(tuple(zs[i])) - mean
            vals[i] = np.linalg.svd(x, compute_uv=False)[0]
        return vals
    xs = model.sample_X(samples, seed)
    eigs = np.linalg.eigvalsh(xs)
    if statistic == "lmax":
        return eigs[:, -1]
    if statistic == "opnorm":
        return np.maximum(eigs[:, -1], -eigs[:, 0])
    raise ParameterError(f"unknown statistic {statistic!r}")


def empirical_tail(model, samples: int, t_grid, seed: int, curve=None,
                   alpha: float = 0.01, statistic: str = "lmax") -> TailComparison:
    """Empirical survival of the chosen statistic, with a DKW band.

    When a BoundCurve is supplied, flags every grid point where the raw bound
    plus the band half-width fails to dominate the empirical survival.
    """
    if samples < 100:
        raise ParameterError(f"need at least 100 samples, got {samples}")
    t_grid = np.asarray(t_grid, dtype=float)
    vals = np.sort(sample_statistics(model, samples, seed, statistic))
    surv = (samples - np.searchsorted(vals, t_grid, side="left")) / samples
    radius = dkw_radius(samples, alpha)
    out = TailComparison(statistic, t_grid, surv, radius, alpha, samples, int(seed))
    if curve is not None:
        bound_vals = np.array([curve.raw(float(t)) for t in t_grid])
        out.bound_name = curve.name
        out.bound_values = bound_vals
        out.violations = [float(t) for t, b, s in zip(t_grid, bound_vals, surv)
                          if b + radius < s]
    return out
