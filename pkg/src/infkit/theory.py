"""Numerical checks of the compression error bounds on the damped inverse Hessian.

For a compression map ``P`` (``r x d``) the error matrix is

    dH = (lam I_d + H)^-1 - P^T (lam I_r + P H P^T)^-1 P

and the checks below compare ``|dH|_2`` with the closed-form upper bounds
for dropout and Gaussian maps.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .compress import CompressionPlan, make_plan
from .errors import SingularInput, SingularIntermediate
from .gradstore import LayerSpec
from .linalg import cho_solve, cholesky, smallest_singular_value, spectral_norm
from .seeding import derive_rng

MAX_DENSE_D = 256
COND_LIMIT = 1e12


def _map_matrix(plan) -> np.ndarray:
    return plan.matrix() if isinstance(plan, CompressionPlan) else np.asarray(plan, dtype=np.float64)


def _spd_inverse(A: np.ndarray) -> np.ndarray:
    return cho_solve(cholesky(A), np.eye(A.shape[0]))


def delta_h(H, lam: float, plan) -> np.ndarray:
    """Explicit ``d x d`` error matrix; ``plan`` is a CompressionPlan or a raw ``r x d`` map."""
    H = np.asarray(H, dtype=np.float64)
    d = H.shape[0]
    if d > MAX_DENSE_D:
        raise ValueError(f"d={d} exceeds the dense limit {MAX_DENSE_D}")
    if lam <= 0:
        raise ValueError("lam must be positive")
    P = _map_matrix(plan)
    if P.shape[1] != d:
        raise ValueError(f"map has {P.shape[1]} columns, H is {d}x{d}")
    full = _spd_inverse(lam * np.eye(d) + H)
    small = _spd_inverse(lam * np.eye(P.shape[0]) + P @ H @ P.T)
    return full - P.T @ small @ P


@dataclass
class DeltaHessianCase:
    d: int
    n: int
    r: int
    H: np.ndarray
    lam: float
    plan: CompressionPlan
    delta_norm: float = float("nan")
    bound_value: float = float("nan")


def make_case(d: int, n: int, r: int, lam: float, method: str, seed: int) -> DeltaHessianCase:
    """Gauss-Newton ``H = G^T G / n`` from ``n`` random gradients of width ``d``."""
    G = derive_rng(seed, "theory/grads").standard_normal((n, d))
    H = G.T @ G / n
    plan = make_plan(method, r, seed, [LayerSpec("theta", d)])
    return DeltaHessianCase(d, n, r, H, lam, plan)


@dataclass
class BoundCheck:
    passed: bool
    actual: float
    bound: float
    margin: float
    stats: dict = field(default_factory=dict)


def check_dropout_bound(case: DeltaHessianCase) -> BoundCheck:
    """``|dH|_2 <= 2/lam + sigma_max(H)/lam^2``."""
    actual = spectral_norm(delta_h(case.H, case.lam, case.plan))
    bound = 2.0 / case.lam + spectral_norm(case.H) / case.lam**2
    case.delta_norm, case.bound_value = actual, bound
    return BoundCheck(bool(actual <= bound), actual, bound, bound - actual)


def check_gaussian_bound(case: DeltaHessianCase) -> BoundCheck:
    """Finite-sample chain with the computed ``sigma_max(P^T P)``.

    Raises SingularIntermediate when ``lam I + P^T P H`` has condition number
    above 1e12; callers skip and count such draws.
    """
    H, lam = case.H, case.lam
    P = _map_matrix(case.plan)
    d = H.shape[0]
    PtP = P.T @ P
    inter = lam * np.eye(d) + PtP @ H
    s_inter = np.linalg.svd(inter, compute_uv=False)
    if s_inter[-1] <= 0 or s_inter[0] / s_inter[-1] > COND_LIMIT:
        raise SingularIntermediate(f"lam I + P^T P H has condition {s_inter[0] / max(s_inter[-1], 1e-300):.3g}")
    ptp = spectral_norm(PtP)
    sig_h = spectral_norm(H)
    bound = (1.0 / smallest_singular_value(lam * np.eye(d) + H)
             + ptp / lam
             + ptp**2 * sig_h / (lam * s_inter[-1]))
    actual = spectral_norm(delta_h(H, lam, P))
    case.delta_norm, case.bound_value = actual, bound
    return BoundCheck(bool(actual <= bound), actual, bound, bound - actual,
                      {"sigma_max_PtP": ptp, "PtP_le_d": bool(ptp <= d)})


def check_woodbury(A, U, V, rtol: float = 1e-8) -> BoundCheck:
    """``(A + UV)^-1 == A^-1 - A^-1 U (I + V A^-1 U)^-1 V A^-1`` in spectral norm."""
    A, U, V = (np.asarray(x, dtype=np.float64) for x in (A, U, V))
    d, k = U.shape
    if A.shape != (d, d) or V.shape != (k, d):
        raise ValueError("expected A d x d, U d x k, V k x d")

    def inv(M, what):
        if np.linalg.cond(M) > COND_LIMIT:
            raise SingularInput(f"{what} is numerically singular")
        return np.linalg.inv(M)

    Ainv = inv(A, "A")
    lhs = inv(A + U @ V, "A + UV")
    rhs = Ainv - Ainv @ U @ inv(np.eye(k) + V @ Ainv @ U, "I + V A^-1 U") @ V @ Ainv
    err = spectral_norm(lhs - rhs)
    tol = rtol * spectral_norm(lhs)
    return BoundCheck(bool(err <= tol), err, tol, tol - err)


def singular_value_convergence_probe(k_list, kappa: float, seed: int = 0, kind: str = "gaussian",
                                     band: float = 0.15) -> list[dict]:
    """Extreme singular values of a ``k x ceil(kappa k)`` matrix, scaled by ``1/sqrt(k)``.

    ``kind="orthogonal"`` samples orthonormal columns times ``sqrt(k)`` instead;
    their ratios sit at 1 whatever ``kappa`` is.
    """
    if not 0 < kappa <= 1:
        raise ValueError("kappa must lie in (0, 1]")
    rows = []
    for k in k_list:
        m = max(1, math.ceil(kappa * k))
        rng = derive_rng(seed, f"probe/{kind}", k)
        X = rng.standard_normal((k, m))
        if kind == "orthogonal":
            X = np.linalg.qr(X)[0] * math.sqrt(k)
        elif kind != "gaussian":
            raise ValueError(f"unknown kind {kind!r}")
        s = np.linalg.svd(X, compute_uv=False)
        hi, lo = float(s[0]) / math.sqrt(k), float(s[-1]) / math.sqrt(k)
        limit_hi, limit_lo = 1 + math.sqrt(kappa), 1 - math.sqrt(kappa)
        checked = kind == "gaussian" and k >= 512
        rows.append({"k": k, "m": m, "kappa": kappa, "kind": kind, "sigma_max_ratio": hi,
                     "sigma_min_ratio": lo, "limit_max": limit_hi, "limit_min": limit_lo,
                     "checked": checked, "passed": bool(abs(hi - limit_hi) <= band) if checked else None})
    return rows


# -- Monte Carlo suite --------------------------------------------------------

@dataclass
class SuiteSummary:
    name: str
    cases: int = 0
    passes: int = 0
    skips: int = 0
    worst_margin: float = float("inf")
    extra: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return self.cases - self.passes - self.skips

    @property
    def ok(self) -> bool:
        return self.failures == 0


def _run_case(args):
    method, d, n, r, lam, seed = args
    case = make_case(d, n, r, lam, method, seed)
    try:
        res = check_dropout_bound(case) if method == "dropout" else check_gaussian_bound(case)
    except SingularIntermediate:
        return None
    return res


def _summarize(name, results) -> SuiteSummary:
    s = SuiteSummary(name, cases=len(results))
    for res in results:
        if res is None:
            s.skips += 1
            continue
        s.passes += bool(res.passed)
        s.worst_margin = min(s.worst_margin, res.margin)
    stat = [r.stats["PtP_le_d"] for r in results if r is not None and "PtP_le_d" in r.stats]
    if stat:
        s.extra["PtP_le_d_fraction"] = float(np.mean(stat))
        s.extra["sigma_max_PtP_max"] = max(r.stats["sigma_max_PtP"] for r in results if r is not None)
    return s


@dataclass
class TheoryReport:
    params: dict
    dropout: SuiteSummary
    gaussian: SuiteSummary
    woodbury: SuiteSummary
    probe: list

    @property
    def ok(self) -> bool:
        probe_ok = all(row["passed"] for row in self.probe if row["checked"])
        return self.dropout.ok and self.gaussian.ok and self.woodbury.ok and probe_ok

    def to_json(self) -> str:
        doc = {"params": self.params, "ok": self.ok,
               "suites": {s.name: {**asdict(s), "failures": s.failures}
                          for s in (self.dropout, self.gaussian, self.woodbury)},
               "probe": self.probe}
        return json.dumps(doc, indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"theory check: {'OK' if self.ok else 'FAILED'}  ({self.params})"]
        for s in (self.dropout, self.gaussian, self.woodbury):
            lines.append(f"  {s.name:9s} cases={s.cases} passes={s.passes} skips={s.skips} "
                         f"failures={s.failures} worst_margin={s.worst_margin:.6g}")
            for k, v in s.extra.items():
                lines.append(f"    {k} = {v:.6g}")
        for row in self.probe:
            lines.append(f"  probe k={row['k']} kappa={row['kappa']:g} sigma_max/sqrt(k)={row['sigma_max_ratio']:.4f} "
                         f"(limit {row['limit_max']:.4f}) sigma_min/sqrt(k)={row['sigma_min_ratio']:.4f} "
                         f"(limit {row['limit_min']:.4f})")
        return "\n".join(lines)


def _woodbury_case(seed: int, d: int = 16, k: int = 4) -> BoundCheck | None:
    rng = derive_rng(seed, "theory/woodbury")
    A = rng.standard_normal((d, d)) + d * np.eye(d)
    try:
        return check_woodbury(A, rng.standard_normal((d, k)), rng.standard_normal((k, d)))
    except SingularInput:
        return None


def run_suite(cases: int = 100, d: int = 64, n: int = 16, r: int = 8, lam: float = 0.1, seed: int = 0,
              workers: int = 1, probe_k=(64, 256, 1024), kappa: float = 1.0) -> TheoryReport:
    jobs = {m: [(m, d, n, r, lam, seed * 1_000_003 + i) for i in range(cases)] for m in ("dropout", "gaussian")}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = {m: list(pool.map(_run_case, j)) for m, j in jobs.items()}
    else:
        out = {m: [_run_case(a) for a in j] for m, j in jobs.items()}
    wood = [_woodbury_case(seed * 1_000_003 + i) for i in range(cases)]
    params = {"cases": cases, "d": d, "n": n, "r": r, "lam": lam, "seed": seed}
    return TheoryReport(params, _summarize("dropout", out["dropout"]), _summarize("gaussian", out["gaussian"]),
                        _summarize("woodbury", wood), singular_value_convergence_probe(probe_k, kappa, seed))
