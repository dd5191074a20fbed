"""Influence scores over per-example gradients.

Every engine scores training example ``k`` against a query gradient ``v``
(by default the mean validation gradient) as ``-v^T (H + lam I)^{-1} g_k``
or an approximation of it, where ``H = (1/n) sum_i g_i g_i^T`` is the
Gauss-Newton Hessian of the training gradients. By default the Hessian is
block-diagonal over layers, each block with its own damping.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .compress import METHODS as COMPRESSORS, CompressedDataset, compress_dataset, make_plan
from .errors import AllZeroGradients, InfeasibleDense, NotSPD, PlanMismatch
from .gradstore import GradientDataset, build_query, split_blocks

ENGINES = ("orig", "compressed", "lissa", "datainf", "hessian_free")
METHODS = ("orig", "lissa", "datainf", "hessian_free") + COMPRESSORS
DENSE_LIMIT = 4096
DEFAULT_DAMPING_FACTOR = 0.1
LISSA_SAFETY = 1e-6


@dataclass(frozen=True)
class DampingConfig:
    """Per-layer damping.

    ``paper_rule`` sets ``lam_l = 0.1 * sum_i |g_i^(l)|^2 / (n d_l)`` on the
    gradient space the engine consumes; ``fixed`` uses one positive value for
    every layer; ``per_layer_explicit`` takes ``values`` verbatim (zero is
    allowed, invertibility is then the caller's problem).
    """

    policy: str = "paper_rule"
    value: float | None = None
    values: tuple | None = None

    def __post_init__(self):
        if self.policy == "fixed" and not (self.value is not None and self.value > 0):
            raise ValueError("fixed damping needs a positive value")
        if self.policy == "per_layer_explicit" and (self.values is None or min(self.values) < 0):
            raise ValueError("per_layer_explicit damping needs non-negative values")
        if self.policy not in ("paper_rule", "fixed", "per_layer_explicit"):
            raise ValueError(f"unknown damping policy {self.policy!r}")

    @classmethod
    def fixed(cls, value: float) -> "DampingConfig":
        return cls("fixed", float(value))

    @classmethod
    def explicit(cls, values) -> "DampingConfig":
        return cls("per_layer_explicit", values=tuple(float(v) for v in values))

    @classmethod
    def parse(cls, text: str) -> "DampingConfig":
        """``paper_rule``, ``fixed:<value>`` or ``explicit:<v1>,<v2>,...``."""
        kind, _, arg = text.partition(":")
        if kind == "paper_rule":
            return cls()
        if kind == "fixed":
            return cls.fixed(float(arg))
        if kind == "explicit":
            return cls.explicit(float(x) for x in arg.split(","))
        raise ValueError(f"cannot parse damping {text!r}")

    def describe(self) -> str:
        if self.policy == "fixed":
            return f"fixed:{self.value!r}"
        if self.policy == "per_layer_explicit":
            return "explicit:" + ",".join(repr(v) for v in self.values)
        return "paper_rule"

    def resolve(self, train_blocks) -> list[float]:
        if self.policy == "paper_rule":
            return paper_rule(train_blocks)
        if self.policy == "fixed":
            return [self.value] * len(train_blocks)
        if len(self.values) != len(train_blocks):
            raise ValueError(f"{len(self.values)} damping values for {len(train_blocks)} layers")
        return list(self.values)


def paper_rule(train_blocks) -> list[float]:
    out = []
    for i, block in enumerate(train_blocks):
        n, d = block.shape
        if n == 0:
            raise ValueError("damping rule needs at least one training example")
        lam = DEFAULT_DAMPING_FACTOR * float(np.sum(block * block)) / (n * d)
        if lam <= 0.0:
            raise AllZeroGradients(f"layer {i} has only zero gradients; damping rule gives 0")
        out.append(lam)
    return out


def damping_from_paper_rule(ds) -> DampingConfig:
    """Resolve the default damping rule on the training rows of a raw or compressed dataset."""
    if isinstance(ds, CompressedDataset):
        ds = ds.data
    return DampingConfig.explicit(paper_rule(ds.blocks("train")))


@dataclass(frozen=True)
class EngineConfig:
    engine: str = "orig"
    damping: DampingConfig = field(default_factory=DampingConfig)
    block_mode: str = "per_layer"
    lissa_iterations: int = 10
    route: str = "auto"

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.block_mode not in ("per_layer", "single_block"):
            raise ValueError(f"unknown block mode {self.block_mode!r}")
        if self.lissa_iterations < 1:
            raise ValueError("lissa needs at least one iteration")
        if self.route not in ("auto", "dense", "woodbury"):
            raise ValueError(f"unknown solve route {self.route!r}")


# -- iHVP kernels -----------------------------------------------------------
# G: n x d training rows of one block, lam: scalar or length-d damping,
# V: d x q query columns. Each returns X ~= (G^T G / n + diag(lam))^{-1} V.

def ihvp_exact(G, lam, V, route: str = "auto") -> np.ndarray:
    n, d = G.shape
    lam_vec = np.broadcast_to(np.asarray(lam, dtype=np.float64), (d,))
    if n == 0:
        if np.any(lam_vec <= 0):
            raise NotSPD("zero damping with no training rows")
        return V / lam_vec[:, None]
    if route == "auto":
        route = "woodbury" if n < d else "dense"
    if route == "woodbury":
        if np.any(lam_vec <= 0):
            raise NotSPD("Woodbury route needs positive damping")
        dinv = 1.0 / lam_vec
        DV = dinv[:, None] * V
        inner = n * np.eye(n) + (G * dinv) @ G.T
        return DV - dinv[:, None] * (G.T @ linalg.solve_spd(inner, G @ DV))
    if d > DENSE_LIMIT:
        raise InfeasibleDense(f"dense solve at d={d} > {DENSE_LIMIT} with n={n} >= d")
    A = G.T @ G / n
    A[np.diag_indices(d)] += lam_vec
    return linalg.solve_spd(A, V)


def lissa_scale(G, lam) -> float:
    """Divisor ``c`` making ``(H + lam I) / c`` satisfy the ``<= I`` condition."""
    n = G.shape[0]
    top = (linalg.spectral_norm(G) ** 2 / n if n else 0.0) + float(np.max(lam))
    return max(1.0, top * (1.0 + LISSA_SAFETY))


def ihvp_lissa(G, lam, V, iterations: int) -> tuple[np.ndarray, float]:
    n, d = G.shape
    lam_vec = np.broadcast_to(np.asarray(lam, dtype=np.float64), (d,))[:, None]
    c = lissa_scale(G, lam_vec)
    s = V.copy()
    for _ in range(iterations):
        hs = (G.T @ (G @ s)) / n if n else 0.0
        s = V + s - (hs + lam_vec * s) / c
    return s / c, c


def ihvp_datainf(G, lam, V) -> np.ndarray:
    n, d = G.shape
    dinv = 1.0 / np.broadcast_to(np.asarray(lam, dtype=np.float64), (d,))
    DV = dinv[:, None] * V
    if n == 0:
        return DV
    GD = G * dinv
    coeff = (GD @ V) / (1.0 + np.sum(GD * G, axis=1))[:, None]
    return DV - (GD.T @ coeff) / n


def score_matrix(train_blocks, query_blocks, engine: str, lams, *, lissa_iterations: int = 10,
                 route: str = "auto", single_block: bool = False) -> tuple[np.ndarray, dict]:
    """Scores ``-sum_l g_k^(l)T ihvp_l(v^(l))`` for every (train row, query column).

    ``query_blocks`` hold one query per column (``d_l x q``). Returns an
    ``n x q`` array and engine diagnostics.
    """
    if single_block:
        lams = [np.concatenate([np.full(b.shape[1], lam) for b, lam in zip(train_blocks, lams)])]
        train_blocks = [np.hstack(train_blocks)]
        query_blocks = [np.vstack(query_blocks)]
    info: dict = {}
    n = train_blocks[0].shape[0]
    q = query_blocks[0].shape[1]
    total = np.zeros((n, q))
    scales = []
    for G, V, lam in zip(train_blocks, query_blocks, lams):
        if engine in ("orig", "compressed"):
            X = ihvp_exact(G, lam, V, route)
        elif engine == "lissa":
            X, c = ihvp_lissa(G, lam, V, lissa_iterations)
            scales.append(c)
        elif engine == "datainf":
            X = ihvp_datainf(G, lam, V)
        elif engine == "hessian_free":
            X = V
        else:
            raise ValueError(f"unknown engine {engine!r}")
        total -= G @ X
    if scales:
        info["lissa_scale"] = scales
    return total, info


# -- reports ----------------------------------------------------------------

def rank_ids(scores, ids) -> np.ndarray:
    """Example ids by descending score; ties broken by ascending id."""
    scores = np.asarray(scores)
    ids = np.asarray(ids)
    return ids[np.lexsort((ids, -scores))]


@dataclass
class InfluenceReport:
    method: str
    example_id: np.ndarray
    scores: np.ndarray
    damping: list
    seed: int | None = None
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.example_id = np.asarray(self.example_id, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != self.example_id.shape:
            raise ValueError("one score per training example is required")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.method}: non-finite influence scores")

    @property
    def ranking(self) -> np.ndarray:
        return rank_ids(self.scores, self.example_id)

    def ranks(self) -> np.ndarray:
        """1-based rank of each example in ``example_id`` order."""
        pos = {int(e): i + 1 for i, e in enumerate(self.ranking)}
        return np.array([pos[int(e)] for e in self.example_id])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["example_id", "score", "rank", "method", "seed"])
        seed = "" if self.seed is None else self.seed
        for eid, s, rk in zip(self.example_id, self.scores, self.ranks()):
            w.writerow([int(eid), repr(float(s)), int(rk), self.method, seed])
        return buf.getvalue()

    def run_record(self, config: dict | None = None, timings: bool = False) -> dict:
        rec = {
            "method": self.method,
            "seed": self.seed,
            "n_train": int(self.scores.size),
            "damping": [float(x) for x in self.damping],
            "extra": self.extra,
            "config": config or {},
        }
        if timings:
            rec["timings"] = self.timings
        return rec

    def to_jsonl(self, config: dict | None = None, timings: bool = False) -> str:
        return json.dumps(self.run_record(config, timings), sort_keys=True) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "InfluenceReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        seed = rows[0]["seed"] if rows else ""
        return cls(
            rows[0]["method"] if rows else "",
            [int(r["example_id"]) for r in rows],
            [float(r["score"]) for r in rows],
            damping=[],
            seed=int(seed) if seed not in ("", None) else None,
        )


def _query_blocks(query, layers, default) -> list[np.ndarray]:
    v = default if query is None else getattr(query, "values", query)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    width = sum(layer.dim for layer in layers)
    if v.shape[0] != width:
        raise PlanMismatch(f"query width {v.shape[0]} != gradient width {width}")
    return [b.T for b in split_blocks(v.T, layers)]


def _engine_method(cfg: EngineConfig) -> str:
    if cfg.engine == "lissa":
        return f"lissa:T={cfg.lissa_iterations}"
    return cfg.engine


def _run(ds: GradientDataset, cfg: EngineConfig, query, method: str, seed=None,
         compression_seconds: float = 0.0) -> InfluenceReport:
    train_blocks = ds.blocks("train")
    default = build_query(ds).values if query is None else None
    query_blocks = _query_blocks(query, ds.layers, default)
    lams = cfg.damping.resolve(train_blocks) if cfg.engine != "hessian_free" else [0.0] * len(train_blocks)
    t0 = time.perf_counter()
    scores, info = score_matrix(
        train_blocks, query_blocks, cfg.engine, lams,
        lissa_iterations=cfg.lissa_iterations, route=cfg.route,
        single_block=cfg.block_mode == "single_block",
    )
    elapsed = time.perf_counter() - t0
    return InfluenceReport(
        method, ds.ids("train"), scores[:, 0], lams, seed,
        timings={"ihvp_seconds": elapsed, "compression_seconds": compression_seconds},
        extra={**info, "block_mode": cfg.block_mode, "damping_policy": cfg.damping.describe()},
    )


def influence_orig(ds: GradientDataset, cfg: EngineConfig | None = None, query=None) -> InfluenceReport:
    """Exact damped influence on full gradients (dense or Woodbury solve per block)."""
    cfg = cfg or EngineConfig("orig")
    return _run(ds, cfg, query, "orig")


def influence_compressed(cds: CompressedDataset, cfg: EngineConfig | None = None, query=None) -> InfluenceReport:
    """Exact damped influence computed entirely in the compressed space.

    ``query``, when given, must already be compressed with the same plan.
    """
    cfg = cfg or EngineConfig("compressed")
    if cfg.engine not in ("orig", "compressed"):
        cfg = EngineConfig("compressed", cfg.damping, cfg.block_mode, cfg.lissa_iterations, cfg.route)
    if not all(layer.name.endswith("@" + cds.fingerprint) for layer in cds.data.layers):
        raise PlanMismatch("compressed rows were not all produced by the same plan")
    seed = int(cds.fingerprint.split("seed=")[1].split(":")[0]) if "seed=" in cds.fingerprint else None
    return _run(cds.data, cfg, query, cds.fingerprint, seed, cds.compression_seconds)


def influence_lissa(ds: GradientDataset, cfg: EngineConfig | None = None, query=None) -> InfluenceReport:
    cfg = cfg or EngineConfig("lissa")
    return _run(ds, cfg, query, _engine_method(cfg))


def influence_datainf(ds: GradientDataset, cfg: EngineConfig | None = None, query=None) -> InfluenceReport:
    cfg = cfg or EngineConfig("datainf")
    return _run(ds, cfg, query, "datainf")


def influence_hessian_free(ds: GradientDataset, query=None) -> InfluenceReport:
    return _run(ds, EngineConfig("hessian_free"), query, "hessian_free")


def compute_influence(ds: GradientDataset, method: str, *, r: int | None = None, seed: int = 0,
                      damping: DampingConfig | None = None, lissa_iterations: int = 10,
                      block_mode: str = "per_layer", query=None) -> InfluenceReport:
    """Run any named method (engine or compressor) on a raw gradient dataset.

    Compressors share one plan between train and validation rows; the query
    (raw space) is compressed with the same plan.
    """
    damping = damping or DampingConfig()
    if method in COMPRESSORS:
        if r is None:
            raise ValueError(f"method {method!r} needs a compression size r")
        t0 = time.perf_counter()
        plan = make_plan(method, r, seed, ds.layers, ds.rows("train") if method == "pca" else None)
        cds = compress_dataset(plan, ds)
        elapsed = time.perf_counter() - t0
        cds.compression_seconds = elapsed
        raw_q = build_query(ds).values if query is None else getattr(query, "values", query)
        cq = plan.apply(np.asarray(raw_q, dtype=np.float64).T).T
        cfg = EngineConfig("compressed", damping, block_mode)
        return influence_compressed(cds, cfg, cq)
    if method == "orig":
        return influence_orig(ds, EngineConfig("orig", damping, block_mode), query)
    if method == "lissa":
        return influence_lissa(ds, EngineConfig("lissa", damping, block_mode, lissa_iterations), query)
    if method == "datainf":
        return influence_datainf(ds, EngineConfig("datainf", damping, block_mode), query)
    if method == "hessian_free":
        return influence_hessian_free(ds, query)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def influence_matrix(ds: GradientDataset, method: str, queries, *, r: int | None = None, seed: int = 0,
                     damping: DampingConfig | None = None, lissa_iterations: int = 10,
                     block_mode: str = "per_layer") -> np.ndarray:
    """Scores of every training row against many raw-space queries (``d x q``).

    The Hessian factorization (or iterate) is shared across query columns.
    """
    damping = damping or DampingConfig()
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[:, None]
    layers = ds.layers
    train = ds.rows("train")
    engine = method
    if method in COMPRESSORS:
        if r is None:
            raise ValueError(f"method {method!r} needs a compression size r")
        plan = make_plan(method, r, seed, layers, train if method == "pca" else None)
        train = plan.apply(train)
        queries = plan.apply(queries.T).T
        layers = plan.compressed_layers()
        engine = "compressed"
    elif method not in ENGINES:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    train_blocks = split_blocks(train, layers)
    lams = damping.resolve(train_blocks) if engine != "hessian_free" else [0.0] * len(layers)
    scores, _ = score_matrix(train_blocks, _query_blocks(queries, layers, None), engine, lams,
                             lissa_iterations=lissa_iterations, single_block=block_mode == "single_block")
    return scores
