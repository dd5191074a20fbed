"""Evaluation protocols: mislabel detection, influence-guided retraining and
cross-source retrieval, plus the compression-size sweep.

Sign convention: an influence score ``-v^T H^{-1} g_k`` is large when
up-weighting example ``k`` raises the validation loss. Detection therefore
ranks by descending score; retraining and retrieval look for the examples
that help most (most negative score).
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateClasses
from .influence import DampingConfig, compute_influence, influence_matrix
from .seeding import derive_int, derive_rng
from .trainer import (
    ModelSpec,
    SyntheticTask,
    TrainHyper,
    flip_count,
    flip_labels,
    gen_task,
    per_example_gradients,
    retrain_without,
    train,
)

REFERENCE_TASK = SyntheticTask(
    kind="blobs", classes=2, feature_dim=20, separation=3.0, noise=1.0,
    n_train=1000, n_val=200, n_test=200, latent_dim=2, ambient_noise=0.3,
)
REFERENCE_MODEL = ModelSpec("logreg", in_dim=20, classes=2)
REFERENCE_HYPER = TrainHyper(lr=0.1, momentum=0.0, weight_decay=0.0, epochs=100, batch_size=32)
REFERENCE_FLIP = 0.2
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

RETRIEVAL_TASK = SyntheticTask(
    kind="multi_source", classes=2, feature_dim=24, separation=3.0, noise=1.0,
    n_train=600, n_val=60, n_test=120, sources=6, source_spread=4.0, orthogonal_blocks=True,
)
RETRIEVAL_MODEL = ModelSpec("logreg", in_dim=24, classes=2)


def _map(fn, items, workers: int):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


# -- detection --------------------------------------------------------------

def auc_mislabel(scores, flipped) -> float:
    """Mann-Whitney AUC: P(score of a flipped example > score of a clean one), ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    flipped = np.asarray(flipped, dtype=bool)
    pos, neg = scores[flipped], scores[~flipped]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateClasses("need at least one flipped and one clean example")
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size))


@dataclass
class DetectionResult:
    method: str
    seeds: list
    aucs: list

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.aucs):
            raise ValueError("AUC outside [0, 1]")

    @property
    def mean(self) -> float:
        return _mean_std(self.aucs)[0]

    @property
    def std(self) -> float:
        return _mean_std(self.aucs)[1]

    @property
    def band(self) -> float:
        return float(max(self.aucs) - min(self.aucs))


def random_scores(n: int, seed: int) -> np.ndarray:
    return derive_rng(seed, "random-scores").standard_normal(n)


def method_scores(ds, method: str, r, seed: int, damping=None, lissa_iterations: int = 10) -> np.ndarray:
    if method == "random":
        return random_scores(int(ds.mask("train").sum()), seed)
    rep = compute_influence(ds, method, r=r, seed=seed, damping=damping, lissa_iterations=lissa_iterations)
    return rep.scores


@dataclass(frozen=True)
class DetectionSetup:
    task: SyntheticTask = REFERENCE_TASK
    flip_fraction: float = REFERENCE_FLIP
    model: ModelSpec = REFERENCE_MODEL
    hyper: TrainHyper = REFERENCE_HYPER
    damping: DampingConfig = field(default_factory=DampingConfig)
    lissa_iterations: int = 10


def seed_gradients(setup: DetectionSetup, seed: int):
    """gen -> flip -> train -> per-example gradients for one seed."""
    data = gen_task(replace(setup.task, seed=seed))
    data = flip_labels(data, setup.flip_fraction, derive_int(seed, "flip"))
    rec = train(setup.model, data, replace(setup.hyper, seed=seed))
    return per_example_gradients(rec.model, data), rec


def _resolve_r(r, d: int):
    """``r`` may be an int, a callable of the gradient width, or a dict per method."""
    return r(d) if callable(r) else r


def _detect_one(args):
    setup, methods, r, seed = args
    ds, _ = seed_gradients(setup, seed)
    flipped = ds.flipped[ds.mask("train")]
    out = {}
    for m in methods:
        rr = _resolve_r(r.get(m) if isinstance(r, dict) else r, ds.width)
        s = method_scores(ds, m, rr, seed, setup.damping, setup.lissa_iterations)
        out[m] = auc_mislabel(s, flipped)
    return out


def detection_experiment(methods, r, seeds=DEFAULT_SEEDS, setup: DetectionSetup | None = None,
                         workers: int = 1) -> dict:
    """AUC per method per seed; every method sees the same data and model for a seed."""
    setup = setup or DetectionSetup()
    seeds = list(seeds)
    runs = _map(_detect_one, [(setup, tuple(methods), r, s) for s in seeds], workers)
    return {m: DetectionResult(m, seeds, [run[m] for run in runs]) for m in methods}


def detection_csv(results: dict, task_name: str = "reference") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    seeds = next(iter(results.values())).seeds if results else []
    w.writerow(["method", f"{task_name}_mean", f"{task_name}_std"] + [f"auc_seed{s}" for s in seeds])
    for m, res in results.items():
        w.writerow([m, repr(res.mean), repr(res.std)] + [repr(a) for a in res.aucs])
    return buf.getvalue()


# -- r sweep ----------------------------------------------------------------

@dataclass
class SweepResult:
    r_values: list
    seeds: list
    aucs: dict  # method -> list over r of per-seed lists

    def stats(self, method: str) -> list[dict]:
        return [
            {"r": r, "min": float(min(a)), "mean": float(np.mean(a)), "max": float(max(a)),
             "band": float(max(a) - min(a))}
            for r, a in zip(self.r_values, self.aucs[method])
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "r", "min", "mean", "max"] + [f"auc_seed{s}" for s in self.seeds])
        for m in self.aucs:
            for st, a in zip(self.stats(m), self.aucs[m]):
                w.writerow([m, st["r"], repr(st["min"]), repr(st["mean"]), repr(st["max"])] + [repr(x) for x in a])
        return buf.getvalue()


def _sweep_one(args):
    setup, methods, r_values, seed, with_orig = args
    ds, _ = seed_gradients(setup, seed)
    flipped = ds.flipped[ds.mask("train")]
    out = {m: [auc_mislabel(method_scores(ds, m, r, seed, setup.damping), flipped) for r in r_values]
           for m in methods}
    if with_orig:
        out["orig"] = auc_mislabel(method_scores(ds, "orig", None, seed, setup.damping), flipped)
    return out


def sweep_r(r_values=(1, 2, 4, 8, 16), methods=("dropout", "gaussian"), seeds=DEFAULT_SEEDS,
            setup: DetectionSetup | None = None, workers: int = 1, with_orig: bool = True):
    """Detection AUC across compression sizes; gradients are shared across r within a seed."""
    setup = setup or DetectionSetup()
    seeds = list(seeds)
    r_values = list(r_values)
    runs = _map(_sweep_one, [(setup, tuple(methods), r_values, s, with_orig) for s in seeds], workers)
    aucs = {m: [[run[m][i] for run in runs] for i in range(len(r_values))] for m in methods}
    result = SweepResult(r_values, seeds, aucs)
    orig = [run["orig"] for run in runs] if with_orig else None
    return result, orig


# -- retraining -------------------------------------------------------------

MODES = ("remove_top", "keep_top", "random")


@dataclass
class RetrainResult:
    method: str
    mode: str
    fractions: list
    seeds: list
    metrics: dict  # "accuracy"/"cross_entropy"/"perplexity" -> per fraction list of per-seed values
    baseline: dict  # same keys -> per-seed list

    def mean(self, metric: str = "accuracy") -> list[float]:
        return [_mean_std(v)[0] for v in self.metrics[metric]]

    def std(self, metric: str = "accuracy") -> list[float]:
        return [_mean_std(v)[1] for v in self.metrics[metric]]

    def baseline_mean(self, metric: str = "accuracy") -> float:
        return _mean_std(self.baseline[metric])[0]


def ranking_for_retraining(scores, ids, direction: str = "helpful") -> np.ndarray:
    """Training ids ordered from most to least influential.

    ``helpful`` puts the examples whose up-weighting lowers validation loss
    most (most negative score) first; ``harmful`` is plain descending score.
    """
    scores = np.asarray(scores)
    ids = np.asarray(ids)
    key = -scores if direction == "harmful" else scores
    return ids[np.lexsort((ids, key))]


@dataclass(frozen=True)
class RetrainSetup:
    task: SyntheticTask = REFERENCE_TASK
    flip_fraction: float = REFERENCE_FLIP
    model: ModelSpec = REFERENCE_MODEL
    hyper: TrainHyper = REFERENCE_HYPER
    damping: DampingConfig = field(default_factory=DampingConfig)
    direction: str = "helpful"


def _retrain_one(args):
    setup, method, fractions, mode, r, seed = args
    data = gen_task(replace(setup.task, seed=seed))
    data = flip_labels(data, setup.flip_fraction, derive_int(seed, "flip"))
    hyper = replace(setup.hyper, seed=seed)
    base = train(setup.model, data, hyper)
    ids = data.example_id[data.mask("train")]
    if mode == "random":
        order = derive_rng(seed, "retrain-random").permutation(ids)
    else:
        ds = per_example_gradients(base.model, data)
        rr = _resolve_r(r, ds.width)
        scores = method_scores(ds, method, rr, seed, setup.damping)
        order = ranking_for_retraining(scores, ds.ids("train"), setup.direction)
    rows = []
    for f in fractions:
        k = 0 if f <= 0 else min(len(ids), math.floor(f * len(ids) + 0.5))
        if mode == "keep_top":
            exclude = order[k:]
        else:
            exclude = order[:k]
        rec = base if len(exclude) == 0 else retrain_without(data, exclude, setup.model, hyper)
        rows.append(rec.metrics)
    return base.metrics, rows


def retrain_experiment(method: str, fractions, mode: str = "remove_top", seeds=DEFAULT_SEEDS, r=None,
                       setup: RetrainSetup | None = None, workers: int = 1) -> RetrainResult:
    """Retrain after removing (or keeping only) the top fraction of ranked examples."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    fractions = [float(f) for f in fractions]
    if any(not 0.0 <= f <= 1.0 for f in fractions) or any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be strictly increasing within [0, 1]")
    setup = setup or RetrainSetup()
    seeds = list(seeds)
    runs = _map(_retrain_one, [(setup, method, fractions, mode, r, s) for s in seeds], workers)
    keys = ("accuracy", "cross_entropy", "perplexity")
    metrics = {k: [[run[1][i][k] for run in runs] for i in range(len(fractions))] for k in keys}
    baseline = {k: [run[0][k] for run in runs] for k in keys}
    label = "random" if mode == "random" else method
    return RetrainResult(label, mode, fractions, seeds, metrics, baseline)


def retrain_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fractions = results[0].fractions if results else []
    w.writerow(["method", "mode", "metric", "baseline"] + [f"frac_{f:g}_mean" for f in fractions]
               + [f"frac_{f:g}_std" for f in fractions])
    for res in results:
        for metric in ("accuracy", "cross_entropy", "perplexity"):
            w.writerow([res.method, res.mode, metric, repr(res.baseline_mean(metric))]
                       + [repr(x) for x in res.mean(metric)] + [repr(x) for x in res.std(metric)])
    return buf.getvalue()


# -- retrieval --------------------------------------------------------------

@dataclass
class RetrievalResult:
    method: str
    top1_same_class: float
    top3_same_class: float
    per_seed_top1: list
    per_seed_top3: list
    n_queries: int

    def __post_init__(self):
        for p in (self.top1_same_class, self.top3_same_class):
            if not 0.0 <= p <= 1.0:
                raise ValueError("proportion outside [0, 1]")


def top_matches(score_matrix, train_ids, train_source, query_source, k: int = 3):
    """Per query: does the top-1 (and do all top-k) helpful examples share its source?"""
    train_ids = np.asarray(train_ids)
    top1, topk = [], []
    for j in range(score_matrix.shape[1]):
        order = np.lexsort((train_ids, score_matrix[:, j]))
        best = train_source[order[:k]]
        top1.append(bool(best[0] == query_source[j]))
        topk.append(bool(np.all(best == query_source[j])))
    return np.array(top1), np.array(topk)


@dataclass(frozen=True)
class RetrievalSetup:
    task: SyntheticTask = RETRIEVAL_TASK
    model: ModelSpec = RETRIEVAL_MODEL
    hyper: TrainHyper = REFERENCE_HYPER
    damping: DampingConfig = field(default_factory=DampingConfig)


def _retrieve_one(args):
    setup, method, r, seed = args
    data = gen_task(replace(setup.task, seed=seed))
    rec = train(setup.model, data, replace(setup.hyper, seed=seed))
    ds = per_example_gradients(rec.model, data, query_split="test")
    train_src = ds.source[ds.mask("train")]
    query_src = ds.source[ds.mask("val")]
    if method == "random":
        S = derive_rng(seed, "random-scores").standard_normal((len(train_src), len(query_src)))
    else:
        rr = _resolve_r(r, ds.width)
        S = influence_matrix(ds, method, ds.rows("val").T, r=rr, seed=seed, damping=setup.damping)
    t1, t3 = top_matches(S, ds.ids("train"), train_src, query_src)
    return t1, t3


def retrieval_experiment(method: str, r=None, seeds=DEFAULT_SEEDS, setup: RetrievalSetup | None = None,
                         workers: int = 1) -> RetrievalResult:
    """Each test example is its own query; proportions average over queries and seeds."""
    setup = setup or RetrievalSetup()
    if setup.task.kind != "multi_source":
        raise ValueError("retrieval needs a multi_source task")
    runs = _map(_retrieve_one, [(setup, method, r, s) for s in seeds], workers)
    t1 = np.concatenate([a for a, _ in runs])
    t3 = np.concatenate([b for _, b in runs])
    return RetrievalResult(method, float(t1.mean()), float(t3.mean()),
                           [float(a.mean()) for a, _ in runs], [float(b.mean()) for _, b in runs], len(t1))


def retrieval_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "top1", "top3", "n_queries"])
    for res in results:
        w.writerow([res.method, repr(res.top1_same_class), repr(res.top3_same_class), res.n_queries])
    return buf.getvalue()


__all__ = [
    "auc_mislabel", "detection_experiment", "sweep_r", "retrain_experiment", "retrieval_experiment",
    "DetectionResult", "RetrainResult", "RetrievalResult", "SweepResult", "flip_count",
]


# -- timing -----------------------------------------------------------------

def benchmark(methods=("dropout", "gaussian"), n: int = 256, d: int = 100_000, r: int = 64, seed: int = 0,
              repeats: int = 3, n_query: int = 8) -> list[dict]:
    """Per-phase wall-clock (best of ``repeats``) on random gradients of width ``d``.

    Compression time covers building the plan and applying it to every row.
    """
    import time

    from .compress import METHODS as COMPRESSORS, make_plan
    from .gradstore import GradientDataset, LayerSpec

    rng = derive_rng(seed, "bench")
    rows = rng.standard_normal((n + n_query, d))
    split = np.array(["train"] * n + ["val"] * n_query, dtype=object)
    ds = GradientDataset([LayerSpec("theta", d)], rows, np.arange(n + n_query), np.zeros(n + n_query, dtype=int),
                         np.full(n + n_query, "bench", dtype=object), split, np.zeros(n + n_query, dtype=bool))
    out = []
    for m in methods:
        comp, ihvp = [], []
        for _ in range(repeats):
            if m in COMPRESSORS:
                t0 = time.perf_counter()
                plan = make_plan(m, r, seed, ds.layers, ds.rows("train") if m == "pca" else None)
                plan.apply(ds.gradients)
                comp.append(time.perf_counter() - t0)
            else:
                comp.append(0.0)
            rep = compute_influence(ds, m, r=r if m in COMPRESSORS else None, seed=seed)
            ihvp.append(rep.timings["ihvp_seconds"])
        out.append({"method": m, "n": n, "d": d, "r": r if m in COMPRESSORS else d,
                    "compression_seconds": min(comp), "ihvp_seconds": min(ihvp)})
    return out
