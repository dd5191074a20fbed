"""Acceptance criteria, each run at its stated tolerance and time limit.

Every test appends one ``PASS``/``FAIL`` line to RESULTS; conftest prints them
at the end of the session.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from infkit.compress import make_plan
from infkit.errors import ChecksumMismatch
from infkit.evaluation import (
    DEFAULT_SEEDS,
    benchmark,
    detection_experiment,
    retrain_experiment,
    retrieval_experiment,
    sweep_r,
)
from infkit.gradstore import LayerSpec, decode_grds, encode_grds
from infkit.influence import (
    DampingConfig,
    EngineConfig,
    compute_influence,
    ihvp_exact,
    influence_datainf,
    influence_lissa,
    influence_orig,
    paper_rule,
)
from infkit.theory import run_suite
from infkit.trainer import (
    ModelSpec,
    SyntheticTask,
    TaskData,
    flat_example_loss,
    gen_task,
    init_model,
    per_example_gradients,
)

from conftest import make_dataset, random_layers

RESULTS: list[str] = []
REFERENCE = Path(__file__).parent / "data" / "orig_reference.json"
ALL_METHODS = ["orig", "dropout", "gaussian", "fjlt", "pca", "logra", "lissa", "datainf", "hessian_free"]


def verdict(number: int, passed: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = bool(passed) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} ({elapsed:.2f}s, limit {limit:g}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def test_full_retention_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        layers = random_layers(rng, max_layers=3, max_dim=21)
        ds = make_dataset(rng, layers, int(rng.integers(1, 32)))
        assert ds.width <= 64
        a = compute_influence(ds, "dropout", r=ds.width, seed=seed).scores
        b = influence_orig(ds).scores
        worst = max(worst, rel_err(a, b))
    verdict(1, worst <= 1e-10, f"dropout r=d vs orig, worst relative error {worst:.2e} <= 1e-10",
            time.perf_counter() - t0, 5)


def test_closed_form_exactness():
    t0 = time.perf_counter()
    worst_datainf = worst_lissa = 0.0
    for seed in range(10):
        rng = np.random.default_rng(2000 + seed)
        layers = random_layers(rng, max_layers=2, max_dim=16)
        one = make_dataset(rng, layers, 1)
        worst_datainf = max(worst_datainf, rel_err(influence_datainf(one).scores, influence_orig(one).scores))
        # n = 4d keeps the Gauss-Newton spectrum well conditioned.
        ds = make_dataset(rng, layers, 4 * sum(layer.dim for layer in layers))
        damp = DampingConfig.fixed(0.5)
        lissa = influence_lissa(ds, EngineConfig("lissa", damp, lissa_iterations=500)).scores
        orig = influence_orig(ds, EngineConfig("orig", damp)).scores
        worst_lissa = max(worst_lissa, rel_err(lissa, orig))
    ok = worst_datainf <= 1e-10 and worst_lissa <= 1e-6
    verdict(2, ok, f"datainf n=1 error {worst_datainf:.2e} <= 1e-10, lissa T=500 error {worst_lissa:.2e} <= 1e-6",
            time.perf_counter() - t0, 5)


def test_woodbury_route():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        G = rng.standard_normal((16, 512))
        lam = paper_rule([G])[0]
        V = rng.standard_normal((512, 2))
        worst = max(worst, rel_err(ihvp_exact(G, lam, V, "woodbury"), ihvp_exact(G, lam, V, "dense")))
    verdict(3, worst <= 1e-8, f"woodbury vs dense, worst relative error {worst:.2e} <= 1e-8",
            time.perf_counter() - t0, 10)


def test_theory_bounds():
    t0 = time.perf_counter()
    rep = run_suite(cases=100, d=64, n=16, r=8, lam=0.1, seed=0, probe_k=())
    drop, gauss = rep.dropout, rep.gaussian
    ok = drop.passes == 100 and gauss.failures == 0 and gauss.passes > 0
    verdict(4, ok, f"dropout bound {drop.passes}/100, gaussian chain {gauss.passes}/{gauss.cases - gauss.skips} "
            f"non-skipped ({gauss.skips} skipped)", time.perf_counter() - t0, 60)


def _fd_gradient(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_gradient_correctness():
    t0 = time.perf_counter()
    archs = [ModelSpec("logreg", 5, 2), ModelSpec("logreg", 5, 3), ModelSpec("mlp", 5, 2, 6), ModelSpec("mlp", 5, 3, 6)]
    worst_fd = worst_capture = 0.0
    for spec in archs:
        rng = np.random.default_rng(4000 + spec.classes + len(spec.arch))
        for trial in range(20):
            model = init_model(spec, trial)
            model = model.with_flat(model.flat() + 0.3 * rng.standard_normal(model.flat().size))
            x = rng.standard_normal(spec.in_dim)
            y = int(rng.integers(0, spec.classes))
            data = TaskData(x[None], np.array([y]), np.array(["s"], dtype=object),
                            np.array(["train"], dtype=object), np.array([0]), np.array([False]), spec.classes)
            g = per_example_gradients(model, data).gradients[0]
            fd = _fd_gradient(flat_example_loss(model, x, y), model.flat())
            worst_fd = max(worst_fd, rel_err(g, fd))
        task = gen_task(SyntheticTask(feature_dim=5, classes=spec.classes, n_train=30, n_val=5, n_test=5, seed=1))
        ds, pairs = per_example_gradients(init_model(spec, 1), task, capture_activations=True)
        offsets = np.cumsum([0] + [layer.dim for layer in ds.layers])
        for q, (h, dl) in enumerate(pairs):
            block = ds.gradients[:, offsets[q]:offsets[q + 1]]
            outer = np.einsum("ni,nj->nij", h, dl).reshape(len(h), -1)
            worst_capture = max(worst_capture, float(np.max(np.abs(outer - block))))
    ok = worst_fd <= 1e-5 and worst_capture <= 1e-10
    verdict(5, ok, f"finite differences worst {worst_fd:.2e} <= 1e-5, capture identity worst {worst_capture:.2e} "
            f"<= 1e-10", time.perf_counter() - t0, 10)


def test_detection_protocol():
    t0 = time.perf_counter()
    res = detection_experiment(ALL_METHODS, lambda d: d // 8, DEFAULT_SEEDS)
    means = {m: r.mean for m, r in res.items()}
    gap = means["orig"] - means["dropout"]
    ref = json.loads(REFERENCE.read_text())
    reproduced = np.allclose(res["orig"].aucs, ref["auc"], rtol=0, atol=1e-12)
    ok = all(v >= 0.65 for v in means.values()) and gap <= 0.10 and reproduced
    weakest = min(means, key=means.get)
    verdict(6, ok, f"weakest mean AUC {weakest}={means[weakest]:.3f} >= 0.65, orig - dropout = {gap:.3f} <= 0.10, "
            f"orig matches committed reference: {reproduced}", time.perf_counter() - t0, 120)


def test_sweep_narrowing():
    t0 = time.perf_counter()
    result, _ = sweep_r((1, 2, 4, 8, 16), ("dropout",), DEFAULT_SEEDS, with_orig=False)
    st = result.stats("dropout")
    verdict(7, st[-1]["band"] <= st[0]["band"],
            f"dropout band r=16 {st[-1]['band']:.3f} <= band r=1 {st[0]['band']:.3f}", time.perf_counter() - t0, 300)


def test_retraining_direction():
    t0 = time.perf_counter()
    top = retrain_experiment("dropout", [0.25], "remove_top", DEFAULT_SEEDS, r=lambda d: d // 8)
    rnd = retrain_experiment("dropout", [0.25], "random", DEFAULT_SEEDS)
    a, b = top.mean()[0], rnd.mean()[0]
    verdict(8, a < b, f"test accuracy after removing top 25% {a:.3f} < after random 25% {b:.3f}",
            time.perf_counter() - t0, 180)


def test_retrieval_sanity():
    t0 = time.perf_counter()
    rnd = retrieval_experiment("random", seeds=DEFAULT_SEEDS)
    drop = retrieval_experiment("dropout", r=16, seeds=DEFAULT_SEEDS)
    ok = abs(rnd.top1_same_class - 1 / 6) <= 0.07 and drop.top1_same_class >= rnd.top1_same_class + 0.3
    verdict(9, ok, f"random top-1 {rnd.top1_same_class:.3f} within 1/6 +- 0.07, dropout top-1 "
            f"{drop.top1_same_class:.3f} >= random + 0.3", time.perf_counter() - t0, 180)


def test_complexity_realization():
    t0 = time.perf_counter()
    rows = {row["method"]: row for row in benchmark(("dropout", "gaussian"), n=256, d=100_000, r=64, repeats=3)}
    ratio = rows["gaussian"]["compression_seconds"] / max(rows["dropout"]["compression_seconds"], 1e-9)
    verdict(10, ratio >= 5, f"gaussian/dropout compression time ratio {ratio:.1f} >= 5",
            time.perf_counter() - t0, 120)


def test_format_integrity():
    t0 = time.perf_counter()
    exact = rejected = 0
    for seed in range(25):
        rng = np.random.default_rng(5000 + seed)
        dtype = ("f32", "f64")[seed % 2]
        ds = make_dataset(rng, random_layers(rng, linear=seed % 3 == 0), int(rng.integers(0, 40)), 1, dtype=dtype)
        raw = encode_grds(ds)
        back = decode_grds(raw)
        exact += back.equals(ds) and back.gradients.tobytes() == ds.gradients.tobytes() and encode_grds(back) == raw
        bad = bytearray(raw)
        bad[-1 - int(rng.integers(0, 4))] ^= 0x5A
        try:
            decode_grds(bytes(bad))
        except ChecksumMismatch:
            rejected += 1
    verdict(11, exact == 25 and rejected == 25, f"bit-exact round trips {exact}/25, corrupted checksums rejected "
            f"{rejected}/25", time.perf_counter() - t0, 5)
