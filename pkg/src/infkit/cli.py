"""Command-line entry point: ``infkit <command> [options]``.

Every command writes a ``config.json`` echo next to its outputs. Without
``--out`` the directory is ``runs/<timestamp>-<config hash>/``. Failures
print one ``error: <Category>: <message>`` line on stderr and exit 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .compress import make_plan, compress_dataset
from .errors import ConfigError, InfkitError
from .evaluation import (
    DetectionSetup,
    RETRIEVAL_TASK,
    RetrainSetup,
    RetrievalSetup,
    benchmark,
    detection_csv,
    detection_experiment,
    retrain_csv,
    retrain_experiment,
    retrieval_csv,
    retrieval_experiment,
    sweep_r,
)
from .gradstore import read_grds, write_grds
from .influence import EngineConfig, compute_influence, influence_compressed
from .compress import CompressedDataset
from .theory import run_suite
from .trainer import TaskData, TrainRecord, flip_labels, gen_task, per_example_gradients, train
from .seeding import derive_int


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- task data as CSV ---------------------------------------------------------

def task_to_csv(data: TaskData) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example_id", "split", "label", "source", "flipped", "classes"]
               + [f"x_{j}" for j in range(data.X.shape[1])])
    for i in range(len(data)):
        w.writerow([int(data.example_id[i]), data.split[i], int(data.y[i]), data.source[i],
                    int(bool(data.flipped[i])), data.classes] + [repr(float(x)) for x in data.X[i]])
    return buf.getvalue()


def task_from_csv(text: str) -> TaskData:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ConfigError("empty task file")
    body = rows[1:]
    col = {name: j for j, name in enumerate(rows[0])}
    nx = len(rows[0]) - 6
    get = lambda name: [r[col[name]] for r in body]  # noqa: E731
    return TaskData(
        X=np.array([[float(v) for v in r[6:6 + nx]] for r in body], dtype=np.float64).reshape(len(body), nx),
        y=np.array(get("label"), dtype=int),
        source=np.array(get("source"), dtype=object),
        split=np.array(get("split"), dtype=object),
        example_id=np.array(get("example_id"), dtype=np.int64),
        flipped=np.array([v == "1" for v in get("flipped")], dtype=bool),
        classes=int(body[0][col["classes"]]) if body else 2,
    )


# -- plumbing -------------------------------------------------------------------

def _flags(args, names) -> dict:
    """Map argparse attributes onto config keys (only the ones that were given)."""
    out = {}
    for attr, key in names.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value if isinstance(value, str) else str(value)
    return out


FLAG_KEYS = {
    "method": "run.method", "methods": "run.methods", "r": "run.r", "r_values": "run.r_values",
    "seed": "run.seed", "seeds": "run.seeds", "flip": "run.flip", "damping": "run.damping",
    "lissa_iterations": "run.lissa_iterations", "block_mode": "run.block_mode",
    "fractions": "run.fractions", "mode": "run.mode", "query_split": "run.query_split",
    "dtype": "run.dtype", "workers": "run.workers", "out": "run.out",
}

PRESETS = {
    "retrieve": {f"task.{k}": getattr(RETRIEVAL_TASK, k) for k in (
        "kind", "classes", "feature_dim", "separation", "noise", "n_train", "n_val", "n_test",
        "sources", "source_spread", "orthogonal_blocks", "latent_dim", "ambient_noise")}
    | {"run.methods": "random,dropout,orig", "run.r": 16, "run.flip": 0.0},
    "sweep-r": {"run.methods": "dropout,gaussian"},
}


def _resolve(args) -> dict:
    flags = C.parse_assignments(args.set)
    flags.update(_flags(args, FLAG_KEYS))
    return C.resolve(args.config, flags=flags, preset=PRESETS.get(args.command))


def _outdir(cfg: dict, command: str) -> Path:
    if cfg["run.out"]:
        out = Path(cfg["run.out"])
    else:
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        out = Path("runs") / f"{stamp}-{C.config_hash({'command': command, **cfg})}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _echo(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg, **(extra or {})}
    _write(out / "config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _record_config(cfg: dict) -> dict:
    """Config as echoed into result records; the output location is not part of the result."""
    return {k: v for k, v in cfg.items() if k != "run.out"}


def _workers(cfg) -> int:
    return cfg["run.workers"] or os.cpu_count() or 1


def _r_rule(cfg):
    return cfg["run.r"] if cfg["run.r"] is not None else (lambda d: max(1, d // 8))


def _methods(cfg) -> list[str]:
    return [m.strip() for m in cfg["run.methods"].split(",") if m.strip()]


# -- commands -------------------------------------------------------------------

def cmd_gen(args, cfg, out):
    seed = cfg["run.seed"]
    data = gen_task(C.task_of(cfg, seed))
    if cfg["run.flip"] > 0:
        data = flip_labels(data, cfg["run.flip"], derive_int(seed, "flip"))
    _write(out / "data.csv", task_to_csv(data))
    return f"wrote {out / 'data.csv'} ({len(data)} examples, {int(data.flipped.sum())} flipped)"


def _load_task(path) -> TaskData:
    return task_from_csv(Path(path).read_text(encoding="utf-8"))


def cmd_train(args, cfg, out):
    data = _load_task(args.data)
    spec = replace(C.model_of(cfg), in_dim=data.X.shape[1], classes=data.classes)
    rec = train(spec, data, C.hyper_of(cfg, cfg["run.seed"]))
    rec.config = cfg
    _write(out / "model.json", rec.to_json() + "\n")
    _write(out / "metrics.json", json.dumps(rec.metrics, indent=2, sort_keys=True) + "\n")
    return f"test accuracy {rec.metrics['accuracy']:.4f}; wrote {out / 'model.json'}"


def cmd_grads(args, cfg, out):
    data = _load_task(args.data)
    rec = TrainRecord.from_json(Path(args.model).read_text(encoding="utf-8"))
    ds = per_example_gradients(rec.model, data, query_split=cfg["run.query_split"], dtype=cfg["run.dtype"])
    write_grds(ds, out / "grads.grds")
    return f"wrote {out / 'grads.grds'} ({ds.n_examples} rows, width {ds.width})"


def cmd_compress(args, cfg, out):
    ds = read_grds(args.grads)
    r = cfg["run.r"]
    if r is None:
        raise ConfigError("compress needs --r")
    m = cfg["run.method"]
    plan = make_plan(m, r, cfg["run.seed"], ds.layers, ds.rows("train") if m == "pca" else None)
    cds = compress_dataset(plan, ds)
    write_grds(cds.data, out / "compressed.grds", dtype="f64")
    return f"wrote {out / 'compressed.grds'} ({cds.fingerprint})"


def cmd_influence(args, cfg, out):
    ds = read_grds(args.grads)
    damping = C.damping_of(cfg)
    if ds.layers and all("@" in layer.name for layer in ds.layers):
        cds = CompressedDataset.from_gradient_dataset(ds)
        rep = influence_compressed(cds, EngineConfig("compressed", damping, cfg["run.block_mode"]))
    else:
        rep = compute_influence(ds, cfg["run.method"], r=cfg["run.r"], seed=cfg["run.seed"], damping=damping,
                                lissa_iterations=cfg["run.lissa_iterations"], block_mode=cfg["run.block_mode"])
    _write(out / "influence.csv", rep.to_csv())
    _write(out / "run.jsonl", rep.to_jsonl(_record_config(cfg)))
    _write(out / "timings.json", json.dumps(rep.timings, sort_keys=True) + "\n")
    return f"wrote {out / 'influence.csv'} ({rep.method}, {rep.scores.size} scores)"


def _detection_setup(cfg) -> DetectionSetup:
    return DetectionSetup(C.task_of(cfg), cfg["run.flip"], C.model_of(cfg), C.hyper_of(cfg),
                          C.damping_of(cfg), cfg["run.lissa_iterations"])


def cmd_detect(args, cfg, out):
    res = detection_experiment(_methods(cfg), _r_rule(cfg), C.seed_list(cfg["run.seeds"]),
                               _detection_setup(cfg), _workers(cfg))
    text = detection_csv(res)
    _write(out / "detection.csv", text)
    return text.rstrip()


def cmd_retrain(args, cfg, out):
    setup = RetrainSetup(C.task_of(cfg), cfg["run.flip"], C.model_of(cfg), C.hyper_of(cfg), C.damping_of(cfg))
    fractions = [float(f) for f in cfg["run.fractions"].split(",")]
    seeds = C.seed_list(cfg["run.seeds"])
    results = [retrain_experiment(m, fractions, cfg["run.mode"], seeds, _r_rule(cfg), setup, _workers(cfg))
               for m in (_methods(cfg) if cfg["run.mode"] != "random" else ["random"])]
    if cfg["run.mode"] != "random" and args.with_random:
        results.append(retrain_experiment("random", fractions, "random", seeds, None, setup, _workers(cfg)))
    text = retrain_csv(results)
    _write(out / "retrain.csv", text)
    return text.rstrip()


def cmd_retrieve(args, cfg, out):
    setup = RetrievalSetup(C.task_of(cfg), C.model_of(cfg), C.hyper_of(cfg), C.damping_of(cfg))
    seeds = C.seed_list(cfg["run.seeds"])
    results = [retrieval_experiment(m, _r_rule(cfg), seeds, setup, _workers(cfg)) for m in _methods(cfg)]
    text = retrieval_csv(results)
    _write(out / "retrieval.csv", text)
    return text.rstrip()


def cmd_sweep(args, cfg, out):
    from .plots import plot_sweep

    result, orig = sweep_r(C.int_list(cfg["run.r_values"]), _methods(cfg), C.seed_list(cfg["run.seeds"]),
                           _detection_setup(cfg), _workers(cfg))
    _write(out / "sweep.csv", result.to_csv())
    _write(out / "orig.json", json.dumps({"orig_auc": orig}, sort_keys=True) + "\n")
    plot_sweep(result, out / "sweep_r.svg", orig)
    return f"wrote {out / 'sweep.csv'} and {out / 'sweep_r.svg'}"


def cmd_bench(args, cfg, out):
    rows = benchmark(_methods(cfg) if args.methods else ("dropout", "gaussian"), args.n, args.d,
                     cfg["run.r"] or 64, cfg["run.seed"], args.repeats)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(out / "bench.csv", buf.getvalue())
    return buf.getvalue().rstrip()


def cmd_theory(args, cfg, out):
    rep = run_suite(args.cases, args.d, args.n, args.theory_r, args.lam, cfg["run.seed"], workers=_workers(cfg))
    _write(out / "theory.json", rep.to_json() + "\n")
    _write(out / "theory.txt", rep.summary() + "\n")
    if not rep.ok:
        raise CheckFailed("bound violated; see theory.txt")
    return rep.summary()


class CheckFailed(InfkitError):
    pass


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic task (CSV)"),
    "train": (cmd_train, "train a model on a task CSV"),
    "grads": (cmd_grads, "export per-example gradients to GRDS"),
    "compress": (cmd_compress, "compress a GRDS file"),
    "influence": (cmd_influence, "score training examples"),
    "detect": (cmd_detect, "mislabel detection AUC per method"),
    "retrain-eval": (cmd_retrain, "retrain after removing top-ranked examples"),
    "retrieve": (cmd_retrieve, "same-source retrieval rates"),
    "sweep-r": (cmd_sweep, "detection AUC across compression sizes, with SVG plot"),
    "bench": (cmd_bench, "per-phase timing"),
    "theory-check": (cmd_theory, "Monte Carlo check of the error bounds"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="infkit", description="Influence scores with compressed gradients.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        s.add_argument("--out", help="output directory (default runs/<timestamp>-<hash>)")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        if name in ("train", "grads"):
            s.add_argument("--data", required=True)
        if name == "grads":
            s.add_argument("--model", required=True)
            s.add_argument("--query-split", choices=("val", "test"))
            s.add_argument("--dtype", choices=("f32", "f64"))
        if name in ("compress", "influence"):
            s.add_argument("--grads", required=True)
        if name in ("compress", "influence"):
            s.add_argument("--method")
        if name in ("compress", "influence", "detect", "retrain-eval", "retrieve", "bench"):
            s.add_argument("--r", type=int)
        if name in ("influence", "detect", "retrain-eval", "retrieve", "sweep-r"):
            s.add_argument("--damping", help="paper_rule | fixed:<v> | explicit:<v1>,<v2>,...")
        if name in ("influence", "detect"):
            s.add_argument("--lissa-iterations", type=int)
        if name == "influence":
            s.add_argument("--block-mode", choices=("per_layer", "single_block"))
        if name in ("detect", "retrain-eval", "retrieve", "sweep-r", "bench"):
            s.add_argument("--methods", help="comma-separated method names")
        if name in ("detect", "retrain-eval", "retrieve", "sweep-r"):
            s.add_argument("--seeds", help="count (5 -> 0..4) or comma list")
        if name in ("gen", "detect", "retrain-eval", "sweep-r"):
            s.add_argument("--flip", type=float)
        if name == "retrain-eval":
            s.add_argument("--fractions")
            s.add_argument("--mode", choices=("remove_top", "keep_top", "random"))
            s.add_argument("--with-random", action="store_true", help="add a random-removal baseline row")
        if name == "sweep-r":
            s.add_argument("--r-values")
        if name == "bench":
            s.add_argument("--n", type=int, default=256)
            s.add_argument("--d", type=int, default=100_000)
            s.add_argument("--repeats", type=int, default=3)
        if name == "theory-check":
            s.add_argument("--cases", type=int, default=100)
            s.add_argument("--d", type=int, default=64)
            s.add_argument("--n", type=int, default=16)
            s.add_argument("--r", type=int, default=8, dest="theory_r")
            s.add_argument("--lam", type=float, default=0.1)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve(args)
        out = _outdir(cfg, args.command)
        _echo(out, args.command, cfg)
        message = COMMANDS[args.command][0](args, cfg, out)
    except InfkitError as exc:
        print(f"error: {exc.category}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
