"""Desk-scale models with hand-written backprop, synthetic tasks and retraining.

Two architectures: logistic regression (one linear layer) and a two-layer
ReLU MLP. Biases are folded into each layer's input as a trailing constant 1,
so a layer's weight is an ``(in_dim + 1) x out_dim`` matrix and its
per-example gradient is the outer product ``h_prev (x) delta`` flattened
input-major. Binary tasks use one sigmoid output; more classes use softmax.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DivergedLoss, EmptyTrainSet, NotBinary
from .gradstore import GradientDataset, LayerSpec
from .seeding import derive_rng

DIVERGENCE_LOSS = 1e6


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Generator settings.

    ``blobs``: one Gaussian cluster per class, class centers ``separation``
    apart. With ``latent_dim`` the clusters live in a latent space of that
    size, mapped into ``feature_dim`` coordinates by a random linear map
    plus isotropic ``ambient_noise``, which makes the features redundant
    the way real gradients are. ``multi_source``: ``sources`` clusters with binary labels inside
    each; with ``orthogonal_blocks`` every source lives in its own block of
    feature coordinates (noise included).
    """

    kind: str = "blobs"
    classes: int = 2
    feature_dim: int = 20
    separation: float = 3.0
    noise: float = 1.0
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    seed: int = 0
    sources: int = 6
    source_spread: float = 4.0
    orthogonal_blocks: bool = False
    latent_dim: int | None = None
    ambient_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in ("blobs", "multi_source"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one example")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.kind == "multi_source":
            if self.sources < 2:
                raise ValueError("multi_source needs at least two sources")
            if self.classes != 2:
                raise ValueError("multi_source tasks are binary")
            if self.orthogonal_blocks and self.feature_dim < self.sources:
                raise ValueError("orthogonal blocks need feature_dim >= sources")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.feature_dim:
            raise ValueError("latent_dim must lie in [1, feature_dim]")


@dataclass
class TaskData:
    X: np.ndarray
    y: np.ndarray
    source: np.ndarray
    split: np.ndarray
    example_id: np.ndarray
    flipped: np.ndarray
    classes: int = 2

    def __len__(self) -> int:
        return len(self.y)

    def mask(self, split: str) -> np.ndarray:
        return self.split == split

    def subset(self, index) -> "TaskData":
        return TaskData(self.X[index], self.y[index], self.source[index], self.split[index],
                        self.example_id[index], self.flipped[index], self.classes)

    def part(self, split: str) -> "TaskData":
        return self.subset(self.mask(split))


def _unit(rng, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _balanced(rng, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_task(task: SyntheticTask) -> TaskData:
    """Sample a task; deterministic in ``task.seed``, classes balanced per split."""
    rng = derive_rng(task.seed, "task")
    counts = {"train": task.n_train, "val": task.n_val, "test": task.n_test}
    split = np.concatenate([[s] * n for s, n in counts.items()]).astype(object)
    F = task.feature_dim
    if task.kind == "blobs":
        k = task.latent_dim or F
        if task.classes == 2:
            u = _unit(rng, k)
            centers = np.stack([-u, u]) * task.separation / 2
        else:
            centers = np.stack([_unit(rng, k) for _ in range(task.classes)]) * task.separation / 2
        y = np.concatenate([_balanced(rng, n, task.classes) for n in counts.values()])
        X = centers[y] + task.noise * rng.standard_normal((len(y), k))
        if task.latent_dim is not None:
            mix = rng.standard_normal((F, k)) / math.sqrt(k)
            X = X @ mix.T + task.ambient_noise * rng.standard_normal((len(y), F))
        source = np.full(len(y), "blobs", dtype=object)
    else:
        S = task.sources
        src = np.concatenate([_balanced(rng, n, S) for n in counts.values()])
        y = np.zeros(len(src), dtype=int)
        for s in range(S):
            idx = np.flatnonzero(src == s)
            y[idx] = rng.permutation(np.arange(len(idx)) % 2)
        support = np.ones((S, F), dtype=bool)
        if task.orthogonal_blocks:
            b = F // S
            support[:] = False
            for s in range(S):
                support[s, s * b:(s + 1) * b] = True
        centers = np.zeros((S, F))
        dirs = np.zeros((S, F))
        for s in range(S):
            k = int(support[s].sum())
            centers[s, support[s]] = _unit(rng, k) * task.source_spread
            dirs[s, support[s]] = _unit(rng, k)
        noise = task.noise * rng.standard_normal((len(y), F)) * support[src]
        X = centers[src] + (2 * y - 1)[:, None] * dirs[src] * task.separation / 2 + noise
        source = np.array([f"source{s}" for s in src], dtype=object)
    return TaskData(X, y.astype(int), source, split, np.arange(len(y), dtype=np.int64),
                    np.zeros(len(y), dtype=bool), task.classes)


def flip_count(fraction: float, n: int) -> int:
    """``round(fraction * n)`` (half up), but at least one when ``fraction > 0``."""
    if fraction <= 0 or n == 0:
        return 0
    return min(n, max(1, math.floor(fraction * n + 0.5)))


def flip_labels(data: TaskData, fraction: float, seed: int) -> TaskData:
    """Invert binary labels on a random subset of the training split."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if data.classes != 2 or not set(np.unique(data.y).tolist()) <= {0, 1}:
        raise NotBinary("label flipping needs binary labels")
    train = np.flatnonzero(data.mask("train"))
    k = flip_count(fraction, len(train))
    chosen = np.sort(derive_rng(seed, "flip").choice(train, size=k, replace=False))
    y = data.y.copy()
    flipped = data.flipped.copy()
    y[chosen] = 1 - y[chosen]
    flipped[chosen] = True
    return replace(data, y=y, flipped=flipped)


# -- models -----------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    arch: str = "logreg"
    in_dim: int = 20
    classes: int = 2
    hidden: int = 32

    def __post_init__(self):
        if self.arch not in ("logreg", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")

    @property
    def out_dim(self) -> int:
        return 1 if self.classes == 2 else self.classes

    def shapes(self) -> list[tuple[int, int, str]]:
        if self.arch == "logreg":
            return [(self.in_dim, self.out_dim, "none")]
        return [(self.in_dim, self.hidden, "relu"), (self.hidden, self.out_dim, "none")]


@dataclass
class ModelState:
    spec: ModelSpec
    weights: list  # (in_dim + 1) x out_dim per layer, last row is the bias

    @property
    def activations(self) -> list[str]:
        return [a for _, _, a in self.spec.shapes()]

    def layer_specs(self) -> list[LayerSpec]:
        return [LayerSpec.linear(f"fc{i}", W.shape[0], W.shape[1]) for i, W in enumerate(self.weights)]

    def flat(self) -> np.ndarray:
        return np.concatenate([W.ravel() for W in self.weights])

    def with_flat(self, theta: np.ndarray) -> "ModelState":
        out, pos = [], 0
        for W in self.weights:
            out.append(theta[pos:pos + W.size].reshape(W.shape).copy())
            pos += W.size
        return ModelState(self.spec, out)

    def copy(self) -> "ModelState":
        return ModelState(self.spec, [W.copy() for W in self.weights])


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = derive_rng(seed, "init")
    weights = []
    for fan_in, fan_out, _ in spec.shapes():
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in + 1, fan_out)))
    return ModelState(spec, weights)


def _with_bias(h: np.ndarray) -> np.ndarray:
    return np.hstack([h, np.ones((h.shape[0], 1))])


def forward(model: ModelState, X: np.ndarray):
    """Returns (inputs-with-bias per layer, pre-activations per layer)."""
    hs, zs = [], []
    h = np.asarray(X, dtype=np.float64)
    for W, act in zip(model.weights, model.activations):
        hb = _with_bias(h)
        z = hb @ W
        hs.append(hb)
        zs.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    return hs, zs


def example_losses(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        z = logits[:, 0]
        return np.logaddexp(0.0, z) - y * z
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return lse - logits[np.arange(len(y)), y]


def _output_delta(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        with np.errstate(over="ignore"):
            return (1.0 / (1.0 + np.exp(-logits[:, 0])) - y)[:, None]
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return p


def backprop(model: ModelState, X, y):
    """Per-layer (inputs-with-bias, output-gradients) for every example."""
    hs, zs = forward(model, X)
    delta = _output_delta(zs[-1], np.asarray(y))
    deltas = [None] * len(model.weights)
    for q in range(len(model.weights) - 1, -1, -1):
        deltas[q] = delta
        if q > 0:
            delta = (delta @ model.weights[q][:-1].T) * (zs[q - 1] > 0)
    return hs, deltas, zs[-1]


def predict(model: ModelState, X) -> np.ndarray:
    logits = forward(model, X)[1][-1]
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(int)
    return logits.argmax(axis=1)


def evaluate(model: ModelState, data: TaskData) -> dict:
    if len(data) == 0:
        return {"accuracy": float("nan"), "cross_entropy": float("nan"), "perplexity": float("nan")}
    logits = forward(model, data.X)[1][-1]
    ce = float(example_losses(logits, data.y).mean())
    return {
        "accuracy": float(np.mean(predict(model, data.X) == data.y)),
        "cross_entropy": ce,
        "perplexity": float(math.exp(min(ce, 700.0))),
    }


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0


@dataclass
class TrainRecord:
    model: ModelState
    loss_curve: list
    metrics: dict
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "model": {"spec": asdict(self.model.spec), "weights": [W.tolist() for W in self.model.weights]},
            "loss_curve": self.loss_curve,
            "metrics": self.metrics,
            "config": self.config,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainRecord":
        doc = json.loads(text)
        spec = ModelSpec(**doc["model"]["spec"])
        weights = [np.array(W, dtype=np.float64).reshape(-1, spec.shapes()[i][1])
                   for i, W in enumerate(doc["model"]["weights"])]
        return cls(ModelState(spec, weights), doc["loss_curve"], doc["metrics"], doc["config"])


def _batch_grads(model: ModelState, X, y) -> list[np.ndarray]:
    hs, deltas, _ = backprop(model, X, y)
    return [h.T @ dl / len(y) for h, dl in zip(hs, deltas)]


def train(spec: ModelSpec, data: TaskData, hyper: TrainHyper = TrainHyper()) -> TrainRecord:
    """Mini-batch SGD with momentum and L2 weight decay on the train split."""
    tr = data.part("train")
    if len(tr) == 0:
        raise EmptyTrainSet("no training examples")
    model = init_model(spec, hyper.seed)
    velocity = [np.zeros_like(W) for W in model.weights]
    curve = []
    n = len(tr)
    for epoch in range(hyper.epochs):
        order = derive_rng(hyper.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            grads = _batch_grads(model, tr.X[idx], tr.y[idx])
            for W, v, g in zip(model.weights, velocity, grads):
                g = g + hyper.weight_decay * W
                v *= hyper.momentum
                v += g
                W -= hyper.lr * v
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(example_losses(forward(model, tr.X)[1][-1], tr.y).mean())
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergedLoss(f"training loss {loss!r} at epoch {epoch}")
        curve.append(loss)
    config = {"model": asdict(spec), "hyper": asdict(hyper), "n_train": n,
              "init": "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))"}
    return TrainRecord(model, curve, evaluate(model, data.part("test")), config)


def retrain_without(data: TaskData, exclude_ids, spec: ModelSpec, hyper: TrainHyper = TrainHyper()) -> TrainRecord:
    """Train from a fresh initialization with some training examples removed."""
    exclude = np.asarray(sorted(set(int(i) for i in exclude_ids)), dtype=np.int64)
    train_ids = data.example_id[data.mask("train")]
    if not np.all(np.isin(exclude, train_ids)):
        raise ValueError("exclude_ids must be training example ids")
    keep = ~(data.mask("train") & np.isin(data.example_id, exclude))
    if not np.any(keep & data.mask("train")):
        raise EmptyTrainSet("every training example was excluded")
    return train(spec, data.subset(keep), hyper)


# -- per-example gradients --------------------------------------------------

def per_example_gradients(model: ModelState, data: TaskData, capture_activations: bool = False,
                          query_split: str = "val", dtype: str = "f64"):
    """Gradient rows at the current parameters for the train and ``query_split`` examples.

    Examples of ``query_split`` are labelled ``val`` in the returned dataset.
    With ``capture_activations`` also returns, per layer, the pair
    ``(h_prev_with_bias, delta)`` whose outer product is the gradient block.
    """
    keep = data.mask("train") | data.mask(query_split)
    part = data.subset(keep)
    hs, deltas, _ = backprop(model, part.X, part.y)
    blocks = [(h[:, :, None] * dl[:, None, :]).reshape(len(part), -1) for h, dl in zip(hs, deltas)]
    split = np.where(part.split == "train", "train", "val").astype(object)
    ds = GradientDataset(model.layer_specs(), np.hstack(blocks), part.example_id, part.y,
                         part.source, split, part.flipped, dtype=dtype)
    if capture_activations:
        return ds, list(zip(hs, deltas))
    return ds


def flat_example_loss(model: ModelState, x, y) -> callable:
    """Loss of a single example as a function of the flat parameter vector."""
    X = np.asarray(x, dtype=np.float64)[None, :]
    Y = np.asarray([y])

    def f(theta):
        m = model.with_flat(theta)
        return float(example_losses(forward(m, X)[1][-1], Y)[0])

    return f
