"""Gradient compression plans: dropout, Gaussian, FJLT, PCA and LOGRA.

A plan is built once per dataset (fixed maps shared by train and validation
rows) and maps each per-layer block of width ``d_l`` to ``r_l`` values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import BudgetTooLarge, LograNeedsLinearLayers, PcaNeedsGradients, PlanMismatch
from .gradstore import GradientDataset, LayerSpec, layer_offsets, split_blocks
from .seeding import derive_rng

METHODS = ("dropout", "gaussian", "fjlt", "pca", "logra")


@dataclass(frozen=True, eq=False)
class DropoutIndices:
    """Retained coordinates; the binary selection matrix is never built."""

    indices: np.ndarray
    d: int

    @property
    def r(self) -> int:
        return len(self.indices)

    def apply(self, block: np.ndarray) -> np.ndarray:
        return block[..., self.indices]

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.r, self.d))
        m[np.arange(self.r), self.indices] = 1.0
        return m


@dataclass(frozen=True, eq=False)
class GaussianRows:
    rows: np.ndarray

    @property
    def r(self) -> int:
        return self.rows.shape[0]

    def apply(self, block: np.ndarray) -> np.ndarray:
        return block @ self.rows.T

    def matrix(self) -> np.ndarray:
        return self.rows


@dataclass(frozen=True, eq=False)
class FjltPlan:
    signs: np.ndarray  # length d_pad
    sample: np.ndarray  # sorted output coordinates in [0, d_pad)
    d: int

    @property
    def r(self) -> int:
        return len(self.sample)

    @property
    def d_pad(self) -> int:
        return len(self.signs)

    @property
    def scale(self) -> float:
        return math.sqrt(self.d_pad / self.r)

    def apply(self, block: np.ndarray) -> np.ndarray:
        padded = np.zeros(block.shape[:-1] + (self.d_pad,))
        padded[..., :self.d] = block
        padded *= self.signs
        return linalg.hadamard_transform(padded)[..., self.sample] * self.scale

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.d)).T


@dataclass(frozen=True, eq=False)
class PcaRows:
    rows: np.ndarray  # orthonormal, r x d

    @property
    def r(self) -> int:
        return self.rows.shape[0]

    def apply(self, block: np.ndarray) -> np.ndarray:
        return block @ self.rows.T

    def matrix(self) -> np.ndarray:
        return self.rows


@dataclass(frozen=True, eq=False)
class KronPlan:
    """Kronecker-structured projection for a linear layer.

    Gradient blocks are laid out as ``h (x) delta`` (input-major), so a block
    reshapes to the ``in_dim x out_dim`` matrix ``h delta^T``.
    """

    p_in: np.ndarray
    p_out: np.ndarray

    @property
    def r(self) -> int:
        return self.p_in.shape[0] * self.p_out.shape[0]

    def apply(self, block: np.ndarray) -> np.ndarray:
        lead = block.shape[:-1]
        g = block.reshape(*lead, self.p_in.shape[1], self.p_out.shape[1])
        out = self.p_in @ g @ self.p_out.T
        return out.reshape(*lead, self.r)

    def apply_factors(self, h: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """Project activations and output gradients, then take their Kronecker product."""
        a = np.asarray(h) @ self.p_in.T
        b = np.asarray(delta) @ self.p_out.T
        return (a[..., :, None] * b[..., None, :]).reshape(*a.shape[:-1], self.r)

    def matrix(self) -> np.ndarray:
        return np.kron(self.p_in, self.p_out)


@dataclass(frozen=True, eq=False)
class CompressionPlan:
    method: str
    r_total: int
    seed: int
    layers: tuple
    per_layer: tuple
    scaled: bool = False

    @property
    def r_per_layer(self) -> list[int]:
        return [p.r for p in self.per_layer]

    @property
    def fingerprint(self) -> str:
        fp = f"{self.method}:r={self.r_total}:seed={self.seed}"
        return fp + ":scaled" if self.scaled else fp

    def compressed_layers(self) -> list[LayerSpec]:
        return [LayerSpec(f"{layer.name}@{self.fingerprint}", p.r)
                for layer, p in zip(self.layers, self.per_layer)]

    def check_layers(self, layers) -> None:
        if tuple(layers) != self.layers:
            raise PlanMismatch(f"plan {self.fingerprint} was built for different layers")

    def apply(self, rows: np.ndarray) -> np.ndarray:
        """Compress a row (or stack of rows) of full gradients."""
        rows = np.asarray(rows, dtype=np.float64)
        d = int(layer_offsets(self.layers)[-1])
        if rows.shape[-1] != d:
            raise PlanMismatch(f"row width {rows.shape[-1]} != plan input width {d}")
        parts = [p.apply(b) for p, b in zip(self.per_layer, split_blocks(rows, self.layers))]
        return np.concatenate(parts, axis=-1)

    def matrix(self) -> np.ndarray:
        """Dense block-diagonal map (small dimensions only; for analysis and tests)."""
        mats = [p.matrix() for p in self.per_layer]
        out = np.zeros((sum(m.shape[0] for m in mats), sum(m.shape[1] for m in mats)))
        i = j = 0
        for m in mats:
            out[i:i + m.shape[0], j:j + m.shape[1]] = m
            i += m.shape[0]
            j += m.shape[1]
        return out


def allocate_budget(r_total: int, dims) -> list[int]:
    """Split ``r_total`` across layers proportionally to their sizes.

    ``r_l = max(1, round(r_total * d_l / d))`` with largest-remainder
    correction so the budgets sum exactly to ``r_total`` and ``r_l <= d_l``.
    """
    dims = [int(x) for x in dims]
    d = sum(dims)
    if r_total > d:
        raise BudgetTooLarge(f"r={r_total} exceeds total gradient width {d}")
    if r_total < len(dims):
        raise ValueError(f"r={r_total} is smaller than the number of layers ({len(dims)})")
    quota = [r_total * dl / d for dl in dims]
    budget = [min(dl, max(1, math.floor(q))) for q, dl in zip(quota, dims)]
    rem = [q - math.floor(q) for q in quota]
    order_up = sorted(range(len(dims)), key=lambda i: (-rem[i], i))
    order_down = sorted(range(len(dims)), key=lambda i: (rem[i], -budget[i], i))
    while sum(budget) < r_total:
        for i in order_up:
            if budget[i] < dims[i] and sum(budget) < r_total:
                budget[i] += 1
    while sum(budget) > r_total:
        for i in order_down:
            if budget[i] > 1 and sum(budget) > r_total:
                budget[i] -= 1
    return budget


def _orthonormal_completion(rows: np.ndarray, r: int, d: int, rng) -> np.ndarray:
    """Extend orthonormal ``rows`` to ``r`` orthonormal rows in R^d."""
    if rows.shape[0] >= r:
        return rows[:r]
    extra = rng.standard_normal((r - rows.shape[0], d))
    q, _ = np.linalg.qr(np.vstack([rows, extra]).T)
    q = q.T
    q[:rows.shape[0]] = rows
    return q[:r]


def _pca_rows(block: np.ndarray, r: int, rng) -> np.ndarray:
    _, s, vt = linalg.svd_thin(block)
    tol = (s[0] if s.size else 0.0) * max(block.shape) * np.finfo(float).eps
    vt = vt[s > tol] if s.size else vt[:0]
    # fix SVD sign ambiguity: largest-magnitude entry of each row is positive
    flip = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)]) if vt.size else []
    vt = vt * np.asarray(flip)[:, None] if vt.size else vt
    return _orthonormal_completion(vt, r, block.shape[1], rng)


def make_plan(method: str, r_total: int, seed: int, layers, training_gradients=None,
              scaled: bool = False) -> CompressionPlan:
    """Build a deterministic compression plan for ``layers``.

    ``training_gradients`` (n x d rows) is required for ``pca``. ``scaled``
    divides Gaussian entries by ``sqrt(r_l)`` (JL-style); the default keeps
    unit-variance entries.
    """
    if method not in METHODS:
        raise ValueError(f"unknown compression method {method!r}; choose from {METHODS}")
    layers = tuple(layers)
    budgets = allocate_budget(r_total, [layer.dim for layer in layers])
    if method == "pca":
        if training_gradients is None:
            raise PcaNeedsGradients("pca plans need the training gradient rows")
        train_blocks = split_blocks(np.asarray(training_gradients, dtype=np.float64), layers)
    if method == "logra" and any(layer.kind != "linear" for layer in layers):
        raise LograNeedsLinearLayers("logra needs every layer to be of linear kind")

    per_layer = []
    for lid, (layer, r) in enumerate(zip(layers, budgets)):
        rng = derive_rng(seed, f"plan/{method}", lid)
        d = layer.dim
        if method == "dropout":
            idx = np.sort(rng.choice(d, size=r, replace=False))
            per_layer.append(DropoutIndices(idx, d))
        elif method == "gaussian":
            p = rng.standard_normal((r, d))
            per_layer.append(GaussianRows(p / math.sqrt(r) if scaled else p))
        elif method == "fjlt":
            d_pad = linalg.next_power_of_two(d)
            signs = rng.choice(np.array([-1.0, 1.0]), size=d_pad)
            sample = np.sort(rng.choice(d_pad, size=r, replace=False))
            per_layer.append(FjltPlan(signs, sample, d))
        elif method == "pca":
            per_layer.append(PcaRows(_pca_rows(train_blocks[lid], r, rng)))
        else:
            s = max(1, math.isqrt(r))
            r_in, r_out = min(s, layer.in_dim), min(s, layer.out_dim)
            per_layer.append(KronPlan(rng.standard_normal((r_in, layer.in_dim)),
                                      rng.standard_normal((r_out, layer.out_dim))))
    r_eff = sum(p.r for p in per_layer)
    return CompressionPlan(method, r_eff, int(seed), layers, tuple(per_layer), scaled)


def explicit_plan(layers, matrices, method: str = "gaussian", seed: int = 0) -> CompressionPlan:
    """Plan from caller-supplied dense maps, one ``r_l x d_l`` matrix per layer."""
    layers = tuple(layers)
    per_layer = []
    for layer, m in zip(layers, matrices):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != layer.dim or not 1 <= m.shape[0] <= layer.dim:
            raise PlanMismatch(f"map of shape {m.shape} does not fit layer {layer.name!r} (dim {layer.dim})")
        per_layer.append(GaussianRows(m))
    return CompressionPlan(method, sum(p.r for p in per_layer), seed, layers, tuple(per_layer))


def compress_example(plan: CompressionPlan, g=None, activations=None) -> np.ndarray:
    """Compress one gradient row.

    For ``logra`` plans, ``activations`` may be given instead of ``g`` as a
    list of ``(h, delta)`` pairs, one per layer.
    """
    if activations is not None:
        if plan.method != "logra":
            raise PlanMismatch("activation pairs are only accepted by logra plans")
        if len(activations) != len(plan.per_layer):
            raise PlanMismatch("need one (h, delta) pair per layer")
        return np.concatenate([p.apply_factors(h, dl) for p, (h, dl) in zip(plan.per_layer, activations)])
    if g is None:
        raise ValueError("either g or activations is required")
    return plan.apply(np.asarray(g, dtype=np.float64))


@dataclass
class CompressedDataset:
    """Compressed rows plus the fingerprint of the plan that produced them."""

    fingerprint: str
    data: GradientDataset
    compression_seconds: float = field(default=0.0, compare=False)

    @property
    def method(self) -> str:
        return self.fingerprint.split(":", 1)[0]

    @property
    def r_per_layer(self) -> list[int]:
        return [layer.dim for layer in self.data.layers]

    @property
    def r_total(self) -> int:
        return self.data.width

    @classmethod
    def from_gradient_dataset(cls, ds: GradientDataset) -> "CompressedDataset":
        """Recover a compressed dataset read back from a GRDS file."""
        fps = {layer.name.rpartition("@")[2] for layer in ds.layers if "@" in layer.name}
        if len(fps) != 1 or any("@" not in layer.name for layer in ds.layers):
            raise PlanMismatch("GRDS layers carry no single compression fingerprint")
        return cls(fps.pop(), ds)


def compress_dataset(plan: CompressionPlan, ds: GradientDataset) -> CompressedDataset:
    """Apply ``plan`` to every row of ``ds`` (train and validation alike)."""
    plan.check_layers(ds.layers)
    t0 = time.perf_counter()
    rows = plan.apply(ds.gradients) if ds.n_examples else np.zeros((0, plan.r_total))
    elapsed = time.perf_counter() - t0
    out = ds.replace(layers=plan.compressed_layers(), gradients=rows, dtype="f64")
    return CompressedDataset(plan.fingerprint, out, elapsed)
