"""Linear evaluation of frozen embeddings: logistic-regression probe, splits, CV, baselines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .encoders import EncoderConfig, EncoderParams, encode, init_params, readout
from .graph import Graph, batch_graphs, normalize


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.1
    val_frac: float = 0.1
    test_frac: float = 0.8
    num_repeats: int = 20
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fr):
            raise ValueError("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.num_repeats < 1:
            raise ValueError("num_repeats must be >= 1")


@dataclass(frozen=True)
class ProbeConfig:
    l2_strength: float = 1e-3
    max_iters: int = 500
    tol: float = 1e-6
    lr: Optional[float] = None  # None: 1 / (Lipschitz bound of the gradient)

    def __post_init__(self):
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


DEFAULT_GRID = tuple(ProbeConfig(l2_strength=s) for s in (1e-4, 1e-3, 1e-2, 1e-1))


@dataclass
class Probe:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray
    iters: int
    grad_norm: float

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x) - self.mean) / self.scale) @ self.W + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x), axis=1)]

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_objective(W, b, x, onehot, l2):
    """Mean cross-entropy + l2 * ||W||^2 / 2, and its gradients."""
    n = len(x)
    p = _softmax(x @ W + b)
    loss = -np.sum(onehot * np.log(np.clip(p, 1e-300, None))) / n + 0.5 * l2 * np.sum(W * W)
    r = (p - onehot) / n
    return loss, x.T @ r + l2 * W, r.sum(axis=0)


def _as_array(embeddings) -> np.ndarray:
    return embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=np.float64)


def fit_probe(embeddings, labels, train_idx, cfg: ProbeConfig = ProbeConfig()) -> Probe:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training-set statistics (a copy; the
    embedding array is never written).  The bias is not regularized.
    """
    emb = _as_array(embeddings)
    if not np.all(np.isfinite(emb)):
        raise ProbeError("non-finite embeddings")
    train_idx = np.asarray(train_idx)
    if len(train_idx) == 0:
        raise ProbeError("empty training set")
    y = np.asarray(labels)[train_idx]
    classes = np.unique(np.asarray(labels))
    if len(np.unique(y)) < 2:
        raise ProbeError("training set contains a single class")

    x = emb[train_idx]
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    x = (x - mean) / scale
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)

    n, d = x.shape
    c = len(classes)
    # Hessian of the softmax CE is bounded by ||X_aug||^2 / (2n) + l2
    x_aug_norm2 = np.linalg.norm(np.hstack([x, np.ones((n, 1))]), 2) ** 2
    lr = cfg.lr if cfg.lr is not None else 1.0 / (x_aug_norm2 / (2 * n) + cfg.l2_strength)

    W = np.zeros((d, c))
    b = np.zeros(c)
    gnorm = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        _, gW, gb = probe_objective(W, b, x, onehot, cfg.l2_strength)
        gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
        if gnorm < cfg.tol:
            break
        W -= lr * gW
        b -= lr * gb
    return Probe(W=W, b=b, mean=mean, scale=scale, classes=classes, iters=it, grad_norm=gnorm)


@dataclass
class EvalReport:
    per_run: list[float]
    mean: float
    std: float
    selected_probe: dict
    val_mean: float = float("nan")
    grid: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_run": self.per_run,
            "mean": self.mean,
            "std": self.std,
            "selected_probe": self.selected_probe,
            "val_mean": self.val_mean,
            "grid": self.grid,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def _summary(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def random_split(labels, spec: SplitSpec, rng: np.random.Generator):
    """Disjoint train/val/test index arrays covering every node.

    When some class is missing from the training part, one of its members is
    swapped in for a training node of an over-represented class.
    """
    labels = np.asarray(labels)
    n = len(labels)
    n_train = int(round(spec.train_frac * n))
    n_val = int(round(spec.val_frac * n))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ProbeError(f"split fractions leave an empty part for {n} nodes")
    perm = rng.permutation(n)
    train, val, test = perm[:n_train].copy(), perm[n_train:n_train + n_val].copy(), perm[n_train + n_val:].copy()
    classes = np.unique(labels)
    if len(classes) <= n_train:
        for c in classes:
            if np.any(labels[train] == c):
                continue
            counts = {k: int(np.sum(labels[train] == k)) for k in classes}
            donors = [i for i, t in enumerate(train) if counts[labels[t]] > 1]
            if not donors:
                break
            for part in (test, val):
                pos = np.flatnonzero(labels[part] == c)
                if len(pos):
                    i = donors[0]
                    train[i], part[pos[0]] = part[pos[0]], train[i]
                    break
    return train, val, test


def evaluate_node(embeddings, labels, split: SplitSpec = SplitSpec(), probe_grid=DEFAULT_GRID) -> EvalReport:
    """Random-split linear evaluation.

    The probe config is chosen by validation accuracy averaged over all
    repeats; only then are the test accuracies of that config read out.
    """
    if not probe_grid:
        raise ProbeError("empty probe grid")
    emb = _as_array(embeddings)
    labels = np.asarray(labels)
    if len(labels) != len(emb):
        raise ProbeError("embeddings and labels differ in length")
    rng = np.random.default_rng(split.seed)
    splits = [random_split(labels, split, rng) for _ in range(split.num_repeats)]

    val_acc = np.zeros((len(probe_grid), len(splits)))
    probes = {}
    for gi, cfg in enumerate(probe_grid):
        for si, (tr, va, _) in enumerate(splits):
            p = fit_probe(emb, labels, tr, cfg)
            probes[gi, si] = p
            val_acc[gi, si] = p.accuracy(emb[va], labels[va])
    best = int(np.argmax(val_acc.mean(axis=1)))

    test_acc = [probes[best, si].accuracy(emb[te], labels[te]) for si, (_, _, te) in enumerate(splits)]
    mean, std = _summary(test_acc)
    return EvalReport(
        per_run=test_acc,
        mean=mean,
        std=std,
        selected_probe=asdict(probe_grid[best]),
        val_mean=float(val_acc[best].mean()),
        grid=[{**asdict(c), "val_mean": float(val_acc[i].mean())} for i, c in enumerate(probe_grid)],
    )


def stratified_folds(labels, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    if len(labels) < folds:
        raise ProbeError(f"{len(labels)} samples cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(labels), dtype=np.int64)
    start = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold[idx] = (start + np.arange(len(idx))) % folds
        start = (start + len(idx)) % folds
    return fold


def evaluate_graph_cv(embeddings, labels, folds: int = 10, probe_grid=DEFAULT_GRID, seed: int = 0) -> EvalReport:
    """Stratified k-fold CV.

    For fold k the next fold (k + 1 mod folds) is the validation part and the
    rest is used for fitting.  The config with the best mean validation
    accuracy is selected before any test fold is scored.
    """
    if not probe_grid:
        raise ProbeError("empty probe grid")
    emb = _as_array(embeddings)
    labels = np.asarray(labels)
    if len(labels) != len(emb):
        raise ProbeError("embeddings and labels differ in length")
    fold = stratified_folds(labels, folds, seed)
    parts = []
    for k in range(folds):
        v = (k + 1) % folds
        parts.append((np.flatnonzero((fold != k) & (fold != v)), np.flatnonzero(fold == v), np.flatnonzero(fold == k)))

    val_acc = np.zeros((len(probe_grid), folds))
    probes = {}
    for gi, cfg in enumerate(probe_grid):
        for k, (tr, va, _) in enumerate(parts):
            p = fit_probe(emb, labels, tr, cfg)
            probes[gi, k] = p
            val_acc[gi, k] = p.accuracy(emb[va], labels[va])
    best = int(np.argmax(val_acc.mean(axis=1)))
    test_acc = [probes[best, k].accuracy(emb[te], labels[te]) for k, (_, _, te) in enumerate(parts)]
    mean, std = _summary(test_acc)
    return EvalReport(
        per_run=test_acc,
        mean=mean,
        std=std,
        selected_probe=asdict(probe_grid[best]),
        val_mean=float(val_acc[best].mean()),
        grid=[{**asdict(c), "val_mean": float(val_acc[i].mean())} for i, c in enumerate(probe_grid)],
    )


# ---------------------------------------------------------------------------
# Embeddings


def node_embeddings(cfg: EncoderConfig, params: EncoderParams, g: Graph) -> np.ndarray:
    """Final-layer node states on the original graph."""
    return encode(cfg, params, normalize(g), None, Tensor(g.features))[-1].numpy()


def graph_embeddings(cfg: EncoderConfig, params: EncoderParams, graphs: Sequence[Graph], chunk: int = 256) -> np.ndarray:
    """Layer-wise sum-pooled graph vectors, G x (K * d)."""
    out = []
    for i in range(0, len(graphs), chunk):
        b = batch_graphs(graphs[i:i + chunk])
        states = encode(cfg, params, normalize(b), None, Tensor(b.features))
        out.append(readout(states, b.graph_ids, b.num_graphs).numpy())
    return np.concatenate(out)


def baseline_embeddings(kind: str, g: Graph | Sequence[Graph], cfg: EncoderConfig, seed: int) -> np.ndarray:
    """``raw_feature``: the input features; ``riu_encoder``: an untrained encoder's output."""
    graph_level = not isinstance(g, Graph)
    if kind == "raw_feature":
        if graph_level:
            return np.stack([gr.features.sum(axis=0) for gr in g])
        return g.features
    if kind in ("riu_encoder", "riu"):
        params = init_params(cfg, seed)
        if graph_level:
            return graph_embeddings(cfg, params, g)
        return node_embeddings(cfg, params, g)
    raise ValueError(f"unknown baseline {kind!r}")
