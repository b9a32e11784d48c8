"""Adam with decoupled weight decay and the FastGCL training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor
from .encoders import EncoderConfig, EncoderParams, init_params, trainable
from .graph import Graph, batch_graphs
from .objective import (
    ABLATIONS,
    EdgeWeighterParams,
    build_views,
    init_weighter,
    random_edge_weights,
    total_loss,
)

log = logging.getLogger(__name__)


class TrainingDiverged(NonFiniteError):
    def __init__(self, epoch: int, msg: str = "non-finite loss"):
        super().__init__(f"{msg} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    lam: float = 0.01
    seed: int = 0
    level: str = "node"
    batch_size: int = 32
    ablation: str = "learned"
    resample_random: bool = False
    log_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.level not in ("node", "graph"):
            raise ValueError(f"unknown level {self.level!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update in place: decay p by lr * wd first, then the bias-corrected Adam step."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_ssl: float
    l_norm: float
    ms: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    seed: int
    encoder: EncoderParams = field(repr=False, default=None)
    weighter: EdgeWeighterParams = field(repr=False, default=None)
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.epochs])

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "checkpoint": self.checkpoint,
            "epochs": [asdict(r) for r in self.epochs],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def write_curve(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "l_ssl", "l_norm", "ms"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.loss), repr(r.l_ssl), repr(r.l_norm), repr(r.ms)])


def _batches(graphs: Sequence[Graph], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(graphs))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield idx, batch_graphs([graphs[j] for j in idx])


def train(
    data: Graph | Sequence[Graph],
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    params: Optional[EncoderParams] = None,
    weighter: Optional[EdgeWeighterParams] = None,
) -> TrainReport:
    """Optimize encoder and edge weighter jointly; returns the per-epoch curve.

    Node level takes one Graph and does one full-batch step per epoch.  Graph
    level takes a list of Graphs and steps once per shuffled minibatch; the
    epoch loss is the mean over its minibatches.
    """
    if cfg.level == "node":
        if not isinstance(data, Graph):
            raise TypeError("node-level training expects a single Graph")
        graphs = [data]
    else:
        graphs = [data] if isinstance(data, Graph) else list(data)
    if not graphs:
        raise ValueError("empty dataset")

    # derivation order: encoder init, weighter init, random weights, batch shuffling
    ss = np.random.SeedSequence(cfg.seed)
    s_enc, s_w, s_rand, s_shuffle = ss.spawn(4)
    params = params if params is not None else init_params(enc_cfg, int(s_enc.generate_state(1)[0]))
    weighter = weighter if weighter is not None else init_weighter(
        enc_cfg.hidden_dim, seed=int(s_w.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(s_shuffle)
    rand_rng = np.random.default_rng(s_rand)

    def draw_random():
        return [random_edge_weights(g, int(rand_rng.integers(2**63))) for g in graphs]

    fixed_random = draw_random() if cfg.ablation == "random" else None

    opt_names = [("encoder", n) for n in trainable(enc_cfg, params)]
    if cfg.ablation == "learned":
        opt_names += [("weighter", n) for n in weighter]
    groups = {"encoder": params, "weighter": weighter}
    for group, name in opt_names:
        groups[group][name].requires_grad = True
    state = AdamState()

    records = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.ablation == "random" and cfg.resample_random and epoch > 1:
            fixed_random = draw_random()

        if cfg.level == "node":
            steps = [(np.array([0]), graphs[0])]
        else:
            steps = _batches(graphs, cfg.batch_size, shuffle_rng)

        tot = ssl = nrm = 0.0
        nsteps = 0
        for idx, g in steps:
            fixed = None
            if fixed_random is not None:
                fixed = Tensor(np.concatenate([fixed_random[i].data for i in idx]))
            try:
                with Tape() as tape:
                    bundle = build_views(enc_cfg, params, weighter, g, cfg.ablation, fixed)
                    loss, l_ssl, l_norm = total_loss(bundle, cfg.level, cfg.lam)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            if bundle.edge_weights is not None and bundle.edge_weights.data.size:
                e = bundle.edge_weights.data
                if not (np.all(e > 0) and np.all(e < 1)) and cfg.ablation != "unit":
                    raise TrainingDiverged(epoch, "edge weights left (0, 1)")
            tape.backward(loss)
            p_arrays = {f"{gr}.{n}": groups[gr][n].data for gr, n in opt_names}
            g_arrays = {f"{gr}.{n}": tape.grad(groups[gr][n]) for gr, n in opt_names}
            adam_step(state, p_arrays, g_arrays, cfg.lr, weight_decay=cfg.weight_decay)
            if not all(np.all(np.isfinite(p)) for p in p_arrays.values()):
                raise TrainingDiverged(epoch, "non-finite parameter")
            tot += loss.item()
            ssl += l_ssl.item()
            nrm += l_norm.item() if l_norm is not None else 0.0
            nsteps += 1

        ms = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1000.0
        rec = EpochRecord(epoch, tot / nsteps, ssl / nsteps, nrm / nsteps, ms)
        if not np.isfinite(rec.loss):
            raise TrainingDiverged(epoch)
        records.append(rec)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d loss %.6f ssl %.6f norm %.6f", epoch, rec.loss, rec.l_ssl, rec.l_norm)

    for t in list(params.values()) + list(weighter.values()):
        t.requires_grad = False
    return TrainReport(epochs=records, seed=cfg.seed, encoder=params, weighter=weighter)
