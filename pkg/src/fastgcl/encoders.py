"""Shared GNN encoder: edge-weighted GCN (node tasks) and edge-weighted GIN (graph tasks)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Adjacency

KINDS = ("gcn", "gin")
ACTIVATIONS = ("prelu", "relu", "identity")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "gcn"
    num_layers: int = 2
    input_dim: int = 16
    hidden_dim: int = 64
    activation: str = "prelu"
    gin_eps: float = 0.0
    learn_eps: bool = True
    mlp_hidden: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")

    @property
    def gin_width(self) -> int:
        return self.mlp_hidden or self.hidden_dim


class ParamSet:
    """Ordered mapping of parameter name to Tensor."""

    def __init__(self, tensors: Optional[dict[str, Tensor]] = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        self.tensors[name] = t

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self) -> "ParamSet":
        return type(self)({k: Tensor(v.data, v.requires_grad, k) for k, v in self.items()})

    def require_grad(self, flag: bool = True) -> "ParamSet":
        for t in self.values():
            t.requires_grad = flag
        return self


class EncoderParams(ParamSet):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Glorot-uniform weights, zero biases, PReLU slopes at 0.25."""
    rng = np.random.default_rng(seed)
    p = EncoderParams()
    dim_in = cfg.input_dim
    for k in range(cfg.num_layers):
        if cfg.kind == "gcn":
            p[f"layer{k}.W"] = Tensor(glorot(rng, dim_in, cfg.hidden_dim), name=f"layer{k}.W")
            p[f"layer{k}.b"] = Tensor(np.zeros((1, cfg.hidden_dim)), name=f"layer{k}.b")
            if cfg.activation == "prelu":
                p[f"layer{k}.slope"] = Tensor(np.full((1, cfg.hidden_dim), 0.25), name=f"layer{k}.slope")
        else:
            w = cfg.gin_width
            p[f"layer{k}.W1"] = Tensor(glorot(rng, dim_in, w), name=f"layer{k}.W1")
            p[f"layer{k}.b1"] = Tensor(np.zeros((1, w)), name=f"layer{k}.b1")
            p[f"layer{k}.W2"] = Tensor(glorot(rng, w, cfg.hidden_dim), name=f"layer{k}.W2")
            p[f"layer{k}.b2"] = Tensor(np.zeros((1, cfg.hidden_dim)), name=f"layer{k}.b2")
            p[f"layer{k}.eps"] = Tensor(np.full((1, 1), cfg.gin_eps), name=f"layer{k}.eps")
            if cfg.activation == "prelu":
                p[f"layer{k}.slope"] = Tensor(np.full((1, w), 0.25), name=f"layer{k}.slope")
        dim_in = cfg.hidden_dim
    return p


def trainable(cfg: EncoderConfig, params: EncoderParams) -> list[str]:
    """Names of encoder parameters updated by the optimizer."""
    return [n for n in params if cfg.learn_eps or not n.endswith(".eps")]


def _act(cfg: EncoderConfig, params: EncoderParams, k: int, x: Tensor) -> Tensor:
    if cfg.activation == "prelu":
        return ad.prelu(x, params[f"layer{k}.slope"])
    if cfg.activation == "relu":
        return ad.relu(x)
    return x


def _gin_mlp(cfg: EncoderConfig, params: EncoderParams, k: int, x: Tensor) -> Tensor:
    h = ad.add(ad.matmul(x, params[f"layer{k}.W1"]), params[f"layer{k}.b1"])
    h = _act(cfg, params, k, h)
    return ad.add(ad.matmul(h, params[f"layer{k}.W2"]), params[f"layer{k}.b2"])


def encode(
    cfg: EncoderConfig,
    params: EncoderParams,
    adj: Adjacency,
    edge_w: Optional[Tensor],
    x: Tensor,
) -> list[Tensor]:
    """Run all K layers; returns the per-layer node states h^(1..K).

    GCN layers propagate over the normalized operator with its self-loops.
    GIN layers use only the neighbor entries of ``adj`` with unit coefficients
    and add the (1 + eps) self term separately, so passing the self-loop-only
    view collapses both encoders to a per-node MLP.  ``edge_w=None`` is the
    all-ones sentinel.
    """
    if x.rows != adj.num_nodes:
        raise ValueError(f"encode: x has {x.rows} rows for {adj.num_nodes} nodes")
    if x.cols != cfg.input_dim:
        raise ValueError(f"encode: x has {x.cols} features, config expects {cfg.input_dim}")
    states = []
    h = x
    if cfg.kind == "gcn":
        for k in range(cfg.num_layers):
            agg = ad.spmm_weighted(adj, edge_w, h)
            z = ad.add(ad.matmul(agg, params[f"layer{k}.W"]), params[f"layer{k}.b"])
            h = _act(cfg, params, k, z)
            states.append(h)
    elif cfg.kind == "gin":
        nbr = adj.neighbor_sum()
        for k in range(cfg.num_layers):
            self_term = ad.mul(h, ad.add(Tensor(1.0), params[f"layer{k}.eps"]))
            if nbr.nnz:
                self_term = ad.add(self_term, ad.spmm_weighted(nbr, edge_w, h))
            h = _gin_mlp(cfg, params, k, self_term)
            states.append(h)
    else:
        raise ValueError(f"unknown encoder kind {cfg.kind!r}")
    return states


def mlp_forward(cfg: EncoderConfig, params: EncoderParams, x: np.ndarray) -> list[np.ndarray]:
    """Per-node MLP path computed directly in numpy, with no propagation at all."""
    out = []
    h = np.asarray(x, dtype=np.float64)
    for k in range(cfg.num_layers):
        if cfg.kind == "gcn":
            z = h @ params[f"layer{k}.W"].data + params[f"layer{k}.b"].data
            h = _np_act(cfg, params, k, z)
        else:
            z = h * (1.0 + params[f"layer{k}.eps"].data)
            z = z @ params[f"layer{k}.W1"].data + params[f"layer{k}.b1"].data
            z = _np_act(cfg, params, k, z)
            h = z @ params[f"layer{k}.W2"].data + params[f"layer{k}.b2"].data
        out.append(h)
    return out


def _np_act(cfg, params, k, z):
    if cfg.activation == "prelu":
        return np.where(z > 0, z, params[f"layer{k}.slope"].data * z)
    if cfg.activation == "relu":
        return np.where(z > 0, z, 0.0)
    return z


def readout(hidden_states: list[Tensor], graph_ids: np.ndarray, num_graphs: int) -> Tensor:
    """Per-layer sum pooling concatenated in layer order: G x (K * d)."""
    if not hidden_states:
        raise ValueError("readout needs at least one hidden state")
    if len({h.rows for h in hidden_states}) != 1:
        raise ValueError("readout: hidden states have inconsistent row counts")
    pooled = [ad.segment_sum(h, graph_ids, num_graphs) for h in hidden_states]
    return ad.concat_cols(pooled)


# ---------------------------------------------------------------------------
# Checkpoints


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the requested config."""


CHECKPOINT_FORMAT = "fastgcl-params"


def save_checkpoint(path: str | os.PathLike, groups: dict[str, ParamSet], meta: Optional[dict] = None) -> None:
    """Write named tensors as JSON; float repr round-trips bit-exactly."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "meta": meta or {},
        "groups": {
            g: {
                name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                for name, t in ps.items()
            }
            for g, ps in groups.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, ParamSet], dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    if record.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format")
    groups = {}
    for g, tensors in record["groups"].items():
        ps = EncoderParams() if g == "encoder" else ParamSet()
        for name, spec in tensors.items():
            arr = np.array(spec["values"], dtype=np.float64).reshape(spec["shape"])
            ps[name] = Tensor(arr, name=name)
        groups[g] = ps
    return groups, record.get("meta", {})


def check_compatible(expected: ParamSet, loaded: ParamSet) -> None:
    if set(expected) != set(loaded):
        missing = sorted(set(expected) ^ set(loaded))
        raise CheckpointError(f"parameter names differ: {missing}")
    for name in expected:
        if expected[name].shape != loaded[name].shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {loaded[name].shape}, config expects {expected[name].shape}")


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
