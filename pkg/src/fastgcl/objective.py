"""Edge weighting, the anchor/positive/negative views and the FastGCL losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig, EncoderParams, ParamSet, encode, glorot, readout
from .graph import Graph, identity_view, normalize

ABLATIONS = ("learned", "random", "unit")

# sigmoid(30) < 1 in float64, keeping learned weights strictly inside (0, 1)
LOGIT_BOUND = 30.0


class EdgeWeighterParams(ParamSet):
    pass


def init_weighter(in_dim: int, proj_dim: Optional[int] = None, seed: int = 0) -> EdgeWeighterParams:
    """Two-layer PReLU MLP projecting node states into the edge-scoring space."""
    proj_dim = proj_dim or in_dim
    rng = np.random.default_rng(seed)
    return EdgeWeighterParams({
        "W1": Tensor(glorot(rng, in_dim, proj_dim), name="W1"),
        "b1": Tensor(np.zeros((1, proj_dim)), name="b1"),
        "slope": Tensor(np.full((1, proj_dim), 0.25), name="slope"),
        "W2": Tensor(glorot(rng, proj_dim, proj_dim), name="W2"),
        "b2": Tensor(np.zeros((1, proj_dim)), name="b2"),
    })


def project(weighter: EdgeWeighterParams, h: Tensor) -> Tensor:
    z = ad.add(ad.matmul(h, weighter["W1"]), weighter["b1"])
    z = ad.prelu(z, weighter["slope"])
    return ad.add(ad.matmul(z, weighter["W2"]), weighter["b2"])


def compute_edge_weights(weighter: EdgeWeighterParams, h_alpha: Tensor, g: Graph) -> Tensor:
    """sigmoid(<z_u, z_v>) for every directed CSR entry (u, v); shape E x 1."""
    if h_alpha.rows != g.num_nodes:
        raise ValueError(f"h_alpha has {h_alpha.rows} rows for {g.num_nodes} nodes")
    z = project(weighter, h_alpha)
    logits = ad.clip(ad.row_dot(z, g.edge_rows(), g.col_idx), -LOGIT_BOUND, LOGIT_BOUND)
    return ad.sigmoid(logits)


def random_edge_weights(g: Graph, seed: int) -> Tensor:
    """Uniform(0, 1) per undirected edge, mirrored to both directed entries."""
    rng = np.random.default_rng(seed)
    rows = g.edge_rows()
    upper = rows < g.col_idx
    w = np.empty(len(rows))
    draws = rng.random(int(upper.sum()))
    # uniform on [0, 1); nudge exact zeros into the open interval
    draws = np.where(draws == 0.0, np.finfo(float).tiny, draws)
    w[upper] = draws
    mirror = g.mirror_index()
    w[~upper] = w[mirror[~upper]]
    return Tensor(w[:, None])


@dataclass
class ViewBundle:
    h_alpha: Tensor
    h_rho: Tensor
    h_eta: Tensor
    edge_weights: Optional[Tensor]
    states_alpha: list[Tensor] = field(default_factory=list)
    states_rho: list[Tensor] = field(default_factory=list)
    states_eta: list[Tensor] = field(default_factory=list)
    graph_ids: Optional[np.ndarray] = None
    num_graphs: int = 1
    num_edges: int = 0


def build_views(
    cfg: EncoderConfig,
    params: EncoderParams,
    weighter: Optional[EdgeWeighterParams],
    g: Graph,
    ablation: str = "learned",
    fixed_weights: Optional[Tensor] = None,
    x: Optional[Tensor] = None,
) -> ViewBundle:
    """Anchor, positive and negative encoder outputs sharing one set of parameters.

    ``ablation="learned"`` scores edges with the weighter applied to the
    anchor's final layer (gradient flows back into the encoder);
    ``"random"`` uses ``fixed_weights``; ``"unit"`` sets every weight to 1.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown edge-weight mode {ablation!r}")
    x = x if x is not None else Tensor(g.features)
    adj = normalize(g)
    states_a = encode(cfg, params, adj, None, x)
    h_alpha = states_a[-1]

    if ablation == "learned":
        if weighter is None:
            raise ValueError("learned edge weights need weighter parameters")
        e = compute_edge_weights(weighter, h_alpha, g)
    elif ablation == "random":
        if fixed_weights is None:
            raise ValueError("random edge weights must be supplied")
        e = fixed_weights
    else:
        e = Tensor(np.ones((len(g.col_idx), 1)))

    states_r = encode(cfg, params, adj, e, x)
    states_n = encode(cfg, params, identity_view(g), None, x)
    return ViewBundle(
        h_alpha=h_alpha,
        h_rho=states_r[-1],
        h_eta=states_n[-1],
        edge_weights=e,
        states_alpha=states_a,
        states_rho=states_r,
        states_eta=states_n,
        graph_ids=g.graph_ids if g.graph_ids is not None else np.zeros(g.num_nodes, dtype=np.int64),
        num_graphs=g.num_graphs,
        num_edges=g.num_edges,
    )


def _contrast(anchor: Tensor, pos: Tensor, neg: Tensor) -> Tensor:
    """-(1/N) sum[log sigmoid(sim+) + log(1 - sigmoid(sim-))]."""
    if anchor.rows == 0:
        raise ValueError("contrastive loss over zero objects")
    sim_pos = ad.row_cosine(anchor, pos)
    sim_neg = ad.row_cosine(anchor, neg)
    term = ad.add(ad.log(ad.sigmoid(sim_pos)), ad.log(ad.sub(Tensor(1.0), ad.sigmoid(sim_neg))))
    return ad.mul(ad.mean_all(term), Tensor(-1.0))


def ssl_loss(bundle: ViewBundle, level: str = "node") -> Tensor:
    if level == "node":
        return _contrast(bundle.h_alpha, bundle.h_rho, bundle.h_eta)
    if level == "graph":
        ids, n = bundle.graph_ids, bundle.num_graphs
        return _contrast(
            readout(bundle.states_alpha, ids, n),
            readout(bundle.states_rho, ids, n),
            readout(bundle.states_eta, ids, n),
        )
    raise ValueError(f"unknown level {level!r}")


def ssl_loss_from_sims(sim_pos: np.ndarray, sim_neg: np.ndarray) -> float:
    """Scalar evaluation of the contrastive loss from given similarity scores."""
    sp = 1.0 / (1.0 + np.exp(-np.asarray(sim_pos, dtype=float)))
    sn = 1.0 / (1.0 + np.exp(-np.asarray(sim_neg, dtype=float)))
    return float(-np.mean(np.log(sp) + np.log(1.0 - sn)))


def norm_loss(edge_weights: Tensor, num_edges: Optional[int] = None) -> Tensor:
    """-(1/count) sum over stored directed edges of log(1 + exp(1 - e)).

    Non-edge terms of the dense formulation are the constant log 2 and are
    left out.  ``num_edges`` (undirected) is only used to validate the input.
    """
    count = edge_weights.data.size
    if count == 0:
        raise ValueError("regularizer over an empty edge set")
    if num_edges is not None and num_edges < 1:
        raise ValueError("need at least one edge")
    terms = ad.softplus(ad.sub(Tensor(1.0), edge_weights))
    return ad.mul(ad.mean_all(terms), Tensor(-1.0))


def total_loss(bundle: ViewBundle, level: str, lam: float) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    """Returns (L, L_ssl, L_norm); L_norm is None for graphs without edges."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    l_ssl = ssl_loss(bundle, level)
    if bundle.edge_weights is None or bundle.edge_weights.data.size == 0:
        return l_ssl, l_ssl, None
    l_norm = norm_loss(bundle.edge_weights, bundle.num_edges)
    if lam == 0:
        return l_ssl, l_ssl, l_norm
    return ad.add(l_ssl, ad.mul(l_norm, Tensor(float(lam)))), l_ssl, l_norm
