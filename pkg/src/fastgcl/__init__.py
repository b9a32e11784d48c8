"""Self-supervised graph encoders trained by contrasting weighted, unweighted and self-loop-only views."""

from .autodiff import Tape, Tensor, grad_check
from .encoders import EncoderConfig, EncoderParams, encode, init_params, readout
from .evaluation import ProbeConfig, SplitSpec, evaluate_graph_cv, evaluate_node, fit_probe
from .graph import Graph, SbmSpec, batch_graphs, generate_sbm, identity_view, load_graph, normalize
from .objective import build_views, compute_edge_weights, norm_loss, ssl_loss, total_loss
from .training import TrainConfig, TrainReport, adam_step, train

__version__ = "0.1.0"
