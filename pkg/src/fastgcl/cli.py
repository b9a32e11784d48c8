"""``fastgcl`` command line: train, eval, gradcheck, sweep, gen-data.

Exit codes: 0 success, 1 unexpected error, 2 config error, 3 non-finite
loss, 4 I/O failure, 5 incompatible checkpoint, 6 gradient check failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, load_config
from .encoders import (
    CheckpointError,
    EncoderParams,
    check_compatible,
    config_dict,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    EvalReport,
    baseline_embeddings,
    evaluate_graph_cv,
    evaluate_node,
    graph_embeddings,
    node_embeddings,
)
from .graph import GraphFormatError, batch_graphs, save_graph
from .objective import build_views, init_weighter, random_edge_weights, total_loss
from .training import TrainReport, train

log = logging.getLogger("fastgcl")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_IO = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_MAX_NODES = 16


def _labels(data) -> np.ndarray:
    if isinstance(data, list):
        if any(g.labels is None for g in data):
            raise ConfigError("graph dataset has no labels")
        return np.array([int(g.labels[0]) for g in data])
    if data.labels is None:
        raise ConfigError("dataset has no labels.csv")
    return data.labels


def _input_dim(data) -> int:
    return data[0].num_features if isinstance(data, list) else data.num_features


def run_train(cfg: RunConfig, out_dir: Path) -> TrainReport:
    data = cfg.load_data()
    enc_cfg = cfg.encoder_config(_input_dim(data))
    report = train(data, enc_cfg, cfg.train_config())
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "params.ckpt"
    save_checkpoint(ckpt, {"encoder": report.encoder, "weighter": report.weighter},
                    meta={"encoder": config_dict(enc_cfg), "seed": cfg.seed, "task": cfg.task})
    report.checkpoint = ckpt.name
    report.write_json(out_dir / "report.json")
    report.write_curve(out_dir / "curve.csv")
    return report


def run_eval(cfg: RunConfig, out_dir: Path, checkpoint: Optional[Path], baseline: Optional[str]) -> EvalReport:
    data = cfg.load_data()
    enc_cfg = cfg.encoder_config(_input_dim(data))
    labels = _labels(data)
    seeds = cfg.seeds()
    if baseline is not None:
        kind = {"raw_feature": "raw_feature", "riu": "riu_encoder"}[baseline]
        emb = baseline_embeddings(kind, data, enc_cfg, seeds["init"])
    else:
        groups, _ = load_checkpoint(checkpoint)
        if "encoder" not in groups:
            raise CheckpointError("checkpoint has no encoder parameters")
        params = EncoderParams(groups["encoder"].tensors)
        check_compatible(init_params(enc_cfg, 0), params)
        if cfg.task == "node":
            emb = node_embeddings(enc_cfg, params, data)
        else:
            emb = graph_embeddings(enc_cfg, params, data)
    if cfg.task == "node":
        rep = evaluate_node(emb, labels, cfg.split_spec(), cfg.probe_grid())
    else:
        rep = evaluate_graph_cv(emb, labels, int(cfg.eval["folds"]), cfg.probe_grid(), seeds["split"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rep.write_json(out_dir / "eval.json")
    return rep


def run_gradcheck(cfg: RunConfig) -> float:
    data = cfg.load_data()
    g = batch_graphs(data) if isinstance(data, list) else data
    if g.num_nodes > GRADCHECK_MAX_NODES:
        raise ConfigError(
            f"gradcheck needs a graph with at most {GRADCHECK_MAX_NODES} nodes, got {g.num_nodes}")
    enc_cfg = cfg.encoder_config(g.num_features)
    seeds = cfg.seeds()
    params = init_params(enc_cfg, seeds["init"])
    weighter = init_weighter(enc_cfg.hidden_dim, seed=seeds["init"] + 1)
    tc = cfg.train_config()
    tensors = list(params.values()) + (list(weighter.values()) if tc.ablation == "learned" else [])
    fixed = None
    if tc.ablation == "random":
        fixed = random_edge_weights(g, seeds["init"])

    def objective():
        bundle = build_views(enc_cfg, params, weighter, g, tc.ablation, fixed)
        return total_loss(bundle, cfg.task, tc.lam)[0]

    return autodiff.grad_check(objective, tensors)


def _sweep_cell(cfg: RunConfig, overrides: dict, out_dir: Path) -> dict:
    c = copy.deepcopy(cfg)
    c.encoder = {**c.encoder, **{k: v for k, v in overrides.items() if k in ("hidden_dim", "num_layers")}}
    c.train = {**c.train, **{k: v for k, v in overrides.items() if k in ("lambda", "ablation")}}
    report = run_train(c, out_dir)
    ev = run_eval(c, out_dir, out_dir / "params.ckpt", None)
    return {
        "d": c.encoder["hidden_dim"],
        "K": c.encoder["num_layers"],
        "lambda": c.train["lambda"],
        "mean_acc": ev.mean,
        "std_acc": ev.std,
        "final_loss": report.epochs[-1].loss,
        "ablation": c.train["ablation"],
    }


SWEEP_COLUMNS = ["d", "K", "lambda", "mean_acc", "std_acc", "final_loss", "ablation"]


def run_sweep(cfg: RunConfig, out_dir: Path) -> list[dict]:
    axes = {k: v for k, v in cfg.sweep.items() if v}
    if not axes:
        raise ConfigError("sweep needs at least one nonempty list under [sweep]", "sweep")
    names = list(axes)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    threads = max(1, int(os.environ.get("FASTGCL_THREADS", "1")))

    def run(i_cell):
        i, cell = i_cell
        tag = "_".join(f"{k}={v}" for k, v in cell.items())
        try:
            return _sweep_cell(cfg, cell, out_dir / f"cell{i:03d}_{tag}")
        except Exception as exc:  # recorded and skipped
            log.error("sweep cell %s failed: %s", tag, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(run, enumerate(cells)))
    else:
        rows = [run(c) for c in enumerate(cells)]
    ok = [r for r in rows if r is not None]
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in ok:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return ok


def run_gen_data(cfg: RunConfig, out_dir: Path) -> None:
    data = cfg.load_data()
    if isinstance(data, list):
        save_graph(batch_graphs(data), out_dir)
    else:
        save_graph(data, out_dir)


# ---------------------------------------------------------------------------


def _split_overrides(rest: list[str]) -> list[tuple[str, str]]:
    out = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}", tok)
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for {tok}", key)
            val = rest[i + 1]
            i += 2
        out.append((key, val))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastgcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="TOML file, or a bundled name (sbm_node, sbm_convergence, motifs)")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--output-dir", type=Path)

    common(sub.add_parser("train", help="train and write report.json, curve.csv, params.ckpt"))
    p = sub.add_parser("eval", help="linear evaluation; writes eval.json")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--baseline", choices=("raw_feature", "riu"))
    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    common(p)
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    common(sub.add_parser("sweep", help="grid over [sweep] lists; writes sweep.csv"))
    common(sub.add_parser("gen-data", help="write the configured dataset as CSV files"))
    return parser


GRADCHECK_DEFAULTS = [
    ("dataset.sbm.block_sizes", "[3, 3]"),
    ("dataset.sbm.p_in", "0.8"),
    ("dataset.sbm.p_out", "0.2"),
    ("dataset.sbm.feature_dim", "4"),
    ("encoder.hidden_dim", "5"),
    ("train.lambda", "0.5"),
]


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _split_overrides(rest)
        if args.command == "gradcheck" and args.config is None:
            overrides = GRADCHECK_DEFAULTS + overrides
        if args.seed is not None:
            overrides.append(("seed", str(args.seed)))
        if args.output_dir is not None:
            overrides.append(("output_dir", str(args.output_dir)))
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO

    out_dir = cfg.output_dir if cfg.output_dir.is_absolute() else Path.cwd() / cfg.output_dir
    try:
        if args.command == "train":
            rep = run_train(cfg, out_dir)
            print(f"trained {len(rep.epochs)} epochs, final loss {rep.epochs[-1].loss:.6f} -> {out_dir}")
        elif args.command == "eval":
            if args.baseline is None:
                ckpt = args.checkpoint or out_dir / "params.ckpt"
                if not ckpt.is_file():
                    print(f"checkpoint not found: {ckpt}", file=sys.stderr)
                    return EXIT_IO
            else:
                ckpt = None
            rep = run_eval(cfg, out_dir, ckpt, args.baseline)
            print(f"accuracy {rep.mean:.4f} +/- {rep.std:.4f} over {len(rep.per_run)} runs")
        elif args.command == "gradcheck":
            autodiff.set_corrupt_adjoint(args.corrupt_adjoint)
            try:
                t0 = time.perf_counter()
                err = run_gradcheck(cfg)
            finally:
                autodiff.set_corrupt_adjoint(False)
            print(f"max relative error {err:.3e} ({time.perf_counter() - t0:.2f}s)")
            if not err < GRADCHECK_THRESHOLD:
                print(f"gradient check failed: {err:.3e} >= {GRADCHECK_THRESHOLD:.0e}", file=sys.stderr)
                return EXIT_GRADCHECK
        elif args.command == "sweep":
            rows = run_sweep(cfg, out_dir)
            print(f"{len(rows)} sweep cells succeeded -> {out_dir / 'sweep.csv'}")
            if not rows:
                return EXIT_ERROR
        elif args.command == "gen-data":
            run_gen_data(cfg, out_dir)
            print(f"dataset written to {out_dir}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteError as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (GraphFormatError, FileNotFoundError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
