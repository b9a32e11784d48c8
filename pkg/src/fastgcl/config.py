"""Run configuration: TOML files plus dotted command-line overrides."""

from __future__ import annotations

import copy
import os
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoders import EncoderConfig
from .evaluation import ProbeConfig, SplitSpec
from .graph import Graph, SbmSpec, generate_motif_graphs, generate_sbm, load_graph, split_batch
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, msg: str, key: Optional[str] = None):
        super().__init__(msg)
        self.key = key


DEFAULTS: dict[str, Any] = {
    "task": "node",
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "path": None,
        "sbm": {
            "block_sizes": [30, 30],
            "p_in": 0.3,
            "p_out": 0.02,
            "feature_dim": 16,
            "feature_signal": 1.0,
        },
        "motifs": {
            "num_graphs": 100,
            "nodes_per_graph": 30,
            "motif_size": 5,
            "purity": 0.8,
            "noise_edges": 3,
        },
    },
    "encoder": {
        "kind": "gcn",
        "num_layers": 2,
        "hidden_dim": 64,
        "activation": "prelu",
        "gin_eps": 0.0,
        "learn_eps": True,
        "mlp_hidden": 0,
    },
    "train": {
        "epochs": 100,
        "lr": 1e-3,
        "weight_decay": 0.0,
        "lambda": 0.01,
        "batch_size": 32,
        "ablation": "learned",
        "resample_random": False,
        "log_every": 0,
        "deterministic": True,
    },
    "eval": {
        "train_frac": 0.1,
        "val_frac": 0.1,
        "test_frac": 0.8,
        "num_repeats": 20,
        "folds": 10,
        "l2_grid": [1e-4, 1e-3, 1e-2, 1e-1],
        "max_iters": 500,
        "tol": 1e-6,
    },
    "sweep": {
        "hidden_dim": [],
        "num_layers": [],
        "lambda": [],
        "ablation": [],
    },
}

SWEEP_KEYS = ("hidden_dim", "num_layers", "lambda", "ablation")


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}", key)
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key!r} must be a table", key)
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _coerce(raw: str, like: Any, key: str) -> Any:
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, list):
            parsed = tomllib.loads(f"v = {raw}")["v"] if raw.startswith("[") else [raw]
            if like:
                return [_coerce(str(x), like[0], key) if isinstance(x, str) else x for x in parsed]
            return [_auto(x) for x in parsed]
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key!r}", key) from None
    return _auto(raw)


def _auto(x):
    if not isinstance(x, str):
        return x
    for conv in (int, float):
        try:
            return conv(x)
        except ValueError:
            pass
    return x


def apply_override(tree: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = tree
    ref = DEFAULTS
    for p in parts[:-1]:
        if p not in ref or not isinstance(ref[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}", dotted)
        node = node.setdefault(p, {})
        ref = ref[p]
    leaf = parts[-1]
    if leaf not in ref or isinstance(ref[leaf], dict):
        raise ConfigError(f"unknown config key {dotted!r}", dotted)
    like = ref[leaf] if ref[leaf] is not None else ""
    node[leaf] = _coerce(raw, like, dotted)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"sbm_node"``."""
    p = Path(str(resources.files("fastgcl") / "configs" / f"{name}.toml"))
    if not p.is_file():
        raise ConfigError(f"no bundled config named {name!r}", name)
    return p


def resolve_config_path(path: str | os.PathLike) -> Path:
    """An existing file path, or the name of a bundled config."""
    p = Path(path)
    if p.is_file() or p.suffix or len(p.parts) > 1:
        return p
    return bundled_config(str(p))


def load_config(path: Optional[str | os.PathLike] = None, overrides: Optional[list[tuple[str, str]]] = None) -> "RunConfig":
    tree: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = resolve_config_path(path)
        with open(path, "rb") as fh:
            try:
                tree = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        base_dir = Path(path).resolve().parent
    for dotted, raw in overrides or []:
        apply_override(tree, dotted, raw)
    merged = _merge(DEFAULTS, tree)
    return RunConfig.from_tree(merged, base_dir)


@dataclass
class RunConfig:
    task: str
    seed: int
    output_dir: Path
    dataset: dict
    encoder: dict
    train: dict
    eval: dict
    sweep: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_tree(cls, t: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if t["task"] not in ("node", "graph"):
            raise ConfigError(f"task must be 'node' or 'graph', got {t['task']!r}", "task")
        for k in SWEEP_KEYS:
            if not isinstance(t["sweep"][k], list):
                raise ConfigError(f"sweep.{k} must be a list", f"sweep.{k}")
        cfg = cls(
            task=t["task"],
            seed=int(t["seed"]),
            output_dir=Path(t["output_dir"]),
            dataset=t["dataset"],
            encoder=t["encoder"],
            train=t["train"],
            eval=t["eval"],
            sweep=t["sweep"],
            base_dir=base_dir,
        )
        p = cfg.dataset_path
        if p is not None and not p.is_dir():
            raise ConfigError(f"dataset.path {str(p)!r} does not exist", "dataset.path")
        # validate eagerly so a bad value fails at parse time
        cfg.encoder_config(input_dim=1)
        cfg.train_config()
        cfg.split_spec()
        cfg.probe_grid()
        return cfg

    @property
    def dataset_path(self) -> Optional[Path]:
        p = self.dataset.get("path")
        if not p:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def seeds(self) -> dict[str, int]:
        """Root seed fanned out in a fixed order: data, init, split."""
        children = np.random.SeedSequence(self.seed).spawn(3)
        names = ("data", "init", "split")
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        e = self.encoder
        try:
            return EncoderConfig(
                kind=e["kind"],
                num_layers=int(e["num_layers"]),
                input_dim=int(input_dim),
                hidden_dim=int(e["hidden_dim"]),
                activation=e["activation"],
                gin_eps=float(e["gin_eps"]),
                learn_eps=bool(e["learn_eps"]),
                mlp_hidden=int(e["mlp_hidden"]) or None,
            )
        except ValueError as exc:
            raise ConfigError(f"encoder: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                epochs=int(t["epochs"]),
                lr=float(t["lr"]),
                weight_decay=float(t["weight_decay"]),
                lam=float(t["lambda"]),
                seed=self.seeds()["init"],
                level=self.task,
                batch_size=int(t["batch_size"]),
                ablation=t["ablation"],
                resample_random=bool(t["resample_random"]),
                log_every=int(t["log_every"]),
                deterministic=bool(t["deterministic"]),
            )
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def split_spec(self) -> SplitSpec:
        e = self.eval
        try:
            return SplitSpec(float(e["train_frac"]), float(e["val_frac"]), float(e["test_frac"]),
                             int(e["num_repeats"]), self.seeds()["split"])
        except ValueError as exc:
            raise ConfigError(f"eval: {exc}") from None

    def probe_grid(self) -> tuple[ProbeConfig, ...]:
        e = self.eval
        if not e["l2_grid"]:
            raise ConfigError("eval.l2_grid must be nonempty", "eval.l2_grid")
        try:
            return tuple(ProbeConfig(float(s), int(e["max_iters"]), float(e["tol"])) for s in e["l2_grid"])
        except ValueError as exc:
            raise ConfigError(f"eval: {exc}") from None

    def load_data(self) -> Graph | list[Graph]:
        """The node-task Graph, or the list of graphs for the graph task."""
        p = self.dataset_path
        seed = self.seeds()["data"]
        if self.task == "node":
            if p is not None:
                return load_graph(p)
            s = self.dataset["sbm"]
            return generate_sbm(SbmSpec(tuple(int(b) for b in s["block_sizes"]), float(s["p_in"]),
                                        float(s["p_out"]), int(s["feature_dim"]),
                                        float(s["feature_signal"]), seed))
        if p is not None:
            return split_batch(load_graph(p))
        m = self.dataset["motifs"]
        return generate_motif_graphs(int(m["num_graphs"]), int(m["nodes_per_graph"]), int(m["motif_size"]),
                                     float(m["purity"]), int(m["noise_edges"]), seed)
