"""Command-line entry point: ``topostab {features,train,eval,certify,diagram}``.

Settings resolve as command-line flag, then config file (``--config``, INI
syntax, keys named like the long flags), then built-in default. Every
command prints its resolved settings as one JSON line before doing work.

Exit codes: 0 success, 2 ingestion or I/O failure, 3 non-finite loss,
4 checkpoint does not match the dataset.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path

from .cache import attach_cached, read_feature_cache, write_feature_cache
from .dataset import DatasetError, FeatureConfig, attach_hk_features, default_data_dir, iterate_batches, \
    parse_tudataset, stratified_split
from .graph import PerturbConfig, hop_distances
from .images import PiParams
from .model import CheckpointMismatch, LossConfig, TopoGinHk, read_checkpoint
from .persistence import build_rips, compute_persistence, dump_diagrams
from .training import VARIANTS, NumericError, RunConfig, TrainConfig, eval_acc, eval_cert, run_main

log = logging.getLogger("topostab")

DEFAULTS = {
    "dataset": "MUTAG",
    "data_dir": None,
    "r0": 0.4,
    "r1": 1.2,
    "res": 10,
    "sigma": 0.1,
    "perturb_p": 0.05,
    "drop_p": 0.1,
    "d_max": 10,
    "hidden": 64,
    "dropout": 0.5,
    "l_pi": 1.0,
    "lambda_kld": 0.1,
    "stability_weight": 0.3,
    "epochs": 100,
    "seed": 42,
    "lr": 1e-3,
    "weight_decay": 0.01,
    "grad_clip": 1.0,
    "eval_every": 5,
    "batch_size": 32,
    "variant": "full",
    "threads": 1,
    "out": "runs",
    "cache": None,
    "checkpoint": None,
    "compute_features": False,
    "graph": 0,
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items() if v is not None and not isinstance(v, bool)}
_TYPES.update(data_dir=str, cache=str, checkpoint=str)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _add_flags(p: argparse.ArgumentParser):
    for key in DEFAULTS:
        flag = "--" + key.replace("_", "-")
        if key == "compute_features":
            p.add_argument(flag, action="store_true", default=None, help="compute features if no cache exists")
        elif key == "variant":
            p.add_argument(flag, choices=VARIANTS, default=None)
        else:
            p.add_argument(flag, type=_TYPES[key], default=None)
    p.add_argument("--config", help="INI-style file with flag-named keys")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topostab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("features", "precompute topo/topo_pert persistence-image features"),
        ("train", "train a model and write metrics and a checkpoint"),
        ("eval", "clean and edge-dropped accuracy of a checkpoint"),
        ("certify", "mean proxy certified radius of a checkpoint"),
        ("diagram", "dump the H0/H1 diagrams of one graph"),
    ]:
        _add_flags(sub.add_parser(name, help=help_))
    return parser


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}", 2) from exc
    if not text.lstrip().startswith("["):
        text = "[topostab]\n" + text
    parser.read_string(text)
    out = {}
    for section in parser.sections():
        for key, raw in parser[section].items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise CliError(f"{path}: unknown setting {key!r}", 2)
            if key == "compute_features":
                out[key] = parser[section].getboolean(key)
            else:
                out[key] = _TYPES[key](raw)
    return out


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config_file(args.config))
    settings.update({k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None})
    if settings["data_dir"] is None:
        settings["data_dir"] = str(default_data_dir())
    return settings


def run_config(s: dict) -> RunConfig:
    return RunConfig(
        dataset=s["dataset"],
        data_dir=s["data_dir"],
        variant=s["variant"],
        pi=PiParams(s["r0"], s["r1"], s["res"], s["sigma"]),
        perturb_p=s["perturb_p"],
        features=FeatureConfig(s["d_max"]),
        loss=LossConfig(s["l_pi"], s["lambda_kld"], s["stability_weight"]),
        train=TrainConfig(epochs=s["epochs"], seed=s["seed"], learning_rate=s["lr"], weight_decay=s["weight_decay"],
                          batch_size=s["batch_size"], grad_clip_norm=s["grad_clip"], eval_every=s["eval_every"],
                          noisy_eval_drop_p=s["drop_p"]),
        hidden=s["hidden"],
        dropout=s["dropout"],
        threads=s["threads"],
    )


def _cache_path(s: dict) -> Path:
    return Path(s["cache"]) if s["cache"] else Path(s["out"]) / f"{s['dataset']}.features.txt"


def _checkpoint_path(s: dict) -> Path:
    return Path(s["checkpoint"]) if s["checkpoint"] else Path(s["out"]) / "model.ckpt"


def _cache_meta(cfg: RunConfig) -> dict:
    return {"r0": cfg.pi.r0, "r1": cfg.pi.r1, "res": cfg.pi.res, "sigma": cfg.pi.sigma,
            "perturb_p": cfg.perturb_p, "seed": cfg.train.seed}


def load_bundle(s: dict, allow_compute: bool):
    cfg = run_config(s)
    bundle = parse_tudataset(s["data_dir"], s["dataset"])
    cache = _cache_path(s)
    if cache.exists():
        header, topo, pert = read_feature_cache(cache)
        return attach_cached(bundle, topo, pert, cfg.features), header
    if not allow_compute:
        raise CliError(f"feature cache {cache} not found; run `topostab features` or pass --compute-features", 2)
    bundle = attach_hk_features(bundle, cfg.pi, PerturbConfig(cfg.perturb_p, cfg.train.seed), cfg.features,
                                threads=cfg.threads)
    return bundle, _cache_meta(cfg)


def cmd_features(s: dict) -> int:
    cfg = run_config(s)
    start = time.perf_counter()
    bundle = parse_tudataset(s["data_dir"], s["dataset"])
    bundle = attach_hk_features(bundle, cfg.pi, PerturbConfig(cfg.perturb_p, cfg.train.seed), cfg.features,
                                threads=cfg.threads)
    path = _cache_path(s)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_feature_cache(path, bundle, _cache_meta(cfg))
    print(json.dumps({"cache": str(path), "graphs": len(bundle), "dim": cfg.pi.dim,
                      "seconds": round(time.perf_counter() - start, 3)}))
    return 0


def cmd_train(s: dict) -> int:
    cfg = run_config(s)
    bundle, _ = load_bundle(s, bool(s["compute_features"]))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _checkpoint_path(s)
    result = run_main(cfg, bundle=bundle, metrics_path=out / "metrics.jsonl", checkpoint_path=ckpt)
    print(json.dumps({"best": result.best, "clean_acc": result.final_clean, "noisy_acc": result.final_noisy,
                      "cert_radius": result.final_cert, "metrics": str(out / "metrics.jsonl"),
                      "checkpoint": str(ckpt)}))
    return 0


def _load_for_eval(s: dict):
    bundle, _ = load_bundle(s, bool(s["compute_features"]))
    model = TopoGinHk.load(_checkpoint_path(s))
    arch = model.cfg
    want = (bundle.feature_dim, bundle.num_classes, len(bundle.graphs[0].topo))
    have = (arch.in_dim, arch.n_cls, arch.topo_dim)
    if want != have:
        raise CheckpointMismatch(f"checkpoint (in_dim, n_cls, topo_dim) = {have}, dataset gives {want}")
    header, _ = read_checkpoint(_checkpoint_path(s))
    hyper = header.get("hyper", {}).get("train", {})
    _, test_idx = stratified_split(bundle, hyper.get("train_frac", 0.8), hyper.get("seed", s["seed"]))
    batches = list(iterate_batches(bundle.graphs, test_idx, s["batch_size"]))
    return model, batches


def cmd_eval(s: dict) -> int:
    model, batches = _load_for_eval(s)
    clean = eval_acc(batches, model)
    report = {"clean_acc": clean, "drop_p": s["drop_p"],
              "num_graphs": sum(b.num_graphs for b in batches)}
    report["noisy_acc"] = eval_acc(batches, model, True, s["drop_p"], seed=s["seed"]) if s["drop_p"] > 0 else clean
    print(json.dumps(report))
    return 0


def cmd_certify(s: dict) -> int:
    model, batches = _load_for_eval(s)
    print(json.dumps({"cert_radius": eval_cert(batches, model, s["l_pi"]), "l_pi": s["l_pi"],
                      "num_graphs": sum(b.num_graphs for b in batches)}))
    return 0


def cmd_diagram(s: dict) -> int:
    bundle = parse_tudataset(s["data_dir"], s["dataset"])
    g = bundle.graphs[s["graph"]]
    h0, h1 = compute_persistence(build_rips(hop_distances(g.adjacency()), s["r1"]))
    sys.stdout.write(dump_diagrams([h0, h1]))
    return 0


COMMANDS = {"features": cmd_features, "train": cmd_train, "eval": cmd_eval, "certify": cmd_certify,
            "diagram": cmd_diagram}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        print(json.dumps({"command": args.command, "config": settings}, sort_keys=True))
        sys.stdout.flush()
        return COMMANDS[args.command](settings)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
