"""Command-line toolkit: dataset synthesis, feature extraction, training,
prediction, evaluation, benchmarking, the noise study and tree statistics.

Flag precedence is CLI > config file (--config, JSON) > built-in defaults.
Exit codes: 0 success, 1 operational failure, 2 usage error. Diagnostics go
to stderr; data goes to files. Every artifact carries provenance (tool
version, effective config, input digests) either embedded (JSON documents)
or in a ``<artifact>.meta.json`` sidecar (line- and table-oriented formats).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .evaluation import (
    benchmark,
    confusion_and_rates,
    noise_study,
    pr_curve_from_scores,
    write_pr_csv,
)
from .features import read_feature_csv, write_feature_csv
from .forest import (
    MarfModel,
    ModelFormatError,
    load_model,
    model_to_dict,
    predict_marf_batch,
    save_model,
    train_marf,
)
from .pipeline import extract_dataset
from .scan import (
    DEFAULT_JUMP_THRESHOLD,
    generate_scene,
    load_scene_configs,
    read_scan_dataset,
    write_scan_dataset,
)
from .tree import TrainParams, tree_stats


class UsageError(Exception):
    """Bad flags or config-file fields; maps to exit status 2."""


@dataclass
class RunConfig:
    command: str
    # input/output paths, used per command
    scene: Optional[str] = None
    scans: Optional[str] = None
    features: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None
    pr_out: Optional[str] = None
    # per-command extras
    frames: int = 200
    sigmas: tuple = (0.01,)
    repetitions: int = 3
    # hyperparameters
    k_scales: int = 3
    trees_per_scale: tuple = (100,)
    epsilon: float = 0.1
    alpha: float = 0.6
    beta: float = 0.5
    max_depth: int = 20
    min_samples: int = 2
    gini_epsilon: float = math.exp(-6)
    jump_threshold: float = DEFAULT_JUMP_THRESHOLD
    seed: int = 0
    confidence_center: str = "positive_mean"
    prf_p_min: float = 0.05
    threads: int = 0  # 0 = available parallelism
    quiet: bool = False

    def train_params(self) -> TrainParams:
        return TrainParams(
            epsilon=self.epsilon,
            max_depth=self.max_depth,
            min_samples=self.min_samples,
            gini_epsilon=self.gini_epsilon,
            seed=self.seed,
            confidence_center=self.confidence_center,
        )

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["sigmas"] = list(self.sigmas)
        data["trees_per_scale"] = list(self.trees_per_scale)
        return data


def _int_list(text) -> tuple:
    if isinstance(text, int):
        return (text,)
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(part) for part in str(text).split(","))


def _float_list(text) -> tuple:
    if isinstance(text, (int, float)):
        return (float(text),)
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(part) for part in str(text).split(","))


_FIELD_PARSERS = {
    "sigmas": _float_list,
    "trees_per_scale": _int_list,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marf", description="Multi-scale adaptive-switch random forest toolkit"
    )
    parser.add_argument("--version", action="version", version=f"marf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                       help="suppress progress output")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    def add_hyper(p):
        p.add_argument("-K", "--k-scales", dest="k_scales", type=int, default=argparse.SUPPRESS)
        p.add_argument("--trees-per-scale", dest="trees_per_scale", type=_int_list,
                       default=argparse.SUPPRESS, help="per-scale tree counts, e.g. 100 or 100,80,60")
        p.add_argument("--epsilon", type=float, default=argparse.SUPPRESS)
        p.add_argument("--alpha", type=float, default=argparse.SUPPRESS)
        p.add_argument("--beta", type=float, default=argparse.SUPPRESS)
        p.add_argument("--max-depth", dest="max_depth", type=int, default=argparse.SUPPRESS)
        p.add_argument("--min-samples", dest="min_samples", type=int, default=argparse.SUPPRESS)
        p.add_argument("--gini-epsilon", dest="gini_epsilon", type=float, default=argparse.SUPPRESS)
        p.add_argument("--confidence-center", dest="confidence_center",
                       choices=("positive_mean", "own_class_mean"), default=argparse.SUPPRESS)
        p.add_argument("--prf-p-min", dest="prf_p_min", type=float, default=argparse.SUPPRESS)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                       help="tree-training parallelism; 0 = all cores")

    p = sub.add_parser("synth", help="ray-cast synthetic scans from a scene config")
    p.add_argument("--scene", required=True, help="scene config JSON (object or list)")
    p.add_argument("--frames", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    add_common(p)

    p = sub.add_parser("features", help="cluster, label and featurize a scan dataset")
    p.add_argument("--scans", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jump-threshold", dest="jump_threshold", type=float, default=argparse.SUPPRESS)
    add_common(p)

    p = sub.add_parser("train", help="train a MARF model from a feature dataset")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    add_hyper(p)
    add_common(p)

    p = sub.add_parser("predict", help="per-cluster probabilities from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    add_common(p)

    p = sub.add_parser("eval", help="metrics and PR curve of a model on labeled features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--pr-out", dest="pr_out", help="PR-curve CSV")
    add_common(p)

    p = sub.add_parser("bench", help="latency benchmark of the full pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--scans", required=True)
    p.add_argument("--repetitions", type=int, default=argparse.SUPPRESS)
    p.add_argument("--jump-threshold", dest="jump_threshold", type=float, default=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    add_common(p)

    p = sub.add_parser("noise-study", help="per-feature error distributions under range noise")
    p.add_argument("--scene", required=True)
    p.add_argument("--sigmas", type=_float_list, default=argparse.SUPPRESS,
                   help="comma-separated noise sigmas in meters")
    p.add_argument("--frames", type=int, default=argparse.SUPPRESS)
    p.add_argument("--jump-threshold", dest="jump_threshold", type=float, default=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    add_common(p)

    p = sub.add_parser("tree-stats", help="leaf statistics of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    add_common(p)

    return parser


def parse_config(argv: Sequence[str]) -> RunConfig:
    """Merge CLI flags over config-file values over defaults into a RunConfig."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    config_path = ns.pop("config", None)
    command = ns.pop("command")
    merged = RunConfig(command=command)
    valid = {f.name for f in dataclasses.fields(RunConfig)} - {"command"}
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError(f"--config {config_path}: expected a JSON object")
        for key, value in file_values.items():
            if key not in valid:
                raise UsageError(f"--config {config_path}: unknown field {key!r}")
            try:
                if key in _FIELD_PARSERS:
                    value = _FIELD_PARSERS[key](value)
                setattr(merged, key, value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"--config {config_path}: field {key!r}: {exc}") from exc
    explicit = set(ns)
    for key, value in ns.items():
        setattr(merged, key, value)
    merged._explicit = explicit  # type: ignore[attr-defined]
    return merged


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _provenance(config: RunConfig, inputs: dict) -> dict:
    return {
        "tool": "marf",
        "tool_version": __version__,
        "command": config.command,
        "effective_config": config.to_dict(),
        "input_digests": {name: _sha256(path) for name, path in inputs.items()},
    }


def _write_sidecar(artifact_path: str, provenance: dict) -> None:
    with open(artifact_path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _info(config: RunConfig, message: str) -> None:
    if not config.quiet:
        print(message, file=sys.stderr)


def _cmd_synth(config: RunConfig) -> int:
    scenes = load_scene_configs(config.scene)
    records = []
    for si, scene in enumerate(scenes):
        if "seed" in getattr(config, "_explicit", set()) or config.seed != 0:
            scene = dataclasses.replace(scene, rng_seed=config.seed + si)
        for frame in range(config.frames):
            records.append(generate_scene(scene, frame))
    write_scan_dataset(config.out, records)
    _write_sidecar(config.out, _provenance(config, {"scene": config.scene}))
    _info(config, f"wrote {len(records)} scans to {config.out}")
    return 0


def _cmd_features(config: RunConfig) -> int:
    records = read_scan_dataset(config.scans)
    if not records:
        raise ValueError(f"{config.scans}: empty scan dataset")
    table = extract_dataset(records, config.jump_threshold)
    if len(table) == 0:
        raise ValueError(f"{config.scans}: no clusters found in any scan")
    write_feature_csv(config.out, table)
    _write_sidecar(config.out, _provenance(config, {"scans": config.scans}))
    _info(config, f"wrote {len(table)} clusters ({int(table.labels.sum())} legs) to {config.out}")
    return 0


def _cmd_train(config: RunConfig) -> int:
    table = read_feature_csv(config.features)
    trees = config.trees_per_scale
    if len(trees) == 1:
        trees = trees * config.k_scales
    n_jobs = config.threads if config.threads > 0 else -1
    model = train_marf(
        table,
        k_scales=config.k_scales,
        trees_per_scale=list(trees),
        params=config.train_params(),
        alpha=config.alpha,
        beta=config.beta,
        seed=config.seed,
        n_jobs=n_jobs,
    )
    save_model(model, config.out, provenance=_provenance(config, {"features": config.features}))
    _info(config, f"trained MARF@{config.k_scales} ({sum(trees)} trees) on {len(table)} clusters")
    return 0


def _cmd_predict(config: RunConfig) -> int:
    model = load_model(config.model)
    table = read_feature_csv(config.features)
    probs, labels, _ = predict_marf_batch(model, table.values)
    with open(config.out, "w", encoding="utf-8") as fh:
        fh.write("id,scan_id,probability,label\n")
        for i in range(len(table)):
            fh.write(f"{i},{table.scan_ids[i]},{probs[i]!r},{int(labels[i])}\n")
    _write_sidecar(config.out, _provenance(config, {"model": config.model, "features": config.features}))
    _info(config, f"predicted {len(table)} clusters -> {config.out}")
    return 0


def _cmd_eval(config: RunConfig) -> int:
    model = load_model(config.model)
    table = read_feature_csv(config.features)
    probs, _, _ = predict_marf_batch(model, table.values)
    counts, precision, recall = confusion_and_rates(probs > model.beta, table.labels)
    payload = {
        "beta": model.beta,
        "n_clusters": len(table),
        "tp": counts.tp,
        "fp": counts.fp,
        "fn": counts.fn,
        "tn": counts.tn,
        "precision": precision,
        "recall": recall,
        "provenance": _provenance(config, {"model": config.model, "features": config.features}),
    }
    _write_json(config.out, payload)
    if config.pr_out:
        curve = pr_curve_from_scores(probs, table.labels)
        write_pr_csv(config.pr_out, curve)
        _write_sidecar(config.pr_out, payload["provenance"])
    _info(config, f"precision={precision} recall={recall} -> {config.out}")
    return 0


def _cmd_bench(config: RunConfig) -> int:
    model = load_model(config.model)
    records = read_scan_dataset(config.scans)
    scans = [scan for scan, _ in records]
    report = benchmark(model, scans, config.repetitions, config.jump_threshold)
    payload = report.to_dict()
    payload["provenance"] = _provenance(config, {"model": config.model, "scans": config.scans})
    _write_json(config.out, payload)
    _info(config, f"median {report.total.median * 1e3:.2f} ms/scan "
                  f"({report.scans_per_second:.1f} scans/s) -> {config.out}")
    return 0


def _cmd_noise_study(config: RunConfig) -> int:
    scenes = load_scene_configs(config.scene)
    if len(scenes) != 1:
        raise ValueError("noise-study expects exactly one scene config")
    report = noise_study(scenes[0], list(config.sigmas), config.frames, config.jump_threshold)
    payload = report.to_dict()
    payload["provenance"] = _provenance(config, {"scene": config.scene})
    _write_json(config.out, payload)
    _info(config, f"noise study over {config.frames} frames -> {config.out}")
    return 0


def _cmd_tree_stats(config: RunConfig) -> int:
    model = load_model(config.model)
    scales = []
    for arf in model.arfs:
        stats = [tree_stats(t) for t in arf.trees]
        scales.append(
            {
                "scale": arf.scale,
                "tree_count": arf.tree_count,
                "avg_leaf_count": float(np.mean([s.leaf_count for s in stats])),
                "avg_leaf_depth": float(np.mean([s.mean_leaf_depth for s in stats])),
                "avg_dichotomous_nodes": float(np.mean([s.dichotomous_count for s in stats])),
            }
        )
    payload = {"scales": scales, "provenance": _provenance(config, {"model": config.model})}
    _write_json(config.out, payload)
    _info(config, f"tree statistics -> {config.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "features": _cmd_features,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "noise-study": _cmd_noise_study,
    "tree-stats": _cmd_tree_stats,
}


def run(config: RunConfig) -> int:
    """Execute a parsed command; returns the process exit status."""
    try:
        return _COMMANDS[config.command](config)
    except (ValueError, OSError, ModelFormatError) as exc:
        print(f"marf {config.command}: error: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        config = parse_config(sys.argv[1:] if argv is None else list(argv))
    except UsageError as exc:
        print(f"marf: error: {exc}", file=sys.stderr)
        return 2
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
