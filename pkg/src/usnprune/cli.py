"""Command-line experiment harness.

Subcommands: ``dataset`` (synthetic scene generation), ``train`` (one
training-and-pruning run producing a checkpoint and per-epoch log),
``certify`` (certification campaign over checkpoints, specs, and test
images), ``report`` (aggregate tables from campaign summaries), and
``visualize`` (per-neuron stability CSV for a checkpoint).

Every run is recorded in ``manifest.json`` in the output directory so every
report is traceable to a config and seed. Exit codes: 0 success, 1 usage or
malformed config, 2 runtime failure.

Config files are JSON; see README for the schemas.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from ._validation import spawn_rng
from .certify import (KeypointCriterion, campaign, write_campaign_csv, write_campaign_summary)
from .data import SceneParams, generate_dataset, load_dataset, save_dataset
from .errors import UsnpruneError
from .network import LayerSpec, cnn_small, compact, load_network, save_network
from .perturbation import PerturbationSpec, sample
from .pruning import (LossWeights, PruningSchedule, TrainConfig, scale_keypoints_to_output,
                      train, write_training_log)
from .usn import UsnStats, accumulate, collect_stats, write_stats_csv

MANIFEST = "manifest.json"


class CliUsageError(UsnpruneError):
    """Bad arguments or malformed config: exit code 1."""


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliUsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliUsageError(f"config file {path} is not valid JSON: {exc}")


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise CliUsageError(f"config for {where} is missing required key {key!r}")
    return cfg[key]


def _append_manifest(out_dir: str, entry: dict) -> None:
    path = os.path.join(out_dir, MANIFEST)
    manifest = {"runs": []}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    manifest["runs"].append(entry)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _specs_from(cfg_list) -> list:
    return [PerturbationSpec.from_dict(d) for d in cfg_list]


# ----- subcommands -----------------------------------------------------------


def cmd_dataset(args) -> None:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    scene = SceneParams.from_dict(cfg["scene"]) if "scene" in cfg else SceneParams()
    ds = generate_dataset(int(_require(cfg, "n_train", "dataset")),
                          int(_require(cfg, "n_val", "dataset")),
                          int(_require(cfg, "n_test", "dataset")),
                          params=scene, seed=seed)
    out = os.path.join(args.out_dir, cfg.get("name", "dataset"))
    manifest = save_dataset(ds, out)
    _append_manifest(args.out_dir, {"command": "dataset", "config": cfg, "seed": seed,
                                    "outputs": [out], "checksums": manifest["checksums"]})
    print(f"dataset written to {out}")


def _train_config_from(cfg: dict, dataset, seed: int) -> TrainConfig:
    arch = cfg.get("architecture", {})
    input_shape = (1,) + tuple(dataset.params.image_size)
    if "layers" in arch:
        layers = tuple(LayerSpec.from_dict(d) for d in arch["layers"])
    else:
        layers = tuple(cnn_small(
            input_shape=input_shape,
            num_keypoints=dataset.params.num_keypoints,
            heatmap_shape=tuple(arch.get("heatmap_size", (12, 12))),
            conv_channels=tuple(arch.get("conv_channels", (6, 12, 12, 12))),
            conv_strides=tuple(arch.get("conv_strides", (2, 2, 1, 1))),
            temperature=float(arch.get("temperature", 1.0))))
    sched_cfg = cfg.get("schedule", {})
    rho = float(cfg.get("rho", sched_cfg.get("rho_final", 0.2)))
    n_steps = int(sched_cfg.get("n_steps", 8))
    t_start = int(sched_cfg.get("t_start", 4))
    t_interval = int(sched_cfg.get("t_interval", 2))
    t_end = int(sched_cfg.get("t_end", t_start + n_steps * t_interval))
    schedule = PruningSchedule(rho_final=rho, n_steps=n_steps, t_start=t_start,
                               t_end=t_end, t_interval=t_interval)
    weights = LossWeights(lambda_u=float(cfg.get("lambda_u", 1.0)),
                          lambda_s=float(cfg.get("lambda_s", 1.0)),
                          lambda_w=float(cfg.get("lambda_w", 10.0)),
                          prune_layers=tuple(cfg.get("prune_layers", ())))
    perturbations = tuple(_specs_from(cfg.get("perturbations", [
        {"kind": "brightness", "epsilon": 1.0 / 255.0},
        {"kind": "contrast", "epsilon": 0.01},
    ])))
    return TrainConfig(layers=layers, input_shape=input_shape,
                       epochs=int(cfg.get("epochs", 30)), schedule=schedule, weights=weights,
                       perturbations=perturbations, batch_size=int(cfg.get("batch_size", 64)),
                       learning_rate=float(cfg.get("learning_rate", 0.01)),
                       m_samples=int(cfg.get("m_samples", 4)), seed=seed,
                       eps_usn=float(cfg.get("eps_usn", 1e-8)),
                       optimizer=cfg.get("optimizer", "adam"),
                       weight_decay=float(cfg.get("weight_decay", 0.0)),
                       prune_rule=cfg.get("prune_rule", "usn"),
                       heatmap_loss_weight=float(cfg.get("heatmap_loss_weight", 0.0)),
                       heatmap_target_sigma=float(cfg.get("heatmap_target_sigma", 0.9)))


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    dataset = load_dataset(_require(cfg, "dataset_dir", "train"))
    config = _train_config_from(cfg, dataset, seed)
    name = cfg.get("name", f"run-seed{seed}")
    result = train(config, dataset)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, f"{name}.npz")
    log_path = os.path.join(args.out_dir, f"{name}-log.csv")
    meta = {
        "run_name": name,
        "seed_lineage": {"seed": seed, "streams": ["init", "shuffle", "perturb", "prune"]},
        "rho": config.schedule.rho_final if config.prune_rule != "none" else 0.0,
        "lambda_u": config.weights.lambda_u,
        "lambda_s": config.weights.lambda_s,
        "lambda_w": config.weights.lambda_w,
        "prune_rule": config.prune_rule,
        "epochs": config.epochs,
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "diverged": result.diverged,
        "kept_channels": result.kept_channels,
        "perturbations": [s.to_dict() for s in config.perturbations],
    }
    save_network(result.network, ckpt_path, meta=meta)
    write_training_log(log_path, result.log)
    _append_manifest(args.out_dir, {"command": "train", "config": cfg, "seed": seed,
                                    "outputs": [ckpt_path, log_path], "run_name": name})
    status = "diverged (last finite checkpoint saved)" if result.diverged else \
        f"best epoch {result.best_epoch} (val {result.best_val:.6g})"
    print(f"trained {name}: {status} -> {ckpt_path}")


def cmd_certify(args) -> None:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    dataset = load_dataset(_require(cfg, "dataset_dir", "certify"))
    ckpt_paths = _require(cfg, "checkpoints", "certify")
    if isinstance(ckpt_paths, str):
        ckpt_paths = sorted(
            os.path.join(ckpt_paths, f) for f in os.listdir(ckpt_paths) if f.endswith(".npz"))
    if not ckpt_paths:
        raise CliUsageError("no checkpoints given")
    use_compact = bool(cfg.get("compact", True))
    nets = {}
    run_info = {}
    for path in ckpt_paths:
        net, meta = load_network(path)
        name = meta.get("run_name") or os.path.splitext(os.path.basename(path))[0]
        nets[name] = compact(net) if use_compact else net
        run_info[name] = meta
    specs = _specs_from(cfg.get("specs", [
        {"kind": "brightness", "epsilon": 2.0 / 255.0},
        {"kind": "brightness", "epsilon": 5.0 / 255.0},
        {"kind": "contrast", "epsilon": 0.01},
        {"kind": "contrast", "epsilon": 0.02},
        {"kind": "contrast", "epsilon": 0.05},
    ]))
    criterion = KeypointCriterion(delta=float(cfg.get("delta", 1.0)))
    images, keypoints = dataset.split(cfg.get("split", "test"))
    limit = cfg.get("max_images")
    if limit is not None:
        images, keypoints = images[:int(limit)], keypoints[:int(limit)]
    any_net = next(iter(nets.values()))
    labels = scale_keypoints_to_output(any_net, keypoints)
    n_cells = cfg.get("n_cells", "auto")
    report = campaign(nets, images, labels, specs, criterion,
                      n_cells=n_cells if n_cells == "auto" else int(n_cells),
                      max_cells=int(cfg.get("max_cells", 4096)),
                      falsify_samples=int(cfg.get("falsify_samples", 512)),
                      seed=seed, jobs=args.jobs)
    os.makedirs(args.out_dir, exist_ok=True)
    name = cfg.get("name", "campaign")
    csv_path = os.path.join(args.out_dir, f"{name}.csv")
    json_path = os.path.join(args.out_dir, f"{name}-summary.json")
    write_campaign_csv(report, csv_path)
    write_campaign_summary(report, json_path, extra={
        "run_info": run_info, "seed": seed, "compacted": use_compact,
        "output_units": "heatmap-grid pixels (delta applies to network outputs)"})
    _append_manifest(args.out_dir, {"command": "certify", "config": cfg, "seed": seed,
                                    "outputs": [csv_path, json_path]})
    print(f"campaign written to {csv_path}")


def _spec_sort_key(label: str):
    kind, eps = label.split(":")
    return (kind, float(eps))


def _collect_summaries(paths) -> list:
    summaries = []
    for path in paths:
        if os.path.isdir(path):
            summaries.extend(os.path.join(path, f) for f in sorted(os.listdir(path))
                             if f.endswith("-summary.json"))
        else:
            summaries.append(path)
    out = []
    for path in summaries:
        with open(path) as fh:
            out.append(json.load(fh))
    return out


def _aggregate(summaries, key_fn, value="verification_accuracy"):
    """Group per-(key, spec) means over runs; returns (keys, spec labels, table)."""
    cells = {}
    for summary in summaries:
        info = summary.get("run_info", {})
        for net, per_spec in summary["results"].items():
            key = key_fn(info.get(net, {}))
            if key is None:
                continue
            for spec_label, metrics in per_spec.items():
                cells.setdefault((key, spec_label), []).append(metrics[value])
    keys = sorted({k for k, _ in cells})
    spec_labels = sorted({s for _, s in cells}, key=_spec_sort_key)
    table = {k: {s: float(np.mean(cells[(k, s)])) for s in spec_labels if (k, s) in cells}
             for k in keys}
    return keys, spec_labels, table


def _write_table(path, row_name, keys, spec_labels, table) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([row_name] + spec_labels)
        for k in keys:
            row = [k]
            for s in spec_labels:
                v = table[k].get(s)
                row.append(repr(v) if isinstance(v, float) else "")
            writer.writerow(row)


def cmd_report(args) -> None:
    cfg = _load_config(args.config) if args.config else {}
    paths = cfg.get("campaigns", [args.out_dir])
    summaries = _collect_summaries(paths)
    os.makedirs(args.out_dir, exist_ok=True)

    def by_rho(info):
        # pruning-ratio sweep of the guided method; random arms excluded
        if info.get("prune_rule") == "random":
            return None
        return f"rho={info.get('rho')}"

    outputs = []
    for fname, row_name, key_fn, value in [
        ("table_rule_comparison.csv", "rho/rule",
         lambda i: f"rho={i.get('rho')}|rule={i.get('prune_rule')}", "verification_accuracy"),
        ("table_pruning_ratio.csv", "rho", by_rho, "verification_accuracy"),
        ("table_wasserstein.csv", "rho/lambda_w",
         lambda i: f"rho={i.get('rho')}|lambda_w={i.get('lambda_w')}", "verification_accuracy"),
        ("table_verification_time.csv", "rho/rule",
         lambda i: f"rho={i.get('rho')}|rule={i.get('prune_rule')}", "mean_wall_time"),
        ("table_correct_keypoints.csv", "rho/rule",
         lambda i: f"rho={i.get('rho')}|rule={i.get('prune_rule')}", "mean_correct_keypoints"),
    ]:
        keys, spec_labels, table = _aggregate(summaries, key_fn, value)
        path = os.path.join(args.out_dir, fname)
        _write_table(path, row_name, keys, spec_labels, table)
        outputs.append(path)
    _append_manifest(args.out_dir, {"command": "report", "config": cfg, "outputs": outputs})
    print(f"{len(outputs)} tables written to {args.out_dir} from {len(summaries)} campaign summaries")


def cmd_visualize(args) -> None:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    net, meta = load_network(_require(cfg, "checkpoint", "visualize"))
    dataset = load_dataset(_require(cfg, "dataset_dir", "visualize"))
    spec = PerturbationSpec.from_dict(_require(cfg, "spec", "visualize"))
    images, _ = dataset.split(cfg.get("split", "test"))
    n_images = min(int(cfg.get("n_images", 8)), images.shape[0])
    m = int(cfg.get("m_samples", 64))
    layers = cfg.get("layers") or list(net.prunable_ordinals)
    pooled = {i: UsnStats.zeros(i, net.width(i)) for i in layers}
    for idx in range(n_images):
        rng = spawn_rng(seed, "visualize", idx)
        samples = sample(spec, images[idx], m, rng)
        stats = collect_stats(net, images[idx], samples, layers)
        pooled = {i: accumulate(pooled[i], stats[i]) for i in layers}
    os.makedirs(args.out_dir, exist_ok=True)
    name = cfg.get("name", meta.get("run_name", "network"))
    path = os.path.join(args.out_dir, f"{name}-neurons.csv")
    write_stats_csv(path, pooled)
    _append_manifest(args.out_dir, {"command": "visualize", "config": cfg, "seed": seed,
                                    "outputs": [path]})
    print(f"per-neuron stability CSV written to {path}")


# ----- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="usnprune",
                     description="Train, prune, and certify keypoint networks under semantic perturbations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in [
        ("dataset", cmd_dataset, True),
        ("train", cmd_train, True),
        ("certify", cmd_certify, True),
        ("report", cmd_report, False),
        ("visualize", cmd_visualize, True),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config, default=None,
                       help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="concurrent workers where supported")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        args.fn(args)
    except CliUsageError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except UsnpruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
