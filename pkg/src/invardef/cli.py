"""Command-line entry point tying the library into reproducible runs.

Commands
--------
``prepare-data``     raw dataset dir -> largest-component dataset + split file
``train``            train the defense (or ``--backbone`` baseline) from a config
``attack``           craft one perturbed dataset from a trained checkpoint
``evaluate``         score checkpoints across scenarios; prints the report table
``ablate``           train component-toggle variants and aggregate their scores
``synthetic-check``  linear-SCM recovery self-test emitting a JSON report
``plot``             2-D PCA scatter image for each embeddings CSV

Every command writes exactly one ``run.json`` manifest next to its
outputs recording the command name, effective seed, a hash of the
effective configuration, the package version, timestamps, and the files
produced.  Reruns with identical inputs and seed reproduce every output
byte-for-byte; only the timestamps inside manifests differ.

If the environment variable ``INVARDEF_OUT_ROOT`` is set, relative
``--out`` paths are created under it.

Exit codes: 0 success; 2 invalid data or configuration; 3 missing or
corrupt checkpoint; 4 unknown scenario; 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from invardef.data_io import (
    DataFormatError,
    SplitMasks,
    export_embeddings,
    jsonable,
    load_dataset,
    load_split,
    make_split,
    save_dataset,
    save_perturbed_graph,
    save_split,
)
from invardef.evaluation import (
    ABLATION_VARIANTS,
    EVASION_SCENARIOS,
    ScenarioError,
    ScenarioReport,
    parse_scenario,
    run_ablation,
    run_scenarios,
    select_targets,
)
from invardef.attacks import (
    audit_budget,
    evasion_edge_flip,
    evasion_feature_pgd,
    node_injection,
    one_hop_union,
    proportional_budget,
    random_poison,
)
from invardef.graph import Graph, GraphError, largest_connected_component_with_map
from invardef.seeds import substream
from invardef.synthetic_causal import recovery_study
from invardef.training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingError,
    fit,
    fit_plain_backbone,
    load_checkpoint,
    load_config,
    save_checkpoint,
    write_metrics_csv,
)

try:  # pragma: no cover - depends on installation mode
    from importlib.metadata import version as _dist_version

    _VERSION = _dist_version("invardef")
except Exception:  # pragma: no cover
    _VERSION = "0+unknown"


# ---------------------------------------------------------------------------
# manifest plumbing


def config_hash(payload: object) -> str:
    """Short stable digest of any JSON-able configuration object."""
    canon = json.dumps(jsonable(payload), sort_keys=True)
    return hashlib.sha256(canon.encode("utf8")).hexdigest()[:12]


@dataclass
class RunManifest:
    """What a command did: written as ``run.json`` next to its outputs.

    Timing (``started_at``, ``finished_at``, ``wall_seconds``) lives here
    and only here: every other output file must come out byte-identical
    when the command is rerun with the same inputs.
    """

    command: str
    seed: int
    config_hash: str
    version: str
    started_at: str
    finished_at: str
    wall_seconds: float
    outputs: list[str]

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run.json"
        with open(path, "w", encoding="utf8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


class _Run:
    """Collects output paths during a command and writes the manifest."""

    def __init__(self, command: str, out_dir: Path, seed: int, config: object):
        self.command = command
        self.out_dir = out_dir
        self.seed = seed
        self.config_hash = config_hash(config)
        self.started_at = _stamp()
        self._t0 = time.monotonic()
        self.outputs: list[Path] = []

    def add(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def finish(self) -> None:
        rel = sorted(
            p.relative_to(self.out_dir).as_posix() if p.is_relative_to(self.out_dir)
            else p.as_posix()
            for p in self.outputs
        )
        RunManifest(
            command=self.command,
            seed=self.seed,
            config_hash=self.config_hash,
            version=f"invardef-{_VERSION}",
            started_at=self.started_at,
            finished_at=_stamp(),
            wall_seconds=round(time.monotonic() - self._t0, 3),
            outputs=rel,
        ).write(self.out_dir)


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _out_dir(raw: str) -> Path:
    root = os.environ.get("INVARDEF_OUT_ROOT")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_bundle(dataset_dir: str, seed: int) -> tuple[Graph, SplitMasks, str]:
    """Dataset plus its split: the saved ``split.json`` when present,
    otherwise a fresh seeded draw at the default ratios."""
    root = Path(dataset_dir)
    graph = load_dataset(root)
    split_path = root / "split.json"
    if split_path.exists():
        splits = load_split(split_path)
        if splits.num_nodes != graph.num_nodes:
            raise DataFormatError(
                f"{split_path}: split covers {splits.num_nodes} nodes but the "
                f"dataset has {graph.num_nodes}"
            )
        return graph, splits, "split.json"
    return graph, make_split(graph, seed=seed), f"derived(seed={seed})"


# ---------------------------------------------------------------------------
# prepare-data


def _cmd_prepare_data(args: argparse.Namespace) -> int:
    raw = Path(args.raw_dir)
    graph = load_dataset(raw)
    meta_name = json.loads((raw / "meta.json").read_text(encoding="utf8"))["name"]
    lcc, kept = largest_connected_component_with_map(graph)
    out = _out_dir(args.out_dir)
    run = _Run(
        "prepare-data", out, args.seed,
        {"raw": str(raw), "train_frac": args.train_frac,
         "val_frac": args.val_frac, "seed": args.seed},
    )
    name = args.name or meta_name
    save_dataset(lcc, out, name=name)
    for fname in ("meta.json", "edges.tsv", "features.csv", "labels.tsv"):
        run.add(out / fname)
    with open(run.add(out / "index_map.json"), "w", encoding="utf8") as fh:
        json.dump(
            {"source_num_nodes": graph.num_nodes,
             "kept_original_ids": kept.tolist()},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    splits = make_split(lcc, args.train_frac, args.val_frac, seed=args.seed)
    save_split(splits, run.add(out / "split.json"))
    run.finish()
    print(
        f"prepared {name}: {lcc.num_nodes}/{graph.num_nodes} nodes kept, "
        f"{lcc.num_edges} edges, split "
        f"{splits.train.size}/{splits.val.size}/{splits.test.size}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _read_sweep(path: str) -> list[int]:
    seeds: list[int] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            seed = int(line)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: seed must be an integer, got {line!r}")
        if seed in seeds:
            raise ConfigError(f"{path}:{lineno}: duplicate seed {seed}")
        seeds.append(seed)
    if not seeds:
        raise ConfigError(f"{path}: sweep file lists no seeds")
    return seeds


def _train_one(graph: Graph, splits: SplitMasks, cfg: TrainConfig,
               backbone: bool, out: Path, dataset_name: str,
               quiet: bool) -> None:
    if backbone:
        result = fit_plain_backbone(
            graph, splits, seed=cfg.seed, epochs=cfg.epochs,
            patience=cfg.patience, learning_rate=cfg.learning_rate,
            weight_decay=cfg.weight_decay, hidden_dim=cfg.hidden_dim,
        )
    else:
        result = fit(graph, splits, cfg)
    save_checkpoint(
        result.model, out / "checkpoint", config=cfg,
        extra={
            "dataset": dataset_name,
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "epochs_run": len(result.history),
        },
    )
    write_metrics_csv(result.history, out / "metrics.csv")
    if not quiet:
        tag = "backbone" if backbone else "defense"
        print(
            f"trained {tag} seed={cfg.seed}: {len(result.history)} epochs, "
            f"best val accuracy {result.best_val_accuracy:.4f} "
            f"at epoch {result.best_epoch}"
        )


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    seeds = _read_sweep(args.sweep) if args.sweep else [cfg.seed]
    graph, splits, split_src = _load_bundle(args.dataset_dir, cfg.seed)
    meta = json.loads((Path(args.dataset_dir) / "meta.json").read_text(encoding="utf8"))
    out = _out_dir(args.out)
    run = _Run("train", out, cfg.seed, {
        "config": cfg.to_dict(), "backbone": args.backbone,
        "seeds": seeds, "dataset": meta["name"], "split": split_src,
    })
    for seed in seeds:
        cfg_s = dataclasses.replace(cfg, seed=seed)
        sub = out if len(seeds) == 1 else out / f"seed-{seed}"
        sub.mkdir(parents=True, exist_ok=True)
        _train_one(graph, splits, cfg_s, args.backbone, sub, meta["name"], args.quiet)
        run.add(sub / "checkpoint" / "model.pt")
        run.add(sub / "checkpoint" / "manifest.json")
        run.add(sub / "metrics.csv")
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# attack


def _cmd_attack(args: argparse.Namespace) -> int:
    kind, arg = parse_scenario(args.scenario)
    if kind in ("clean", "poisoned"):
        raise ScenarioError(
            f"scenario {args.scenario!r} does not generate a perturbation"
        )
    graph, splits, _ = _load_bundle(args.dataset_dir, args.seed)
    targets = select_targets(graph, splits, seed=args.seed, fraction=args.fraction)
    budget = proportional_budget(graph, targets, args.fraction)
    out = _out_dir(args.out)
    run = _Run("attack", out, args.seed, {
        "scenario": args.scenario, "fraction": args.fraction,
        "checkpoint": args.checkpoint, "seed": args.seed,
    })

    record: dict = {"scenario": args.scenario, "num_targets": int(targets.size)}
    if kind == "random_poison":
        result = random_poison(graph, float(arg), substream(args.seed, f"poison-{arg}"))
    else:
        if not args.checkpoint:
            raise CheckpointError(f"scenario {args.scenario!r} needs --checkpoint")
        model, _ = load_checkpoint(args.checkpoint)
        before = float(
            (model.predict(graph)[targets] == graph.labels[targets]).mean()
        )
        if kind == "feature_pgd":
            result = evasion_feature_pgd(
                model, graph, targets, budget.feature_eps, budget.feature_steps
            )
            # the attack writes the targets' receptive field, not just the
            # targets themselves, so audit against the same row set
            audit = audit_budget(
                graph, result.graph, budget,
                allowed_rows=one_hop_union(graph, targets),
            )
        elif kind == "edge_flip":
            result = evasion_edge_flip(
                model, graph, targets, budget.edge_budget,
                flips_per_round=args.flips_per_round,
            )
            audit = audit_budget(graph, result.graph, budget)
        else:  # node_inject
            result = node_injection(
                model, graph, targets,
                budget.inject_nodes, budget.inject_edges_per_node,
            )
            audit = audit_budget(graph, result.graph, budget)
        after = float(
            (model.predict(result.graph)[targets] == graph.labels[targets]).mean()
        )
        record["target_accuracy_before"] = before
        record["target_accuracy_after"] = after
        record["budget_audit"] = jsonable(dataclasses.asdict(audit))
    record["provenance"] = jsonable(result.provenance)

    save_perturbed_graph(result, out / "perturbed")
    for fname in ("meta.json", "edges.tsv", "features.csv", "labels.tsv"):
        run.add(out / "perturbed" / fname)
    with open(run.add(out / "attack.json"), "w", encoding="utf8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.finish()
    if "target_accuracy_after" in record:
        print(
            f"{args.scenario}: target accuracy "
            f"{record['target_accuracy_before']:.4f} -> "
            f"{record['target_accuracy_after']:.4f}"
        )
    else:
        print(f"{args.scenario}: {result.provenance.get('edits_used', 0)} edge edits")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _parse_model_args(pairs: Sequence[str]) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for pair in pairs:
        name, sep, path = pair.partition("=")
        if not sep:
            name, path = Path(pair).name, pair
        if name in out:
            raise ConfigError(f"duplicate model name {name!r}")
        out[name] = Path(path)
    return out


def _retrainer(manifests: dict[str, dict], splits: SplitMasks, quiet: bool):
    """Build the poisoning-scenario callback: refit each named model on
    the corrupted graph with the exact config stored in its checkpoint."""

    def retrain(name: str, poisoned: Graph):
        manifest = manifests[name]
        stored = manifest.get("config")
        if not stored:
            raise DataFormatError(
                f"checkpoint for {name!r} stores no training config; "
                "poisoning scenarios need one to retrain"
            )
        cfg = TrainConfig(**stored)
        if not quiet:
            print(f"  retraining {name} on the poisoned graph ...", flush=True)
        if manifest.get("kind") == "backbone":
            return fit_plain_backbone(
                poisoned, splits, seed=cfg.seed, epochs=cfg.epochs,
                patience=cfg.patience, learning_rate=cfg.learning_rate,
                weight_decay=cfg.weight_decay, hidden_dim=cfg.hidden_dim,
            ).model
        return fit(poisoned, splits, cfg).model

    return retrain


def _print_report(report: ScenarioReport) -> None:
    rows = [("scenario", "model", "accuracy", "nodes")] + [
        (r.scenario, r.model, f"{r.accuracy:.4f}", str(r.num_nodes))
        for r in report.rows
    ]
    widths = [max(len(row[k]) for row in rows) for k in range(4)]
    for i, row in enumerate(rows):
        print("  ".join(cell.ljust(widths[k]) for k, cell in enumerate(row)).rstrip())
        if i == 0:
            print("  ".join("-" * widths[k] for k in range(4)))


def _cmd_evaluate(args: argparse.Namespace) -> int:
    scenarios = [s.strip() for s in args.scenarios.split(",") if s.strip()]
    for spec in scenarios:
        parse_scenario(spec)
    graph, splits, _ = _load_bundle(args.dataset_dir, args.seed)
    model_paths = _parse_model_args(args.model)
    if not model_paths:
        raise ConfigError("at least one --model NAME=CHECKPOINT is required")
    models, manifests = {}, {}
    for name, path in model_paths.items():
        models[name], manifests[name] = load_checkpoint(path)
    out = _out_dir(args.out)
    run = _Run("evaluate", out, args.seed, {
        "scenarios": scenarios, "fraction": args.fraction, "seed": args.seed,
        "models": {n: manifests[n].get("config") for n in models},
    })
    report = run_scenarios(
        models, graph, splits, scenarios, seed=args.seed,
        fraction=args.fraction,
        retrain=_retrainer(manifests, splits, args.quiet),
    )
    report.to_csv(run.add(out / "scenarios.csv"))
    results = {
        "seed": args.seed,
        "fraction": args.fraction,
        "models": {n: {"kind": manifests[n].get("kind"),
                       "config": manifests[n].get("config")} for n in models},
        "accuracies": {
            spec: {n: report.accuracy(spec, n) for n in models}
            for spec in scenarios
        },
        "num_targets": int(report.targets.size),
    }
    with open(run.add(out / "results.json"), "w", encoding="utf8") as fh:
        json.dump(jsonable(results), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.embeddings:
        for name, model in models.items():
            if not hasattr(model, "embed"):
                continue
            z = model.embed(graph)[splits.test]
            export_embeddings(
                run.add(out / f"embeddings-{name}.csv"),
                z, graph.labels[splits.test], node_ids=splits.test,
            )
    run.finish()
    _print_report(report)
    return 0


# ---------------------------------------------------------------------------
# ablate


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    scenarios = [s.strip() for s in args.scenarios.split(",") if s.strip()]
    seeds = _parse_seed_list(args.seeds)
    variant_names = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variant_names if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(
            f"unknown variants: {', '.join(unknown)} "
            f"(valid: {', '.join(ABLATION_VARIANTS)})"
        )
    variants = {v: ABLATION_VARIANTS[v] for v in variant_names}
    graph, splits, _ = _load_bundle(args.dataset_dir, cfg.seed)
    out = _out_dir(args.out)
    run = _Run("ablate", out, cfg.seed, {
        "config": cfg.to_dict(), "seeds": seeds,
        "scenarios": scenarios, "variants": variant_names,
    })

    def progress(variant: str, seed: int) -> None:
        if not args.quiet:
            print(f"training {variant} seed={seed} ...", flush=True)

    report = run_ablation(
        graph, splits, cfg, seeds=seeds, scenarios=scenarios,
        variants=variants, progress=progress,
    )
    report.to_csv(run.add(out / "ablation.csv"))
    summary = {
        v: {
            "average": report.average(v),
            "spread": report.spread(v),
            "scenario_means": dict(
                zip(scenarios, report.scenario_means(v).tolist())
            ),
        }
        for v in variants
    }
    with open(run.add(out / "summary.json"), "w", encoding="utf8") as fh:
        json.dump(jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.finish()
    for v in variants:
        print(f"{v}: average {summary[v]['average']:.4f} "
              f"spread {summary[v]['spread']:.4f}")
    return 0


def _parse_seed_list(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {raw!r}")
    if not seeds:
        raise ConfigError("--seeds lists no seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds contains duplicates: {raw!r}")
    return seeds


# ---------------------------------------------------------------------------
# synthetic-check


def _cmd_synthetic_check(args: argparse.Namespace) -> int:
    study = recovery_study(
        num_train_domains=args.train_domains,
        num_held_out_domains=args.held_out_domains,
        samples_per_domain=args.samples,
        seed=args.seed,
    )
    weight_tol, spread_tol = 0.05, 0.2
    checks = {
        "weights_recovered": study.invariant.weight_error_inf <= weight_tol,
        "risk_spread_controlled": study.spread_ratio <= spread_tol,
    }
    checks["passed"] = all(checks.values())
    payload = study.to_dict()
    # timing belongs in the run manifest; check.json must rerun identically
    payload.pop("wall_seconds", None)
    payload["thresholds"] = {
        "weight_error_inf": weight_tol, "spread_ratio": spread_tol,
    }
    payload["checks"] = checks
    out = _out_dir(args.out)
    run = _Run("synthetic-check", out, args.seed, {
        "train_domains": args.train_domains,
        "held_out_domains": args.held_out_domains,
        "samples": args.samples, "seed": args.seed,
    })
    with open(run.add(out / "check.json"), "w", encoding="utf8") as fh:
        json.dump(jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.finish()
    verdict = "pass" if checks["passed"] else "FAIL"
    print(
        f"synthetic-check: weight_error={study.invariant.weight_error_inf:.4f} "
        f"spread_ratio={study.spread_ratio:.4f} -> {verdict}"
    )
    return 0


# ---------------------------------------------------------------------------
# plot


def _load_embeddings_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        text = path.read_text(encoding="utf8").splitlines()
    except FileNotFoundError:
        raise DataFormatError(f"missing embeddings file: {path}")
    if not text:
        raise DataFormatError(f"{path}: empty file")
    header = text[0].split(",")
    if header[:2] != ["node_id", "label"]:
        raise DataFormatError(
            f"{path}: expected header starting 'node_id,label', got {text[0]!r}"
        )
    dims = len(header) - 2
    labels, rows = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise DataFormatError(
                f"{path}:{lineno}: {len(cells)} columns, expected {len(header)}"
            )
        labels.append(int(cells[1]))
        rows.append([float(c) for c in cells[2:]])
    z = np.array(rows, dtype=np.float64).reshape(len(rows), dims)
    return z, np.array(labels, dtype=np.int64)


def pca_2d(z: np.ndarray) -> np.ndarray:
    """Deterministic 2-D principal-component projection.

    Components are eigenvectors of the covariance matrix ordered by
    decreasing eigenvalue; the sign convention makes each component's
    largest-magnitude entry positive, so reruns produce identical axes.
    """
    if z.shape[0] == 0:
        return np.zeros((0, 2))
    centered = z - z.mean(axis=0)
    if z.shape[1] == 1:
        return np.concatenate([centered, np.zeros_like(centered)], axis=1)
    cov = centered.T @ centered / max(z.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    comps = eigvecs[:, order]
    for k in range(comps.shape[1]):
        pivot = np.argmax(np.abs(comps[:, k]))
        if comps[pivot, k] < 0:
            comps[:, k] = -comps[:, k]
    return centered @ comps


def _cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args.out)
    run = _Run("plot", out, 0, {"csvs": [str(c) for c in args.csv]})
    for csv in args.csv:
        csv = Path(csv)
        z, labels = _load_embeddings_csv(csv)
        pts = pca_2d(z)
        fig, ax = plt.subplots(figsize=(5.0, 4.0), dpi=120)
        if pts.shape[0]:
            ax.scatter(pts[:, 0], pts[:, 1], c=labels, cmap="tab10", s=9, linewidths=0)
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        ax.set_title(csv.stem)
        fig.tight_layout()
        target = run.add(out / f"{csv.stem}.png")
        fig.savefig(target, dpi=120)
        plt.close(fig)
        print(f"wrote {target}")
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invardef",
        description="Invariant-causal defense for graph node classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="extract the largest component "
                       "and write the portable dataset plus a split file")
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    p.add_argument("--train-frac", type=float, default=0.1)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=None, help="override the dataset name")
    p.set_defaults(handler=_cmd_prepare_data)

    p = sub.add_parser("train", help="train the defense or the plain baseline")
    p.add_argument("dataset_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--sweep", default=None,
                   help="file listing one seed per line; trains each")
    p.add_argument("--backbone", action="store_true",
                   help="train the undefended graph-convolution baseline")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("attack", help="write one perturbed dataset")
    p.add_argument("dataset_dir")
    p.add_argument("scenario",
                   help="feature_pgd | edge_flip | node_inject | random_poison:<rate>")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--flips-per-round", type=int, default=8)
    p.set_defaults(handler=_cmd_attack)

    p = sub.add_parser("evaluate", help="score checkpoints across scenarios")
    p.add_argument("dataset_dir")
    p.add_argument("--model", action="append", default=[],
                   metavar="NAME=CHECKPOINT")
    p.add_argument("--out", required=True)
    p.add_argument("--scenarios",
                   default="clean," + ",".join(EVASION_SCENARIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--embeddings", action="store_true",
                   help="export test-split embeddings per model")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score component-toggle variants")
    p.add_argument("dataset_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--scenarios",
                   default="clean," + ",".join(EVASION_SCENARIOS))
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("synthetic-check",
                       help="linear-SCM recovery self-test with a JSON report")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-domains", type=int, default=5)
    p.add_argument("--held-out-domains", type=int, default=3)
    p.add_argument("--samples", type=int, default=10_000)
    p.set_defaults(handler=_cmd_synthetic_check)

    p = sub.add_parser("plot", help="PCA scatter image per embeddings CSV")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_plot)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.handler(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, DataFormatError, GraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
