"""On-disk formats: datasets, splits, perturbed graphs, embeddings.

A dataset directory holds four files:

* ``meta.json``    -- name, num_nodes, num_edges, num_features, num_classes
* ``edges.tsv``    -- one edge per line, two tab-separated ints, lo < hi
* ``features.csv`` -- dense float matrix, no header, one node per row
* ``labels.tsv``   -- one line per node: node_id <tab> label (-1 unknown)

Floats are written with repr-grade precision so save -> load round-trips
bit-identically.  Perturbed graphs use the same layout plus a
``provenance`` object inside meta.json describing the attack that
produced them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from invardef.graph import Graph, GraphError
from invardef.seeds import substream

_FLOAT_FMT = "%.17g"


class DataFormatError(ValueError):
    """Raised when an on-disk dataset violates the portable format."""


def _read_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataFormatError(f"missing file: {path}")
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})")


def _write_json(path: Path, payload: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def jsonable(value: Any) -> Any:
    """Recursively convert numpy scalars/arrays so json.dump accepts them."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _load_edges(path: Path, num_nodes: int) -> np.ndarray:
    if not path.exists():
        raise DataFormatError(f"missing file: {path}")
    rows = []
    with open(path, "r", encoding="utf8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected two tab-separated ints, got {line!r}"
                )
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer edge entry {line!r}"
                )
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _load_labels(path: Path, num_nodes: int) -> np.ndarray:
    if not path.exists():
        raise DataFormatError(f"missing file: {path}")
    labels = np.full(num_nodes, -2, dtype=np.int64)
    with open(path, "r", encoding="utf8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'node_id<TAB>label', got {line!r}"
                )
            try:
                node, label = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer entry {line!r}"
                )
            if not 0 <= node < num_nodes:
                raise DataFormatError(
                    f"{path}:{lineno}: node id {node} outside [0, {num_nodes})"
                )
            if labels[node] != -2:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate label for node {node}"
                )
            labels[node] = label
    missing = np.flatnonzero(labels == -2)
    if missing.size:
        raise DataFormatError(
            f"{path}: no label line for node {int(missing[0])} "
            f"({missing.size} nodes missing; use -1 for unknown)"
        )
    return labels


def _load_features(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataFormatError(f"missing file: {path}")
    try:
        out = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed feature row ({exc})")
    return out


def load_dataset(path: str | Path) -> Graph:
    """Load a portable dataset directory into a Graph.

    Counts in meta.json are cross-checked against the data files; any
    mismatch or malformed row raises DataFormatError naming the file.
    """
    root = Path(path)
    meta = _read_json(root / "meta.json")
    for key in ("name", "num_nodes", "num_edges", "num_features", "num_classes"):
        if key not in meta:
            raise DataFormatError(f"{root / 'meta.json'}: missing key {key!r}")
    n = int(meta["num_nodes"])
    features = _load_features(root / "features.csv")
    if features.shape[0] != n or features.shape[1] != int(meta["num_features"]):
        raise DataFormatError(
            f"{root / 'features.csv'}: shape {features.shape} does not match "
            f"meta ({n}, {meta['num_features']})"
        )
    edges = _load_edges(root / "edges.tsv", n)
    if edges.shape[0] != int(meta["num_edges"]):
        raise DataFormatError(
            f"{root / 'edges.tsv'}: {edges.shape[0]} edges but meta says "
            f"{meta['num_edges']}"
        )
    labels = _load_labels(root / "labels.tsv", n)
    try:
        return Graph(
            features=features,
            edge_index=edges,
            labels=labels,
            num_classes=int(meta["num_classes"]),
        )
    except GraphError as exc:
        raise DataFormatError(f"{root}: {exc}")


def save_dataset(
    graph: Graph,
    path: str | Path,
    name: str,
    provenance: Mapping[str, Any] | None = None,
) -> None:
    """Write a graph as a portable dataset directory (overwrites files)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta: dict[str, Any] = {
        "name": name,
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "num_features": graph.num_features,
        "num_classes": graph.num_classes,
    }
    if provenance is not None:
        meta["provenance"] = jsonable(dict(provenance))
    _write_json(root / "meta.json", meta)
    with open(root / "edges.tsv", "w", encoding="utf8") as fh:
        for u, v in graph.edge_index:
            fh.write(f"{u}\t{v}\n")
    np.savetxt(root / "features.csv", graph.features, fmt=_FLOAT_FMT, delimiter=",")
    with open(root / "labels.tsv", "w", encoding="utf8") as fh:
        for node, label in enumerate(graph.labels):
            fh.write(f"{node}\t{label}\n")


def save_perturbed_graph(perturbed, path: str | Path) -> None:
    """Persist an attack result (graph + provenance) as a dataset directory."""
    prov = dict(perturbed.provenance)
    name = str(prov.get("source_name", "perturbed"))
    save_dataset(perturbed.graph, path, name=name, provenance=prov)


def load_perturbed_graph(path: str | Path):
    """Inverse of :func:`save_perturbed_graph` (graph plus provenance)."""
    from invardef.attacks import PerturbedGraph

    root = Path(path)
    meta = _read_json(root / "meta.json")
    if "provenance" not in meta:
        raise DataFormatError(
            f"{root}: meta.json has no provenance entry; "
            "not a perturbed-graph directory"
        )
    graph = load_dataset(root)
    return PerturbedGraph(graph=graph, provenance=meta["provenance"])


@dataclass
class SplitMasks:
    """Disjoint sorted node-index arrays covering all nodes exactly once."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        merged = np.concatenate([self.train, self.val, self.test])
        n = merged.shape[0]
        if n and not np.array_equal(np.sort(merged), np.arange(n)):
            raise DataFormatError(
                "split masks must partition node ids 0..n-1 exactly once"
            )

    @property
    def num_nodes(self) -> int:
        return self.train.size + self.val.size + self.test.size


@dataclass
class DatasetBundle:
    """A named dataset plus its node split."""

    name: str
    graph: Graph
    splits: SplitMasks


def make_split(
    graph: Graph,
    train_frac: float = 0.1,
    val_frac: float = 0.1,
    seed: int = 0,
) -> SplitMasks:
    """Random node split with floor sizing; the remainder goes to test.

    Sizes are floor(train_frac*n) and floor(val_frac*n) over the full node
    count.  Only labeled nodes are eligible for train/val; every node with
    label -1 is forced into test.
    """
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac > 1:
        raise DataFormatError(
            f"invalid split fractions ({train_frac}, {val_frac})"
        )
    n = graph.num_nodes
    n_train = int(np.floor(train_frac * n))
    n_val = int(np.floor(val_frac * n))
    labeled = np.flatnonzero(graph.labels >= 0)
    unlabeled = np.flatnonzero(graph.labels < 0)
    if n_train + n_val > labeled.size:
        raise DataFormatError(
            f"split needs {n_train + n_val} labeled nodes but only "
            f"{labeled.size} are labeled"
        )
    perm = substream(seed, "split").permutation(labeled)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(np.concatenate([perm[n_train + n_val:], unlabeled]))
    return SplitMasks(train=train, val=val, test=test)


def save_split(splits: SplitMasks, path: str | Path) -> None:
    _write_json(Path(path), {
        "train": splits.train.tolist(),
        "val": splits.val.tolist(),
        "test": splits.test.tolist(),
    })


def load_split(path: str | Path) -> SplitMasks:
    payload = _read_json(Path(path))
    for key in ("train", "val", "test"):
        if key not in payload:
            raise DataFormatError(f"{path}: missing split key {key!r}")
    return SplitMasks(
        train=np.array(payload["train"], dtype=np.int64),
        val=np.array(payload["val"], dtype=np.int64),
        test=np.array(payload["test"], dtype=np.int64),
    )


def export_embeddings(
    path: str | Path,
    embeddings: np.ndarray,
    labels: np.ndarray,
    node_ids: np.ndarray | None = None,
) -> None:
    """Write per-node embeddings as CSV: node_id, label, components.

    An empty embedding matrix produces a header-only file.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise DataFormatError(f"embeddings must be 2-D, got shape {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != z.shape[0]:
        raise DataFormatError(
            f"{labels.shape[0]} labels for {z.shape[0]} embedding rows"
        )
    ids = np.arange(z.shape[0]) if node_ids is None else np.asarray(node_ids)
    header = ["node_id", "label"] + [f"e{k}" for k in range(z.shape[1])]
    with open(path, "w", encoding="utf8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(z.shape[0]):
            comps = ",".join(_FLOAT_FMT % v for v in z[i])
            line = f"{int(ids[i])},{int(labels[i])}"
            fh.write(line + ("," + comps if z.shape[1] else "") + "\n")
