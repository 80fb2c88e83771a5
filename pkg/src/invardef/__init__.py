"""Invariant-causal defense training for graph node classifiers.

The package trains a variational graph encoder together with label and
domain-conditioned classifiers so that node predictions stay accurate when
the graph's structure or features are adversarially perturbed.  It ships
built-in training and evaluation attacks, an evaluation harness with
standard perturbation scenarios and ablations, and a synthetic linear
structural-causal-model testbed for checking that the invariant objective
recovers causal predictors.
"""

from invardef.graph import (
    EdgeEdit,
    Graph,
    GraphError,
    apply_edge_edits,
    largest_connected_component,
    normalize_adjacency,
    sample_neighbor,
)
from invardef.data_io import DatasetBundle, SplitMasks, load_dataset, make_split

__all__ = [
    "EdgeEdit",
    "Graph",
    "GraphError",
    "apply_edge_edits",
    "largest_connected_component",
    "normalize_adjacency",
    "sample_neighbor",
    "DatasetBundle",
    "SplitMasks",
    "load_dataset",
    "make_split",
]

__version__ = "0.1.0"
