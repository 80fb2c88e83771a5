"""Attack-scenario evaluation and component ablations.

A scenario names one way of perturbing the graph before measuring
accuracy.  Evasion scenarios (``feature_pgd``, ``edge_flip``,
``node_inject``) perturb the graph against each evaluated model
separately — white-box convention — and score only the attacked target
nodes.  Poisoning scenarios (``random_poison:<rate>``,
``poisoned:<path>``) corrupt the graph once, retrain every model on the
corrupted copy through a caller-supplied callback, and score the full
test split, since poisoning damages the graph globally.

Budgets follow the proportional convention used across the package: a
20% target share of the test split and 20% perturbation budgets derived
from it (see :func:`invardef.attacks.proportional_budget`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from invardef.attacks import (
    evasion_edge_flip,
    evasion_feature_pgd,
    node_injection,
    proportional_budget,
    random_poison,
)
from invardef.data_io import SplitMasks, load_dataset
from invardef.graph import Graph
from invardef.seeds import substream
from invardef.training import TrainConfig, fit

EVASION_SCENARIOS = ("feature_pgd", "edge_flip", "node_inject")
_SCENARIO_FORMS = (
    "clean",
    "feature_pgd",
    "edge_flip",
    "node_inject",
    "random_poison:<rate>",
    "poisoned:<path>",
)


class ScenarioError(ValueError):
    """Raised for scenario names the harness does not recognize."""


def _unknown(spec: str) -> ScenarioError:
    return ScenarioError(
        f"unknown scenario {spec!r} (valid: {', '.join(_SCENARIO_FORMS)})"
    )


def parse_scenario(spec: str) -> tuple[str, str | float | None]:
    """Split a scenario spec into (kind, argument).

    >>> parse_scenario("random_poison:0.2")
    ('random_poison', 0.2)
    """
    if spec in ("clean",) + EVASION_SCENARIOS:
        return spec, None
    kind, sep, arg = spec.partition(":")
    if not sep or not arg:
        raise _unknown(spec)
    if kind == "random_poison":
        try:
            rate = float(arg)
        except ValueError:
            raise ScenarioError(f"{spec!r}: rate must be a number, got {arg!r}")
        if not 0 < rate <= 1:
            raise ScenarioError(f"{spec!r}: rate must be in (0, 1], got {rate}")
        return kind, rate
    if kind == "poisoned":
        return kind, arg
    raise _unknown(spec)


def select_targets(
    graph: Graph, splits: SplitMasks, seed: int = 0, fraction: float = 0.2
) -> np.ndarray:
    """Pick the attacked subset of the test split: a sorted draw of
    ``floor(fraction * |test|)`` nodes from a named substream."""
    count = int(np.floor(fraction * splits.test.size))
    rng = substream(seed, "targets")
    return np.sort(rng.choice(splits.test, size=count, replace=False))


def evaluate(model, graph: Graph, nodes: np.ndarray) -> float:
    """Share of ``nodes`` the model labels correctly."""
    pred = model.predict(graph)
    return float((pred[nodes] == graph.labels[nodes]).mean())


@dataclass(frozen=True)
class ScenarioRow:
    scenario: str
    model: str
    accuracy: float
    num_nodes: int


@dataclass
class ScenarioReport:
    seed: int
    targets: np.ndarray
    rows: list[ScenarioRow] = field(default_factory=list)

    def accuracy(self, scenario: str, model: str) -> float:
        for row in self.rows:
            if row.scenario == scenario and row.model == model:
                return row.accuracy
        raise KeyError(f"no row for scenario={scenario!r} model={model!r}")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            fh.write("scenario,model,accuracy,num_nodes\n")
            for row in self.rows:
                fh.write(
                    f"{row.scenario},{row.model},"
                    f"{row.accuracy:.17g},{row.num_nodes}\n"
                )


def run_scenarios(
    models: Mapping[str, object],
    graph: Graph,
    splits: SplitMasks,
    scenarios: Sequence[str],
    seed: int = 0,
    fraction: float = 0.2,
    retrain: Callable[[str, Graph], object] | None = None,
    flips_per_round: int = 8,
) -> ScenarioReport:
    """Score every model under every scenario; see the module docstring.

    ``retrain(name, poisoned_graph)`` must return a trained replacement
    for ``models[name]``; it is required whenever a poisoning scenario
    appears in ``scenarios``.
    """
    parsed = [(spec, *parse_scenario(spec)) for spec in scenarios]
    targets = select_targets(graph, splits, seed=seed, fraction=fraction)
    budget = proportional_budget(graph, targets, fraction)
    report = ScenarioReport(seed=seed, targets=targets)

    for spec, kind, arg in parsed:
        for name, model in models.items():
            if kind == "clean":
                acc = evaluate(model, graph, splits.test)
                count = splits.test.size
            elif kind == "feature_pgd":
                result = evasion_feature_pgd(
                    model, graph, targets, budget.feature_eps, budget.feature_steps
                )
                acc = evaluate(model, result.graph, targets)
                count = targets.size
            elif kind == "edge_flip":
                result = evasion_edge_flip(
                    model, graph, targets, budget.edge_budget,
                    flips_per_round=flips_per_round,
                )
                acc = evaluate(model, result.graph, targets)
                count = targets.size
            elif kind == "node_inject":
                result = node_injection(
                    model, graph, targets,
                    budget.inject_nodes, budget.inject_edges_per_node,
                )
                acc = evaluate(model, result.graph, targets)
                count = targets.size
            else:
                if retrain is None:
                    raise ScenarioError(
                        f"scenario {spec!r} requires a retrain callback"
                    )
                if kind == "random_poison":
                    poisoned = random_poison(
                        graph, float(arg), substream(seed, f"poison-{arg}")
                    ).graph
                else:  # poisoned:<path>
                    poisoned = load_dataset(arg)
                refit = retrain(name, poisoned)
                acc = evaluate(refit, poisoned, splits.test)
                count = splits.test.size
            report.rows.append(
                ScenarioRow(scenario=spec, model=name, accuracy=acc, num_nodes=count)
            )
    return report


# ---------------------------------------------------------------------------
# ablations


ABLATION_VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_node_inv": {"use_node_invariance": False},
    "no_structure_inv": {"use_structure_invariance": False},
    "no_invariance": {
        "use_node_invariance": False,
        "use_structure_invariance": False,
    },
    "fixed_domains": {"learn_domains": False},
}


@dataclass(frozen=True)
class AblationRow:
    variant: str
    seed: int
    accuracies: tuple[float, ...]

    @property
    def score(self) -> float:
        return float(np.mean(self.accuracies))


@dataclass
class AblationReport:
    """Per-(variant, seed) scenario accuracies with the aggregate view
    used for stability comparisons: seeds are averaged out first, and
    both the AVG and the spread are taken across *scenarios*."""

    scenarios: tuple[str, ...]
    rows: list[AblationRow] = field(default_factory=list)

    def scenario_means(self, variant: str) -> np.ndarray:
        """Mean accuracy per scenario, averaged over seeds."""
        stack = [row.accuracies for row in self.rows if row.variant == variant]
        if not stack:
            raise KeyError(f"no rows for variant {variant!r}")
        return np.array(stack).mean(axis=0)

    def average(self, variant: str) -> float:
        return float(self.scenario_means(variant).mean())

    def spread(self, variant: str) -> float:
        """Population standard deviation across scenarios."""
        return float(self.scenario_means(variant).std())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            header = ",".join(("variant", "seed") + self.scenarios + ("score",))
            fh.write(header + "\n")
            for row in self.rows:
                cells = [row.variant, str(row.seed)]
                cells += [f"{a:.17g}" for a in row.accuracies]
                cells.append(f"{row.score:.17g}")
                fh.write(",".join(cells) + "\n")


def run_ablation(
    graph: Graph,
    splits: SplitMasks,
    config: TrainConfig | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    scenarios: Sequence[str] = ("clean",) + EVASION_SCENARIOS,
    variants: Mapping[str, Mapping[str, bool]] | None = None,
    progress: Callable[[str, int], None] | None = None,
) -> AblationReport:
    """Train every component-toggle variant over several seeds and score
    each run under the given evasion scenarios.

    Aggregation happens in :class:`AblationReport`: per-scenario means
    over seeds, then mean/spread across scenarios.  Poisoning scenarios
    are not allowed here — they would retrain the model and stop
    measuring the variant that was trained.
    """
    base = config or TrainConfig()
    variants = dict(variants) if variants is not None else ABLATION_VARIANTS
    for spec in scenarios:
        kind, _ = parse_scenario(spec)
        if kind not in ("clean",) + EVASION_SCENARIOS:
            raise ScenarioError(
                f"ablation scenarios must be evasion-style, got {spec!r}"
            )
    report = AblationReport(scenarios=tuple(scenarios))
    for variant, toggles in variants.items():
        for seed in seeds:
            if progress is not None:
                progress(variant, seed)
            cfg = dataclasses.replace(base, seed=seed, **toggles)
            result = fit(graph, splits, cfg)
            scored = run_scenarios(
                {variant: result.model}, graph, splits, scenarios, seed=seed
            )
            accs = tuple(
                scored.accuracy(spec, variant) for spec in scenarios
            )
            report.rows.append(
                AblationRow(variant=variant, seed=seed, accuracies=accs)
            )
    return report
