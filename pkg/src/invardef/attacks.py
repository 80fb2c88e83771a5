"""Adversarial perturbations on graphs: white-box attacks and budgets.

Two families live here.

* Training-time attacks (:func:`feature_attack_train`,
  :func:`structure_attack_train`) are cheap few-step searches run inside
  the defense training loop every epoch.  They operate directly on
  tensors and return raw deltas/edits so the loop can cache and reuse
  them.

* Evaluation-time attacks (:func:`evasion_feature_pgd`,
  :func:`evasion_edge_flip`, :func:`node_injection`,
  :func:`random_poison`) are the stronger budgeted adversaries used to
  score trained models.  They take and return whole graphs, carry a
  provenance record describing exactly what was done, and their output
  can be audited against the budget with :func:`audit_budget`.

All attacks are deterministic given their inputs (and, where sampling is
involved, the supplied generator).  Gradient-based structure attacks
differentiate through the degree renormalization via
:class:`~invardef.models.WeightedAdjacency`, so edge scores account for
the change an insertion makes to every incident weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from invardef.graph import EdgeEdit, Graph, apply_edge_edits
from invardef.models import FeatureInput, WeightedAdjacency, graph_tensors


@dataclass(frozen=True)
class AttackBudget:
    """What an adversary is allowed to do.

    ``feature_eps`` is an absolute L-infinity radius in feature units;
    ``edge_budget`` counts edge insertions plus removals; injection
    allows ``inject_nodes`` new nodes with at most
    ``inject_edges_per_node`` edges each.
    """

    feature_eps: float = 0.0
    feature_steps: int = 0
    feature_step_size: float | None = None
    edge_budget: int = 0
    inject_nodes: int = 0
    inject_edges_per_node: int = 0

    def resolved_step_size(self) -> float:
        if self.feature_step_size is not None:
            return self.feature_step_size
        return self.feature_eps / 8.0


def proportional_budget(graph: Graph, targets: np.ndarray, fraction: float = 0.2) -> AttackBudget:
    """The standard evaluation budget: everything scaled by ``fraction``.

    * feature radius = fraction of the global feature range, 20 steps
    * edge budget = fraction of the edges incident to the targets
    * injected nodes = fraction of the node count, each with about the
      graph's average degree in new edges
    """
    targets = np.asarray(targets)
    frange = float(graph.features.max() - graph.features.min())
    target_set = set(targets.tolist())
    incident = sum(
        1 for u, v in graph.edge_index if u in target_set or v in target_set
    )
    n, m = graph.num_nodes, graph.num_edges
    return AttackBudget(
        feature_eps=fraction * frange,
        feature_steps=20,
        edge_budget=int(np.floor(fraction * incident)),
        inject_nodes=int(np.floor(fraction * n)),
        inject_edges_per_node=int(round(2.0 * m / n)) if n else 0,
    )


@dataclass
class PerturbedGraph:
    """An attacked graph together with a JSON-able provenance record."""

    graph: Graph
    provenance: dict


def one_hop_union(graph: Graph, nodes: Sequence[int]) -> np.ndarray:
    """Sorted union of ``nodes`` and all their direct neighbors."""
    lists = graph.adjacency_lists()
    out = set(int(v) for v in nodes)
    for v in nodes:
        out.update(lists[int(v)].tolist())
    return np.array(sorted(out), dtype=np.int64)


def two_hop_neighborhood(graph: Graph, node: int) -> np.ndarray:
    """Sorted nodes within two hops of ``node`` (excluding the node)."""
    lists = graph.adjacency_lists()
    first = lists[int(node)].tolist()
    out = set(first)
    for v in first:
        out.update(lists[v].tolist())
    out.discard(int(node))
    return np.array(sorted(out), dtype=np.int64)


# ---------------------------------------------------------------------------
# training-time attacks


def feature_attack_train(
    model,
    adj,
    x,
    labels: torch.Tensor,
    idx: torch.Tensor,
    rows: torch.Tensor,
    eps: float,
    steps: int = 3,
    step_size: float | None = None,
) -> torch.Tensor:
    """Sign-gradient ascent on the features of ``rows``.

    Returns the delta tensor (len(rows), d) maximizing the model's
    predictive loss on ``idx`` within the L-infinity ball of radius
    ``eps``, starting from zero.  The model is frozen: gradients flow
    only into the delta.
    """
    if eps <= 0 or steps <= 0:
        return torch.zeros(rows.shape[0], model_feature_dim(x), dtype=torch.float64)
    step = eps / 8.0 if step_size is None else step_size
    delta = torch.zeros(
        rows.shape[0], model_feature_dim(x), dtype=torch.float64, requires_grad=True
    )
    for _ in range(steps):
        loss = model.node_loss(adj, FeatureInput(x, rows, delta), labels, idx)
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta += step * grad.sign()
            delta.clamp_(-eps, eps)
    return delta.detach()


def model_feature_dim(x) -> int:
    return x.base.shape[1] if isinstance(x, FeatureInput) else x.shape[1]


def random_edit_set(graph: Graph, count: int, rng: np.random.Generator) -> list[EdgeEdit]:
    """``count`` sequential random flips, adds and removals equally likely.

    Each step flips a coin: on heads it adds a uniformly random absent
    pair, on tails it removes a uniformly random edge of the *current*
    (already edited) edge set.  Removal is skipped when no edge is left.
    """
    n = graph.num_nodes
    if n < 2 and count > 0:
        raise ValueError("cannot edit edges on a graph with fewer than 2 nodes")
    present = list(map(tuple, graph.edge_index.tolist()))
    present_set = set(present)
    edits: list[EdgeEdit] = []
    for _ in range(count):
        if rng.random() < 0.5 and present:
            pick = int(rng.integers(0, len(present)))
            u, v = present[pick]
            present[pick] = present[-1]
            present.pop()
            present_set.discard((u, v))
            edits.append(EdgeEdit(u, v, add=False))
        else:
            while True:
                u = int(rng.integers(0, n))
                v = int(rng.integers(0, n))
                if u == v:
                    continue
                key = (min(u, v), max(u, v))
                if key not in present_set:
                    break
            present.append(key)
            present_set.add(key)
            edits.append(EdgeEdit(key[0], key[1], add=True))
    return edits


@dataclass
class StructureAttackResult:
    graph: Graph
    adj: torch.Tensor
    edits: list[EdgeEdit] = field(default_factory=list)
    loss: float = 0.0


def structure_attack_train(
    model,
    graph: Graph,
    x,
    labels: torch.Tensor,
    idx: torch.Tensor,
    edge_budget: int,
    num_candidates: int,
    rng: np.random.Generator,
) -> StructureAttackResult:
    """Best-of-``num_candidates`` random edit sets under the model loss.

    Every candidate spends exactly ``edge_budget`` edits; the one whose
    edited graph maximizes the (deterministic) predictive loss on ``idx``
    wins.  Randomized search keeps the per-epoch cost flat in graph size
    while still producing structure perturbations the defense must absorb.
    """
    best: StructureAttackResult | None = None
    for _ in range(num_candidates):
        edits = random_edit_set(graph, edge_budget, rng)
        candidate = apply_edge_edits(graph, edits)
        adj, _ = graph_tensors(candidate)
        with torch.no_grad():
            loss = float(model.node_loss(adj, x, labels, idx))
        if best is None or loss > best.loss:
            best = StructureAttackResult(graph=candidate, adj=adj, edits=edits, loss=loss)
    if best is None:  # num_candidates == 0: degenerate, return the clean graph
        adj, _ = graph_tensors(graph)
        with torch.no_grad():
            loss = float(model.node_loss(adj, x, labels, idx))
        best = StructureAttackResult(graph=graph, adj=adj, edits=[], loss=loss)
    return best


# ---------------------------------------------------------------------------
# evaluation-time attacks


def evasion_feature_pgd(
    model,
    graph: Graph,
    targets: np.ndarray,
    eps: float,
    steps: int = 20,
    step_size: float | None = None,
) -> PerturbedGraph:
    """Projected sign-gradient feature attack against a trained model.

    Perturbs the rows of the targets and their direct neighbors (the
    receptive field that matters most for two propagation layers) to
    maximize the predictive loss on the targets, then materializes the
    result as a new graph.
    """
    targets = np.asarray(targets, dtype=np.int64)
    adj, x = graph_tensors(graph)
    rows_np = one_hop_union(graph, targets)
    rows = torch.from_numpy(rows_np)
    labels = torch.tensor(graph.labels)
    delta = feature_attack_train(
        model, adj, x, labels, torch.from_numpy(targets), rows,
        eps=eps, steps=steps, step_size=step_size,
    )
    features = graph.features.copy()
    features[rows_np] += delta.numpy()
    attacked = replace(graph, features=features)
    return PerturbedGraph(
        graph=attacked,
        provenance={
            "attack": "feature_pgd",
            "eps": float(eps),
            "steps": int(steps),
            "step_size": float(eps / 8.0 if step_size is None else step_size),
            "num_targets": int(targets.size),
            "perturbed_rows": int(rows_np.size),
        },
    )


def _variable_adjacency(
    n: int,
    fixed_pairs: np.ndarray,
    var_pairs: np.ndarray,
    var_weights: torch.Tensor,
) -> WeightedAdjacency:
    """Degree-renormalized adjacency differentiable in ``var_weights``.

    ``fixed_pairs`` carry weight 1; each row of ``var_pairs`` carries the
    matching entry of ``var_weights``.  Self-loops are implicit (weight
    1), exactly as in the static normalization.
    """
    fu = torch.from_numpy(fixed_pairs[:, 0]) if len(fixed_pairs) else torch.zeros(0, dtype=torch.long)
    fv = torch.from_numpy(fixed_pairs[:, 1]) if len(fixed_pairs) else torch.zeros(0, dtype=torch.long)
    vu = torch.from_numpy(var_pairs[:, 0]) if len(var_pairs) else torch.zeros(0, dtype=torch.long)
    vv = torch.from_numpy(var_pairs[:, 1]) if len(var_pairs) else torch.zeros(0, dtype=torch.long)
    ones_f = torch.ones(fu.shape[0], dtype=torch.float64)
    deg = torch.ones(n, dtype=torch.float64)
    deg = deg.index_add(0, fu, ones_f).index_add(0, fv, ones_f)
    deg = deg.index_add(0, vu, var_weights).index_add(0, vv, var_weights)
    dinv = deg.rsqrt()
    diag_idx = torch.arange(n)
    row = torch.cat([fu, fv, vu, vv, diag_idx])
    col = torch.cat([fv, fu, vv, vu, diag_idx])
    w_fixed = dinv[fu] * dinv[fv]
    w_var = var_weights * dinv[vu] * dinv[vv]
    values = torch.cat([w_fixed, w_fixed, w_var, w_var, dinv * dinv])
    return WeightedAdjacency(row=row, col=col, values=values, shape=(n, n))


def evasion_edge_flip(
    model,
    graph: Graph,
    targets: np.ndarray,
    edge_budget: int,
    flips_per_round: int = 1,
) -> PerturbedGraph:
    """Greedy gradient-guided edge flips around the targets.

    Flippable entries are the existing edges incident to a target
    (removals) and absent pairs joining a target to one of its two-hop
    neighbors or to another target (insertions).  Each round scores every
    flippable pair by the gradient of the target loss with respect to its
    renormalized edge weight -- the first-order gain of flipping is
    grad * (1 - 2 * weight) -- applies the ``flips_per_round`` best
    positive-gain flips, and re-evaluates.  Stops early once no flip has
    positive estimated gain.  ``flips_per_round`` of 1 is the pure greedy
    attack; larger values trade a little precision for proportionally
    fewer gradient evaluations.
    """
    targets = np.asarray(targets, dtype=np.int64)
    target_set = set(targets.tolist())
    _, x = graph_tensors(graph)
    labels = torch.tensor(graph.labels)
    idx = torch.from_numpy(targets)

    existing = list(map(tuple, graph.edge_index.tolist()))
    removable = [(u, v) for u, v in existing if u in target_set or v in target_set]
    fixed = np.array(
        [(u, v) for u, v in existing if u not in target_set and v not in target_set],
        dtype=np.int64,
    ).reshape(-1, 2)
    existing_set = set(existing)
    additions: set[tuple[int, int]] = set()
    for t in targets:
        pool = set(two_hop_neighborhood(graph, int(t)).tolist())
        pool.update(target_set)
        pool.discard(int(t))
        for v in pool:
            key = (min(int(t), v), max(int(t), v))
            if key not in existing_set:
                additions.add(key)
    var_pairs = np.array(sorted(set(removable) | additions), dtype=np.int64).reshape(-1, 2)
    weights = torch.tensor(
        [1.0 if tuple(p) in existing_set else 0.0 for p in var_pairs.tolist()],
        dtype=torch.float64,
    )

    flips: list[EdgeEdit] = []
    while len(flips) < max(0, edge_budget) and var_pairs.shape[0]:
        w = weights.clone().requires_grad_(True)
        adj = _variable_adjacency(graph.num_nodes, fixed, var_pairs, w)
        loss = model.node_loss(adj, x, labels, idx)
        (grad,) = torch.autograd.grad(loss, w)
        gain = grad * (1.0 - 2.0 * weights)
        take = min(max(1, flips_per_round), edge_budget - len(flips))
        picks = torch.argsort(gain, descending=True)[:take]
        picks = [int(p) for p in picks if float(gain[p]) > 0.0]
        if not picks:
            break
        for best in picks:
            u, v = map(int, var_pairs[best])
            adding = weights[best] == 0.0
            weights[best] = 1.0 - weights[best]
            flips.append(EdgeEdit(u, v, add=bool(adding)))

    attacked = apply_edge_edits(graph, flips)
    return PerturbedGraph(
        graph=attacked,
        provenance={
            "attack": "edge_flip",
            "edge_budget": int(edge_budget),
            "edits_used": len(flips),
            "num_targets": int(targets.size),
        },
    )


def _padded_features(x: torch.Tensor, extra_rows: int) -> torch.Tensor:
    """Same features with ``extra_rows`` zero rows appended."""
    n, d = x.shape
    if x.is_sparse:
        x = x.coalesce()
        return torch.sparse_coo_tensor(x.indices(), x.values(), (n + extra_rows, d)).coalesce()
    return torch.cat([x, torch.zeros(extra_rows, d, dtype=x.dtype)])


def node_injection(
    model,
    graph: Graph,
    targets: np.ndarray,
    num_nodes: int,
    edges_per_node: int,
    feature_steps: int = 20,
) -> PerturbedGraph:
    """Inject attacker-controlled nodes wired into the target neighborhood.

    Runs ``edges_per_node`` rounds; in each round every injected node
    claims its best endpoint (among the targets and their direct
    neighbors) by the gradient of the target loss with respect to the
    candidate edge weight, discounted as an endpoint accumulates picks so
    the attack spreads instead of piling onto one node.  Between rounds
    the injected feature rows take sign-gradient steps inside the
    observed feature box.  Injected nodes carry label -1.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if num_nodes <= 0:
        return PerturbedGraph(
            graph=graph,
            provenance={"attack": "node_injection", "nodes_added": 0, "edges_added": 0},
        )
    n = graph.num_nodes
    total = n + num_nodes
    pool = one_hop_union(graph, targets)
    lo, hi = float(graph.features.min()), float(graph.features.max())
    box_step = (hi - lo) / 8.0
    labels = torch.tensor(np.concatenate([graph.labels, np.full(num_nodes, -1)]))
    idx = torch.from_numpy(targets)
    _, x0 = graph_tensors(graph)
    base = _padded_features(x0, num_nodes)
    injected_rows = torch.arange(n, total)
    feats = torch.tensor(
        np.repeat(graph.features.mean(axis=0, keepdims=True), num_nodes, axis=0)
    )
    fixed = graph.edge_index.copy()
    chosen: list[tuple[int, int]] = []  # (injected node, endpoint)
    chosen_set: set[tuple[int, int]] = set()

    steps_per_round = max(1, int(np.ceil(feature_steps / max(1, edges_per_node))))
    for _ in range(max(0, edges_per_node)):
        # --- edge round: score every (injected, endpoint) candidate
        cand = [
            (inj, int(e))
            for inj in range(n, total)
            for e in pool
            if (inj, int(e)) not in chosen_set
        ]
        if not cand:
            break
        var_pairs = np.array(cand, dtype=np.int64)
        fixed_all = np.concatenate([fixed, np.array(chosen, dtype=np.int64).reshape(-1, 2)])
        w = torch.zeros(len(cand), dtype=torch.float64, requires_grad=True)
        fi = FeatureInput(base, injected_rows, feats)
        adj = _variable_adjacency(total, fixed_all, var_pairs, w)
        loss = model.node_loss(adj, fi, labels, idx)
        (grad,) = torch.autograd.grad(loss, w)
        score = grad.detach().numpy()
        counts: dict[int, int] = {}
        by_node: dict[int, list[int]] = {}
        for pos, (inj, endpoint) in enumerate(cand):
            by_node.setdefault(inj, []).append(pos)
        for inj in range(n, total):
            positions = by_node.get(inj)
            if not positions:
                continue
            best_pos, best_val = None, None
            for pos in positions:
                endpoint = cand[pos][1]
                c = counts.get(endpoint, 0)
                s = score[pos]
                discounted = s / (1.0 + c) if s > 0 else s * (1.0 + c)
                if best_val is None or discounted > best_val:
                    best_pos, best_val = pos, discounted
            endpoint = cand[best_pos][1]
            counts[endpoint] = counts.get(endpoint, 0) + 1
            chosen.append((inj, endpoint))
            chosen_set.add((inj, endpoint))

        # --- feature round: sign-gradient ascent inside the box
        fixed_all = np.concatenate([fixed, np.array(chosen, dtype=np.int64)])
        adj = _variable_adjacency(
            total, fixed_all, np.zeros((0, 2), dtype=np.int64),
            torch.zeros(0, dtype=torch.float64),
        )
        for _ in range(steps_per_round):
            f = feats.clone().requires_grad_(True)
            loss = model.node_loss(adj, FeatureInput(base, injected_rows, f), labels, idx)
            (fgrad,) = torch.autograd.grad(loss, f)
            with torch.no_grad():
                feats = (feats + box_step * fgrad.sign()).clamp(lo, hi)

    new_features = np.concatenate([graph.features, feats.numpy()])
    new_edges = np.concatenate(
        [graph.edge_index, np.array([(min(a, b), max(a, b)) for a, b in chosen], dtype=np.int64).reshape(-1, 2)]
    )
    attacked = Graph(
        features=new_features,
        edge_index=new_edges,
        labels=np.concatenate([graph.labels, np.full(num_nodes, -1, dtype=np.int64)]),
        num_classes=graph.num_classes,
    )
    return PerturbedGraph(
        graph=attacked,
        provenance={
            "attack": "node_injection",
            "nodes_added": int(num_nodes),
            "edges_added": len(chosen),
            "edges_per_node": int(edges_per_node),
            "num_targets": int(targets.size),
            "feature_box": [lo, hi],
        },
    )


def random_poison(graph: Graph, rate: float, rng: np.random.Generator) -> PerturbedGraph:
    """Flip ``floor(rate * num_edges)`` random edges before training."""
    if not 0.0 <= rate:
        raise ValueError(f"poison rate must be nonnegative, got {rate}")
    count = int(np.floor(rate * graph.num_edges))
    edits = random_edit_set(graph, count, rng)
    return PerturbedGraph(
        graph=apply_edge_edits(graph, edits),
        provenance={
            "attack": "random_poison",
            "rate": float(rate),
            "edits_used": count,
        },
    )


# ---------------------------------------------------------------------------
# budget auditing


@dataclass
class BudgetAudit:
    """Outcome of checking a perturbed graph against a budget."""

    ok: bool
    violations: list[str]
    feature_rows_changed: int
    max_feature_change: float
    edge_edits: int
    nodes_added: int


def audit_budget(
    original: Graph,
    perturbed: Graph,
    budget: AttackBudget,
    allowed_rows: np.ndarray | None = None,
    tol: float = 1e-9,
) -> BudgetAudit:
    """Verify a perturbation stays inside ``budget``.

    Checks the feature L-infinity radius (and, when ``allowed_rows`` is
    given, that only those rows moved), the edge-edit count on the
    surviving nodes, and the injection limits.  Any injected node must
    carry label -1 and at most ``inject_edges_per_node`` edges.
    """
    violations: list[str] = []
    n = original.num_nodes
    added = perturbed.num_nodes - n
    if added < 0:
        violations.append(f"{-added} original nodes disappeared")
        added = 0
    if added > budget.inject_nodes:
        violations.append(f"{added} nodes injected, budget {budget.inject_nodes}")

    diff = np.abs(perturbed.features[:n] - original.features)
    max_change = float(diff.max()) if diff.size else 0.0
    changed_rows = np.flatnonzero(diff.max(axis=1) > tol) if diff.size else np.array([])
    if max_change > budget.feature_eps + tol:
        violations.append(
            f"feature change {max_change:.6g} exceeds radius {budget.feature_eps:.6g}"
        )
    if allowed_rows is not None:
        outside = np.setdiff1d(changed_rows, np.asarray(allowed_rows))
        if outside.size:
            violations.append(f"{outside.size} feature rows changed outside the allowed set")

    original_set = original.edge_set()
    surviving = {
        (u, v) for u, v in map(tuple, perturbed.edge_index.tolist()) if u < n and v < n
    }
    edits = len(original_set ^ surviving)
    if edits > budget.edge_budget:
        violations.append(f"{edits} edge edits, budget {budget.edge_budget}")

    injected_edges = perturbed.num_edges - len(surviving)
    if added:
        if np.any(perturbed.labels[n:] != -1):
            violations.append("injected nodes must carry label -1")
        deg = perturbed.degrees()[n:]
        if deg.size and deg.max() > budget.inject_edges_per_node:
            violations.append(
                f"an injected node has {int(deg.max())} edges, "
                f"budget {budget.inject_edges_per_node}"
            )
    elif injected_edges:
        violations.append("edges reference injected nodes that do not exist")

    return BudgetAudit(
        ok=not violations,
        violations=violations,
        feature_rows_changed=int(changed_rows.size),
        max_feature_change=max_change,
        edge_edits=edits,
        nodes_added=added,
    )
