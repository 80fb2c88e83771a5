"""Defense training loop.

Each epoch runs three phases:

1. **Model step.**  A fresh cheap attack (few-step feature PGD plus a
   best-of-random-edit-sets structure search) is generated against the
   current model.  Clean and attacked views of the graph are encoded,
   their node samples concatenated along the sample axis, and the
   encoder, classifier and domain classifier take one optimizer step on

       total = predictive + node_invariance + structure_invariance

   where the invariance terms compare the plain classifier against the
   domain-conditioned one on each node's own representation and on a
   sampled neighbor's representation respectively.  All three modules
   minimize the total jointly; see the losses module for why the
   invariance terms trend negative as the domain-conditioned head's
   advantage is competed away.

2. **Attacker refresh.**  A cached perturbation is kept across epochs
   and replaced only when the fresh candidate (or the clean graph)
   scores a higher predictive loss under the frozen model, so the cache
   never scores below the clean graph and refreshes are monotone.

3. **Domain step.**  The domain learner alone is updated to *minimize*
   the diversity penalty (sum of cross-domain correlations between
   residual-weighted and plain representation means) computed on
   detached representations of the clean and cached-attacked views.

Early stopping watches clean validation accuracy; the best state is
restored at the end.  Every random draw comes from a named substream of
the config seed, so a rerun reproduces the history bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from invardef.attacks import (
    StructureAttackResult,
    feature_attack_train,
    one_hop_union,
    structure_attack_train,
)
from invardef.data_io import SplitMasks, jsonable
from invardef.graph import Graph, sample_neighbors
from invardef.losses import (
    domain_diversity_loss,
    node_invariance_loss,
    predictive_loss,
    structure_invariance_loss,
)
from invardef.models import (
    DefenseModel,
    FeatureInput,
    PlainBackbone,
    first_max_onehot,
    graph_tensors,
)
from invardef.seeds import substream, torch_generator


class ConfigError(ValueError):
    """Raised for malformed or unknown training-configuration input."""


class TrainingError(RuntimeError):
    """Raised when training cannot continue (e.g. diverging losses)."""


class CheckpointError(ValueError):
    """Raised when a checkpoint directory is missing or malformed."""


@dataclass(frozen=True)
class TrainConfig:
    """Flat hyperparameter bundle; every field is overridable from a
    ``key=value`` config file."""

    # architecture
    hidden_dim: int = 64
    latent_dim: int = 32
    num_domains: int = 10
    domain_hidden_dim: int = 64
    alpha: float = 100.0
    # optimization
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    domain_learning_rate: float = 0.01
    epochs: int = 300
    patience: int = 50
    seed: int = 0
    # training-time adversary
    feature_eps_scale: float = 0.2
    feature_steps: int = 3
    attack_warmup_frac: float = 0.3
    train_edge_frac: float = 0.15
    structure_candidates: int = 8
    # component toggles (ablations)
    use_node_invariance: bool = True
    use_structure_invariance: bool = True
    learn_domains: bool = True
    attack_features: bool = True
    attack_structure: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _parse_value(raw: str, kind: type, key: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}")


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (# comments allowed) into a config."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kinds = {name: type(getattr(TrainConfig(), name)) for name in fields}
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(
                f"line {lineno}: unknown option {key!r} "
                f"(valid: {', '.join(sorted(kinds))})"
            )
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate option {key!r}")
        seen[key] = _parse_value(raw, kinds[key], key)
    return dataclasses.replace(base or TrainConfig(), **seen)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf8")
    except FileNotFoundError:
        raise ConfigError(f"missing config file: {path}")
    return parse_config_text(text, base)


@dataclass
class TrainingBudget:
    """Resolved absolute attack budget for one graph."""

    feature_eps: float
    feature_steps: int
    edge_budget: int
    structure_candidates: int


def training_budget(graph: Graph, config: TrainConfig) -> TrainingBudget:
    frange = float(graph.features.max() - graph.features.min())
    return TrainingBudget(
        feature_eps=config.feature_eps_scale * frange if config.attack_features else 0.0,
        feature_steps=config.feature_steps,
        edge_budget=(
            int(np.floor(config.train_edge_frac * graph.num_edges))
            if config.attack_structure else 0
        ),
        structure_candidates=config.structure_candidates,
    )


@dataclass
class EpochMetrics:
    epoch: int
    predictive: float
    node_invariance: float
    structure_invariance: float
    diversity: float
    cached_attack_predictive: float
    clean_predictive: float
    val_accuracy: float


METRICS_COLUMNS = [f.name for f in dataclasses.fields(EpochMetrics)]


def write_metrics_csv(history: list[EpochMetrics], path: str | Path) -> None:
    with open(path, "w", encoding="utf8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in history:
            cells = [f"{row.epoch}"] + [
                "%.17g" % getattr(row, name) for name in METRICS_COLUMNS[1:]
            ]
            fh.write(",".join(cells) + "\n")


@dataclass
class TrainResult:
    model: DefenseModel
    config: TrainConfig
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False
    wall_seconds: float = 0.0


class _AttackCache:
    """The strongest perturbation seen so far, by frozen-model score."""

    def __init__(self, graph: Graph, adj, x, rows: torch.Tensor):
        self.graph = graph
        self.adj = adj
        self.x = x
        self.rows = rows
        self.delta = torch.zeros(rows.shape[0], graph.num_features, dtype=torch.float64)
        self.score = -np.inf

    def features(self):
        return FeatureInput(self.x, self.rows, self.delta)


def _accuracy(probs: torch.Tensor, labels: torch.Tensor, idx: torch.Tensor) -> float:
    if idx.numel() == 0:
        return float("nan")
    pred = probs.argmax(dim=1)
    return float((pred[idx] == labels[idx]).double().mean())


def fit(
    graph: Graph,
    splits: SplitMasks,
    config: TrainConfig | None = None,
    progress: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Train the defense on one graph; see the module docstring."""
    config = config or TrainConfig()
    started = time.time()
    adj, x = graph_tensors(graph)
    labels = torch.tensor(graph.labels)
    train_idx = torch.from_numpy(splits.train)
    val_idx = torch.from_numpy(splits.val)
    if train_idx.numel() == 0:
        raise TrainingError("cannot train with an empty train split")

    model = DefenseModel(
        graph.num_features, graph.num_classes, config.num_domains,
        hidden_dim=config.hidden_dim, latent_dim=config.latent_dim,
        domain_hidden_dim=config.domain_hidden_dim,
    )
    model.reset_parameters(torch_generator(config.seed, "model-init"))
    optimizer = torch.optim.Adam(
        model.model_parameters(), lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    domain_optimizer = torch.optim.Adam(
        model.domain_learner.parameters(), lr=config.domain_learning_rate
    )

    noise_gen = torch_generator(config.seed, "encoder-noise")
    neighbor_rng = substream(config.seed, "neighbor-sample")
    structure_rng = substream(config.seed, "structure-attack")

    budget = training_budget(graph, config)
    attack_rows_np = one_hop_union(graph, splits.train)
    attack_rows = torch.from_numpy(attack_rows_np)
    has_attack = budget.feature_eps > 0 or budget.edge_budget > 0
    use_invariance = config.use_node_invariance or config.use_structure_invariance
    run_domain_step = config.learn_domains and use_invariance
    cache = _AttackCache(graph, adj, x, attack_rows)

    fixed_assignment: torch.Tensor | None = None
    if not config.learn_domains:
        # ablation: one random hard partition drawn up front and kept
        draws = substream(config.seed, "fixed-domains").integers(
            0, config.num_domains, size=graph.num_nodes
        )
        fixed_assignment = torch.nn.functional.one_hot(
            torch.from_numpy(draws), config.num_domains
        ).to(torch.float64)

    def domain_codes(z_ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(soft, hard) assignment for every node, detached."""
        if fixed_assignment is not None:
            return fixed_assignment, fixed_assignment
        with torch.no_grad():
            assign = model.domain_learner.assign(z_ref)
        return assign.soft.detach(), assign.hard.detach()

    def draw_neighbors(source: Graph) -> torch.Tensor:
        """One sampled neighbor per train node, shared by probe and model."""
        return torch.from_numpy(sample_neighbors(source, splits.train, neighbor_rng))

    history: list[EpochMetrics] = []
    best_val, best_epoch, best_state = -np.inf, -1, None
    nonfinite_run = 0
    stopped_early = False

    warmup_epochs = int(np.ceil(config.attack_warmup_frac * config.epochs))

    for epoch in range(config.epochs):
        # ------------------------------------------------ fresh attack
        # ramp the adversary in over the warmup window: starting at full
        # strength erases the signal before the model has fit anything
        ramp = 1.0 if warmup_epochs <= 0 else min(1.0, (epoch + 1) / warmup_epochs)
        eff_eps = budget.feature_eps * ramp
        eff_edges = int(np.floor(budget.edge_budget * ramp))
        fresh_delta = torch.zeros_like(cache.delta)
        if eff_eps > 0:
            fresh_delta = feature_attack_train(
                model, adj, x, labels, train_idx, attack_rows,
                eps=eff_eps, steps=budget.feature_steps,
                # few-step budget: size the steps so the walk can reach
                # the constraint boundary instead of stalling at eps/8
                step_size=2.5 * eff_eps / budget.feature_steps,
            )
        if eff_edges > 0:
            fresh_structure: StructureAttackResult = structure_attack_train(
                model, graph, x, labels, train_idx,
                edge_budget=eff_edges,
                num_candidates=budget.structure_candidates,
                rng=structure_rng,
            )
            fresh_graph, fresh_adj = fresh_structure.graph, fresh_structure.adj
        else:
            fresh_graph, fresh_adj = graph, adj

        # ------------------------------------------------ model step
        with torch.no_grad():
            mu_ref = model._mean(adj, x)
        soft_codes, hard_codes = domain_codes(mu_ref)

        noise_clean = torch.randn(
            graph.num_nodes, config.latent_dim, generator=noise_gen, dtype=torch.float64
        )
        z_clean, _, _ = model.encoder(adj, x, noise=noise_clean)
        views = [(z_clean, graph)]
        if has_attack:
            noise_adv = torch.randn(
                graph.num_nodes, config.latent_dim, generator=noise_gen,
                dtype=torch.float64,
            )
            z_adv, _, _ = model.encoder(
                fresh_adj, FeatureInput(x, attack_rows, fresh_delta), noise=noise_adv
            )
            views.append((z_adv, fresh_graph))

        scale = 1.0 / len(views)
        neighbor_ids: list[torch.Tensor | None] = [
            draw_neighbors(source) if config.use_structure_invariance else None
            for _, source in views
        ]

        loss_p = torch.zeros((), dtype=torch.float64)
        loss_i = torch.zeros((), dtype=torch.float64)
        loss_e = torch.zeros((), dtype=torch.float64)
        for (z, _), nbr in zip(views, neighbor_ids):
            probs = model.classifier(z)
            loss_p = loss_p + predictive_loss(probs, labels, train_idx)
            if config.use_node_invariance:
                probs_d = model.domain_classifier(z, hard_codes)
                loss_i = loss_i + node_invariance_loss(
                    probs, probs_d, labels, subset=train_idx, alpha=config.alpha
                )
            if config.use_structure_invariance:
                zn = z[nbr]
                pm = model.classifier(zn)
                pd = model.domain_classifier(zn, hard_codes[train_idx])
                loss_e = loss_e + structure_invariance_loss(
                    pm, pd, labels[train_idx], alpha=config.alpha
                )
        loss_p, loss_i, loss_e = loss_p * scale, loss_i * scale, loss_e * scale
        total = loss_p + loss_i + loss_e

        if not torch.isfinite(total):
            nonfinite_run += 1
            if nonfinite_run >= 3:
                raise TrainingError(
                    f"loss was non-finite for {nonfinite_run} consecutive "
                    f"epochs (last epoch {epoch})"
                )
        else:
            nonfinite_run = 0
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

        # ------------------------------------------------ attacker refresh
        with torch.no_grad():
            clean_score = float(model.node_loss(adj, x, labels, train_idx))
            fresh_score = float(
                model.node_loss(
                    fresh_adj, FeatureInput(x, attack_rows, fresh_delta),
                    labels, train_idx,
                )
            )
            cached_score = float(
                model.node_loss(cache.adj, cache.features(), labels, train_idx)
            )
        if has_attack:
            if fresh_score >= cached_score and fresh_score >= clean_score:
                cache.graph, cache.adj, cache.delta = fresh_graph, fresh_adj, fresh_delta
                cache.score = fresh_score
            elif clean_score > cached_score:
                cache.graph, cache.adj = graph, adj
                cache.delta = torch.zeros_like(cache.delta)
                cache.score = clean_score
            else:
                cache.score = cached_score
        else:
            cache.score = clean_score

        # ------------------------------------------------ domain step
        loss_d_value = 0.0
        if run_domain_step:
            with torch.no_grad():
                noise_dom = torch.randn(
                    graph.num_nodes, config.latent_dim, generator=noise_gen,
                    dtype=torch.float64,
                )
                zc, _, _ = model.encoder(adj, x, noise=noise_dom)
                rows = [zc]
                if has_attack:
                    noise_dom2 = torch.randn(
                        graph.num_nodes, config.latent_dim, generator=noise_gen,
                        dtype=torch.float64,
                    )
                    za, _, _ = model.encoder(
                        cache.adj, cache.features(), noise=noise_dom2
                    )
                    rows.append(za)
                z_detached = torch.cat([r[train_idx] for r in rows])
                probs_detached = model.classifier(z_detached)
                dom_labels = labels[train_idx].repeat(len(rows))
            soft = model.domain_learner.assign(z_detached).soft
            loss_d = domain_diversity_loss(
                z_detached, probs_detached, dom_labels, soft
            )
            if loss_d.grad_fn is not None:
                domain_optimizer.zero_grad()
                loss_d.backward()
                domain_optimizer.step()
            loss_d_value = float(loss_d.detach())

        # ------------------------------------------------ bookkeeping
        with torch.no_grad():
            val_probs = model.probs(adj, x)
        val_acc = _accuracy(val_probs, labels, val_idx)
        metrics = EpochMetrics(
            epoch=epoch,
            predictive=float(loss_p.detach()),
            node_invariance=float(loss_i.detach()),
            structure_invariance=float(loss_e.detach()),
            diversity=loss_d_value,
            cached_attack_predictive=cache.score,
            clean_predictive=clean_score,
            val_accuracy=val_acc,
        )
        history.append(metrics)
        if progress is not None:
            progress(metrics)

        # model selection starts once the adversary is fully ramped:
        # earlier epochs optimize a weaker objective and their validation
        # peaks do not survive full-strength attacks
        selectable = epoch >= warmup_epochs - 1 or not has_attack
        if selectable and not np.isnan(val_acc) and val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if (
            best_epoch >= 0
            and config.patience > 0
            and epoch - best_epoch >= config.patience
        ):
            stopped_early = True
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(
        model=model,
        config=config,
        history=history,
        best_epoch=best_epoch if best_epoch >= 0 else len(history) - 1,
        best_val_accuracy=best_val if best_epoch >= 0 else float("nan"),
        stopped_early=stopped_early,
        wall_seconds=time.time() - started,
    )


# ---------------------------------------------------------------------------
# undefended baseline


@dataclass
class BackboneResult:
    model: PlainBackbone
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")


def fit_plain_backbone(
    graph: Graph,
    splits: SplitMasks,
    seed: int = 0,
    epochs: int = 300,
    patience: int = 50,
    learning_rate: float = 0.01,
    weight_decay: float = 5e-4,
    hidden_dim: int = 64,
) -> BackboneResult:
    """Train the undefended graph-convolution baseline with early stopping."""
    adj, x = graph_tensors(graph)
    labels = torch.tensor(graph.labels)
    train_idx = torch.from_numpy(splits.train)
    val_idx = torch.from_numpy(splits.val)
    model = PlainBackbone(graph.num_features, graph.num_classes, hidden_dim=hidden_dim)
    model.reset_parameters(torch_generator(seed, "backbone-init"))
    optimizer = torch.optim.Adam(
        model.parameters(), lr=learning_rate, weight_decay=weight_decay
    )
    history: list[EpochMetrics] = []
    best_val, best_epoch, best_state = -np.inf, -1, None
    for epoch in range(epochs):
        optimizer.zero_grad()
        loss = model.node_loss(adj, x, labels, train_idx)
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            val_acc = _accuracy(model.probs(adj, x), labels, val_idx)
        loss_value = float(loss.detach())
        history.append(EpochMetrics(
            epoch=epoch, predictive=loss_value, node_invariance=0.0,
            structure_invariance=0.0, diversity=0.0,
            cached_attack_predictive=loss_value, clean_predictive=loss_value,
            val_accuracy=val_acc,
        ))
        if not np.isnan(val_acc) and val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if best_epoch >= 0 and patience > 0 and epoch - best_epoch >= patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return BackboneResult(
        model=model,
        history=history,
        best_epoch=best_epoch if best_epoch >= 0 else len(history) - 1,
        best_val_accuracy=best_val if best_epoch >= 0 else float("nan"),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    model,
    path: str | Path,
    config: TrainConfig | None = None,
    extra: dict | None = None,
) -> None:
    """Write ``model.pt`` (weights + dims) and ``manifest.json``.

    The weight file is a one-line JSON header (kind, dims, tensor specs
    in sorted name order) followed by the raw little-endian tensor
    bytes.  Unlike pickle-based serialization this is byte-identical
    across processes, so rerun checkpoints can be compared directly;
    identity comparisons should ignore the manifest's ``created_at``.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    kind = "defense" if isinstance(model, DefenseModel) else "backbone"
    state = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    header = {
        "kind": kind,
        "dims": jsonable(model.dims),
        "tensors": [
            {"name": k, "shape": list(state[k].shape), "dtype": str(state[k].dtype)}
            for k in sorted(state)
        ],
    }
    with open(root / "model.pt", "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf8") + b"\n")
        for k in sorted(state):
            fh.write(np.ascontiguousarray(state[k]).tobytes())
    manifest = {
        "kind": kind,
        "dims": jsonable(model.dims),
        "config": config.to_dict() if config is not None else None,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(jsonable(extra))
    with open(root / "manifest.json", "w", encoding="utf8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path):
    """Rebuild the saved model; returns (model, manifest dict)."""
    root = Path(path)
    blob_path = root / "model.pt"
    if not blob_path.exists():
        raise CheckpointError(f"no checkpoint at {root} (missing model.pt)")
    with open(blob_path, "rb") as fh:
        try:
            blob = json.loads(fh.readline().decode("utf8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{blob_path}: corrupt header ({exc})")
        state: dict[str, torch.Tensor] = {}
        for spec in blob.get("tensors", ()):
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"], dtype=np.int64))
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise CheckpointError(
                    f"{blob_path}: truncated tensor {spec['name']!r}"
                )
            arr = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
            state[spec["name"]] = torch.from_numpy(arr)
    manifest = {}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf8") as fh:
            manifest = json.load(fh)
    dims = blob["dims"]
    if blob["kind"] == "defense":
        model: DefenseModel | PlainBackbone = DefenseModel(
            dims["num_features"], dims["num_classes"], dims["num_domains"],
            hidden_dim=dims["hidden_dim"], latent_dim=dims["latent_dim"],
            domain_hidden_dim=dims["domain_hidden_dim"],
        )
    elif blob["kind"] == "backbone":
        model = PlainBackbone(
            dims["num_features"], dims["num_classes"], hidden_dim=dims["hidden_dim"]
        )
    else:
        raise CheckpointError(f"{blob_path}: unknown model kind {blob['kind']!r}")
    model.load_state_dict(state)
    return model, manifest
