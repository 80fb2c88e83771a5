"""Model components.

* :class:`Encoder` -- two graph-convolution layers feeding mean and scale
  heads; node representations are Gaussian samples z = mu + eps * sigma.
* :class:`Classifier` -- linear softmax head on representations.
* :class:`DomainClassifier` -- linear softmax head on the concatenation of
  a representation and a one-hot domain code.
* :class:`DomainLearner` -- two-layer perceptron producing per-node domain
  logits, with soft (softmax) and hard (first-max one-hot) assignments.
* :class:`DefenseModel` -- the four pieces bundled, with deterministic
  prediction (z = mu).
* :class:`PlainBackbone` -- an undefended two-layer graph-convolution
  classifier used as the comparison baseline.

Everything runs in float64 by default so finite-difference gradient checks
and bit-exact checkpoint round-trips hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from invardef.graph import Graph, normalize_adjacency
from invardef.losses import clamped_log, predictive_loss


def to_torch_adjacency(matrix: sp.spmatrix, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Convert a scipy sparse matrix to a coalesced torch COO tensor."""
    coo = matrix.tocoo()
    indices = torch.from_numpy(np.stack([coo.row, coo.col]).astype(np.int64))
    values = torch.from_numpy(coo.data).to(dtype)
    # explicit opt-in: scipy already guarantees in-bounds indices, and
    # torch warns unless the invariant-check choice is stated
    return torch.sparse_coo_tensor(
        indices, values, coo.shape, check_invariants=True
    ).coalesce()


def features_tensor(
    x: np.ndarray, dtype: torch.dtype = torch.float64, sparse_threshold: float = 0.25
) -> torch.Tensor:
    """Dense or sparse feature tensor depending on density.

    Sparse storage keeps the dominant first-layer product cheap for
    bag-of-words features while staying transparent to callers.
    """
    x = np.asarray(x, dtype=np.float64)
    density = float(np.count_nonzero(x)) / max(1, x.size)
    if density < sparse_threshold:
        return to_torch_adjacency(sp.csr_matrix(x), dtype)
    return torch.from_numpy(x).to(dtype)


def graph_tensors(
    graph: Graph, dtype: torch.dtype = torch.float64
) -> tuple[torch.Tensor, torch.Tensor]:
    """(normalized adjacency, features) as torch tensors for one graph."""
    adj = to_torch_adjacency(normalize_adjacency(graph), dtype)
    x = features_tensor(graph.features, dtype)
    return adj, x


@dataclass
class FeatureInput:
    """Features expressed as a fixed base plus a dense delta on some rows.

    Keeps attack gradients cheap: only ``delta`` requires grad, and the
    first-layer product touches just the perturbed rows.
    """

    base: torch.Tensor
    rows: torch.Tensor
    delta: torch.Tensor


def _matmul_features(x, weight: torch.Tensor) -> torch.Tensor:
    if isinstance(x, FeatureInput):
        support = _matmul_features(x.base, weight)
        return support.index_add(0, x.rows, x.delta @ weight)
    if x.is_sparse:
        return torch.sparse.mm(x, weight)
    return x @ weight


@dataclass
class WeightedAdjacency:
    """Adjacency in coordinate form with differentiable entry values.

    Multiplication is spelled with index_select/index_add so gradients
    reach ``values`` without relying on sparse-tensor autograd support.
    """

    row: torch.Tensor
    col: torch.Tensor
    values: torch.Tensor
    shape: tuple[int, int]

    def matmul(self, h: torch.Tensor) -> torch.Tensor:
        gathered = self.values.unsqueeze(1) * h.index_select(0, self.col)
        out = torch.zeros(self.shape[0], h.shape[1], dtype=h.dtype)
        return out.index_add(0, self.row, gathered)

    def to_dense(self) -> torch.Tensor:
        out = torch.zeros(self.shape, dtype=self.values.dtype)
        out[self.row, self.col] = self.values
        return out


def _spmm(adj, h: torch.Tensor) -> torch.Tensor:
    if isinstance(adj, WeightedAdjacency):
        return adj.matmul(h)
    if adj.is_sparse:
        return torch.sparse.mm(adj, h)
    return adj @ h


def _glorot(weight: torch.Tensor, generator: torch.Generator) -> None:
    fan_in, fan_out = weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.copy_(
            (torch.rand(weight.shape, generator=generator, dtype=weight.dtype) * 2 - 1)
            * bound
        )


class GraphConv(nn.Module):
    """One propagation layer: adj @ (x @ W) + b."""

    def __init__(self, in_dim: int, out_dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(in_dim, out_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype))

    def reset_parameters(self, generator: torch.Generator) -> None:
        _glorot(self.weight, generator)
        with torch.no_grad():
            self.bias.zero_()

    def forward(self, adj: torch.Tensor, x) -> torch.Tensor:
        return _spmm(adj, _matmul_features(x, self.weight)) + self.bias


class Linear(nn.Module):
    """Plain linear layer with generator-driven init (no global RNG)."""

    def __init__(self, in_dim: int, out_dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(in_dim, out_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype))

    def reset_parameters(self, generator: torch.Generator) -> None:
        _glorot(self.weight, generator)
        with torch.no_grad():
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight + self.bias


class Encoder(nn.Module):
    """Variational graph encoder: shared trunk, mean head, positive scale head."""

    def __init__(
        self,
        num_features: int,
        hidden_dim: int,
        latent_dim: int,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.gc1 = GraphConv(num_features, hidden_dim, dtype)
        self.gc2 = GraphConv(hidden_dim, hidden_dim, dtype)
        self.head_mean = Linear(hidden_dim, latent_dim, dtype)
        self.head_scale = Linear(hidden_dim, latent_dim, dtype)
        self.latent_dim = latent_dim

    def reset_parameters(self, generator: torch.Generator) -> None:
        for mod in (self.gc1, self.gc2, self.head_mean, self.head_scale):
            mod.reset_parameters(generator)

    def forward(
        self,
        adj: torch.Tensor,
        x,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (z, mu, sigma); z = mu + noise * sigma.

        ``noise`` must either be supplied with shape (n, latent_dim) or be
        drawn standard-normal from ``generator``; passing neither is an
        error so no draw ever comes from an unseeded source.
        """
        h = torch.relu(self.gc1(adj, x))
        trunk = self.gc2(adj, h)
        mu = self.head_mean(trunk)
        sigma = torch.nn.functional.softplus(self.head_scale(trunk))
        if noise is None:
            if generator is None:
                raise ValueError("encoder needs an explicit noise tensor or generator")
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        if noise.shape != mu.shape:
            raise ValueError(f"noise shape {tuple(noise.shape)} != {tuple(mu.shape)}")
        z = mu + noise * sigma
        return z, mu, sigma


class Classifier(nn.Module):
    """Linear softmax head over latent representations."""

    def __init__(self, latent_dim: int, num_classes: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.lin = Linear(latent_dim, num_classes, dtype)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.lin.reset_parameters(generator)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.lin(z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.lin(z), dim=1)


class DomainClassifier(nn.Module):
    """Linear softmax head on concat(representation, one-hot domain)."""

    def __init__(
        self,
        latent_dim: int,
        num_domains: int,
        num_classes: int,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.lin = Linear(latent_dim + num_domains, num_classes, dtype)
        self.num_domains = num_domains

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.lin.reset_parameters(generator)

    def forward(self, z: torch.Tensor, domain_onehot: torch.Tensor) -> torch.Tensor:
        if domain_onehot.shape != (z.shape[0], self.num_domains):
            raise ValueError(
                f"domain code shape {tuple(domain_onehot.shape)} != "
                f"({z.shape[0]}, {self.num_domains})"
            )
        return torch.softmax(self.lin(torch.cat([z, domain_onehot], dim=1)), dim=1)


def first_max_onehot(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise one-hot of the maximal entry; ties go to the lowest index."""
    k = logits.shape[1]
    top = logits.max(dim=1, keepdim=True).values
    candidates = torch.where(
        logits == top,
        torch.arange(k, device=logits.device).expand_as(logits),
        torch.full(logits.shape, k, dtype=torch.long),
    )
    idx = candidates.min(dim=1).values
    return torch.nn.functional.one_hot(idx, k).to(logits.dtype)


@dataclass
class DomainAssignment:
    """Soft (softmax) and hard (first-max one-hot) domain assignments."""

    soft: torch.Tensor
    hard: torch.Tensor


class DomainLearner(nn.Module):
    """Two-layer perceptron mapping representations to domain logits."""

    def __init__(
        self,
        latent_dim: int,
        num_domains: int,
        hidden_dim: int = 64,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.lin1 = Linear(latent_dim, hidden_dim, dtype)
        self.lin2 = Linear(hidden_dim, num_domains, dtype)
        self.num_domains = num_domains

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.lin1.reset_parameters(generator)
        self.lin2.reset_parameters(generator)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.lin2(torch.relu(self.lin1(z)))

    def assign(self, z: torch.Tensor) -> DomainAssignment:
        logits = self.logits(z)
        return DomainAssignment(
            soft=torch.softmax(logits, dim=1),
            hard=first_max_onehot(logits),
        )


class DefenseModel(nn.Module):
    """Encoder + classifier + domain classifier + domain learner bundle."""

    def __init__(
        self,
        num_features: int,
        num_classes: int,
        num_domains: int,
        hidden_dim: int = 64,
        latent_dim: int = 32,
        domain_hidden_dim: int = 64,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.encoder = Encoder(num_features, hidden_dim, latent_dim, dtype)
        self.classifier = Classifier(latent_dim, num_classes, dtype)
        self.domain_classifier = DomainClassifier(latent_dim, num_domains, num_classes, dtype)
        self.domain_learner = DomainLearner(latent_dim, num_domains, domain_hidden_dim, dtype)
        self.dims = {
            "num_features": num_features,
            "num_classes": num_classes,
            "num_domains": num_domains,
            "hidden_dim": hidden_dim,
            "latent_dim": latent_dim,
            "domain_hidden_dim": domain_hidden_dim,
        }
        self.dtype_ = dtype

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.encoder.reset_parameters(generator)
        self.classifier.reset_parameters(generator)
        self.domain_classifier.reset_parameters(generator)
        self.domain_learner.reset_parameters(generator)

    def model_parameters(self) -> list[torch.Tensor]:
        """Parameters of encoder + both classifiers (domain learner excluded)."""
        return (
            list(self.encoder.parameters())
            + list(self.classifier.parameters())
            + list(self.domain_classifier.parameters())
        )

    def _mean(self, adj, x) -> torch.Tensor:
        """Representation mean (the deterministic inference embedding)."""
        h = torch.relu(self.encoder.gc1(adj, x))
        trunk = self.encoder.gc2(adj, h)
        return self.encoder.head_mean(trunk)

    def probs(self, adj: torch.Tensor, x) -> torch.Tensor:
        """Deterministic class probabilities (z = mu)."""
        return self.classifier(self._mean(adj, x))

    def node_loss(self, adj: torch.Tensor, x, labels: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        """Deterministic predictive loss on ``idx``, differentiable in inputs."""
        return predictive_loss(self.probs(adj, x), labels, idx)

    @torch.no_grad()
    def predict(self, graph: Graph) -> np.ndarray:
        adj, x = graph_tensors(graph, self.dtype_)
        return self.probs(adj, x).argmax(dim=1).numpy()

    @torch.no_grad()
    def embed(self, graph: Graph) -> np.ndarray:
        """Deterministic node embeddings (the representation mean)."""
        adj, x = graph_tensors(graph, self.dtype_)
        return self._mean(adj, x).numpy()


class PlainBackbone(nn.Module):
    """Undefended two-layer graph-convolution classifier (baseline)."""

    def __init__(
        self,
        num_features: int,
        num_classes: int,
        hidden_dim: int = 64,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.gc1 = GraphConv(num_features, hidden_dim, dtype)
        self.gc2 = GraphConv(hidden_dim, num_classes, dtype)
        self.dims = {
            "num_features": num_features,
            "num_classes": num_classes,
            "hidden_dim": hidden_dim,
        }
        self.dtype_ = dtype

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.gc1.reset_parameters(generator)
        self.gc2.reset_parameters(generator)

    def logits(self, adj: torch.Tensor, x) -> torch.Tensor:
        return self.gc2(adj, torch.relu(self.gc1(adj, x)))

    def probs(self, adj: torch.Tensor, x) -> torch.Tensor:
        return torch.softmax(self.logits(adj, x), dim=1)

    def node_loss(self, adj: torch.Tensor, x, labels: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        return predictive_loss(self.probs(adj, x), labels, idx)

    @torch.no_grad()
    def predict(self, graph: Graph) -> np.ndarray:
        adj, x = graph_tensors(graph, self.dtype_)
        return self.logits(adj, x).argmax(dim=1).numpy()


def gradient_check(
    loss_fn,
    params: list[torch.Tensor],
    step: float = 1e-5,
    max_entries_per_tensor: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be a deterministic zero-argument callable returning a
    scalar tensor built from ``params``.  For each parameter a subset of
    entries (all of them when small) is perturbed by +-step and the
    two-sided difference quotient is compared against the autograd
    gradient.  Parameters the loss does not depend on count as gradient
    zero.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for param, grad in zip(params, grads):
        flat = param.data.reshape(-1)
        n = flat.shape[0]
        if n <= max_entries_per_tensor:
            entries = np.arange(n)
        else:
            entries = rng.choice(n, size=max_entries_per_tensor, replace=False)
        gflat = (
            torch.zeros_like(flat)
            if grad is None
            else grad.reshape(-1)
        )
        for k in entries:
            k = int(k)
            original = flat[k].item()
            flat[k] = original + step
            f_plus = float(loss_fn())
            flat[k] = original - step
            f_minus = float(loss_fn())
            flat[k] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(gflat[k])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
