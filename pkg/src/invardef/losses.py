"""Training losses and information-theoretic helpers.

The defense trains on four scalar objectives:

* predictive loss: mean cross-entropy of the label classifier;
* node invariance loss: per-node ``L(g_d) + alpha * (L(g) - L(g_d))``
  where g_d additionally sees the node's domain code -- driving the
  domain-conditioned classifier to be no better than the plain one;
* structure invariance loss: the same combination evaluated on a sampled
  neighbor's representation against the source node's label and domain;
* domain diversity loss: summed Pearson correlations between per-domain
  residual-weighted representation means and other domains' representation
  means, minimized by the domain learner to keep domains informative.

Probabilities are clamped to [1e-12, 1] before every log so that a
confidently wrong classifier yields a large finite loss instead of inf.

The module also provides an exact conditional-mutual-information oracle
for finite discrete joints and a variational table estimator of the same
quantity; tests verify the estimator never undershoots the oracle by more
than the attained conditional-fit KL.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PROB_FLOOR = 1e-12
# weights below this are treated as an empty domain in the diversity loss
DOMAIN_WEIGHT_FLOOR = 1e-6
_PCC_GUARD = 1e-12


def clamped_log(probs: torch.Tensor) -> torch.Tensor:
    """log after clamping into [PROB_FLOOR, 1]."""
    return torch.log(probs.clamp(min=PROB_FLOOR, max=1.0))


def _select(values: torch.Tensor, subset) -> torch.Tensor:
    if subset is None:
        return values
    if not torch.is_tensor(subset):
        subset = torch.as_tensor(np.asarray(subset), dtype=torch.long)
    return values[subset]


def per_node_cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """-log p[i, y_i] per row; labels must be valid class ids."""
    if probs.ndim != 2:
        raise ValueError(f"probability matrix must be 2-D, got {tuple(probs.shape)}")
    if labels.shape[0] != probs.shape[0]:
        raise ValueError(
            f"{labels.shape[0]} labels for {probs.shape[0]} probability rows"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("labels outside [0, num_classes) in loss evaluation")
    rows = torch.arange(probs.shape[0])
    return -clamped_log(probs[rows, labels])


def predictive_loss(probs: torch.Tensor, labels: torch.Tensor, subset=None) -> torch.Tensor:
    """Mean cross-entropy over ``subset`` rows (all rows when None)."""
    probs_s = _select(probs, subset)
    labels_s = _select(labels, subset)
    return per_node_cross_entropy(probs_s, labels_s).mean()


def _invariance_combination(
    probs_model: torch.Tensor,
    probs_domain: torch.Tensor,
    labels: torch.Tensor,
    subset,
    alpha: float,
) -> torch.Tensor:
    pm = _select(probs_model, subset)
    pd = _select(probs_domain, subset)
    y = _select(labels, subset)
    ce_model = per_node_cross_entropy(pm, y)
    ce_domain = per_node_cross_entropy(pd, y)
    return (ce_domain + alpha * (ce_model - ce_domain)).mean()


def node_invariance_loss(
    probs_model: torch.Tensor,
    probs_domain: torch.Tensor,
    labels: torch.Tensor,
    subset=None,
    alpha: float = 100.0,
) -> torch.Tensor:
    """Mean of ``L(g_d) + alpha * (L(g) - L(g_d))`` over the subset.

    ``probs_model`` comes from the plain classifier and ``probs_domain``
    from the domain-conditioned classifier evaluated on the same rows.
    """
    return _invariance_combination(probs_model, probs_domain, labels, subset, alpha)


def structure_invariance_loss(
    probs_model_neighbor: torch.Tensor,
    probs_domain_neighbor: torch.Tensor,
    labels: torch.Tensor,
    subset=None,
    alpha: float = 100.0,
) -> torch.Tensor:
    """Invariance combination where probabilities come from each node's
    sampled neighbor representation, scored against the node's own label
    (and, inside ``probs_domain_neighbor``, the node's own domain code)."""
    return _invariance_combination(
        probs_model_neighbor, probs_domain_neighbor, labels, subset, alpha
    )


def pearson_correlation(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Pearson correlation of two equal-length vectors.

    A (near-)constant vector has no direction, so its correlation with
    anything is defined as exactly 0; the guard also keeps gradients finite.
    """
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {tuple(u.shape)} and {tuple(v.shape)}")
    du = u - u.mean()
    dv = v - v.mean()
    product = (du * du).sum() * (dv * dv).sum()
    degenerate = product < _PCC_GUARD * _PCC_GUARD
    # sqrt must never see the degenerate value: its backward at 0 is
    # infinite, and inf * 0 from the outer where would poison the gradient
    safe = torch.sqrt(torch.where(degenerate, torch.ones_like(product), product))
    value = (du * dv).sum() / safe
    return torch.where(degenerate, torch.zeros_like(value), value)


def domain_diversity_loss(
    z: torch.Tensor,
    probs_model: torch.Tensor,
    labels: torch.Tensor,
    soft_assignment: torch.Tensor,
    min_weight: float = DOMAIN_WEIGHT_FLOOR,
) -> torch.Tensor:
    """Sum over ordered domain pairs (D, D') of PCC(r_D, mean_z_{D'}).

    r_D is the softly weighted mean of ``z_i * (p[i, y_i] - 1)`` (the
    representation scaled by the true-class residual) and mean_z_{D'} the
    softly weighted mean representation.  Soft weights keep the loss
    differentiable in the domain learner; domains whose total weight falls
    below ``min_weight`` are skipped.
    """
    if z.shape[0] != soft_assignment.shape[0] or z.shape[0] != probs_model.shape[0]:
        raise ValueError("z, probabilities and assignments must align row-wise")
    rows = torch.arange(z.shape[0])
    residual = probs_model[rows, labels].clamp(min=PROB_FLOOR, max=1.0) - 1.0
    weights = soft_assignment  # (n, num_domains)
    totals = weights.sum(dim=0)
    totals_np = totals.detach()
    active = [d for d in range(weights.shape[1]) if float(totals_np[d]) >= min_weight]
    if len(active) < 2:
        # zero, but carrying the callers' graphs: a fully collapsed
        # assignment must still be steppable by the domain learner
        return (z.sum() + weights.sum()) * 0.0
    r_means = {}
    z_means = {}
    for d in active:
        w = weights[:, d]
        r_means[d] = (w * residual) @ z / totals[d]
        z_means[d] = w @ z / totals[d]
    loss = z.sum() * 0.0
    for d in active:
        for d2 in active:
            if d == d2:
                continue
            loss = loss + pearson_correlation(r_means[d], z_means[d2])
    return loss


@dataclass
class LossBreakdown:
    """The three model-loss components and their sum (tensors)."""

    predictive: torch.Tensor
    node_invariance: torch.Tensor
    structure_invariance: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "predictive": float(self.predictive),
            "node_invariance": float(self.node_invariance),
            "structure_invariance": float(self.structure_invariance),
            "total": float(self.total),
        }


def total_loss(
    predictive: torch.Tensor,
    node_invariance: torch.Tensor,
    structure_invariance: torch.Tensor,
) -> LossBreakdown:
    """Compose the model objective: sum of the three components."""
    return LossBreakdown(
        predictive=predictive,
        node_invariance=node_invariance,
        structure_invariance=structure_invariance,
        total=predictive + node_invariance + structure_invariance,
    )


def _validated_joint(joint: np.ndarray) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"joint must be 3-D (Y, D, Z), got shape {p.shape}")
    if (p < 0).any():
        raise ValueError("joint has negative entries")
    total = p.sum()
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"joint sums to {total}, expected 1")
    return p


def cmi_monte_carlo(joint: np.ndarray) -> float:
    """Exact I(Y; D | Z) of a finite discrete joint, by enumeration.

    ``joint[y, d, z]`` is the probability of that outcome.  The value is
    nonnegative and zero when Y and D are conditionally independent
    given Z.
    """
    p = _validated_joint(joint)
    p_z = p.sum(axis=(0, 1))
    p_yz = p.sum(axis=1)
    p_dz = p.sum(axis=0)
    value = 0.0
    ny, nd, nz = p.shape
    for z in range(nz):
        if p_z[z] <= 0:
            continue
        for y in range(ny):
            for d in range(nd):
                pj = p[y, d, z]
                if pj <= 0:
                    continue
                value += pj * np.log(pj * p_z[z] / (p_yz[y, z] * p_dz[d, z]))
    return max(float(value), 0.0)


@dataclass
class VariationalTables:
    """Fitted conditional tables q(y|z) and q(y|z,d) plus their fit KLs."""

    q_y_z: np.ndarray
    q_y_zd: np.ndarray
    kl_marginal: float
    kl_conditional: float


def fit_variational_tables(
    joint: np.ndarray, steps: int = 400, lr: float = 0.2
) -> VariationalTables:
    """Fit q(y|z) and q(y|z,d) to a discrete joint by gradient descent.

    Both tables are parameterized by logits initialized at zero and
    trained to minimize the joint-weighted cross-entropy, the convex
    surrogate whose optimum matches the true conditionals.  Returns the
    tables plus the exactly enumerated KL gaps
    E_z KL(p(y|z) || q(y|z)) and E_{z,d} KL(p(y|z,d) || q(y|z,d)).
    """
    p = _validated_joint(joint)
    ny, nd, nz = p.shape
    pt = torch.from_numpy(p)
    logits_q = torch.zeros(nz, ny, dtype=torch.float64, requires_grad=True)
    logits_qd = torch.zeros(nz, nd, ny, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.Adam([logits_q, logits_qd], lr=lr)
    for _ in range(steps):
        optimizer.zero_grad()
        log_q = torch.log_softmax(logits_q, dim=1)          # (z, y)
        log_qd = torch.log_softmax(logits_qd, dim=2)        # (z, d, y)
        ce_q = -(pt.permute(2, 0, 1).sum(dim=2) * log_q).sum()
        ce_qd = -(pt.permute(2, 1, 0) * log_qd).sum()
        (ce_q + ce_qd).backward()
        optimizer.step()
    with torch.no_grad():
        q = torch.softmax(logits_q, dim=1).numpy()
        qd = torch.softmax(logits_qd, dim=2).numpy()
    p_z = p.sum(axis=(0, 1))
    p_yz = p.sum(axis=1)
    p_dz = p.sum(axis=0)
    kl_marginal = 0.0
    kl_conditional = 0.0
    for z in range(nz):
        if p_z[z] <= 0:
            continue
        for y in range(ny):
            if p_yz[y, z] > 0:
                cond = p_yz[y, z] / p_z[z]
                kl_marginal += p_yz[y, z] * np.log(cond / max(q[z, y], PROB_FLOOR))
            for d in range(nd):
                if p[y, d, z] > 0:
                    cond = p[y, d, z] / p_dz[d, z]
                    kl_conditional += p[y, d, z] * np.log(
                        cond / max(qd[z, d, y], PROB_FLOOR)
                    )
    return VariationalTables(
        q_y_z=q,
        q_y_zd=qd,
        kl_marginal=float(kl_marginal),
        kl_conditional=float(kl_conditional),
    )


def cmi_variational_estimate(joint: np.ndarray, tables: VariationalTables) -> float:
    """E_p[log q(y|z,d) - log q(y|z)] -- the estimator the defense bounds.

    Exceeds the exact conditional mutual information minus the conditional
    fit KL whenever the tables are any good (the marginal gap only adds).
    """
    p = _validated_joint(joint)
    ny, nd, nz = p.shape
    value = 0.0
    for z in range(nz):
        for y in range(ny):
            for d in range(nd):
                pj = p[y, d, z]
                if pj <= 0:
                    continue
                value += pj * (
                    np.log(max(tables.q_y_zd[z, d, y], PROB_FLOOR))
                    - np.log(max(tables.q_y_z[z, y], PROB_FLOOR))
                )
    return float(value)
