"""Training objectives and their exact parameter gradients.

Three building blocks:

* a shared in-batch contrastive loss over (query, positive, negative)
  selections, where the denominator set is the union of every selection's
  positive and negative ids across the batch (deduplicated, one shared set);
* a load-balancing KL divergence pushing the batch-mean mixture toward
  uniform;
* compositions: the router objective (label contrastive + balance) and the
  single-stage joint objective (everything, no freezing).

The performance-guided form freezes the router (expert update); the
label-guided form freezes the experts (router update) while still flowing
gradient through the mixture weights into the router. Log-sum-exp keeps the
contrastive denominators stable at any temperature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgument
from .linalg import log_sum_exp_rows
from .model import LaprModel, ModelGrads, accumulate_router_grads, score_pairs, score_pairs_backward

SOURCE_PERFORMANCE = "performance"
SOURCE_LABEL = "label"

# Guard inside the balance loss logarithm; the KL is undefined at exact zero.
BALANCE_LOG_EPS = 1e-12


@dataclass(frozen=True)
class PairSelection:
    """One query anchored to a sampled positive and negative prompt."""

    query_id: int
    positive_id: int
    negative_id: int
    source: str = SOURCE_PERFORMANCE

    def __post_init__(self):
        if self.positive_id == self.negative_id:
            raise InvalidArgument(
                f"query {self.query_id}: positive and negative coincide ({self.positive_id})"
            )
        if self.source not in (SOURCE_PERFORMANCE, SOURCE_LABEL):
            raise InvalidArgument(f"unknown pair source {self.source!r}")


def denominator_ids(batch: Sequence[PairSelection]) -> list[int]:
    """Shared denominator set: union of all positives and negatives, ascending."""
    ids = set()
    for sel in batch:
        ids.add(sel.positive_id)
        ids.add(sel.negative_id)
    return sorted(ids)


def contrastive_loss(
    model: LaprModel,
    batch: Sequence[PairSelection],
    query_embeddings: Mapping[int, np.ndarray],
    prompt_embeddings: Mapping[int, np.ndarray],
    freeze_router: bool = False,
    freeze_experts: bool = False,
) -> tuple[float, ModelGrads]:
    """In-batch contrastive loss with a shared denominator set.

    loss = -(1/B) * sum_q [ s(q, pos_q) - logsumexp_{j in D} s(q, j) ]
    """
    if len(batch) == 0:
        raise InvalidArgument("contrastive loss needs a nonempty batch")
    ids = denominator_ids(batch)
    column = {pid: j for j, pid in enumerate(ids)}

    U = np.stack([np.asarray(query_embeddings[sel.query_id], dtype=np.float64) for sel in batch])
    Z = np.stack([np.asarray(prompt_embeddings[pid], dtype=np.float64) for pid in ids])
    ctx = score_pairs(model, U, Z)

    B = len(batch)
    pos_cols = np.array([column[sel.positive_id] for sel in batch])
    lse = log_sum_exp_rows(ctx.scores)
    loss = float(np.mean(lse - ctx.scores[np.arange(B), pos_cols]))

    d_scores = np.exp(ctx.scores - lse[:, None])  # row softmax
    d_scores[np.arange(B), pos_cols] -= 1.0
    d_scores /= B

    grads = score_pairs_backward(
        model, ctx, d_scores, freeze_router=freeze_router, freeze_experts=freeze_experts
    )
    return loss, grads


def perf_contrastive_loss(
    model: LaprModel,
    batch: Sequence[PairSelection],
    query_embeddings: Mapping[int, np.ndarray],
    prompt_embeddings: Mapping[int, np.ndarray],
) -> tuple[float, ModelGrads]:
    """Performance-guided contrastive loss: updates experts, router fixed."""
    _require_source(batch, SOURCE_PERFORMANCE)
    return contrastive_loss(
        model, batch, query_embeddings, prompt_embeddings, freeze_router=True
    )


def label_contrastive_loss(
    model: LaprModel,
    batch: Sequence[PairSelection],
    query_embeddings: Mapping[int, np.ndarray],
    prompt_embeddings: Mapping[int, np.ndarray],
) -> tuple[float, ModelGrads]:
    """Label-guided contrastive loss: experts frozen, gradient reaches the
    router through the mixture weights on both sides."""
    _require_source(batch, SOURCE_LABEL)
    return contrastive_loss(
        model, batch, query_embeddings, prompt_embeddings, freeze_experts=True
    )


def _require_source(batch: Sequence[PairSelection], source: str) -> None:
    if len(batch) == 0:
        raise InvalidArgument("contrastive loss needs a nonempty batch")
    for sel in batch:
        if sel.source != source:
            raise InvalidArgument(
                f"expected {source}-sourced pairs, found {sel.source!r} for query {sel.query_id}"
            )


def load_balance_loss(mixtures: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """KL(batch-mean mixture || uniform) and its gradient per mixture row.

    Zero iff the mean mixture is uniform; at most log K. The log argument is
    guarded with BALANCE_LOG_EPS so one-hot mixtures stay finite.
    """
    if len(mixtures) == 0:
        raise InvalidArgument("load balance loss needs at least one mixture")
    rows = np.stack([np.asarray(m, dtype=np.float64) for m in mixtures])
    B, K = rows.shape
    mean = rows.mean(axis=0)
    log_term = np.log(mean + BALANCE_LOG_EPS) + np.log(K)
    loss = float(np.dot(mean, log_term))
    d_mean = log_term + mean / (mean + BALANCE_LOG_EPS)
    d_rows = np.tile(d_mean / B, (B, 1))
    return loss, [d_rows[i] for i in range(B)]


def balance_loss_with_router_grads(
    model: LaprModel,
    query_embeddings_matrix: np.ndarray,
) -> tuple[float, ModelGrads]:
    """Load balance loss of the routed mixtures, chained to router params."""
    U = np.atleast_2d(np.asarray(query_embeddings_matrix, dtype=np.float64))
    logits = U @ model.router.W.T + model.router.b
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    mixtures = e / e.sum(axis=1, keepdims=True)
    loss, d_rows = load_balance_loss(list(mixtures))
    grads = ModelGrads.zeros(model)
    accumulate_router_grads(model, U, mixtures, np.stack(d_rows), grads)
    return loss, grads


def router_loss(
    model: LaprModel,
    batch: Sequence[PairSelection],
    query_embeddings: Mapping[int, np.ndarray],
    prompt_embeddings: Mapping[int, np.ndarray],
    include_balance: bool = True,
) -> tuple[float, ModelGrads]:
    """Router objective: label-guided contrastive plus load balancing.

    ``include_balance=False`` is the balance-ablated variant. Gradients touch
    router parameters only.
    """
    loss, grads = label_contrastive_loss(
        model, batch, query_embeddings, prompt_embeddings
    )
    if include_balance:
        U = np.stack(
            [np.asarray(query_embeddings[sel.query_id], dtype=np.float64) for sel in batch]
        )
        lb_loss, lb_grads = balance_loss_with_router_grads(model, U)
        loss += lb_loss
        grads.add_(lb_grads)
    return loss, grads


def joint_loss(
    model: LaprModel,
    perf_batch: Sequence[PairSelection],
    label_batch: Sequence[PairSelection],
    query_embeddings: Mapping[int, np.ndarray],
    prompt_embeddings: Mapping[int, np.ndarray],
) -> tuple[float, ModelGrads]:
    """Single-stage objective: both contrastive terms plus balancing, with
    gradients over every parameter (no freezing at all)."""
    _require_source(perf_batch, SOURCE_PERFORMANCE)
    _require_source(label_batch, SOURCE_LABEL)
    loss_p, grads = contrastive_loss(model, perf_batch, query_embeddings, prompt_embeddings)
    loss_l, grads_l = contrastive_loss(model, label_batch, query_embeddings, prompt_embeddings)
    U = np.stack(
        [np.asarray(query_embeddings[sel.query_id], dtype=np.float64) for sel in label_batch]
    )
    loss_b, grads_b = balance_loss_with_router_grads(model, U)
    grads.add_(grads_l).add_(grads_b)
    return loss_p + loss_l + loss_b, grads
