"""Stage 4 local computation: refinement, task heads, losses, objectives.

Three downstream tasks are supported: node classification (cross-entropy),
link prediction (BCE + ranking composite over sampled negatives), and
cross-modal retrieval (in-batch InfoNCE between the image-side and
text-side expert outputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, Tensor, const

TASK_KINDS = ("nc", "lp", "mr")


@dataclass
class TaskSpec:
    kind: str
    lambda_rec: float
    lambda_align: float = 0.01
    lambda_route: float = 0.01
    lp_bce_weight: float = 1.0
    lp_bpr_weight: float = 0.5
    lp_margin_weight: float = 0.3
    lp_margin: float = 0.1
    nce_temperature: float = 0.07
    hard_negative_scale: float = 4.0
    hard_negative_min_pool: int = 256
    lambda_cls: float = 0.2
    query_modality: int = 0   # image-like side queries the text-like gallery

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}")
        for lam in (self.lambda_rec, self.lambda_align, self.lambda_route):
            if lam < 0:
                raise ValueError("loss weights must be nonnegative")
        if self.nce_temperature <= 0:
            raise ValueError("contrastive temperature must be positive")

    @classmethod
    def for_kind(cls, kind: str, lambda_rec: float | None = None,
                 lambda_align: float = 0.01, lambda_route: float = 0.01) -> "TaskSpec":
        if lambda_rec is None:
            lambda_rec = 0.5 if kind == "mr" else 0.05
        return cls(kind=kind, lambda_rec=lambda_rec, lambda_align=lambda_align,
                   lambda_route=lambda_route)


@dataclass
class LossBreakdown:
    task: float
    rec: float
    align: float
    route: float
    total: float

    @classmethod
    def combine(cls, spec: TaskSpec, task: float, rec: float, align: float,
                route: float) -> "LossBreakdown":
        total = (task + spec.lambda_rec * rec + spec.lambda_align * align
                 + spec.lambda_route * route)
        return cls(task=task, rec=rec, align=align, route=route, total=total)


def refine(params: ParamStore, fused: Tensor, neigh_mat: Tensor) -> Tensor:
    """Residual graph smoothing: LN(r + sigmoid(conv(r)))."""
    conv = nx.sage_conv(fused, neigh_mat, params["refine.w_self"],
                        params["refine.w_neigh"], params["refine.b"])
    return nx.layer_norm(nx.add(fused, nx.sigmoid(conv)),
                         params["refine.ln_g"], params["refine.ln_b"])


def local_objective(spec: TaskSpec, task_loss: Tensor, rec_loss: Tensor,
                    align_loss: Tensor, route_loss: Tensor
                    ) -> tuple[Tensor, LossBreakdown]:
    total = task_loss
    total = nx.add(total, nx.scale(rec_loss, spec.lambda_rec))
    total = nx.add(total, nx.scale(align_loss, spec.lambda_align))
    total = nx.add(total, nx.scale(route_loss, spec.lambda_route))
    breakdown = LossBreakdown.combine(spec, float(task_loss.data), float(rec_loss.data),
                                      float(align_loss.data), float(route_loss.data))
    return total, breakdown


# ---------------------------------------------------------------------------
# Node classification
# ---------------------------------------------------------------------------


def nc_logits(params: ParamStore, refined: Tensor) -> Tensor:
    return nx.linear(refined, params["head.nc.w"], params["head.nc.b"])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = nx.total_sum(nx.mul(const(onehot), nx.log_softmax(logits, axis=-1)))
    return nx.scale(nx.neg(picked), 1.0 / n)


def nc_task_loss(params: ParamStore, refined: Tensor, labels: np.ndarray,
                 train_idx: np.ndarray) -> Tensor:
    if train_idx.size == 0:
        return const(np.asarray(0.0))
    logits = nc_logits(params, nx.rows(refined, train_idx))
    return cross_entropy(logits, labels[train_idx])


# ---------------------------------------------------------------------------
# Link prediction
# ---------------------------------------------------------------------------


def lp_scores(refined: Tensor, pairs: np.ndarray) -> Tensor:
    """Symmetric dot-product edge scores for index pairs [B, 2]."""
    left = nx.rows(refined, pairs[:, 0])
    right = nx.rows(refined, pairs[:, 1])
    return nx.sum_axis(nx.mul(left, right), -1, keepdims=True)


def sample_hard_negatives(refined_detached: np.ndarray, n_nodes: int,
                          batch: int, edge_set: set[tuple[int, int]],
                          spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Top-scoring non-edges from a random pool of size max(min_pool, scale*B)."""
    pool_size = max(spec.hard_negative_min_pool, int(spec.hard_negative_scale * batch))
    cand = rng.integers(0, n_nodes, size=(pool_size * 2, 2))
    keep = []
    for u, v in cand:
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in edge_set:
            continue
        keep.append((u, v))
        if len(keep) == pool_size:
            break
    pool = np.asarray(keep if keep else [(0, min(1, n_nodes - 1))], dtype=np.intp)
    scores = (refined_detached[pool[:, 0]] * refined_detached[pool[:, 1]]).sum(axis=1)
    order = np.argsort(-scores, kind="stable")[:batch]
    return pool[np.sort(order)]


def lp_task_loss(refined: Tensor, pos_pairs: np.ndarray,
                 edge_set: set[tuple[int, int]], n_nodes: int,
                 spec: TaskSpec, rng: np.random.Generator) -> Tensor:
    """Composite of BCE, pairwise-rank, and margin losses over hard negatives."""
    if pos_pairs.shape[0] == 0:
        raise ValueError("link prediction batch contains no positive edges")
    batch = pos_pairs.shape[0]
    neg_pairs = sample_hard_negatives(refined.data, n_nodes, batch, edge_set, spec, rng)
    if neg_pairs.shape[0] < batch:
        reps = -(-batch // neg_pairs.shape[0])
        neg_pairs = np.tile(neg_pairs, (reps, 1))[:batch]

    s_pos = lp_scores(refined, pos_pairs)
    s_neg = lp_scores(refined, neg_pairs)
    targets = const(np.concatenate([np.ones((batch, 1)), np.zeros((batch, 1))]))
    s_all = nx.concat([s_pos, s_neg], axis=0)
    bce = nx.mean(nx.sub(nx.softplus(s_all), nx.mul(targets, s_all)))

    diff = nx.sub(s_pos, s_neg)
    bpr = nx.mean(nx.softplus(nx.neg(diff)))
    margin = nx.mean(nx.relu(nx.sub(const(np.full((batch, 1), spec.lp_margin)), diff)))

    total = nx.scale(bce, spec.lp_bce_weight)
    total = nx.add(total, nx.scale(bpr, spec.lp_bpr_weight))
    return nx.add(total, nx.scale(margin, spec.lp_margin_weight))


# ---------------------------------------------------------------------------
# Modality retrieval
# ---------------------------------------------------------------------------


def mr_embeddings(params: ParamStore, expert_flat: Tensor, n_nodes: int,
                  m_count: int, spec: TaskSpec) -> tuple[Tensor, Tensor]:
    """Project the per-modality expert outputs into query/gallery spaces."""
    query_m = spec.query_modality
    gallery_m = 1 if query_m == 0 else 0
    q_rows = np.arange(query_m * n_nodes, (query_m + 1) * n_nodes)
    g_rows = np.arange(gallery_m * n_nodes, (gallery_m + 1) * n_nodes)
    queries = nx.matmul(nx.rows(expert_flat, q_rows), params["head.mr.query.w"])
    gallery = nx.matmul(nx.rows(expert_flat, g_rows), params["head.mr.gallery.w"])
    return queries, gallery


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities [A, B] with epsilon-guarded norms."""
    na = nx.sqrt(nx.add(nx.sum_axis(nx.mul(a, a), -1, keepdims=True), const(1e-24)))
    nb = nx.sqrt(nx.add(nx.sum_axis(nx.mul(b, b), -1, keepdims=True), const(1e-24)))
    an = nx.div(a, nx.add(na, const(1e-12)))
    bn = nx.div(b, nx.add(nb, const(1e-12)))
    return nx.matmul(an, nx.swapaxes(bn, 0, 1))


def mr_task_loss(params: ParamStore, expert_flat: Tensor, n_nodes: int,
                 m_count: int, batch_idx: np.ndarray, spec: TaskSpec,
                 refined: Tensor | None = None,
                 labels: np.ndarray | None = None) -> Tensor:
    """In-batch InfoNCE on cosine similarities, plus the auxiliary classifier
    when labels are available."""
    queries, gallery = mr_embeddings(params, expert_flat, n_nodes, m_count, spec)
    q_batch = nx.rows(queries, batch_idx)
    g_batch = nx.rows(gallery, batch_idx)
    logits = nx.scale(cosine_matrix(q_batch, g_batch), 1.0 / spec.nce_temperature)
    loss = cross_entropy(logits, np.arange(batch_idx.size))
    if labels is not None and refined is not None and spec.lambda_cls > 0:
        aux = nc_task_loss(params, refined, labels, batch_idx)
        loss = nx.add(loss, nx.scale(aux, spec.lambda_cls))
    return loss
