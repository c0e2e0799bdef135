"""Contrastive, matching and conditional-MLM objectives, plus the TLM ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import IGNORE, CrossViewBatch
from .model import CclmModel, ViewFeatures

OBJECTIVES = ("cclm", "tlm", "tlm_cl")


def info_nce(scores: Tensor, positive_index: int) -> Tensor:
    """-log softmax(scores)[positive_index] for one row of K candidate scores."""
    scores = ag.as_tensor(scores)
    k = scores.shape[-1]
    if not 0 <= positive_index < k:
        raise IndexError(f"info_nce: positive_index {positive_index} out of range for {k} scores")
    return ag.cross_entropy_from_logits(ag.reshape(scores, (1, k)), np.array([positive_index]))


def similarity(za: Tensor, zb: Tensor, inv_tau: Tensor) -> Tensor:
    """N x N matrix za zbᵀ / τ (rows index view A, columns view B)."""
    s = ag.matmul(za, ag.transpose(zb))
    return ag.mul(s, ag.expand(ag.reshape(inv_tau, (1, 1)), s.shape))


def contrastive_loss(sim: Tensor) -> Tensor:
    """Symmetric in-batch InfoNCE with diagonal positives."""
    sim = ag.as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ag.ShapeError(f"contrastive_loss: similarity matrix must be square, got {sim.shape}")
    diag = np.arange(sim.shape[0])
    a2b = ag.cross_entropy_from_logits(sim, diag)
    b2a = ag.cross_entropy_from_logits(ag.transpose(sim), diag)
    return ag.scale(ag.add(a2b, b2a), 0.5)


def _sample_excluding_diag(logits: np.ndarray, rng: np.random.Generator, uniform: bool) -> np.ndarray:
    n = logits.shape[0]
    x = np.zeros_like(logits, dtype=np.float64) if uniform else logits.astype(np.float64)
    x = x.copy()
    np.fill_diagonal(x, -np.inf)
    x -= x.max(axis=1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(n)
    idx = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
    idx = np.minimum(idx, n - 1)
    # guard against landing on the positive through rounding at the cdf edges
    bad = idx == np.arange(n)
    idx[bad] = np.where(idx[bad] == n - 1, idx[bad] - 1, idx[bad] + 1)
    return idx


def sample_hard_negatives(
    sim: np.ndarray, rng: np.random.Generator, uniform: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """One negative per row (b_neg for each a_i) and per column (a_neg for each b_j).

    Negatives are drawn from the softmax of the similarity scores with the
    positive excluded, or uniformly over the other indices when ``uniform``.
    """
    sim = np.asarray(sim.data if isinstance(sim, Tensor) else sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"sample_hard_negatives: similarity matrix must be square, got {sim.shape}")
    if sim.shape[0] < 2:
        raise ValueError("sample_hard_negatives: need N >= 2 for a negative to exist")
    b_neg = _sample_excluding_diag(sim, rng, uniform)
    a_neg = _sample_excluding_diag(sim.T, rng, uniform)
    return b_neg, a_neg


def matching_loss(pos: Tensor, neg_b: Tensor, neg_a: Tensor) -> Tensor:
    """Two-way matched-vs-negative classification with the positive pair as target."""
    pos, neg_b, neg_a = ag.as_tensor(pos), ag.as_tensor(neg_b), ag.as_tensor(neg_a)
    if not pos.shape == neg_b.shape == neg_a.shape or pos.ndim != 1:
        raise ag.ShapeError(f"matching_loss: length mismatch {pos.shape}, {neg_b.shape}, {neg_a.shape}")
    n = pos.shape[0]
    zeros = np.zeros(n, dtype=np.int64)
    col = lambda t: ag.reshape(t, (n, 1))  # noqa: E731
    lb = ag.cross_entropy_from_logits(ag.concat([col(pos), col(neg_b)], axis=1), zeros)
    la = ag.cross_entropy_from_logits(ag.concat([col(pos), col(neg_a)], axis=1), zeros)
    return ag.scale(ag.add(lb, la), 0.5)


def masked_lm_loss(model: CclmModel, states: Tensor, labels: np.ndarray) -> tuple[Tensor, bool]:
    """Mean cross-entropy of ψᵀx at labelled positions; (loss, had_targets).

    Only labelled rows are pushed through the vocabulary projection.
    """
    labels = np.asarray(labels)
    flat = labels.reshape(-1)
    rows = np.nonzero(flat != IGNORE)[0]
    if rows.size == 0:
        zero = ag.scale(ag.sum(states), 0.0)
        return zero, False
    d = states.shape[-1]
    x = ag.embedding_gather(ag.reshape(states, (-1, d)), rows)
    return ag.cross_entropy_from_logits(model.mlm_logits(x), flat[rows]), True


def conditional_mlm_loss(model: CclmModel, fused: Tensor, labels: np.ndarray) -> tuple[Tensor, bool]:
    """MLM over fusion outputs for the masked text conditioned on the other view."""
    return masked_lm_loss(model, fused, labels)


def tlm_loss(model: CclmModel, tlm_ids: np.ndarray, tlm_labels: np.ndarray,
             rng: np.random.Generator | None = None) -> tuple[Tensor, bool]:
    """MLM over text-encoder outputs of a concatenated sentence pair (no fusion)."""
    tlm_ids = np.asarray(tlm_ids)
    if tlm_ids.shape[-1] > model.config.max_text_len:
        raise ValueError(f"tlm_loss: concatenated length {tlm_ids.shape[-1]} exceeds {model.config.max_text_len}")
    feats = model.encode_text(tlm_ids, rng=rng)
    return masked_lm_loss(model, feats.states, tlm_labels)


def concat_views(views: list[ViewFeatures]) -> ViewFeatures:
    return ViewFeatures(
        ag.concat([v.pooled for v in views], axis=0),
        ag.concat([v.states for v in views], axis=0),
        np.concatenate([v.pad_mask for v in views], axis=0),
    )


@dataclass
class LossOutput:
    total: Tensor
    terms: dict[str, Tensor] = field(default_factory=dict)
    no_mlm_targets: bool = False
    negatives: tuple[np.ndarray, np.ndarray] | None = None

    def breakdown(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data)
        return out


def _encode_pair(model: CclmModel, batch: CrossViewBatch, rng) -> tuple[ViewFeatures, ViewFeatures, Tensor, Tensor]:
    """Features and projections for view A (rows) and view B (columns)."""
    if batch.view_kind == "cross_modal":
        a = model.encode_image(batch.images, rng=rng)
        b = model.encode_text(batch.text_ids, batch.text_mask, rng=rng)
        return a, b, model.project_v(a.pooled), model.project_w(b.pooled)
    if batch.view_kind == "cross_lingual":
        a = model.encode_text(batch.text_ids, batch.text_mask, rng=rng)
        b = model.encode_text(batch.other_ids, batch.other_mask, rng=rng)
        return a, b, model.project_w(a.pooled), model.project_w(b.pooled)
    raise ValueError(f"unknown view_kind {batch.view_kind!r}")


def total_loss(
    model: CclmModel,
    batch: CrossViewBatch,
    rng: np.random.Generator | None = None,
    negatives: tuple[np.ndarray, np.ndarray] | None = None,
    terms: tuple[str, ...] = ("cl", "match", "mlm"),
    objective: str = "cclm",
    uniform_negatives: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> LossOutput:
    """Unweighted sum of the requested terms for one homogeneous batch.

    The same code serves both view kinds; the kind only decides which
    encoders produce views A and B. ``negatives`` pins the hard negatives
    (b_neg per row, a_neg per column); otherwise they are drawn with ``rng``.
    ``objective`` selects the TLM ablations for cross-lingual batches.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    lingual = batch.view_kind == "cross_lingual"
    if lingual and objective != "cclm":
        return _tlm_objective(model, batch, objective, terms, dropout_rng)

    n = batch.size
    kind = batch.view_kind
    a, b, za, zb = _encode_pair(model, batch, dropout_rng)
    out_terms: dict[str, Tensor] = {}
    sim = similarity(za, zb, model.inverse_temperature())
    if "cl" in terms:
        out_terms["cl"] = contrastive_loss(sim)

    need_match = "match" in terms
    need_mlm = "mlm" in terms
    queries: list[ViewFeatures] = []
    keys: list[ViewFeatures] = []
    ar = np.arange(n)
    if need_match:
        if negatives is None:
            if rng is None:
                raise ValueError("total_loss: matching needs either rng or fixed negatives")
            negatives = sample_hard_negatives(sim.data, rng, uniform_negatives)
        b_neg, a_neg = negatives
        # rows: (a_i, b_i), (a_i, b_neg), (a_neg, b_i); text is always the query stream
        a_rows = np.concatenate([ar, ar, a_neg])
        b_rows = np.concatenate([ar, b_neg, ar])
        if lingual:
            queries.append(a.take(a_rows))
            keys.append(b.take(b_rows))
        else:
            queries.append(b.take(b_rows))
            keys.append(a.take(a_rows))
    no_targets = False
    if need_mlm:
        masked = model.encode_text(batch.mlm_ids, batch.text_mask, rng=dropout_rng)
        queries.append(masked)
        if lingual:
            cond_rows = ar + n * (1 - np.asarray(batch.mlm_side))
            keys.append(concat_views([a, b]).take(cond_rows))
        else:
            keys.append(a)
    if queries:
        q = queries[0] if len(queries) == 1 else concat_views(queries)
        kv = keys[0] if len(keys) == 1 else concat_views(keys)
        fused = model.fuse(q, kv, kind, rng=dropout_rng)
        offset = 0
        if need_match:
            x_cls = ag.reshape(ag.slice_axis(ag.slice_axis(fused, 0, 3 * n, axis=0), 0, 1, axis=1), (3 * n, -1))
            scores = model.match_score(x_cls)
            out_terms["match"] = matching_loss(
                ag.slice_axis(scores, 0, n), ag.slice_axis(scores, n, 2 * n), ag.slice_axis(scores, 2 * n, 3 * n)
            )
            offset = 3 * n
        if need_mlm:
            fm = ag.slice_axis(fused, offset, offset + n, axis=0)
            out_terms["mlm"], had = conditional_mlm_loss(model, fm, batch.mlm_labels)
            no_targets = not had
    total = _sum_terms(out_terms, za)
    return LossOutput(total, out_terms, no_targets, negatives if need_match else None)


def _sum_terms(terms: dict[str, Tensor], like: Tensor) -> Tensor:
    vals = list(terms.values())
    if not vals:
        return ag.scale(ag.sum(like), 0.0)
    total = vals[0]
    for v in vals[1:]:
        total = ag.add(total, v)
    return total


def _tlm_objective(model, batch, objective, terms, dropout_rng) -> LossOutput:
    out: dict[str, Tensor] = {}
    if objective == "tlm_cl" and "cl" in terms:
        _, _, za, zb = _encode_pair(model, batch, dropout_rng)
        out["cl"] = contrastive_loss(similarity(za, zb, model.inverse_temperature()))
    loss, had = tlm_loss(model, batch.tlm_ids, batch.tlm_labels, dropout_rng)
    out["tlm"] = loss
    like = model.params["head.log_tau"]
    return LossOutput(_sum_terms(out, like), out, not had)


# ---------------------------------------------------------------- mutual-information harness


def exact_mutual_information(joint: np.ndarray) -> float:
    p = _check_joint(joint)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / (pa @ pb)[nz])).sum())


def density_ratio_critic(joint: np.ndarray, floor: float = -1e4) -> np.ndarray:
    """log p(a, b) / (p(a) p(b)), floored where the joint has no mass."""
    p = _check_joint(joint)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore"):
        r = np.log(p) - np.log(pa @ pb)
    return np.where(p > 0, r, floor)


def _check_joint(joint: np.ndarray) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] > 64 or p.shape[1] > 64:
        raise ValueError(f"joint must be a 2-D table of at most 64x64 outcomes, got {p.shape}")
    total = p.sum()
    if (p < 0).any() or not total > 0:
        raise ValueError("degenerate joint distribution (no positive mass)")
    return p / total


def mi_lower_bound_estimate(
    joint: np.ndarray,
    critic: np.ndarray,
    n: int,
    trials: int,
    rng: np.random.Generator,
    distinct: bool = False,
) -> tuple[float, float]:
    """Monte Carlo value of log N - E[InfoNCE] and its standard error.

    Each trial draws N pairs from ``joint`` and scores every (a_i, b_j) with
    ``critic[a_i, b_j]``. Pairs are i.i.d. unless ``distinct``, which
    conditions the batch on pairwise-distinct a values.
    """
    p = _check_joint(joint)
    critic = np.asarray(critic, dtype=np.float64)
    if critic.shape != p.shape:
        raise ValueError(f"critic shape {critic.shape} does not match joint {p.shape}")
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be positive")
    if n == 1:
        return 0.0, 0.0
    flat = p.reshape(-1)
    nb = p.shape[1]
    vals = np.empty(trials)
    with ag.precision(np.float64):
        for t in range(trials):
            cells = rng.choice(flat.size, size=n, p=flat)
            if distinct:
                while len(set(cells // nb)) < n:
                    cells = rng.choice(flat.size, size=n, p=flat)
            ai, bi = cells // nb, cells % nb
            scores = Tensor(critic[np.ix_(ai, bi)])
            loss = ag.cross_entropy_from_logits(scores, np.arange(n))
            vals[t] = math.log(n) - float(loss.data)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
