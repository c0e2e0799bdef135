"""Two-stage retrieval evaluation, transfer gaps and embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import SyntheticCorpus, Split, pad
from .model import CclmModel, ViewFeatures

RECALL_KS = (1, 5, 10)


def rerank(sim: np.ndarray, rerank_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], top_k: int) -> np.ndarray:
    """Full candidate ordering per query.

    The ``top_k`` candidates by ``sim`` are reordered by ``rerank_fn(queries,
    candidates)`` (flat index arrays -> scores); the rest follow in
    similarity order. Ties keep the lower index first.
    """
    sim = np.asarray(sim)
    m = sim.shape[1]
    k = min(max(int(top_k), 1), m)
    order = np.argsort(-sim, axis=1, kind="stable")
    top = order[:, :k]
    q = np.repeat(np.arange(sim.shape[0]), k)
    scores = np.asarray(rerank_fn(q, top.reshape(-1)), dtype=np.float64).reshape(top.shape)
    reranked = np.empty_like(top)
    for i in range(top.shape[0]):
        reranked[i] = top[i][np.lexsort((top[i], -scores[i]))]
    return np.concatenate([reranked, order[:, k:]], axis=1)


def recall_at_k(ranking: np.ndarray, k: int) -> float:
    """Fraction of queries whose ground truth (same index) is within the first k."""
    gt = np.arange(ranking.shape[0])[:, None]
    return float((ranking[:, :k] == gt).any(axis=1).mean())


@dataclass
class EvalReport:
    pivot: str
    recalls: dict[str, dict[str, dict[int, float]]] = field(default_factory=dict)
    average_recall: dict[str, float] = field(default_factory=dict)
    transfer_gap: dict[str, float] = field(default_factory=dict)
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    top_k: int = 0
    size: int = 0

    def to_json(self) -> str:
        doc = {
            "pivot": self.pivot,
            "top_k": self.top_k,
            "size": self.size,
            "recalls": {l: {d: {str(k): v for k, v in r.items()} for d, r in dirs.items()}
                        for l, dirs in self.recalls.items()},
            "average_recall": self.average_recall,
            "transfer_gap": self.transfer_gap,
            "loss_curve": [list(x) for x in self.loss_curve],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        recalls = {l: {d: {int(k): v for k, v in r.items()} for d, r in dirs.items()}
                   for l, dirs in doc["recalls"].items()}
        return cls(doc["pivot"], recalls, doc["average_recall"], doc["transfer_gap"],
                   [tuple(x) for x in doc["loss_curve"]], doc["top_k"], doc["size"])

    def summary(self) -> str:
        lines = [f"{'lang':<6}{'dir':<5}" + "".join(f"R@{k:<6}" for k in RECALL_KS) + "avgR   gap"]
        for lang, dirs in self.recalls.items():
            for d, r in dirs.items():
                lines.append(f"{lang:<6}{d:<5}" + "".join(f"{r[k]:<8.3f}" for k in RECALL_KS)
                             + f"{self.average_recall[lang]:<7.3f}{self.transfer_gap.get(lang, float('nan')):.3f}")
        return "\n".join(lines)


def transfer_gap(report: EvalReport) -> dict[str, float]:
    """avg-recall(lang) / avg-recall(pivot) for every language in the report."""
    base = report.average_recall.get(report.pivot, 0.0)
    if not base > 0:
        raise ZeroDivisionError(f"pivot language {report.pivot!r} has zero average recall")
    return {lang: v / base for lang, v in report.average_recall.items()}


def average_recall(i2t: dict[int, float], t2i: dict[int, float]) -> float:
    return float(np.mean([i2t[k] for k in RECALL_KS] + [t2i[k] for k in RECALL_KS]))


# ---------------------------------------------------------------- model-backed retrieval


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield np.arange(i, min(n, i + size))


def encode_images(model: CclmModel, images: np.ndarray, chunk: int = 64) -> ViewFeatures:
    with ag.no_grad():
        parts = [model.encode_image(images[idx]) for idx in _chunks(len(images), chunk)]
    return _stack(parts)


def encode_texts(model: CclmModel, ids: np.ndarray, chunk: int = 64) -> ViewFeatures:
    with ag.no_grad():
        parts = [model.encode_text(ids[idx]) for idx in _chunks(len(ids), chunk)]
    return _stack(parts)


def _stack(parts: list[ViewFeatures]) -> ViewFeatures:
    return ViewFeatures(
        Tensor(np.concatenate([p.pooled.data for p in parts])),
        Tensor(np.concatenate([p.states.data for p in parts])),
        np.concatenate([p.pad_mask for p in parts]),
    )


def fused_match_scores(model: CclmModel, texts: ViewFeatures, images: ViewFeatures,
                       text_rows: np.ndarray, image_rows: np.ndarray, chunk: int = 256) -> np.ndarray:
    """match_score(fuse(text_i, image_j)) for each listed (i, j) pair."""
    out = np.empty(len(text_rows), dtype=np.float64)
    with ag.no_grad():
        for idx in _chunks(len(text_rows), chunk):
            x = model.fuse(texts.take(text_rows[idx]), images.take(image_rows[idx]), "cross_modal")
            x_cls = ag.reshape(ag.slice_axis(x, 0, 1, axis=1), (len(idx), -1))
            out[idx] = model.match_score(x_cls).data
    return out


def retrieval_rankings(model: CclmModel, images: ViewFeatures, texts: ViewFeatures,
                       top_k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(similarity, image->text ranking, text->image ranking)."""
    with ag.no_grad():
        zi = model.project_v(images.pooled).data
        zt = model.project_w(texts.pooled).data
    sim = zi.astype(np.float64) @ zt.astype(np.float64).T
    i2t = rerank(sim, lambda q, c: fused_match_scores(model, texts, images, c, q), top_k)
    t2i = rerank(sim.T, lambda q, c: fused_match_scores(model, texts, images, q, c), top_k)
    return sim, i2t, t2i


def retrieval_eval(model: CclmModel, corpus: SyntheticCorpus, split: str = "test", top_k: int = 8,
                   languages: list[str] | None = None) -> EvalReport:
    """Recall@{1,5,10} per language and direction with top-k fusion re-ranking."""
    data: Split = corpus.splits[split]
    languages = languages or [l for l in [corpus.pivot, *corpus.transfer] if l in data.captions]
    m = len(data.scenes)
    top_k = min(top_k, m)
    images = encode_images(model, data.images(model.config.image_size))
    report = EvalReport(corpus.pivot, top_k=top_k, size=m)
    for lang in languages:
        texts = encode_texts(model, pad(data.captions[lang]))
        _, i2t, t2i = retrieval_rankings(model, images, texts, top_k)
        r_i2t = {k: recall_at_k(i2t, k) for k in RECALL_KS}
        r_t2i = {k: recall_at_k(t2i, k) for k in RECALL_KS}
        report.recalls[lang] = {"i2t": r_i2t, "t2i": r_t2i}
        report.average_recall[lang] = average_recall(r_i2t, r_t2i)
    if report.average_recall.get(corpus.pivot, 0.0) > 0:
        report.transfer_gap = transfer_gap(report)
    return report


def export_embeddings(model: CclmModel, corpus: SyntheticCorpus, split: str, path: str | Path) -> int:
    """Write pooled [CLS] vectors of every image and caption as TSV; returns the row count."""
    data = corpus.splits[split]
    images = encode_images(model, data.images(model.config.image_size)).pooled.data
    d = images.shape[1]
    header = ["item_id", "modality", "language", "example_id"] + [f"d{i}" for i in range(d)]
    rows = [header]

    def emit(item, modality, lang, ex, vec):
        rows.append([item, modality, lang, str(ex)] + [repr(float(x)) for x in vec])

    for sid, vec in zip(data.scene_ids, images):
        emit(f"img-{sid}", "image", "-", sid, vec)
    for lang, caps in data.captions.items():
        texts = encode_texts(model, pad(caps)).pooled.data
        for sid, vec in zip(data.scene_ids, texts):
            emit(f"txt-{lang}-{sid}", "text", lang, sid, vec)
    Path(path).write_text("\n".join("\t".join(r) for r in rows) + "\n")
    return len(rows) - 1
