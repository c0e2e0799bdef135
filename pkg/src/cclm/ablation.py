"""Pretrain -> pivot fine-tune -> evaluate pipeline and the ablation suite."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .config import ABLATIONS, RunConfig
from .data import SyntheticCorpus
from .evaluate import EvalReport, retrieval_eval
from .model import CclmModel
from .rng import substream
from .train import finetune_retrieval, parse_log_line, pretrain


def init_seed(seed: int) -> int:
    return int(substream(seed, "init").integers(2**31 - 1))


@dataclass
class PipelineResult:
    report: EvalReport
    pretrain_log: list[str]
    finetune_log: list[str]
    model: CclmModel

    def batch_counts(self) -> dict[str, int]:
        counts = {"cross_modal": 0, "cross_lingual": 0}
        for line in self.pretrain_log:
            counts[parse_log_line(line)["view_kind"]] += 1
        return counts

    def transfer_recall(self) -> float:
        langs = [l for l in self.report.average_recall if l != self.report.pivot]
        return statistics.fmean(self.report.average_recall[l] for l in langs)


def run_pipeline(cfg: RunConfig, corpus: SyntheticCorpus, seed: int | None = None) -> PipelineResult:
    cfg = cfg.resolved()
    seed = cfg.seed if seed is None else seed
    model = CclmModel(cfg.model, seed=init_seed(seed))
    _, pre_log = pretrain(model, corpus, cfg.pretrain, seed=seed)
    _, ft_log = finetune_retrieval(model, corpus, cfg.finetune, seed=seed)
    report = retrieval_eval(model, corpus, cfg.eval.split, cfg.eval.top_k)
    report.loss_curve = [(parse_log_line(l)["step"], parse_log_line(l)["total"]) for l in pre_log[::10]]
    return PipelineResult(report, pre_log, ft_log, model)


@dataclass
class VariantSummary:
    name: str
    pivot_recall: list[float] = field(default_factory=list)
    transfer_recall: list[float] = field(default_factory=list)
    transfer_gap: list[float] = field(default_factory=list)
    cross_lingual_batches: list[int] = field(default_factory=list)
    pretrain_steps: int = 0
    finetune_steps: int = 0

    @staticmethod
    def _ms(xs: list[float]) -> tuple[float, float]:
        if not xs:
            return float("nan"), float("nan")
        return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)

    def row(self) -> dict:
        return {
            "variant": self.name,
            "pivot_avg_recall": self._ms(self.pivot_recall),
            "transfer_avg_recall": self._ms(self.transfer_recall),
            "transfer_gap": self._ms(self.transfer_gap),
            "cross_lingual_batches": self.cross_lingual_batches,
            "pretrain_steps": self.pretrain_steps,
            "finetune_steps": self.finetune_steps,
        }


def format_table(rows: list[dict]) -> str:
    out = [f"{'variant':<24}{'pivot avgR':<18}{'transfer avgR':<18}{'gap':<18}"]
    for r in rows:
        cells = [f"{r[k][0]:.3f} ± {r[k][1]:.3f}" for k in ("pivot_avg_recall", "transfer_avg_recall", "transfer_gap")]
        out.append(f"{r['variant']:<24}" + "".join(f"{c:<18}" for c in cells))
    return "\n".join(out)


def run_ablation_suite(base: RunConfig, corpus: SyntheticCorpus, seeds: list[int],
                       variants: list[str] | None = None, min_seeds: int = 3) -> list[dict]:
    """Mean ± std over seeds of pivot/transfer average recall and transfer gap per variant.

    Every variant gets the same pretrain and fine-tune step budgets.
    """
    if len(seeds) < min_seeds:
        raise ValueError(f"need at least {min_seeds} seeds, got {len(seeds)}")
    variants = variants or list(ABLATIONS)
    configs = {v: base.with_ablation(v) for v in variants}
    budgets = {(c.pretrain.steps, c.finetune.steps) for c in configs.values()}
    if len(budgets) != 1:
        raise ValueError(f"variants disagree on training budget: {sorted(budgets)}")
    rows = []
    for name, cfg in configs.items():
        summary = VariantSummary(name, pretrain_steps=cfg.pretrain.steps, finetune_steps=cfg.finetune.steps)
        for seed in seeds:
            res = run_pipeline(cfg, corpus, seed)
            summary.pivot_recall.append(res.report.average_recall[corpus.pivot])
            summary.transfer_recall.append(res.transfer_recall())
            gaps = [g for l, g in res.report.transfer_gap.items() if l != corpus.pivot]
            summary.transfer_gap.append(statistics.fmean(gaps) if gaps else float("nan"))
            summary.cross_lingual_batches.append(res.batch_counts()["cross_lingual"])
        rows.append(summary.row())
    return rows
