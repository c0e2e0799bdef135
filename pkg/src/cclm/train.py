"""AdamW, the warmup/linear-decay schedule and the training loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .data import SyntheticCorpus, make_batch
from .model import CclmModel
from .objectives import OBJECTIVES, total_loss
from .rng import substream

LOG_COLUMNS = ("step", "view_kind", "L_cl", "L_match", "L_mlm", "total", "lr")

# parameters exempt from weight decay: biases, layer-norm gains, temperature
_NO_DECAY_SUFFIXES = (".b", ".g", "log_tau")


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    return not name.endswith(_NO_DECAY_SUFFIXES)


def adamw_step(params: dict[str, ag.Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Tensors with ``requires_grad`` false are skipped. Decay multiplies the
    weight by (1 - lr * weight_decay) before the moment step.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if name not in grads:
            raise KeyError(f"adamw_step: no gradient for trainable parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w = p.data
        if state.weight_decay and decays(name):
            w *= 1.0 - lr * state.weight_decay
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak: float) -> float:
    """Linear warmup from 0 to ``peak``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > total_steps:
        return 0.0
    if step <= warmup_steps:
        return peak * step / warmup_steps if warmup_steps else peak
    return peak * (total_steps - step) / (total_steps - warmup_steps)


# Full-scale reference recipe.
FULL_SCALE_SCHEDULE = {"peak_lr": 1e-4, "warmup_steps": 2500, "weight_decay": 0.02}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.02
    mix_ratio: float = 0.5
    mask_rate: float = 0.15
    objective: str = "cclm"
    terms: tuple[str, ...] = ("cl", "match", "mlm")
    uniform_negatives: bool = False
    grad_clip: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if self.steps <= self.warmup_steps:
            raise ValueError("steps must exceed warmup_steps")
        bad = set(self.terms) - {"cl", "match", "mlm"}
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}")


PRETRAIN = TrainConfig()
FINETUNE = TrainConfig(steps=300, peak_lr=5e-4, warmup_steps=30, mix_ratio=0.0, terms=("cl", "match"))


class TrainingDiverged(RuntimeError):
    pass


def format_log_line(step: int, view_kind: str, terms: dict[str, float], lr: float) -> str:
    def cell(key):
        return f"{terms[key]:.8g}" if key in terms else "-"

    mlm = "tlm" if "tlm" in terms else "mlm"
    return "\t".join([str(step), view_kind, cell("cl"), cell("match"), cell(mlm), cell("total"), f"{lr:.8g}"])


def parse_log_line(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    row = dict(zip(LOG_COLUMNS, parts))
    row["step"] = int(row["step"])
    for k in ("L_cl", "L_match", "L_mlm", "total", "lr"):
        row[k] = None if row[k] == "-" else float(row[k])
    return row


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s


def train(
    model: CclmModel,
    corpus: SyntheticCorpus,
    config: TrainConfig,
    seed: int,
    stage: str = "pretrain",
    state: OptimState | None = None,
    stop_at: int | None = None,
    on_step: Callable[[int, str], None] | None = None,
    on_checkpoint: Callable[[int, OptimState], None] | None = None,
) -> tuple[OptimState, list[str]]:
    """Run (or continue) a training stage; returns the optimiser state and new log lines.

    Every step draws from substreams keyed by (seed, stage, step), so a run
    resumed from a checkpoint at step s replays exactly what an uninterrupted
    run would have done from s + 1.
    """
    if state is None:
        state = OptimState(lr=config.peak_lr, weight_decay=config.weight_decay)
    last = config.steps if stop_at is None else min(stop_at, config.steps)
    params = model.params
    lines: list[str] = []
    stage_key = 0 if stage == "pretrain" else 1
    while state.step < last:
        step = state.step + 1
        batch_rng = substream(seed, "batching", stage_key, step)
        mask_rng = substream(seed, "masking", stage_key, step)
        neg_rng = substream(seed, "negatives", stage_key, step)
        drop_rng = substream(seed, "dropout", stage_key, step) if model.config.dropout_rate > 0 else None
        batch = make_batch(corpus, config.batch_size, config.mix_ratio, batch_rng, mask_rate=config.mask_rate,
                           mask_rng=mask_rng)
        out = total_loss(model, batch, rng=neg_rng, terms=config.terms, objective=config.objective,
                         uniform_negatives=config.uniform_negatives, dropout_rng=drop_rng)
        values = out.breakdown()
        for name, val in values.items():
            if not math.isfinite(val):
                raise TrainingDiverged(f"non-finite loss in term {name!r} at {stage} step {step}: {val}")
        grads_by_id = ag.backward(out.total)
        grads = {k: ag.grad_of(grads_by_id, p) for k, p in params.items() if p.requires_grad}
        if config.grad_clip > 0:
            _clip(grads, config.grad_clip)
        lr = lr_schedule(step, config.warmup_steps, config.steps, config.peak_lr)
        adamw_step(params, grads, state, lr=lr)
        model.clamp_temperature()
        lines.append(format_log_line(step, batch.view_kind, values, lr))
        if on_step is not None:
            on_step(step, lines[-1])
        if on_checkpoint is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(step, state)
    return state, lines


def pretrain(model: CclmModel, corpus: SyntheticCorpus, config: TrainConfig = PRETRAIN, seed: int = 0,
             **kw) -> tuple[OptimState, list[str]]:
    return train(model, corpus, config, seed, stage="pretrain", **kw)


def finetune_retrieval(model: CclmModel, corpus: SyntheticCorpus, config: TrainConfig = FINETUNE, seed: int = 0,
                       **kw) -> tuple[OptimState, list[str]]:
    """Contrastive + matching only, on pivot-language image-caption pairs."""
    if "mlm" in config.terms or config.mix_ratio != 0.0:
        raise ValueError("retrieval fine-tuning optimises only the contrastive and matching terms on image-text pairs")
    return train(model, corpus, config, seed, stage="finetune", **kw)
