"""Run configuration: a flat JSON object with dotted section prefixes.

Example::

    {"seed": 3, "model.d": 64, "pretrain.steps": 1500, "data.n_train": 256}

Every key has a default; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CorpusSpec
from .model import CclmConfig
from .train import FINETUNE, PRETRAIN, TrainConfig

ABLATIONS = {
    "full": {},
    "w/o-shared-cross-attn": {"model.share_cross_attn": False},
    "w/o-shared-ffn": {"model.share_ffn": False},
    "w/-tlm": {"pretrain.objective": "tlm"},
    "w/-tlm+cl": {"pretrain.objective": "tlm_cl"},
    "w/o-parallel": {"pretrain.mix_ratio": 0.0},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    top_k: int = 8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ablation: str = "full"
    out_dir: str = ""
    model: CclmConfig = field(default_factory=CclmConfig)
    data: CorpusSpec = field(default_factory=CorpusSpec)
    pretrain: TrainConfig = PRETRAIN
    finetune: TrainConfig = FINETUNE
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("model", "data", "pretrain", "finetune", "eval")

    def to_flat(self) -> dict:
        flat = {"seed": self.seed, "ablation": self.ablation, "out_dir": self.out_dir}
        for sec in self.SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                flat[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        return cls().updated(flat)

    def updated(self, flat: dict) -> "RunConfig":
        top = {}
        sections: dict[str, dict] = {s: {} for s in self.SECTIONS}
        for key, value in flat.items():
            if "." in key:
                sec, name = key.split(".", 1)
                if sec not in sections:
                    raise ConfigError(f"unknown config key {key!r}")
                names = {f.name: f for f in fields(getattr(self, sec))}
                if name not in names:
                    raise ConfigError(f"unknown config key {key!r}")
                if isinstance(value, list):
                    value = tuple(value)
                sections[sec][name] = value
            elif key in ("seed", "ablation", "out_dir"):
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if "ablation" in top and top["ablation"] not in ABLATIONS:
            raise ConfigError(f"unknown ablation {top['ablation']!r}; choose from {sorted(ABLATIONS)}")
        try:
            built = {s: replace(getattr(self, s), **kv) for s, kv in sections.items() if kv}
            return replace(self, **top, **built)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return self.updated({**ABLATIONS[name], "ablation": name})

    def resolved(self) -> "RunConfig":
        """Config with its ablation overrides applied."""
        return self.with_ablation(self.ablation)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        flat = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigError(f"{path}: malformed config at line {exc.lineno}: {line.strip()!r} ({exc.msg})") from None
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_flat(flat)
