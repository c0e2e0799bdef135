"""Command-line entry point: ``cclm <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint as ckpt
from .ablation import format_table, init_seed, run_ablation_suite
from .config import ABLATIONS, ConfigError, RunConfig, load_config
from .data import build_corpus, corpus_digest, load_corpus, save_corpus
from .evaluate import export_embeddings, retrieval_eval
from .gradcheck import TOLERANCE, run_gradcheck
from .model import CclmModel
from .train import finetune_retrieval, pretrain

CHECKPOINT_NAME = "checkpoint"
LOG_NAME = "loss_log.tsv"


class CliError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    ablation = getattr(args, "ablation", None)
    if ablation:
        cfg = cfg.updated({"ablation": ablation})
    return cfg.resolved()


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfg.to_json() + "\n")


def _open_corpus(path: str, cfg: RunConfig | None = None):
    d = Path(path)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"no corpus manifest in {d}")
    manifest = json.loads(manifest_path.read_text())
    actual = corpus_digest(d)
    if actual != manifest["digest"]:
        raise CliError(f"corpus digest mismatch: manifest {manifest['digest'][:12]} vs files {actual[:12]}")
    if cfg is not None:
        expected = {"seed": cfg.seed, "spec": _spec_doc(cfg)}
        found = {"seed": manifest.get("seed"), "spec": manifest.get("spec")}
        if expected != found:
            raise CliError("corpus was generated from a different data config or seed; regenerate it with gen-data")
    return load_corpus(d)


def _spec_doc(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg.data)))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    corpus = build_corpus(cfg.seed, cfg.data)
    manifest = save_corpus(corpus, out, inline_images=args.inline_images)
    manifest["spec"] = _spec_doc(cfg)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _echo_config(cfg, out)
    print(f"corpus written to {out} (digest {manifest['digest']})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _open_corpus(args.corpus, cfg)
    if cfg.model.vocab_size != len(corpus.vocab):
        raise CliError(f"model.vocab_size={cfg.model.vocab_size} but corpus vocabulary has {len(corpus.vocab)} tokens")
    out = Path(args.out)
    _echo_config(cfg, out)
    stage = args.stage
    tcfg = cfg.pretrain if stage == "pretrain" else cfg.finetune
    ckpt_path = out / CHECKPOINT_NAME
    log_path = out / LOG_NAME
    state = None
    if args.resume:
        model, state, meta = ckpt.load_checkpoint(ckpt_path, cfg.model)
        if meta.get("stage") != stage:
            raise CliError(f"checkpoint in {out} belongs to stage {meta.get('stage')!r}, not {stage!r}")
        done = state.step if state else 0
        kept = [l for l in log_path.read_text().splitlines() if int(l.split("\t", 1)[0]) <= done] \
            if log_path.exists() else []
        log_path.write_text("".join(l + "\n" for l in kept))
    elif stage == "finetune":
        if not args.init:
            raise CliError("fine-tuning needs --init <pretrained checkpoint> (or --resume)")
        model, _, _ = ckpt.load_checkpoint(args.init, cfg.model)
        log_path.write_text("")
    else:
        model = CclmModel(cfg.model, seed=init_seed(cfg.seed))
        log_path.write_text("")

    meta = {"stage": stage, "seed": cfg.seed, "ablation": cfg.ablation}
    log_file = log_path.open("a")

    def on_step(step, line):
        log_file.write(line + "\n")
        log_file.flush()

    def on_checkpoint(step, st):
        ckpt.save_checkpoint(ckpt_path, model, st, {**meta, "step": step})

    run = pretrain if stage == "pretrain" else finetune_retrieval
    try:
        state, _ = run(model, corpus, tcfg, seed=cfg.seed, state=state, stop_at=args.stop_at,
                       on_step=on_step, on_checkpoint=on_checkpoint)
    finally:
        log_file.close()
    ckpt.save_checkpoint(ckpt_path, model, state, {**meta, "step": state.step})
    print(f"{stage}: step {state.step}/{tcfg.steps}, checkpoint {ckpt_path}.json, digest {ckpt.checkpoint_digest(ckpt_path)[:16]}")
    return 0


def _load_for_eval(args):
    cfg = load_config(args.config).resolved().model if getattr(args, "config", None) else None
    model, _, _ = ckpt.load_checkpoint(args.checkpoint, cfg)
    if getattr(args, "image_size", None) and args.image_size != model.config.image_size:
        model = model.resize_image(args.image_size)
    return model


def cmd_eval(args) -> int:
    model = _load_for_eval(args)
    corpus = _open_corpus(args.corpus)
    corpus.image_size = model.config.image_size
    report = retrieval_eval(model, corpus, args.split, args.top_k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(report.summary())
    return 0


def cmd_export_embeddings(args) -> int:
    model = _load_for_eval(args)
    corpus = _open_corpus(args.corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_embeddings(model, corpus, args.split, out)
    print(f"wrote {n} rows to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    results = run_gradcheck(cfg.model, seed=cfg.seed, coords_per_tensor=args.coords)
    width = max(len(r[0]) for r in results)
    for name, err, ok in results:
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
    failed = [r for r in results if not r[2]]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    corpus = _open_corpus(args.corpus, cfg)
    rows = run_ablation_suite(cfg, corpus, args.seeds, args.variants)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2) + "\n")
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cclm", description="Cross-view language modelling at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--inline-images", action="store_true", help="store rasters as hex instead of scene specs only")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain or fine-tune")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("pretrain", "finetune"), default="pretrain")
    t.add_argument("--init", help="checkpoint to start fine-tuning from")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-at", type=int, help="stop after this step (schedule still targets the full run)")
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval evaluation with fusion re-ranking")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--top-k", type=int, default=8)
    e.add_argument("--config", help="check the checkpoint against this config's shapes")
    e.add_argument("--image-size", type=int, help="evaluate at another resolution (interpolates positions)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--config")
    c.add_argument("--coords", type=int, default=2, help="coordinates probed per parameter tensor")
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-embeddings", help="write pooled embeddings as TSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--corpus", required=True)
    x.add_argument("--split", default="test")
    x.add_argument("--out", required=True)
    x.add_argument("--config")
    x.add_argument("--image-size", type=int)
    x.set_defaults(func=cmd_export_embeddings)

    a = sub.add_parser("ablate", help="run the ablation suite over several seeds")
    a.add_argument("--config")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--variants", nargs="+", choices=sorted(ABLATIONS))
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ckpt.CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
