"""Finite-difference checks for every primitive and for the full loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import build_corpus, CorpusSpec, make_batch
from .model import CclmConfig, CclmModel
from .objectives import total_loss

TOLERANCE = 1e-3


def _leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


PRIMITIVE_EPS = 1e-4


def _check(build: Callable[[], Tensor], inputs: list[Tensor], rng) -> float:
    probe = build()
    if probe.data.size == 1:
        return ag.finite_diff_check(build, inputs, eps=PRIMITIVE_EPS)
    # scalarise with fixed random weights
    w = Tensor(rng.normal(size=probe.shape))
    return ag.finite_diff_check(lambda: ag.sum(ag.mul(build(), w)), inputs, eps=PRIMITIVE_EPS)


def _case(name: str, rng) -> float:
    L = lambda *s, **k: _leaf(rng, *s, **k)  # noqa: E731
    if name == "add":
        a, b = L(3, 4), L(3, 4)
        return _check(lambda: ag.add(a, b), [a, b], rng)
    if name == "sub":
        a, b = L(3, 4), L(3, 4)
        return _check(lambda: ag.sub(a, b), [a, b], rng)
    if name == "mul":
        a, b = L(3, 4), L(3, 4)
        return _check(lambda: ag.mul(a, b), [a, b], rng)
    if name == "scale":
        a = L(5)
        return _check(lambda: ag.scale(a, -1.7), [a], rng)
    if name == "matmul":
        a, b = L(2, 3, 4), L(2, 4, 5)
        return _check(lambda: ag.matmul(a, b), [a, b], rng)
    if name == "transpose":
        a = L(2, 3, 4)
        return _check(lambda: ag.transpose(a, (2, 0, 1)), [a], rng)
    if name == "concat":
        a, b = L(2, 3), L(4, 3)
        return _check(lambda: ag.concat([a, b], axis=0), [a, b], rng)
    if name == "slice":
        a = L(4, 5)
        return _check(lambda: ag.slice_axis(a, 1, 4, axis=1), [a], rng)
    if name == "reshape":
        a = L(2, 6)
        return _check(lambda: ag.reshape(a, (3, 4)), [a], rng)
    if name == "expand":
        a = L(1, 4)
        return _check(lambda: ag.expand(a, (3, 4)), [a], rng)
    if name == "mean":
        a = L(3, 4)
        return _check(lambda: ag.mean(a, axis=1), [a], rng)
    if name == "sum":
        a = L(3, 4)
        return _check(lambda: ag.sum(a, axis=0), [a], rng)
    if name == "exp":
        a = L(3, 4)
        return _check(lambda: ag.exp(a), [a], rng)
    if name == "log":
        a = L(3, 4, positive=True)
        return _check(lambda: ag.log(a), [a], rng)
    if name == "gelu":
        a = L(3, 4)
        return _check(lambda: ag.gelu(a), [a], rng)
    if name == "softmax":
        a = L(3, 5)
        return _check(lambda: ag.softmax(a, axis=-1), [a], rng)
    if name == "log_softmax":
        a = L(3, 5)
        return _check(lambda: ag.log_softmax(a, axis=0), [a], rng)
    if name == "layer_norm":
        a = L(3, 6)
        return _check(lambda: ag.layer_norm(a, axis=-1), [a], rng)
    if name == "embedding_gather":
        t = L(5, 3)
        ids = rng.integers(0, 5, size=(2, 4))
        return _check(lambda: ag.embedding_gather(t, ids), [t], rng)
    if name == "masked_fill":
        a = L(3, 4)
        mask = rng.random((3, 4)) < 0.4
        return _check(lambda: ag.masked_fill(a, mask, 0.5), [a], rng)
    if name == "l2_normalize":
        a = L(3, 4)
        return _check(lambda: ag.l2_normalize(a, axis=-1), [a], rng)
    if name == "cross_entropy_from_logits":
        a = L(4, 6)
        t = rng.integers(0, 6, size=4)
        t[0] = -100
        return _check(lambda: ag.cross_entropy_from_logits(a, t, ignore_index=-100), [a], rng)
    raise KeyError(name)


PRIMITIVES = (
    "add", "sub", "mul", "scale", "matmul", "transpose", "concat", "slice", "reshape", "expand", "mean",
    "sum", "exp", "log", "gelu", "softmax", "log_softmax", "layer_norm", "embedding_gather", "masked_fill",
    "l2_normalize", "cross_entropy_from_logits",
)


def check_primitive(name: str, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    with ag.precision(np.float64):
        return _case(name, rng)


def check_total_loss(config: CclmConfig | None = None, view_kind: str = "cross_modal", seed: int = 0,
                     coords_per_tensor: int = 2) -> float:
    """Central differences of the summed objective on a 2-example batch.

    Negatives are pinned so the loss is a smooth function of the weights;
    ``coords_per_tensor`` coordinates of every parameter tensor are probed.
    """
    config = config or CclmConfig()
    corpus = build_corpus(seed, CorpusSpec(n_train=8, n_dev=2, n_test=2, n_parallel=8))
    if config.vocab_size != len(corpus.vocab):
        raise ValueError(f"model vocab_size {config.vocab_size} != corpus vocabulary {len(corpus.vocab)}")
    rng = np.random.default_rng(seed)
    batch = make_batch(corpus, 2, 1.0 if view_kind == "cross_lingual" else 0.0, rng, mask_rate=0.5)
    if not (batch.mlm_labels != -100).any():
        batch.mlm_labels[0, 1] = batch.text_ids[0, 1]
    model = CclmModel(config, seed=seed).astype(np.float64)
    # move the weights off their symmetric initialisation so every path carries signal
    prng = np.random.default_rng(seed + 1)
    for t in model.params.values():
        t.data += prng.normal(0, 0.05, size=t.shape)
    negatives = (np.array([1, 0]), np.array([1, 0]))
    with ag.precision(np.float64):
        f = lambda: total_loss(model, batch, negatives=negatives).total  # noqa: E731
        return ag.finite_diff_check(f, list(model.params.values()), eps=1e-3,
                                    max_coords=coords_per_tensor, rng=np.random.default_rng(seed))


def run_gradcheck(config: CclmConfig | None = None, seed: int = 0,
                  coords_per_tensor: int = 2) -> list[tuple[str, float, bool]]:
    results = []
    for name in PRIMITIVES:
        err = check_primitive(name, seed)
        results.append((name, err, err < TOLERANCE))
    for kind in ("cross_modal", "cross_lingual"):
        err = check_total_loss(config, kind, seed, coords_per_tensor)
        results.append((f"total_loss[{kind}]", err, err < TOLERANCE))
    return results
