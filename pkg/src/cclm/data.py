"""Synthetic multilingual, multimodal corpus with exact ground truth.

Scenes are 1-3 coloured shapes on a 4x4 grid. A caption lists each object
as ``<color> <shape> at <cell>`` joined by ``and``; every synthetic language
relabels those concept tokens through its own bijection onto a private
surface alphabet and may reverse the word order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
PALETTE = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.15, 0.25, 1.0),
    "yellow": (1.0, 0.95, 0.1),
    "magenta": (0.95, 0.1, 0.95),
    "cyan": (0.1, 0.95, 0.95),
}
GRID = 4
CELLS = tuple(f"cell{i}" for i in range(GRID * GRID))
CONCEPTS = COLORS + SHAPES + ("at",) + CELLS + ("and",)

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
IGNORE = -100


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int


@dataclass(frozen=True)
class ConceptScene:
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ValueError(f"scene must hold 1-3 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        if cells != sorted(cells):
            raise ValueError("objects must be in row-major cell order")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or not 0 <= o.cell < GRID * GRID:
                raise ValueError(f"invalid object {o}")

    @classmethod
    def of(cls, objects: Iterable[tuple[str, str, int]]) -> "ConceptScene":
        objs = sorted((SceneObject(s, c, int(k)) for s, c, k in objects), key=lambda o: o.cell)
        return cls(tuple(objs))

    def key(self) -> tuple:
        return tuple((o.shape, o.color, o.cell) for o in self.objects)

    def concepts(self) -> list[str]:
        out: list[str] = []
        for i, o in enumerate(self.objects):
            if i:
                out.append("and")
            out += [o.color, o.shape, "at", CELLS[o.cell]]
        return out

    @classmethod
    def from_concepts(cls, tokens: Sequence[str]) -> "ConceptScene":
        objs = []
        i = 0
        while i < len(tokens):
            if i and tokens[i] == "and":
                i += 1
            color, shape, at, cell = tokens[i : i + 4]
            if at != "at" or color not in COLORS or shape not in SHAPES or cell not in CELLS:
                raise ValueError(f"malformed concept sentence near {tokens[i:i + 4]}")
            objs.append((shape, color, CELLS.index(cell)))
            i += 4
        return cls.of(objs)


def random_scene(rng: np.random.Generator) -> ConceptScene:
    k = int(rng.integers(1, 4))
    cells = rng.choice(GRID * GRID, size=k, replace=False)
    return ConceptScene.of(
        (SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))], int(c)) for c in cells
    )


def _shape_mask(shape: str, n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n
    v, u = np.meshgrid(c, c, indexing="ij")
    du, dv = np.abs(u - 0.5), np.abs(v - 0.5)
    if shape == "circle":
        return du**2 + dv**2 <= 0.38**2
    if shape == "square":
        return (du <= 0.34) & (dv <= 0.34)
    if shape == "triangle":
        return (v >= 0.12) & (v <= 0.88) & (du <= 0.42 * (v - 0.12) / 0.76)
    if shape == "cross":
        return ((du <= 0.13) & (dv <= 0.42)) | ((dv <= 0.13) & (du <= 0.42))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: ConceptScene, size: int = 32) -> np.ndarray:
    """Rasterise to a (size, size, 3) float32 image on a black background."""
    if size % GRID:
        raise ValueError(f"image size {size} not divisible by grid {GRID}")
    cell = size // GRID
    img = np.zeros((size, size, 3), dtype=np.float32)
    for o in scene.objects:
        r, c = divmod(o.cell, GRID)
        m = _shape_mask(o.shape, cell)
        patch = img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell]
        patch[m] = PALETTE[o.color]
    return img


# ---------------------------------------------------------------- languages


@dataclass(frozen=True)
class SyntheticLanguage:
    """Bijective relabelling of concept tokens plus an optional word-order rule."""

    lang_id: str
    surface: tuple[str, ...]  # surface[i] realises CONCEPTS[i]
    reverse: bool = False

    def __post_init__(self):
        if len(set(self.surface)) != len(CONCEPTS) or len(self.surface) != len(CONCEPTS):
            raise ValueError(f"language {self.lang_id}: surface map is not a bijection")

    @classmethod
    def generate(cls, lang_id: str, rng: np.random.Generator, reverse: bool = False) -> "SyntheticLanguage":
        perm = rng.permutation(len(CONCEPTS))
        return cls(lang_id, tuple(f"{lang_id}_{int(k):02d}" for k in perm), reverse)

    def realise(self, concepts: Sequence[str]) -> list[str]:
        words = [self.surface[CONCEPTS.index(t)] for t in concepts]
        return words[::-1] if self.reverse else words

    def understand(self, words: Sequence[str]) -> list[str]:
        lookup = {s: CONCEPTS[i] for i, s in enumerate(self.surface)}
        words = list(words)[::-1] if self.reverse else list(words)
        try:
            return [lookup[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} is not in language {self.lang_id}") from None


class Vocab:
    """Specials first, then every language's surface tokens in registration order."""

    def __init__(self, languages: Sequence[SyntheticLanguage]):
        tokens = list(SPECIALS)
        for lang in languages:
            tokens += sorted(lang.surface)
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("surface vocabularies of distinct languages overlap")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def caption(scene: ConceptScene, lang: SyntheticLanguage, vocab: Vocab, max_len: int = 16) -> list[int]:
    """[CLS] followed by the scene's caption in ``lang``."""
    ids = [CLS] + vocab.encode(lang.realise(scene.concepts()))
    if len(ids) > max_len:
        raise ValueError(f"caption length {len(ids)} exceeds max {max_len}")
    return ids


def parse_caption(ids: Sequence[int], lang: SyntheticLanguage, vocab: Vocab) -> ConceptScene:
    words = [w for w in vocab.decode(ids) if w not in SPECIALS]
    return ConceptScene.from_concepts(lang.understand(words))


def make_parallel_pair(
    concepts: Sequence[str], lang_a: SyntheticLanguage, lang_b: SyntheticLanguage, vocab: Vocab, max_len: int = 32
) -> tuple[list[int], list[int]]:
    if lang_a.lang_id == lang_b.lang_id:
        raise ValueError("parallel pair needs two distinct languages")
    a = [CLS] + vocab.encode(lang_a.realise(concepts))
    b = [CLS] + vocab.encode(lang_b.realise(concepts))
    if max(len(a), len(b)) > max_len:
        raise ValueError(f"parallel pair length {max(len(a), len(b))} exceeds max {max_len}")
    return a, b


# ---------------------------------------------------------------- masking


def mask_tokens(
    ids: np.ndarray, rate: float, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption of non-special tokens.

    Each maskable slot is selected with probability ``rate``; selected slots
    become [MASK] 80% of the time, a random surface token 10%, and stay as
    they are 10%. Returns (corrupted ids, labels) with labels = original id at
    selected slots and IGNORE elsewhere.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    ids = np.asarray(ids)
    maskable = ids >= len(SPECIALS)
    selected = maskable & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    random_tok = rng.integers(len(SPECIALS), vocab_size, size=ids.shape)
    out = ids.copy()
    out[selected & (action < 0.8)] = MASK
    swap = selected & (action >= 0.8) & (action < 0.9)
    out[swap] = random_tok[swap]
    labels = np.where(selected, ids, IGNORE)
    return out, labels


def mlm_targets(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """(sequence index, position, original id) for every recorded target."""
    rows, cols = np.nonzero(labels != IGNORE)
    return [(int(r), int(c), int(labels[r, c])) for r, c in zip(rows, cols)]


def pad(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# ---------------------------------------------------------------- corpus


@dataclass
class ParallelPair:
    scene_id: int
    lang_a: str
    lang_b: str
    ids_a: list[int]
    ids_b: list[int]


@dataclass
class Split:
    name: str
    scene_ids: list[int]
    scenes: list[ConceptScene]
    captions: dict[str, list[list[int]]]
    parallel: list[ParallelPair] = field(default_factory=list)

    def images(self, size: int = 32) -> np.ndarray:
        return np.stack([render_scene(s, size) for s in self.scenes]) if self.scenes else np.zeros((0, size, size, 3), np.float32)

    def subset(self, n: int) -> "Split":
        return Split(self.name, self.scene_ids[:n], self.scenes[:n],
                     {k: v[:n] for k, v in self.captions.items()}, self.parallel[:n])


@dataclass
class SyntheticCorpus:
    seed: int
    languages: list[SyntheticLanguage]
    pivot: str
    transfer: list[str]
    splits: dict[str, Split]
    caption_max_len: int = 16
    parallel_max_len: int = 32
    image_size: int = 32

    def __post_init__(self):
        self.vocab = Vocab(self.languages)

    def language(self, lang_id: str) -> SyntheticLanguage:
        for lang in self.languages:
            if lang.lang_id == lang_id:
                return lang
        raise KeyError(f"unknown language {lang_id!r}")


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 512
    n_dev: int = 64
    n_test: int = 64
    n_parallel: int = 512  # per transfer language
    pivot: str = "L0"
    transfer: tuple[str, ...] = ("L1", "L2")
    reverse: tuple[str, ...] = ("L2",)
    caption_max_len: int = 16
    parallel_max_len: int = 32
    image_size: int = 32


def build_corpus(seed: int, spec: CorpusSpec = CorpusSpec()) -> SyntheticCorpus:
    """Deterministic corpus: pivot-only multimodal train data, all-language dev/test.

    Transfer languages enter the train split only through parallel pairs with
    the pivot. Scenes never repeat across train/dev/test.
    """
    from .rng import substream

    if spec.pivot in spec.transfer:
        raise ValueError("pivot language listed among transfer languages")
    rng = substream(seed, "corpus")
    lang_ids = [spec.pivot, *spec.transfer]
    languages = [SyntheticLanguage.generate(l, rng, reverse=l in spec.reverse) for l in lang_ids]

    needed = spec.n_train + spec.n_dev + spec.n_test
    seen: dict[tuple, ConceptScene] = {}
    while len(seen) < needed:
        s = random_scene(rng)
        seen.setdefault(s.key(), s)
    pool = list(seen.values())
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}

    corpus = SyntheticCorpus(seed, languages, spec.pivot, list(spec.transfer), {}, spec.caption_max_len,
                             spec.parallel_max_len, spec.image_size)
    vocab = corpus.vocab
    start = 0
    for name, n in sizes.items():
        ids = list(range(start, start + n))
        scenes = pool[start : start + n]
        langs = [spec.pivot] if name == "train" else lang_ids
        caps = {l: [caption(s, corpus.language(l), vocab, spec.caption_max_len) for s in scenes] for l in langs}
        corpus.splits[name] = Split(name, ids, scenes, caps)
        start += n

    heldout = {s.key() for name in ("dev", "test") for s in corpus.splits[name].scenes}
    pivot = corpus.language(spec.pivot)
    parallel: list[ParallelPair] = []
    next_id = needed
    used: set[tuple] = set()
    for lang_id in spec.transfer:
        other = corpus.language(lang_id)
        count = 0
        while count < spec.n_parallel:
            s = random_scene(rng)
            if s.key() in heldout or s.key() in used:
                continue
            used.add(s.key())
            a, b = make_parallel_pair(s.concepts(), pivot, other, vocab, spec.parallel_max_len)
            parallel.append(ParallelPair(next_id, spec.pivot, lang_id, a, b))
            next_id += 1
            count += 1
    corpus.splits["train"].parallel = parallel
    check_splits(corpus)
    return corpus


def check_splits(corpus: SyntheticCorpus) -> None:
    names = list(corpus.splits)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            sa, sb = corpus.splits[a], corpus.splits[b]
            if set(sa.scene_ids) & set(sb.scene_ids) or {s.key() for s in sa.scenes} & {s.key() for s in sb.scenes}:
                raise ValueError(f"splits {a!r} and {b!r} overlap")


# ---------------------------------------------------------------- batches


@dataclass
class CrossViewBatch:
    """One homogeneous batch.

    ``text_ids`` is always the unmasked query-side text (caption, or side A of
    a parallel pair); ``other_ids``/``images`` hold the other view. The MLM
    copy ``mlm_ids`` is the masked side â. For cross-lingual rows ``mlm_side``
    is 0 when â is side A (conditioned on B) and 1 when â is side B
    (conditioned on A).
    """

    view_kind: str
    text_ids: np.ndarray
    mlm_ids: np.ndarray
    mlm_labels: np.ndarray
    images: np.ndarray | None = None
    other_ids: np.ndarray | None = None
    mlm_side: np.ndarray | None = None
    tlm_ids: np.ndarray | None = None
    tlm_labels: np.ndarray | None = None
    example_ids: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.text_ids.shape[0])

    @property
    def text_mask(self) -> np.ndarray:
        return self.text_ids != PAD

    @property
    def other_mask(self) -> np.ndarray | None:
        return None if self.other_ids is None else self.other_ids != PAD

    def targets(self) -> list[tuple[int, int, int]]:
        return mlm_targets(self.mlm_labels)


def cross_modal_batch(split: Split, rows: Sequence[int], lang: str, rng: np.random.Generator,
                      vocab_size: int, mask_rate: float = 0.15, image_size: int = 32) -> CrossViewBatch:
    caps = [split.captions[lang][r] for r in rows]
    ids = pad(caps)
    masked, labels = mask_tokens(ids, mask_rate, rng, vocab_size)
    images = np.stack([render_scene(split.scenes[r], image_size) for r in rows])
    return CrossViewBatch("cross_modal", ids, masked, labels, images=images,
                          example_ids=[split.scene_ids[r] for r in rows])


def cross_lingual_batch(pairs: Sequence[ParallelPair], rng: np.random.Generator, vocab_size: int,
                        mask_rate: float = 0.15) -> CrossViewBatch:
    a = pad([p.ids_a for p in pairs])
    b = pad([p.ids_b for p in pairs])
    length = max(a.shape[1], b.shape[1])
    a, b = pad(list(map(list, a)), length), pad(list(map(list, b)), length)
    side = rng.integers(0, 2, size=len(pairs))
    hat = np.where(side[:, None] == 0, a, b)
    masked, labels = mask_tokens(hat, mask_rate, rng, vocab_size)
    # TLM view: [CLS] a [SEP] b, padding squeezed out
    concat = []
    for p in pairs:
        concat.append(list(p.ids_a) + [SEP] + list(p.ids_b[1:]))
    tlm = pad(concat)
    tlm_masked, tlm_labels = mask_tokens(tlm, mask_rate, rng, vocab_size)
    return CrossViewBatch("cross_lingual", a, masked, labels, other_ids=b, mlm_side=side,
                          tlm_ids=tlm_masked, tlm_labels=tlm_labels,
                          example_ids=[p.scene_id for p in pairs])


def make_batch(corpus: SyntheticCorpus, batch_size: int, mix_ratio: float, rng: np.random.Generator,
               split: str = "train", mask_rate: float = 0.15,
               mask_rng: np.random.Generator | None = None) -> CrossViewBatch:
    """Draw one batch; its view kind is cross-lingual with probability ``mix_ratio``.

    ``rng`` picks the view kind and examples; ``mask_rng`` (default: ``rng``)
    drives masking and the choice of masked side.
    """
    mask_rng = mask_rng or rng
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError(f"mix_ratio must lie in [0, 1], got {mix_ratio}")
    data = corpus.splits[split]
    lingual = rng.random() < mix_ratio
    v = len(corpus.vocab)
    if lingual:
        if not data.parallel:
            raise ValueError(f"split {split!r} holds no parallel pairs")
        rows = rng.choice(len(data.parallel), size=min(batch_size, len(data.parallel)), replace=False)
        return cross_lingual_batch([data.parallel[r] for r in rows], mask_rng, v, mask_rate)
    if not data.scenes:
        raise ValueError(f"split {split!r} holds no image-caption pairs")
    rows = rng.choice(len(data.scenes), size=min(batch_size, len(data.scenes)), replace=False)
    return cross_modal_batch(data, rows, corpus.pivot, mask_rng, v, mask_rate, corpus.image_size)


# ---------------------------------------------------------------- serialisation


def _split_doc(split: Split, inline_images: bool, image_size: int) -> dict:
    doc = {
        "split": split.name,
        "scenes": [
            {"id": sid, "objects": [[o.shape, o.color, o.cell] for o in s.objects]}
            for sid, s in zip(split.scene_ids, split.scenes)
        ],
        "captions": split.captions,
        "parallel": [vars(p) for p in split.parallel],
    }
    if inline_images:
        doc["images"] = [render_scene(s, image_size).tobytes().hex() for s in split.scenes]
    return doc


def save_corpus(corpus: SyntheticCorpus, out_dir: str | Path, inline_images: bool = False) -> dict:
    """Write one JSON document per split plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, split in corpus.splits.items():
        text = json.dumps(_split_doc(split, inline_images, corpus.image_size), sort_keys=True)
        (out / f"{name}.json").write_text(text)
        files[name] = f"{name}.json"
    manifest = {
        "seed": corpus.seed,
        "pivot": corpus.pivot,
        "transfer": corpus.transfer,
        "languages": [{"id": l.lang_id, "surface": list(l.surface), "reverse": l.reverse} for l in corpus.languages],
        "caption_max_len": corpus.caption_max_len,
        "parallel_max_len": corpus.parallel_max_len,
        "image_size": corpus.image_size,
        "vocab_size": len(corpus.vocab),
        "splits": files,
        "inline_images": inline_images,
        "digest": _digest(out, files),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _digest(d: Path, files: dict[str, str]) -> str:
    digest = hashlib.sha256()
    for name in sorted(files):
        digest.update(name.encode() + b"\0" + (d / files[name]).read_bytes())
    return digest.hexdigest()


def corpus_digest(corpus_dir: str | Path) -> str:
    """Recompute the content digest of the split files named by the manifest."""
    d = Path(corpus_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    return _digest(d, manifest["splits"])


def load_corpus(corpus_dir: str | Path) -> SyntheticCorpus:
    d = Path(corpus_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    languages = [SyntheticLanguage(l["id"], tuple(l["surface"]), l["reverse"]) for l in manifest["languages"]]
    splits = {}
    for name, fname in manifest["splits"].items():
        doc = json.loads((d / fname).read_text())
        scenes = [ConceptScene.of(tuple(o) for o in s["objects"]) for s in doc["scenes"]]
        splits[name] = Split(
            name,
            [s["id"] for s in doc["scenes"]],
            scenes,
            {k: [list(c) for c in v] for k, v in doc["captions"].items()},
            [ParallelPair(**p) for p in doc["parallel"]],
        )
    return SyntheticCorpus(manifest["seed"], languages, manifest["pivot"], list(manifest["transfer"]), splits,
                           manifest["caption_max_len"], manifest["parallel_max_len"], manifest["image_size"])
