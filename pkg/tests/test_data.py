import json

import numpy as np
import pytest

from cclm import data as D
from cclm.data import ConceptScene, CorpusSpec


@pytest.fixture(scope="module")
def langs():
    rng = np.random.default_rng(0)
    l0 = D.SyntheticLanguage.generate("L0", rng)
    l1 = D.SyntheticLanguage.generate("L1", rng)
    l2 = D.SyntheticLanguage.generate("L2", rng, reverse=True)
    return l0, l1, l2, D.Vocab([l0, l1, l2])


SCENE = ConceptScene.of([("circle", "red", 0), ("cross", "cyan", 9)])


# ---------------------------------------------------------------- scenes and rendering


def test_scene_validation():
    with pytest.raises(ValueError, match="1-3"):
        ConceptScene(())
    with pytest.raises(ValueError, match="share a cell"):
        ConceptScene.of([("circle", "red", 1), ("square", "red", 1)])


def test_random_scenes_are_never_empty():
    rng = np.random.default_rng(0)
    assert all(1 <= len(D.random_scene(rng).objects) <= 3 for _ in range(2000))


def test_render_is_deterministic_and_color_sensitive():
    a = D.render_scene(SCENE)
    assert a.shape == (32, 32, 3) and a.dtype == np.float32
    assert a.tobytes() == D.render_scene(SCENE).tobytes()
    other = ConceptScene.of([("circle", "red", 0), ("cross", "blue", 9)])
    assert not np.array_equal(a, D.render_scene(other))


def test_every_shape_is_distinguishable():
    imgs = [D.render_scene(ConceptScene.of([(s, "red", 5)])) for s in D.SHAPES]
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            assert not np.array_equal(imgs[i], imgs[j])


# ---------------------------------------------------------------- languages


def test_caption_round_trip(langs):
    l0, l1, l2, vocab = langs
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = D.random_scene(rng)
        for lang in (l0, l1, l2):
            assert D.parse_caption(D.caption(s, lang, vocab), lang, vocab) == s


def test_languages_use_disjoint_tokens(langs):
    l0, l1, l2, vocab = langs
    assert not set(D.caption(SCENE, l1, vocab)[1:]) & set(D.caption(SCENE, l2, vocab)[1:])
    assert len(vocab) == 5 + 3 * len(D.CONCEPTS) == 89


def test_caption_length_arithmetic(langs):
    l0, _, _, vocab = langs
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = D.random_scene(rng)
        k = len(s.objects)
        assert len(D.caption(s, l0, vocab)) == 1 + 4 * k + (k - 1)


def test_parallel_pairs(langs):
    l0, l1, l2, vocab = langs
    concepts = SCENE.concepts()
    a, b = D.make_parallel_pair(concepts, l0, l1, vocab)
    assert len(a) == len(b)
    back = vocab.encode(l0.realise(l1.understand(vocab.decode(b[1:]))))
    assert [D.CLS] + back == a
    a2, c = D.make_parallel_pair(concepts, l1, l2, vocab)
    # L2 reverses word order: its ids are the reversed, relabelled L1 ids
    relabel = {vocab.index[l1.surface[i]]: vocab.index[l2.surface[i]] for i in range(len(D.CONCEPTS))}
    assert c[1:] == [relabel[t] for t in reversed(a2[1:])]
    with pytest.raises(ValueError, match="distinct"):
        D.make_parallel_pair(concepts, l0, l0, vocab)


def test_unknown_word_is_reported(langs):
    l0, l1, _, _ = langs
    with pytest.raises(ValueError, match="not in language"):
        l0.understand([l1.surface[0]])


# ---------------------------------------------------------------- masking


def _maskable(n=64, length=16, seed=0):
    ids = np.random.default_rng(seed).integers(5, 89, size=(n, length))
    ids[:, 0] = D.CLS
    ids[:, -3:] = D.PAD
    return ids


def test_tiny_rate_masks_nothing():
    rng = np.random.default_rng(0)
    ids = _maskable(1, 16)
    empty = sum(not (D.mask_tokens(ids, 1e-9, rng, 89)[1] != D.IGNORE).any() for _ in range(10_000))
    assert empty / 10_000 >= 0.999


def test_mask_fraction_is_near_rate():
    ids = _maskable(800, 128)
    ids[:, 0] = 40
    ids[:, -3:] = 41
    assert (ids >= 5).sum() == 800 * 128  # 102400 maskable slots
    _, labels = D.mask_tokens(ids, 0.15, np.random.default_rng(3), 89)
    assert abs((labels != D.IGNORE).mean() - 0.15) < 0.01


def test_specials_never_masked():
    rng = np.random.default_rng(1)
    ids = _maskable(4, 16)
    for _ in range(10_000 // 4):
        out, labels = D.mask_tokens(ids, 0.5, rng, 89)
        special = ids < 5
        assert (labels[special] == D.IGNORE).all() and (out[special] == ids[special]).all()


def test_mask_action_split():
    ids = _maskable(500, 64)
    out, labels = D.mask_tokens(ids, 0.5, np.random.default_rng(4), 89)
    sel = labels != D.IGNORE
    frac_mask = (out[sel] == D.MASK).mean()
    frac_kept = (out[sel] == ids[sel]).mean()
    assert abs(frac_mask - 0.8) < 0.02
    # kept slots include random replacements that happen to draw the same id
    assert abs(frac_kept - (0.1 + 0.1 / 84)) < 0.02
    assert D.mlm_targets(labels)[0][2] == ids[sel][0]


def test_mask_rate_is_validated():
    with pytest.raises(ValueError, match="mask rate"):
        D.mask_tokens(np.ones((1, 3), int), 0.0, np.random.default_rng(0), 89)


# ---------------------------------------------------------------- corpus and batches


def test_split_constraints(small_corpus):
    train = small_corpus.splits["train"]
    assert set(train.captions) == {"L0"}
    for name in ("dev", "test"):
        assert set(small_corpus.splits[name].captions) == {"L0", "L1", "L2"}
    test_ids = set(small_corpus.splits["test"].scene_ids)
    assert not test_ids & set(train.scene_ids)
    heldout = {s.key() for n in ("dev", "test") for s in small_corpus.splits[n].scenes}
    vocab = small_corpus.vocab
    for p in train.parallel:
        assert p.lang_a == "L0"
        scene = D.parse_caption(p.ids_a, small_corpus.language("L0"), vocab)
        assert scene.key() not in heldout
    assert {p.lang_b for p in train.parallel} == {"L1", "L2"}


def test_corpus_is_reproducible(tmp_path):
    spec = CorpusSpec(n_train=16, n_dev=4, n_test=4, n_parallel=8)
    m1 = D.save_corpus(D.build_corpus(7, spec), tmp_path / "a")
    m2 = D.save_corpus(D.build_corpus(7, spec), tmp_path / "b")
    assert m1["digest"] == m2["digest"]
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert D.save_corpus(D.build_corpus(8, spec), tmp_path / "c")["digest"] != m1["digest"]


def test_corpus_save_load_round_trip(tmp_path, small_corpus):
    D.save_corpus(small_corpus, tmp_path)
    back = D.load_corpus(tmp_path)
    assert back.vocab.tokens == small_corpus.vocab.tokens
    for name, split in small_corpus.splits.items():
        other = back.splits[name]
        assert other.scene_ids == split.scene_ids and other.captions == split.captions
        assert [s.key() for s in other.scenes] == [s.key() for s in split.scenes]
        assert [(p.ids_a, p.ids_b) for p in other.parallel] == [(p.ids_a, p.ids_b) for p in split.parallel]
    assert D.corpus_digest(tmp_path) == json.loads((tmp_path / "manifest.json").read_text())["digest"]


@pytest.mark.parametrize("mix, kind", [(0.0, "cross_modal"), (1.0, "cross_lingual")])
def test_mix_ratio_extremes(small_corpus, mix, kind):
    rng = np.random.default_rng(0)
    assert all(D.make_batch(small_corpus, 4, mix, rng).view_kind == kind for _ in range(50))


def test_batch_streams_are_reproducible(small_corpus):
    def stream():
        rng = np.random.default_rng(11)
        return [D.make_batch(small_corpus, 4, 0.5, rng) for _ in range(10)]

    for a, b in zip(stream(), stream()):
        assert a.view_kind == b.view_kind
        np.testing.assert_array_equal(a.mlm_ids, b.mlm_ids)
        np.testing.assert_array_equal(a.mlm_labels, b.mlm_labels)


def test_cross_lingual_batch_layout(small_corpus):
    b = D.make_batch(small_corpus, 8, 1.0, np.random.default_rng(2), mask_rate=0.5)
    assert b.text_ids.shape == b.other_ids.shape == b.mlm_ids.shape
    hat = np.where(b.mlm_side[:, None] == 0, b.text_ids, b.other_ids)
    sel = b.mlm_labels != D.IGNORE
    np.testing.assert_array_equal(b.mlm_labels[sel], hat[sel])
    assert b.tlm_ids.shape[1] <= small_corpus.parallel_max_len


def test_mix_ratio_is_validated(small_corpus):
    with pytest.raises(ValueError, match="mix_ratio"):
        D.make_batch(small_corpus, 4, 1.5, np.random.default_rng(0))
