import numpy as np
import pytest
from dataclasses import replace

from cclm import autograd as ag
from cclm.autograd import Tensor
from cclm.data import pad
from cclm.model import CclmConfig, CclmModel, count_parameters
from conftest import TINY


@pytest.fixture(scope="module")
def model():
    return CclmModel(TINY, seed=0)


def _images(n, seed=0):
    return np.random.default_rng(seed).random((n, 32, 32, 3)).astype(np.float32)


def _ids(n, length, seed=0, vocab=89):
    ids = np.random.default_rng(seed).integers(5, vocab, size=(n, length))
    ids[:, 0] = 1
    return ids


# ---------------------------------------------------------------- encoders


def test_image_sequence_length(model):
    f = model.encode_image(_images(2))
    assert f.states.shape == (2, 17, 16)
    assert f.tokens.shape == (2, 16, 16)
    assert f.pooled.shape == (2, 16)


def test_mean_pool_of_constant_outputs():
    m = CclmModel(replace(TINY, pool_mode="mean"), seed=0)
    m.params["img.ln_f.g"].data[:] = 0.0
    m.params["img.ln_f.b"].data[:] = 0.25
    np.testing.assert_allclose(m.encode_image(_images(3)).pooled.data, 0.25, rtol=1e-6)


def test_image_shape_is_checked(model):
    with pytest.raises(ValueError, match="expected images"):
        model.encode_image(np.zeros((1, 30, 30, 3)))


def test_cls_only_text(model):
    assert model.encode_text(np.array([[1]])).states.shape == (1, 1, 16)


def test_padding_leaves_real_positions_unchanged(model):
    ids = _ids(1, 6)
    short = model.encode_text(ids).states.data
    long = model.encode_text(pad([list(ids[0])], 11)).states.data
    np.testing.assert_allclose(long[:, :6], short, atol=1e-5)


def test_encoders_are_deterministic(model):
    ids = _ids(2, 7)
    np.testing.assert_array_equal(model.encode_text(ids).states.data, model.encode_text(ids).states.data)
    img = _images(2)
    np.testing.assert_array_equal(model.encode_image(img).pooled.data, model.encode_image(img).pooled.data)


def test_text_length_limit(model):
    with pytest.raises(ValueError, match="max_text_len"):
        model.encode_text(np.ones((1, 33), int))


# ---------------------------------------------------------------- fusion and sharing


def _fuse_inputs(model):
    return model.encode_text(_ids(2, 6)), model.encode_text(_ids(2, 8, seed=1))


def test_shared_fusion_is_view_agnostic(model):
    t, o = _fuse_inputs(model)
    np.testing.assert_array_equal(model.fuse(t, o, "cross_modal").data, model.fuse(t, o, "cross_lingual").data)


@pytest.mark.parametrize("flag", ["share_cross_attn", "share_ffn"])
def test_unshared_fusion_differs_by_view(flag):
    m = CclmModel(replace(TINY, **{flag: False}), seed=0)
    # move weights off their small initialisation so the difference is visible
    rng = np.random.default_rng(0)
    for t in m.params.values():
        t.data += rng.normal(0, 0.2, size=t.shape).astype(np.float32)
    t, o = _fuse_inputs(m)
    diff = np.abs(m.fuse(t, o, "cross_modal").data - m.fuse(t, o, "cross_lingual").data).max()
    assert diff > 1e-3


def test_fuse_rejects_unknown_view(model):
    t, o = _fuse_inputs(model)
    with pytest.raises(ValueError, match="view_kind"):
        model.fuse(t, o, "audio")


def _fusion_loss(m, texts, other, kind):
    return ag.sum(m.fuse(m.encode_text(texts), other, kind))


def test_shared_gradients_add_across_view_kinds():
    with ag.precision(np.float64):
        m = CclmModel(TINY, seed=0).astype(np.float64)
        imgs = m.encode_image(_images(2))
        other_txt = m.encode_text(_ids(2, 5, seed=3))
        t1, t2 = _ids(2, 6, seed=1), _ids(2, 7, seed=2)
        mixed = ag.add(_fusion_loss(m, t1, imgs, "cross_modal"), _fusion_loss(m, t2, other_txt, "cross_lingual"))
        g_mixed = ag.backward(mixed)
        g1 = ag.backward(_fusion_loss(m, t1, imgs, "cross_modal"))
        g2 = ag.backward(_fusion_loss(m, t2, other_txt, "cross_lingual"))
    shared = [k for k in m.params if k.startswith("fusion.layer0.cross.")]
    assert shared
    for k in shared:
        p = m.params[k]
        np.testing.assert_allclose(ag.grad_of(g_mixed, p), ag.grad_of(g1, p) + ag.grad_of(g2, p), atol=1e-5)


# ---------------------------------------------------------------- heads


def test_projection_is_unit_norm(model):
    z = model.project_v(Tensor(np.random.default_rng(0).normal(size=(4, 16)))).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, rtol=1e-6)


def test_normalize_scale_invariance():
    y = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(ag.l2_normalize(Tensor(5 * y)).data, ag.l2_normalize(Tensor(y)).data, rtol=1e-6)


def test_identity_projection():
    m = CclmModel(replace(TINY, proj_dim=16), seed=0)
    m.params["head.g_w.w"].data[:] = np.eye(16)
    x = np.random.default_rng(0).normal(size=(2, 16))
    np.testing.assert_allclose(m.project_w(Tensor(x)).data, x / np.linalg.norm(x, axis=1, keepdims=True), rtol=1e-5)


def test_match_score():
    m = CclmModel(TINY, seed=0)
    x = np.random.default_rng(0).normal(size=(3, 16))
    m.params["head.v_true"].data[:] = 0
    assert not m.match_score(Tensor(x)).data.any()
    m.params["head.v_true"].data[:] = np.eye(16)[5]
    np.testing.assert_allclose(m.match_score(Tensor(x)).data, x[:, 5], rtol=1e-6)
    v = np.random.default_rng(1).normal(size=16)
    m.params["head.v_true"].data[:] = v
    oracle = [sum(float(v[i]) * float(row[i]) for i in range(16)) for row in x.astype(np.float32)]
    np.testing.assert_allclose(m.match_score(Tensor(x)).data, oracle, rtol=1e-5)


def test_mlm_logits():
    m = CclmModel(replace(TINY, vocab_size=16), seed=0)
    x = np.random.default_rng(0).normal(size=(2, 16)).astype(np.float32)
    assert not m.mlm_logits(Tensor(np.zeros((2, 16)))).data.any()
    m.psi.data[:] = np.eye(16)
    np.testing.assert_allclose(m.mlm_logits(Tensor(x)).data, x)
    table = np.random.default_rng(1).normal(size=(16, 16)).astype(np.float32)
    m.psi.data[:] = table
    oracle = [[float(np.dot(table[w], row)) for w in range(16)] for row in x]
    np.testing.assert_allclose(m.mlm_logits(Tensor(x)).data, oracle, rtol=1e-5, atol=1e-6)


def test_mlm_table_is_tied_to_token_embeddings(model):
    assert model.psi is model.params["txt.embed.tok"]


def test_temperature_clamp():
    m = CclmModel(TINY, seed=0)
    assert m.temperature() == pytest.approx(0.07, rel=1e-6)
    m.params["head.log_tau"].data[:] = -20.0
    m.clamp_temperature()
    assert m.temperature() == pytest.approx(0.001, rel=1e-5)


# ---------------------------------------------------------------- parameter counting


def test_unshared_ffn_adds_predicted_parameters():
    c = CclmConfig()
    base = count_parameters(CclmModel(c))["total"]
    extra = count_parameters(CclmModel(replace(c, share_ffn=False)))["total"] - base
    assert extra == c.fusion_layers * (2 * c.d * c.ffn_dim + c.ffn_dim + c.d)


def test_unshared_cross_attention_adds_predicted_parameters():
    c = CclmConfig()
    base = count_parameters(CclmModel(c))["total"]
    extra = count_parameters(CclmModel(replace(c, share_cross_attn=False)))["total"] - base
    assert extra == c.fusion_layers * (4 * c.d * c.d + 4 * c.d)


def test_count_parameters_totals(model):
    assert count_parameters({})["total"] == 0
    counts = count_parameters(model)
    assert counts["total"] == sum(int(np.prod(t.shape)) for t in model.params.values())
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total")


def test_desk_model_size():
    assert count_parameters(CclmModel(CclmConfig()))["total"] == 327169


# ---------------------------------------------------------------- config and state


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        CclmConfig(d=10, num_heads=4, proj_dim=8)
    with pytest.raises(ValueError, match="patch_size"):
        CclmConfig(image_size=30)
    with pytest.raises(KeyError, match="unknown"):
        CclmConfig.from_dict({"depth": 3})
    assert CclmConfig.from_dict(TINY.to_dict()) == TINY


def test_load_state_dict_names_mismatch(model):
    other = CclmModel(replace(TINY, d=32, num_heads=2), seed=0)
    with pytest.raises(ValueError, match="img.embed"):
        model.load_state_dict(other.state_dict())


def test_resize_image_keeps_cls_row_and_corners(model):
    big = model.resize_image(48)
    pos = model.params["img.embed.pos"].data
    new = big.params["img.embed.pos"].data
    assert new.shape == (37, 16)
    np.testing.assert_array_equal(new[0], pos[0])
    np.testing.assert_allclose(new[1], pos[1], rtol=1e-6)
    np.testing.assert_allclose(new[-1], pos[-1], rtol=1e-6)
    assert big.encode_image(np.zeros((1, 48, 48, 3))).pooled.shape == (1, 16)
