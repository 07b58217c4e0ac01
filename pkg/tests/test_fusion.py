import numpy as np
import pytest

import oracles
from meter_desk import numcore as nc
from meter_desk import settings
from meter_desk.config import FusionConfig
from meter_desk.exceptions import FusionError
from meter_desk.fusion import (
    CoAttentionFusion, Decoder, FusionOutput, MergedFusion, build_fusion, class_token_ids, decode_encdec,
    fuse_coattention, fuse_merged, pool_cls,
)


def fusion_config(kind="coattn", layers=1, hidden=4, **kw):
    return FusionConfig(kind=kind, layers=layers, hidden=hidden, heads=2, ffn_mult=2.0, **kw)


def features(b, t, v, hidden=4, seed=0):
    rng = np.random.default_rng(seed)
    return nc.Tensor(rng.normal(size=(b, t, hidden))), nc.Tensor(rng.normal(size=(b, v, hidden)))


# --- Merged attention ---

def test_merged_split_bookkeeping():
    stack = MergedFusion(fusion_config("merged"), np.random.default_rng(0))
    text, vision = features(1, 2, 3)
    out = fuse_merged(text, vision, np.ones((1, 2)), stack, trace=True)
    assert out.text_states.shape == (1, 2, 4)
    assert out.vision_states.shape == (1, 3, 4)
    assert out.attention_record[0]["full"].shape == (1, 2, 5, 5)
    assert out.attention_record[0]["text_to_vision"].shape == (1, 2, 2, 3)


def test_merged_is_symmetric_without_modality_embeddings():
    stack = MergedFusion(fusion_config("merged"), np.random.default_rng(1))
    stack.modality.data[:] = 0.0
    x = nc.Tensor(np.random.default_rng(2).normal(size=(1, 3, 4)))
    out = fuse_merged(x, x, np.ones((1, 3)), stack)
    np.testing.assert_allclose(out.text_states.data, out.vision_states.data, atol=1e-12)


def test_merged_layer_matches_hand_computation():
    stack = MergedFusion(fusion_config("merged"), np.random.default_rng(3))
    text, vision = features(1, 3, 2, seed=4)
    mask = np.array([[1, 1, 0]])
    out = fuse_merged(text, vision, mask, stack)
    x = np.concatenate([text.data + stack.modality.data[0], vision.data + stack.modality.data[1]], axis=1)
    x = oracles.transformer_layer(x, stack.layers[0], np.array([[1, 1, 0, 1, 1]]))
    x = oracles.layer_norm(x, stack.ln_final)
    np.testing.assert_allclose(out.text_states.data, x[:, :3], atol=1e-12)
    np.testing.assert_allclose(out.vision_states.data, x[:, 3:], atol=1e-12)


def test_hidden_mismatch_is_rejected():
    stack = build_fusion(fusion_config("merged"), np.random.default_rng(0))
    text, _ = features(1, 2, 3)
    _, vision = features(1, 2, 3, hidden=6)
    with pytest.raises(FusionError):
        stack(text, vision, np.ones((1, 2)))
    with pytest.raises(FusionError):
        build_fusion(fusion_config("stacked"), np.random.default_rng(0))


# --- Co-attention ---

def test_coattention_layer_matches_hand_computation():
    stack = CoAttentionFusion(fusion_config(), np.random.default_rng(5))
    text, vision = features(2, 4, 3, seed=6)
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]])
    out = fuse_coattention(text, vision, mask, stack)
    t, v = oracles.coattention_layer(text.data, vision.data, stack.layers[0], mask)
    np.testing.assert_allclose(out.text_states.data, oracles.layer_norm(t, stack.ln_text), atol=1e-12)
    np.testing.assert_allclose(out.vision_states.data, oracles.layer_norm(v, stack.ln_vision), atol=1e-12)


def test_zero_cross_attention_reduces_to_unimodal_towers():
    stack = CoAttentionFusion(fusion_config(layers=2, cross_zero_init=True), np.random.default_rng(7))
    text, vision = features(1, 3, 4, seed=8)
    mask = np.ones((1, 3))
    out = stack(text, vision, mask)
    _, other_vision = features(1, 3, 4, seed=9)
    swapped = stack(text, other_vision, mask)
    # with zero cross-attention outputs the text tower never sees the image
    np.testing.assert_array_equal(out.text_states.data, swapped.text_states.data)
    t = text.data
    for layer in stack.layers:
        normed = oracles.layer_norm(t, layer.text.ln_self)
        t = t + oracles.attention(normed, normed, layer.text.self_attn, mask)[0]
        t = t + oracles.ffn(oracles.layer_norm(t, layer.text.ln_ffn), layer.text.ffn)
    np.testing.assert_allclose(out.text_states.data, oracles.layer_norm(t, stack.ln_text), atol=1e-12)


def test_single_vision_token_gets_all_attention():
    stack = CoAttentionFusion(fusion_config(), np.random.default_rng(10))
    text, vision = features(2, 3, 1)
    out = stack(text, vision, np.ones((2, 3)), trace=True)
    np.testing.assert_array_equal(out.attention_record[0]["text_to_vision"], 1.0)


@pytest.mark.parametrize("kind", ["merged", "coattn"])
def test_attention_rows_sum_to_one(kind):
    stack = build_fusion(fusion_config(kind, layers=2), np.random.default_rng(11))
    text, vision = features(2, 4, 5)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]])
    out = stack(text, vision, mask, trace=True)
    assert len(out.attention_record) == 2
    for entry in out.attention_record:
        weights = entry["full"] if kind == "merged" else entry["vision_to_text"]
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


def test_towers_share_no_weights():
    stack = CoAttentionFusion(fusion_config(), np.random.default_rng(12))
    params = stack.parameters()
    assert len({id(p) for p in params}) == len(params)
    text_names = {n for n, _ in stack.layers[0].text.named_parameters()}
    vision_names = {n for n, _ in stack.layers[0].vision.named_parameters()}
    assert not text_names & vision_names
    assert all(p.group == "top" for p in params)


@pytest.mark.parametrize("kind", ["merged", "coattn"])
def test_fusion_gradient_check(kind):
    stack = build_fusion(fusion_config(kind, hidden=8), np.random.default_rng(13))
    rng = np.random.default_rng(14)
    text = nc.Parameter(rng.normal(size=(1, 3, 8)), "text_feats", "bottom")
    vision = nc.Parameter(rng.normal(size=(1, 2, 8)), "vision_feats", "bottom")
    mask = np.array([[1, 1, 0]])
    projection = nc.Tensor(rng.normal(size=(1, 5, 8)))

    def f():
        out = stack(text, vision, mask)
        joined = nc.concat([out.text_states, out.vision_states], axis=1)
        return nc.sum_(nc.mul(joined, projection))

    report = nc.check_gradients(f, stack.parameters() + [text, vision], max_entries=6)
    assert report.passed, report.failures


# --- Pooling ---

def test_pool_single_cls_token():
    text, vision = features(2, 1, 3)
    assert pool_cls(FusionOutput(text, vision)).data.tobytes() == text.data[:, 0].tobytes()


def test_pool_ignores_padding_content():
    stack = CoAttentionFusion(fusion_config(), np.random.default_rng(15))
    text, vision = features(1, 4, 3)
    mask = np.array([[1, 1, 0, 0]])
    changed = text.data.copy()
    changed[0, 2], changed[0, 3] = text.data[0, 3] + 1.0, text.data[0, 2] - 2.0
    a = pool_cls(stack(text, vision, mask)).data
    b = pool_cls(stack(nc.Tensor(changed), vision, mask)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pool_depends_on_the_image():
    stack = CoAttentionFusion(fusion_config(), np.random.default_rng(16))
    text, vision = features(1, 3, 4, seed=1)
    _, other = features(1, 3, 4, seed=2)
    a = pool_cls(stack(text, vision, np.ones((1, 3)))).data
    b = pool_cls(stack(text, other, np.ones((1, 3)))).data
    assert np.abs(a - b).max() > 1e-6


# --- Decoder ---

def decoder(cross_order="text_first", seed=17):
    config = fusion_config(arch="encoder_decoder", dec_layers=1, cross_order=cross_order)
    return Decoder(config, vocab_size=40, max_positions=8, rng=np.random.default_rng(seed))


def test_class_token_path_has_length_one():
    text, vision = features(2, 3, 4)
    states = decode_encdec(FusionOutput(text, vision), np.ones((2, 3)), class_token_ids(2), decoder())
    assert states.shape == (2, 1, 4)
    assert (class_token_ids(2) == settings.DECODER_START_ID).all()


def test_empty_decoder_input_is_rejected():
    text, vision = features(1, 3, 4)
    with pytest.raises(FusionError):
        decode_encdec(FusionOutput(text, vision), np.ones((1, 3)), np.zeros((1, 0), dtype=np.int64), decoder())


def test_decoder_self_attention_is_causal():
    text, vision = features(1, 3, 4)
    record = []
    decode_encdec(FusionOutput(text, vision), np.ones((1, 3)), np.array([[1, 36, 37, 38]]), decoder(), record=record)
    weights = record[0]["self"]
    upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
    assert (weights[..., upper] == 0.0).all()


def test_decoder_gradients_do_not_flow_backwards_in_time():
    dec = decoder()
    text, vision = features(1, 3, 4)
    ids = np.array([[1, 36, 37, 38]])
    states = decode_encdec(FusionOutput(text, vision), np.ones((1, 3)), ids, dec)
    # a plain sum of a layer-norm output has zero gradient, so weight it
    weights = nc.Tensor(np.random.default_rng(22).standard_normal((1, 4)))
    nc.backward(nc.sum_(nc.mul(states[:, 1], weights)))
    grad = dec.pos.grad
    assert (grad[2:] == 0.0).all()
    assert np.abs(grad[:2]).max() > 0.0


def test_decoder_layer_matches_hand_computation():
    dec = decoder(seed=18)
    text, vision = features(1, 3, 2, seed=19)
    text_mask = np.array([[1, 1, 0]])
    ids = np.array([[1, 36, 37]])
    out = decode_encdec(FusionOutput(text, vision), text_mask, ids, dec).data
    layer = dec.layers[0]
    x = dec.token_embed.table.data[ids] + dec.pos.data[:3]
    normed = oracles.layer_norm(x, layer.ln_self)
    x = x + oracles.attention(normed, normed, layer.self_attn, causal=True)[0]
    x = x + oracles.attention(oracles.layer_norm(x, layer.ln_text), text.data, layer.text_attn, text_mask)[0]
    x = x + oracles.attention(oracles.layer_norm(x, layer.ln_vision), vision.data, layer.vision_attn)[0]
    x = x + oracles.ffn(oracles.layer_norm(x, layer.ln_ffn), layer.ffn)
    np.testing.assert_allclose(out, oracles.layer_norm(x, dec.ln_final), atol=1e-12)


def test_cross_order_changes_the_result():
    text, vision = features(1, 3, 2, seed=20)
    ids = np.array([[1, 36]])
    a = decode_encdec(FusionOutput(text, vision), np.ones((1, 3)), ids, decoder("text_first", 21)).data
    b = decode_encdec(FusionOutput(text, vision), np.ones((1, 3)), ids, decoder("vision_first", 21)).data
    assert np.abs(a - b).max() > 1e-9
