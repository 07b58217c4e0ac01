import logging

import numpy as np
import pytest

from meter_desk import numcore as nc
from meter_desk.config import build_run_config
from meter_desk.datagen import encode_text, extract_patches, generate_corpus
from meter_desk.exceptions import CheckpointFormatError, CheckpointShapeError
from meter_desk.model import MeterModel, count_parameters, parameter_parity


def batch(corpus, vocab, size=3, patch_size=8):
    records = corpus[:size]
    encoded = [encode_text(r.caption, vocab, 16) for r in records]
    ids = np.stack([e[0] for e in encoded])
    mask = np.stack([e[1] for e in encoded])
    patches = np.stack([extract_patches(r.image, patch_size) for r in records])
    return ids, mask, patches


@pytest.mark.parametrize("overrides", [
    {"fusion__kind": "merged"},
    {"fusion__kind": "coattn"},
    {"fusion__kind": "coattn", "fusion__arch": "encoder_decoder"},
    {"fusion__kind": "merged", "model__multiscale": "true"},
])
def test_forward_shapes(make_config, corpus, vocab, overrides):
    config = make_config(**overrides)
    model = MeterModel(config, len(vocab))
    ids, mask, patches = batch(corpus, vocab)
    out = model(ids, mask, patches, trace=True)
    assert out.text_states.shape == (3, 16, 16)
    assert out.vision_states.shape == (3, 17, 16)
    assert out.patch_states.shape == (3, 16, 16)
    assert out.patch_projections.shape == (3, 16, 16)
    assert len(out.attention_record) == config.fusion.resolved_layers
    assert model.pooled(out).shape == (3, 16)
    if config.fusion.arch == "encoder_decoder":
        assert out.decoder_states.shape == (3, 1, 16)
        assert len(out.decoder_record) == config.fusion.dec_layers
    else:
        assert out.decoder_states is None


@pytest.mark.parametrize("overrides", [
    {"fusion__kind": "merged"},
    {"fusion__kind": "coattn", "model__multiscale": "true"},
    {"fusion__kind": "merged", "fusion__arch": "encoder_decoder", "objectives": "mlm,itm,span_lm"},
])
def test_closed_form_count_matches_the_built_model(make_config, vocab, overrides):
    config = make_config(**overrides)
    model = MeterModel(config, len(vocab))
    assert count_parameters(config, len(vocab)) == model.parameter_count()


def test_parameter_groups(make_config, vocab):
    model = MeterModel(make_config(model__multiscale="true"), len(vocab))
    groups = {name: p.group for name, p in model.named_parameters()}
    assert len(groups) == len(model.parameters())
    assert all(groups[n] == "bottom" for n in groups if n.startswith(("text_encoder.", "vision_encoder.")))
    assert all(groups[n] == "top" for n in groups if n.startswith(("fusion.", "heads.", "text_multiscale.")))
    nc.check_groups(list(model.named_parameters()))


def test_paper_base_fusion_variants_have_comparable_size(vocab, caplog):
    merged_config = build_run_config({"preset": "paper-base", "fusion.kind": "merged"})
    coattn_config = build_run_config({"preset": "paper-base", "fusion.kind": "coattn"})
    assert merged_config.fusion.resolved_layers == 12
    assert coattn_config.fusion.resolved_layers == 6
    merged = count_parameters(merged_config, len(vocab))
    coattn = count_parameters(coattn_config, len(vocab))
    # 12 merged layers against 6 co-attention layers of two towers each
    assert coattn - merged == 28_385_280
    with caplog.at_level(logging.INFO, logger="meter_desk.model"):
        assert parameter_parity(merged, coattn) <= 0.10
    assert ": 28385280 (" in caplog.text


def test_zero_multiscale_gates_leave_outputs_unchanged(make_config, corpus, vocab):
    plain = MeterModel(make_config(), len(vocab))
    gated = MeterModel(make_config(model__multiscale="true"), len(vocab))
    weights = plain.state_dict()
    for name, p in gated.named_parameters():
        if name in weights:
            p.data = weights[name].copy()
    ids, mask, patches = batch(corpus, vocab)
    a = plain(ids, mask, patches)
    b = gated(ids, mask, patches)
    assert a.text_states.data.tobytes() == b.text_states.data.tobytes()
    assert a.vision_states.data.tobytes() == b.vision_states.data.tobytes()


def test_patch_mask_only_changes_the_encoder_input(make_config, corpus, vocab):
    model = MeterModel(make_config(), len(vocab))
    ids, mask, patches = batch(corpus, vocab)
    patch_mask = np.zeros((3, 16), dtype=bool)
    patch_mask[:, :4] = True
    clean = model(ids, mask, patches)
    masked = model(ids, mask, patches, patch_mask=patch_mask)
    np.testing.assert_array_equal(masked.patch_projections.data, clean.patch_projections.data)
    assert np.abs(masked.vision_states.data - clean.vision_states.data).max() > 0.0


def test_same_seed_builds_identical_models(make_config, vocab):
    a = MeterModel(make_config(), len(vocab)).state_dict()
    b = MeterModel(make_config(), len(vocab)).state_dict()
    assert list(a) == list(b)
    assert all(a[name].tobytes() == b[name].tobytes() for name in a)
    c = MeterModel(make_config(), len(vocab), seed=1).state_dict()
    assert any(a[name].tobytes() != c[name].tobytes() for name in a)


def test_state_dict_transfers_behaviour(make_config, corpus, vocab):
    source = MeterModel(make_config(), len(vocab))
    target = MeterModel(make_config(), len(vocab), seed=5)
    target.load_state_dict(source.state_dict())
    ids, mask, patches = batch(corpus, vocab)
    assert source(ids, mask, patches).text_states.data.tobytes() == target(ids, mask, patches).text_states.data.tobytes()


def test_load_state_dict_errors(make_config, vocab):
    model = MeterModel(make_config(), len(vocab))
    tensors = dict(model.state_dict())
    name = next(iter(tensors))

    missing = {k: v for k, v in tensors.items() if k != name}
    with pytest.raises(CheckpointFormatError):
        model.load_state_dict(missing)

    wrong = dict(tensors, **{name: np.zeros(np.shape(tensors[name])[:-1] + (99,))})
    with pytest.raises(CheckpointShapeError):
        model.load_state_dict(wrong)

    with pytest.raises(CheckpointFormatError):
        model.load_state_dict(dict(tensors, extra=np.zeros(1)))


def test_resized_grid_accepts_the_larger_image(make_config, vocab):
    model = MeterModel(make_config(), len(vocab))
    model.resize_vision_grid(8)
    assert model.grid == 8
    record = generate_corpus(2, 1, 64)[0]
    ids, mask = encode_text(record.caption, vocab, 16)
    out = model(ids[None], mask[None], extract_patches(record.image, 8)[None])
    assert out.vision_states.shape == (1, 65, 16)
    assert count_parameters(model.config, len(vocab), grid=8) == model.parameter_count()
