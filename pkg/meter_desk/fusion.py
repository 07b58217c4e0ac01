"""Cross-modal fusion: merged attention, co-attention, and the encoder-decoder head.

Merged attention runs one transformer over [text; vision] with a learned
modality embedding per modality. Co-attention runs two towers with no shared
weights; in every layer each tower does self-attention, then cross-attention
with queries from itself and keys/values from the other tower's post-self-
attention states of the same layer, then a feed-forward block.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from meter_desk import numcore as nc
from meter_desk import settings
from meter_desk.encoders import Attention, FeedForward, TransformerLayer, stage_timer
from meter_desk.exceptions import FusionError

logger = logging.getLogger(__name__)


@dataclass
class FusionOutput:
    text_states: nc.Tensor
    vision_states: nc.Tensor
    # one entry per fusion layer when tracing: {"layer", "text_to_vision": [B, heads, T, V]}
    attention_record: list = field(default_factory=list)


def _check_hidden(text_feats, vision_feats, hidden):
    if text_feats.shape[-1] != hidden or vision_feats.shape[-1] != hidden:
        raise FusionError(
            f"fusion hidden size is {hidden}, got text {list(text_feats.shape)} and vision {list(vision_feats.shape)}"
        )


class MergedFusion(nc.Module):
    def __init__(self, config, rng, prefix="fusion"):
        super().__init__(prefix, "top")
        self.config = config
        h = config.hidden
        self.modality = self.param("modality_embed", rng.normal(0.0, 0.02, size=(2, h)))
        self.layers = [
            self.child(TransformerLayer(f"{prefix}.layer{i}", "top", h, config.heads, config.ffn_mult, rng))
            for i in range(config.resolved_layers)
        ]
        self.ln_final = self.child(nc.LayerNorm(f"{prefix}.ln_final", "top", h))

    def __call__(self, text_feats, vision_feats, text_mask, trace=False, timings=None) -> FusionOutput:
        _check_hidden(text_feats, vision_feats, self.config.hidden)
        b, t, _ = text_feats.shape
        v = vision_feats.shape[1]
        x = nc.concat([
            nc.add(text_feats, nc.slice_(self.modality, slice(0, 1))),
            nc.add(vision_feats, nc.slice_(self.modality, slice(1, 2))),
        ], axis=1)
        key_mask = np.concatenate([np.asarray(text_mask), np.ones((b, v), dtype=np.int64)], axis=1)
        record = []
        for i, layer in enumerate(self.layers):
            with stage_timer(timings, f"fusion.layer{i}"):
                x = layer(x, key_mask=key_mask, record=record if trace else None)
        x = self.ln_final(x)
        trace_rows = [
            {"layer": i, "text_to_vision": w.data[:, :, :t, t:], "full": w.data}
            for i, w in enumerate(record)
        ]
        return FusionOutput(x[:, :t], x[:, t:], trace_rows)


class CoAttentionTower(nc.Module):
    def __init__(self, prefix, config, rng):
        super().__init__(prefix, "top")
        h = config.hidden
        self.ln_self = self.child(nc.LayerNorm(f"{prefix}.ln_self", "top", h))
        self.self_attn = self.child(Attention(f"{prefix}.self_attn", "top", h, config.heads, rng))
        self.ln_cross = self.child(nc.LayerNorm(f"{prefix}.ln_cross", "top", h))
        self.ln_context = self.child(nc.LayerNorm(f"{prefix}.ln_context", "top", h))
        self.cross_attn = self.child(
            Attention(f"{prefix}.cross_attn", "top", h, config.heads, rng, zero_output=config.cross_zero_init)
        )
        self.ln_ffn = self.child(nc.LayerNorm(f"{prefix}.ln_ffn", "top", h))
        self.ffn = self.child(FeedForward(f"{prefix}.ffn", "top", h, config.ffn_mult, rng))

    def self_block(self, x, mask):
        normed = self.ln_self(x)
        out, _ = self.self_attn(normed, normed, key_mask=mask)
        return nc.add(x, out)

    def cross_block(self, x, other, other_mask):
        out, weights = self.cross_attn(self.ln_cross(x), self.ln_context(other), key_mask=other_mask)
        return nc.add(x, out), weights

    def ffn_block(self, x):
        return nc.add(x, self.ffn(self.ln_ffn(x)))


class CoAttentionLayer(nc.Module):
    def __init__(self, prefix, config, rng):
        super().__init__(prefix, "top")
        self.text = self.child(CoAttentionTower(f"{prefix}.text", config, rng))
        self.vision = self.child(CoAttentionTower(f"{prefix}.vision", config, rng))

    def __call__(self, t, v, text_mask):
        t1 = self.text.self_block(t, text_mask)
        v1 = self.vision.self_block(v, None)
        t2, text_weights = self.text.cross_block(t1, v1, None)
        v2, vision_weights = self.vision.cross_block(v1, t1, text_mask)
        return self.text.ffn_block(t2), self.vision.ffn_block(v2), text_weights, vision_weights


class CoAttentionFusion(nc.Module):
    def __init__(self, config, rng, prefix="fusion"):
        super().__init__(prefix, "top")
        self.config = config
        self.layers = [self.child(CoAttentionLayer(f"{prefix}.layer{i}", config, rng))
                       for i in range(config.resolved_layers)]
        self.ln_text = self.child(nc.LayerNorm(f"{prefix}.ln_text", "top", config.hidden))
        self.ln_vision = self.child(nc.LayerNorm(f"{prefix}.ln_vision", "top", config.hidden))

    def __call__(self, text_feats, vision_feats, text_mask, trace=False, timings=None) -> FusionOutput:
        _check_hidden(text_feats, vision_feats, self.config.hidden)
        t, v = text_feats, vision_feats
        trace_rows = []
        for i, layer in enumerate(self.layers):
            with stage_timer(timings, f"fusion.layer{i}"):
                t, v, text_weights, vision_weights = layer(t, v, text_mask)
            if trace:
                trace_rows.append({"layer": i, "text_to_vision": text_weights.data,
                                   "vision_to_text": vision_weights.data})
        return FusionOutput(self.ln_text(t), self.ln_vision(v), trace_rows)


def build_fusion(config, rng):
    if config.kind == "merged":
        return MergedFusion(config, rng)
    if config.kind == "coattn":
        return CoAttentionFusion(config, rng)
    raise FusionError(f"unknown fusion kind '{config.kind}'")


def fuse_merged(text_feats, vision_feats, mask, stack: MergedFusion, trace=False, timings=None) -> FusionOutput:
    return stack(text_feats, vision_feats, mask, trace=trace, timings=timings)


def fuse_coattention(text_feats, vision_feats, mask, stack: CoAttentionFusion, trace=False, timings=None) -> FusionOutput:
    return stack(text_feats, vision_feats, mask, trace=trace, timings=timings)


def pool_cls(output: FusionOutput) -> nc.Tensor:
    """Text-branch position-0 ([CLS]) state, [B, hidden]."""
    return output.text_states[:, 0]


# --- Encoder-decoder ---

class DecoderLayer(nc.Module):
    """Causal self-attention, one cross-attention per modality, feed-forward."""

    def __init__(self, prefix, config, rng):
        super().__init__(prefix, "top")
        h = config.hidden
        self.cross_order = config.cross_order
        self.ln_self = self.child(nc.LayerNorm(f"{prefix}.ln_self", "top", h))
        self.self_attn = self.child(Attention(f"{prefix}.self_attn", "top", h, config.heads, rng))
        self.ln_text = self.child(nc.LayerNorm(f"{prefix}.ln_text", "top", h))
        self.text_attn = self.child(Attention(f"{prefix}.text_attn", "top", h, config.heads, rng))
        self.ln_vision = self.child(nc.LayerNorm(f"{prefix}.ln_vision", "top", h))
        self.vision_attn = self.child(Attention(f"{prefix}.vision_attn", "top", h, config.heads, rng))
        self.ln_ffn = self.child(nc.LayerNorm(f"{prefix}.ln_ffn", "top", h))
        self.ffn = self.child(FeedForward(f"{prefix}.ffn", "top", h, config.ffn_mult, rng))

    def __call__(self, x, text_states, vision_states, text_mask, dec_mask, record=None):
        normed = self.ln_self(x)
        out, self_weights = self.self_attn(normed, normed, key_mask=dec_mask, causal=True)
        x = nc.add(x, out)
        blocks = [
            ("text", self.ln_text, self.text_attn, text_states, text_mask),
            ("vision", self.ln_vision, self.vision_attn, vision_states, None),
        ]
        if self.cross_order == "vision_first":
            blocks.reverse()
        entry = {"self": self_weights.data}
        for name, ln, attn, context, mask in blocks:
            out, weights = attn(ln(x), context, key_mask=mask)
            entry[name] = weights.data
            x = nc.add(x, out)
        if record is not None:
            record.append(entry)
        return nc.add(x, self.ffn(self.ln_ffn(x)))


class Decoder(nc.Module):
    def __init__(self, config, vocab_size, max_positions, rng, prefix="decoder"):
        super().__init__(prefix, "top")
        h = config.hidden
        self.token_embed = self.child(nc.Embedding(f"{prefix}.token_embed", "top", vocab_size, h, rng))
        self.pos = self.param("pos_embed", rng.normal(0.0, 0.02, size=(max_positions, h)))
        self.layers = [self.child(DecoderLayer(f"{prefix}.layer{i}", config, rng)) for i in range(config.dec_layers)]
        self.ln_final = self.child(nc.LayerNorm(f"{prefix}.ln_final", "top", h))

    def __call__(self, text_states, vision_states, text_mask, decoder_input_ids, decoder_mask=None, record=None):
        ids = np.asarray(decoder_input_ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise FusionError("decoder input must contain at least the start token")
        s = ids.shape[1]
        if s > self.pos.shape[0]:
            raise FusionError(f"decoder input length {s} exceeds {self.pos.shape[0]} positions")
        x = nc.add(self.token_embed(ids), nc.slice_(self.pos, slice(0, s)))
        for layer in self.layers:
            x = layer(x, text_states, vision_states, text_mask, decoder_mask, record=record)
        return self.ln_final(x)


def decode_encdec(encoded: FusionOutput, text_mask, decoder_input_ids, stack: Decoder,
                  decoder_mask=None, record=None) -> nc.Tensor:
    """Per-position decoder states, [B, S, hidden]."""
    return stack(encoded.text_states, encoded.vision_states, text_mask, decoder_input_ids,
                 decoder_mask=decoder_mask, record=record)


def class_token_ids(batch_size: int) -> np.ndarray:
    return np.full((batch_size, 1), settings.DECODER_START_ID, dtype=np.int64)
