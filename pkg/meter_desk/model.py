"""The assembled vision-language network.

text encoder ─┐ (multi-scale gates) ─ text_proj ───┐
              │                                    ├─ fusion ─ (decoder) ─ heads
vision encoder┘ (multi-scale gates) ─ vision_proj ─┘

Encoder parameters are in the "bottom" learning-rate group, everything else in "top".
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from meter_desk import numcore as nc
from meter_desk.datagen import ANSWER_VOCAB
from meter_desk.encoders import MultiScaleFusion, TextEncoder, VisionEncoder, stage_timer
from meter_desk.exceptions import CheckpointFormatError, CheckpointShapeError
from meter_desk.fusion import Decoder, FusionOutput, build_fusion, class_token_ids, decode_encdec, pool_cls
from meter_desk.objectives import Heads, apply_patch_mask

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    text_states: nc.Tensor          # [B, T, H]
    vision_states: nc.Tensor        # [B, N + 1, H], [CLS_V] first
    patch_projections: nc.Tensor    # c(v), detached, [B, N, H_vision]
    decoder_states: Optional[nc.Tensor] = None
    attention_record: list = field(default_factory=list)
    decoder_record: list = field(default_factory=list)

    @property
    def patch_states(self) -> nc.Tensor:
        return self.vision_states[:, 1:]


class MeterModel(nc.Module):
    def __init__(self, config, vocab_size: int, num_answers: int = len(ANSWER_VOCAB), seed: int = None, grid: int = None):
        super().__init__("", "top")
        self.config = config
        self.vocab_size = vocab_size
        self.num_answers = num_answers
        rng = np.random.default_rng(config.train.seed if seed is None else seed)
        text, vision, fusion = config.text, config.vision, config.fusion

        self.text_encoder = self.child(TextEncoder(text, vocab_size, rng))
        self.vision_encoder = self.child(VisionEncoder(vision, grid or config.grid_size, rng))
        self.text_gates = self.vision_gates = None
        if config.model.multiscale:
            self.text_gates = self.child(MultiScaleFusion("text_multiscale", text.hidden, text.layers, rng))
            self.vision_gates = self.child(MultiScaleFusion("vision_multiscale", vision.hidden, vision.layers, rng))
        self.text_proj = self.child(nc.Linear("text_proj", "top", text.hidden, fusion.hidden, rng))
        self.vision_proj = self.child(nc.Linear("vision_proj", "top", vision.hidden, fusion.hidden, rng))
        self.fusion = self.child(build_fusion(fusion, rng))
        self.decoder = None
        if self.encoder_decoder:
            self.decoder = self.child(Decoder(fusion, vocab_size, config.data.max_text_len, rng))
        self.heads = self.child(Heads(fusion.hidden, vision.hidden, vocab_size, config.data.codebook_k,
                                      num_answers, rng, with_span_lm=self.encoder_decoder))
        logger.debug(f"Built {fusion.kind}/{fusion.arch} model with {self.parameter_count()} parameters")

    @property
    def encoder_decoder(self) -> bool:
        return self.config.fusion.arch == "encoder_decoder"

    @property
    def grid(self) -> int:
        return self.vision_encoder.grid

    def forward(self, token_ids, text_mask, patches, patch_mask=None, decoder_input_ids=None,
                decoder_mask=None, trace=False, timings=None) -> ModelOutput:
        """Run the network; the decoder defaults to the single class token when present."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        text_mask = np.asarray(text_mask)
        with stage_timer(timings, "text_encoder"):
            text_layers = self.text_encoder.encode(token_ids, text_mask)
            text_feats = self.text_gates(text_layers) if self.text_gates else text_layers.top
        with stage_timer(timings, "vision_encoder"):
            projected = self.vision_encoder.project(patches)
            embeds = projected
            if patch_mask is not None:
                embeds = apply_patch_mask(projected, patch_mask, self.vision_encoder.mask_embed)
            vision_layers = self.vision_encoder.encode(self.vision_encoder.add_cls_and_positions(embeds))
            vision_feats = self.vision_gates(vision_layers) if self.vision_gates else vision_layers.top
        fused: FusionOutput = self.fusion(self.text_proj(text_feats), self.vision_proj(vision_feats),
                                          text_mask, trace=trace, timings=timings)
        output = ModelOutput(fused.text_states, fused.vision_states, projected.detach(),
                             attention_record=fused.attention_record)
        if self.decoder is not None:
            if decoder_input_ids is None:
                decoder_input_ids = class_token_ids(token_ids.shape[0])
            record = [] if trace else None
            with stage_timer(timings, "decoder"):
                output.decoder_states = decode_encdec(fused, text_mask, decoder_input_ids, self.decoder,
                                                      decoder_mask=decoder_mask, record=record)
            output.decoder_record = record or []
        return output

    __call__ = forward

    def pooled(self, output: ModelOutput) -> nc.Tensor:
        """[B, hidden] classification representation for the ITM and VQA heads."""
        if self.decoder is not None:
            return output.decoder_states[:, 0]
        return pool_cls(FusionOutput(output.text_states, output.vision_states))

    def resize_vision_grid(self, new_grid: int) -> None:
        self.vision_encoder.resize_grid(new_grid)

    def state_dict(self) -> OrderedDict:
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, tensors: dict) -> None:
        """Copy named arrays into the parameters; checked in model order before anything is written."""
        params = list(self.named_parameters())
        for name, p in params:
            if name not in tensors:
                raise CheckpointFormatError(f"checkpoint has no tensor '{name}'")
            if tuple(np.shape(tensors[name])) != p.shape:
                raise CheckpointShapeError(name, p.shape, np.shape(tensors[name]))
        unexpected = set(tensors) - {name for name, _ in params}
        if unexpected:
            raise CheckpointFormatError(f"checkpoint has unexpected tensor '{sorted(unexpected)[0]}'")
        for name, p in params:
            p.data = np.array(tensors[name], dtype=np.float64, copy=True)
            p.grad = None


# --- Closed-form parameter counting ---

def _linear(d_in, d_out):
    return d_in * d_out + d_out


def _ffn(hidden, ffn_mult):
    inner = int(round(hidden * ffn_mult))
    return _linear(hidden, inner) + _linear(inner, hidden)


def _attention(hidden):
    return 4 * _linear(hidden, hidden)


def _transformer_layer(hidden, ffn_mult):
    return 2 * (2 * hidden) + _attention(hidden) + _ffn(hidden, ffn_mult)


def fusion_parameter_count(fusion) -> int:
    h = fusion.hidden
    if fusion.kind == "merged":
        return 2 * h + fusion.resolved_layers * _transformer_layer(h, fusion.ffn_mult) + 2 * h
    tower = 4 * (2 * h) + 2 * _attention(h) + _ffn(h, fusion.ffn_mult)
    return fusion.resolved_layers * 2 * tower + 2 * (2 * h)


def count_parameters(config, vocab_size: int, num_answers: int = len(ANSWER_VOCAB), grid: int = None) -> int:
    """Trainable parameters of ``MeterModel(config, ...)`` without allocating it."""
    text, vision, fusion = config.text, config.vision, config.fusion
    grid = grid or config.grid_size
    total = vocab_size * text.hidden + text.max_positions * text.hidden
    total += text.layers * _transformer_layer(text.hidden, text.ffn_mult)
    patch_dim = vision.patch_size * vision.patch_size * 3
    total += _linear(patch_dim, vision.hidden) + 2 * vision.hidden + (grid * grid + 1) * vision.hidden
    total += vision.layers * _transformer_layer(vision.hidden, vision.ffn_mult)
    if config.model.multiscale:
        total += text.layers * _linear(text.hidden, 1) + vision.layers * _linear(vision.hidden, 1)
    total += _linear(text.hidden, fusion.hidden) + _linear(vision.hidden, fusion.hidden)
    total += fusion_parameter_count(fusion)
    h = fusion.hidden
    heads = _linear(h, vocab_size) + _linear(h, 2) + _linear(h, vision.hidden)
    heads += _linear(h, config.data.codebook_k) + _linear(h, num_answers)
    if fusion.arch == "encoder_decoder":
        heads += _linear(h, vocab_size)
        total += vocab_size * h + config.data.max_text_len * h + 2 * h
        total += fusion.dec_layers * (4 * (2 * h) + 3 * _attention(h) + _ffn(h, fusion.ffn_mult))
    return int(total + heads)


def parameter_parity(merged_count: int, coattn_count: int) -> float:
    """Relative gap |a - b| / max(a, b) between two parameter counts."""
    gap = abs(merged_count - coattn_count)
    parity = gap / max(merged_count, coattn_count)
    logger.info(f"Parameter gap merged={merged_count} coattn={coattn_count}: {gap} ({parity:.4f} of the larger)")
    return parity
