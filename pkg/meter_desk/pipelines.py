"""Batch assembly as a chain of stages.

Each stage takes the working ``Batch`` and the step's rng, fills in its fields
and returns the batch. The chain for a run is fixed by ``build_pipeline`` and
every stage is a pure function of (batch, rng), so batches are reproducible from
(config, step).
"""

import logging
from collections import Counter

import numpy as np

from meter_desk import settings
from meter_desk.datagen import encode_text, extract_patches, quantize_patches
from meter_desk.exceptions import DataError
from meter_desk.items import Batch
from meter_desk.objectives import mlm_corrupt, sample_itm_pairs, select_patches, span_corrupt

logger = logging.getLogger(__name__)


def initial_batch(records, patch_size: int) -> Batch:
    """Patches, captions, questions and answers of a list of PairRecords; no text encoded yet."""
    if not records:
        raise DataError("cannot assemble an empty batch")
    patches = np.stack([extract_patches(r.image, patch_size) for r in records])
    questions = [r.qa.question if r.qa is not None else "" for r in records]
    answers = None
    if all(r.qa is not None for r in records):
        answers = np.array([r.qa.answer_id for r in records], dtype=np.int64)
    return Batch(
        token_ids=np.zeros((len(records), 0), dtype=np.int64),
        text_mask=np.zeros((len(records), 0), dtype=np.int64),
        patches=patches,
        captions=[r.caption for r in records],
        questions=questions,
        answer_ids=answers,
    )


def _encode_all(texts, vocab, max_len):
    encoded = [encode_text(t, vocab, max_len) for t in texts]
    return np.stack([ids for ids, _ in encoded]), np.stack([mask for _, mask in encoded])


class TextEncodingStage:
    """
    PIPELINE STAGE 1
    Encodes the caption (or, for VQA, the question) of every pair into
    [CLS] ... [SEP] id rows with an attention mask.
    """
    def __init__(self, vocab, max_len, source="captions"):
        self.vocab = vocab
        self.max_len = max_len
        self.source = source
        self.stats = Counter()

    def process_batch(self, batch: Batch, rng) -> Batch:
        batch.token_ids, batch.text_mask = _encode_all(getattr(batch, self.source), self.vocab, self.max_len)
        self.stats["texts_encoded"] += len(batch.token_ids)
        return batch


class ItmSamplingStage:
    """
    PIPELINE STAGE 2
    Relabels the batch for image-text matching: every pair keeps its caption
    or gets a mismatching one from the batch, and the result is encoded
    separately from the (possibly corrupted) MLM input.
    """
    def __init__(self, vocab, max_len):
        self.vocab = vocab
        self.max_len = max_len
        self.stats = Counter()

    def process_batch(self, batch: Batch, rng) -> Batch:
        captions, labels = sample_itm_pairs(batch.captions, rng)
        batch.itm_token_ids, batch.itm_text_mask = _encode_all(captions, self.vocab, self.max_len)
        batch.itm_labels = labels
        self.stats["itm_mismatched"] += int((labels == 0).sum())
        return batch


class SpanCorruptionStage:
    """
    PIPELINE STAGE 3 (encoder-decoder only)
    Replaces contiguous spans of each caption with sentinels and builds the
    teacher-forced decoder input ([CLS] + target[:-1]) and targets.
    """
    def __init__(self, max_len, ratio, mean_span, count_rule="stochastic"):
        self.max_len = max_len
        self.ratio = ratio
        self.mean_span = mean_span
        self.count_rule = count_rule
        self.stats = Counter()

    def process_batch(self, batch: Batch, rng) -> Batch:
        b = len(batch.token_ids)
        token_ids = np.full((b, self.max_len), settings.PAD_ID, dtype=np.int64)
        text_mask = np.zeros((b, self.max_len), dtype=np.int64)
        decoder_input = np.full((b, self.max_len), settings.PAD_ID, dtype=np.int64)
        targets = np.full((b, self.max_len), -1, dtype=np.int64)
        for row in range(b):
            length = int(batch.text_mask[row].sum())
            content = batch.token_ids[row, 1:length - 1]
            encoder_input, target = span_corrupt(content, self.ratio, self.mean_span, rng,
                                                 count_rule=self.count_rule)
            ids = [settings.CLS_ID, *encoder_input, settings.SEP_ID]
            if len(ids) > self.max_len or len(target) > self.max_len:
                raise DataError(f"span-corrupted row {row} does not fit in {self.max_len} positions")
            token_ids[row, :len(ids)] = ids
            text_mask[row, :len(ids)] = 1
            decoder_input[row, :len(target)] = [settings.DECODER_START_ID, *target[:-1]]
            targets[row, :len(target)] = target
            self.stats["span_tokens_masked"] += sum(1 for t in target if t >= settings.FIRST_WORD_ID)
        batch.token_ids, batch.text_mask = token_ids, text_mask
        batch.span_decoder_input, batch.span_targets = decoder_input, targets
        return batch


class MlmCorruptionStage:
    """
    PIPELINE STAGE 4
    BERT-style masking of the text input; targets hold the original ids.
    """
    def __init__(self, ratio, vocab_size, count_rule="stochastic"):
        self.ratio = ratio
        self.vocab_size = vocab_size
        self.count_rule = count_rule
        self.stats = Counter()

    def process_batch(self, batch: Batch, rng) -> Batch:
        batch.token_ids, batch.mlm_targets = mlm_corrupt(batch.token_ids, batch.text_mask, self.ratio, rng,
                                                         self.vocab_size, self.count_rule)
        self.stats["tokens_masked"] += int((batch.mlm_targets >= 0).sum())
        return batch


class PatchMaskingStage:
    """
    PIPELINE STAGE 5
    Selects the patches to mask for MIM and, for the discrete-code variant,
    quantizes the uncorrupted patches into code targets at those positions.
    """
    def __init__(self, ratio, codebook=None, count_rule="stochastic"):
        self.ratio = ratio
        self.codebook = codebook
        self.count_rule = count_rule
        self.stats = Counter()

    def process_batch(self, batch: Batch, rng) -> Batch:
        b, n, _ = batch.patches.shape
        batch.patch_mask = select_patches(b, n, self.ratio, rng, self.count_rule)
        if self.codebook is not None:
            codes = quantize_patches(batch.patches.reshape(b * n, -1), self.codebook).reshape(b, n)
            batch.mim_code_targets = np.where(batch.patch_mask, codes, -1)
        self.stats["patches_masked"] += int(batch.patch_mask.sum())
        return batch


def build_pipeline(config, vocab, codebook=None) -> list:
    """The pretraining stage chain for a RunConfig."""
    max_len = config.data.max_text_len
    obj = config.objective
    stages = [TextEncodingStage(vocab, max_len)]
    if config.has("itm"):
        stages.append(ItmSamplingStage(vocab, max_len))
    if config.has("span_lm"):
        stages.append(SpanCorruptionStage(max_len, obj.span_ratio, obj.mean_span, obj.count_rule))
    if config.has("mlm"):
        stages.append(MlmCorruptionStage(obj.mlm_ratio, len(vocab), obj.count_rule))
    if config.has("mim_ibn") or config.has("mim_dc"):
        if config.has("mim_dc") and codebook is None:
            raise DataError("mim_dc needs a fitted codebook")
        stages.append(PatchMaskingStage(obj.mim_ratio, codebook if config.has("mim_dc") else None, obj.count_rule))
    return stages


def build_task_pipeline(config, vocab, task: str) -> list:
    """Stage chain for finetuning/evaluation batches: VQA reads questions, ITM relabels captions."""
    max_len = config.data.max_text_len
    if task == "vqa":
        return [TextEncodingStage(vocab, max_len, source="questions")]
    return [TextEncodingStage(vocab, max_len), ItmSamplingStage(vocab, max_len)]


def process_batch(records, stages, rng, patch_size: int) -> Batch:
    batch = initial_batch(records, patch_size)
    for stage in stages:
        batch = stage.process_batch(batch, rng)
    return batch


def pipeline_stats(stages) -> Counter:
    total = Counter()
    for stage in stages:
        total.update(stage.stats)
    return total
