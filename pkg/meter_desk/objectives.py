"""Corruption procedures and loss heads for MLM, ITM, MIM (two variants) and span LM.

Corruptions are pure functions of their inputs and a numpy Generator. Losses
return a ``LossTerm`` (scalar Tensor + number of scored positions);
``combine_losses`` folds the enabled terms into a weighted ``LossBundle``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from meter_desk import numcore as nc
from meter_desk import settings
from meter_desk.datagen import parse_caption
from meter_desk.exceptions import ItmSamplingError, ShapeError, SpanCorruptionError

logger = logging.getLogger(__name__)

OBJECTIVES = ("mlm", "itm", "mim_ibn", "mim_dc", "span_lm")
COUNT_RULES = ("stochastic", "round")
NON_MASKABLE = (settings.PAD_ID, settings.CLS_ID, settings.SEP_ID)


@dataclass
class LossTerm:
    value: nc.Tensor
    token_count: int


@dataclass
class ComponentRecord:
    value: float
    weight: float
    token_count: int


@dataclass
class LossBundle:
    total: nc.Tensor
    components: dict

    def values(self) -> dict:
        return {name: rec.value for name, rec in self.components.items()}


class Heads(nc.Module):
    """Output layers for every objective; all in the "top" group."""

    def __init__(self, hidden, vision_hidden, vocab_size, codebook_k, num_answers, rng,
                 with_span_lm=False, prefix="heads"):
        super().__init__(prefix, "top")
        self.mlm = self.child(nc.Linear(f"{prefix}.mlm", "top", hidden, vocab_size, rng))
        self.itm = self.child(nc.Linear(f"{prefix}.itm", "top", hidden, 2, rng))
        self.mim_ibn = self.child(nc.Linear(f"{prefix}.mim_ibn", "top", hidden, vision_hidden, rng))
        self.mim_dc = self.child(nc.Linear(f"{prefix}.mim_dc", "top", hidden, codebook_k, rng))
        self.vqa = self.child(nc.Linear(f"{prefix}.vqa", "top", hidden, num_answers, rng))
        self.span_lm = None
        if with_span_lm:
            self.span_lm = self.child(nc.Linear(f"{prefix}.span_lm", "top", hidden, vocab_size, rng))


def selection_count(n: int, ratio: float, rng, rule: str = "stochastic") -> int:
    """How many of ``n`` candidates to select.

    ``stochastic``: floor(ratio*n) plus one more with probability frac(ratio*n), so
    the expected count is exactly ratio*n. ``round``: round(ratio*n).
    """
    expected = ratio * n
    draw = rng.random()
    if rule == "round":
        k = int(round(expected))
    elif rule == "stochastic":
        base = int(np.floor(expected))
        k = base + int(draw < expected - base)
    else:
        raise ValueError(f"unknown count rule '{rule}'")
    return min(k, n)


def _check_ratio(ratio):
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"masking ratio must lie in (0, 1), got {ratio}")


# --- MLM ---

def mlm_corrupt(token_ids, mask, ratio: float, rng, vocab_size: int, count_rule: str = "stochastic"):
    """BERT-style corruption: of the selected tokens 80% -> [MASK], 10% -> random word, 10% kept.

    Returns (corrupted_ids, targets) with targets -1 at unselected positions.
    [CLS], [SEP], [PAD] and sentinels are never selected.
    """
    _check_ratio(ratio)
    ids = np.array(token_ids, dtype=np.int64, copy=True)
    mask = np.asarray(mask)
    squeeze = ids.ndim == 1
    if squeeze:
        ids, mask = ids[None], mask[None]
    targets = np.full(ids.shape, -1, dtype=np.int64)
    maskable = (mask == 1) & (ids >= settings.FIRST_WORD_ID)
    for row in range(ids.shape[0]):
        candidates = np.nonzero(maskable[row])[0]
        k = selection_count(len(candidates), ratio, rng, count_rule)
        if k == 0:
            continue
        chosen = np.sort(rng.choice(candidates, size=k, replace=False))
        targets[row, chosen] = ids[row, chosen]
        action = rng.random(k)
        random_words = rng.integers(settings.FIRST_WORD_ID, vocab_size, size=k)
        ids[row, chosen[action < 0.8]] = settings.MASK_ID
        swap = (action >= 0.8) & (action < 0.9)
        ids[row, chosen[swap]] = random_words[swap]
    if squeeze:
        return ids[0], targets[0]
    return ids, targets


def _token_ce(states: nc.Tensor, targets, head) -> LossTerm:
    targets = np.asarray(targets, dtype=np.int64)
    logits = head(states)
    flat = nc.reshape(logits, (-1, logits.shape[-1]))
    count = int((targets.reshape(-1) >= 0).sum())
    return LossTerm(nc.cross_entropy(flat, targets.reshape(-1)), count)


def mlm_loss(text_states: nc.Tensor, targets, head) -> LossTerm:
    """Mean cross-entropy over masked text positions; 0 with token_count 0 if none."""
    return _token_ce(text_states, targets, head)


# --- ITM ---

def sample_itm_pairs(captions, rng):
    """Keep each caption (y=1) or, with probability 0.5, swap in a truly mismatching one (y=0).

    A replacement is drawn uniformly among the batch captions whose parsed
    description differs from the original's.
    """
    captions = list(captions)
    if len(captions) < 2:
        raise ItmSamplingError("ITM sampling needs a batch of at least 2 pairs")
    descriptions = [parse_caption(c) for c in captions]
    if all(d == descriptions[0] for d in descriptions):
        raise ItmSamplingError("every caption in the batch describes the same scene")
    out = []
    labels = np.ones(len(captions), dtype=np.int64)
    for i, caption in enumerate(captions):
        if rng.random() < 0.5:
            others = [j for j, d in enumerate(descriptions) if d != descriptions[i]]
            j = others[int(rng.integers(0, len(others)))]
            out.append(captions[j])
            labels[i] = 0
        else:
            out.append(caption)
    return out, labels


def itm_loss(pooled: nc.Tensor, labels, head) -> LossTerm:
    labels = np.asarray(labels, dtype=np.int64)
    return LossTerm(nc.cross_entropy(head(pooled), labels), int(labels.size))


# --- MIM ---

def select_patches(batch: int, num_patches: int, ratio: float, rng, count_rule: str = "stochastic") -> np.ndarray:
    _check_ratio(ratio)
    mask = np.zeros((batch, num_patches), dtype=bool)
    for row in range(batch):
        k = selection_count(num_patches, ratio, rng, count_rule)
        if k:
            mask[row, rng.choice(num_patches, size=k, replace=False)] = True
    return mask


def apply_patch_mask(patch_embeds: nc.Tensor, mask, mask_embedding: nc.Tensor) -> nc.Tensor:
    """Swap selected patch embeddings for the learned [MASK_PATCH] embedding."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return nc.add(nc.mul(patch_embeds, nc.Tensor(1.0 - m)), nc.mul(nc.Tensor(m), mask_embedding))


def mask_patches(patch_embeds: nc.Tensor, ratio: float, rng, mask_embedding: nc.Tensor,
                 count_rule: str = "stochastic"):
    """Select patches (never [CLS_V], which is prepended later) and replace them.

    Returns (masked_embeds, mask[B, N]).
    """
    b, n, _ = patch_embeds.shape
    mask = select_patches(b, n, ratio, rng, count_rule)
    return apply_patch_mask(patch_embeds, mask, mask_embedding), mask


def _ibn_logits(vision_states: nc.Tensor, candidates: nc.Tensor, mask, head=None):
    mask = np.asarray(mask, dtype=bool)
    h = head(vision_states) if head is not None else vision_states
    b, n, d = h.shape
    if candidates.shape != (b, n, d):
        raise ShapeError("mim_ibn", [("h", h.shape), ("c", candidates.shape)])
    rows = np.nonzero(mask.reshape(-1))[0]
    queries = nc.slice_(nc.reshape(h, (b * n, d)), rows)
    pool = nc.reshape(candidates.detach(), (b * n, d))
    return nc.matmul(queries, nc.transpose(pool)), rows


def mim_ibn_loss(vision_states: nc.Tensor, candidates: nc.Tensor, mask, head=None) -> LossTerm:
    """Masked-patch classification against every patch of the batch.

    For a masked position the probability of the true patch is
    exp(h_i . c_i) / sum over all B*N candidates exp(h_i . c_j); no temperature.
    ``candidates`` are the (detached) patch projections c(v).
    """
    rows = np.nonzero(np.asarray(mask, dtype=bool).reshape(-1))[0]
    if rows.size == 0:
        return LossTerm(nc.Tensor(0.0), 0)
    logits, rows = _ibn_logits(vision_states, candidates, mask, head)
    return LossTerm(nc.cross_entropy(logits, rows), int(rows.size))


def mim_ibn_probabilities(vision_states: nc.Tensor, candidates: nc.Tensor, mask, head=None) -> np.ndarray:
    """[masked, B*N] candidate distribution for each masked position."""
    with nc.no_grad():
        logits, _ = _ibn_logits(vision_states, candidates, mask, head)
        return nc.softmax(logits, axis=-1).data


def mim_dc_loss(vision_states: nc.Tensor, code_targets, head) -> LossTerm:
    """K-way code classification at masked patches (targets -1 elsewhere)."""
    return _token_ce(vision_states, code_targets, head)


# --- Span corruption ---

def _segment(total: int, parts: int, rng) -> list:
    """Random composition of ``total`` into ``parts`` positive lengths."""
    if parts == 1:
        return [total]
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [total]])).tolist()


def span_corrupt(tokens, ratio: float, mean_span: float, rng, spans=None, count_rule: str = "stochastic"):
    """T5-style span corruption of a content-token sequence.

    Each removed contiguous span is replaced in the encoder input by the next
    sentinel (<extra_0>, <extra_1>, ...). The decoder target lists every span
    behind its sentinel and ends with one more sentinel. ``spans`` forces the
    corrupted [start, end) ranges. Returns (encoder_input, decoder_target).
    """
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    if spans is None:
        _check_ratio(ratio)
        num_noise = selection_count(n, ratio, rng, count_rule)
        spans = []
        if num_noise:
            num_spans = int(round(num_noise / mean_span))
            num_spans = max(1, min(num_spans, num_noise, n - num_noise + 1))
            noise_lengths = _segment(num_noise, num_spans, rng)
            gaps = _segment(n - num_noise + 2, num_spans + 1, rng)
            gaps[0] -= 1
            gaps[-1] -= 1
            pos = gaps[0]
            for s, length in enumerate(noise_lengths):
                spans.append((pos, pos + length))
                pos += length + gaps[s + 1]
    spans = sorted(spans)
    if len(spans) + 1 > settings.NUM_SENTINELS:
        raise SpanCorruptionError(f"{len(spans)} spans need {len(spans) + 1} sentinels, only {settings.NUM_SENTINELS} exist")
    encoder_input, decoder_target = [], []
    cursor = 0
    for s, (start, end) in enumerate(spans):
        if start < cursor or end <= start or end > n:
            raise SpanCorruptionError(f"invalid span [{start}, {end}) for a sequence of {n} tokens")
        sentinel = settings.SENTINEL_OFFSET + s
        encoder_input.extend(tokens[cursor:start])
        encoder_input.append(sentinel)
        decoder_target.append(sentinel)
        decoder_target.extend(tokens[start:end])
        cursor = end
    encoder_input.extend(tokens[cursor:])
    decoder_target.append(settings.SENTINEL_OFFSET + len(spans))
    return encoder_input, decoder_target


def span_decorrupt(encoder_input, decoder_target) -> list:
    """Splice the decoder target's spans back at their sentinels."""
    def is_sentinel(t):
        return settings.SENTINEL_OFFSET <= t < settings.FIRST_WORD_ID

    filled = {}
    current = None
    for t in decoder_target:
        if is_sentinel(t):
            current = t
            filled[current] = []
        elif current is not None:
            filled[current].append(t)
    out = []
    for t in encoder_input:
        out.extend(filled.get(t, []) if is_sentinel(t) else [t])
    return out


def span_lm_loss(decoder_states: nc.Tensor, targets, head) -> LossTerm:
    """Teacher-forced cross-entropy over decoder target positions (-1 = padding)."""
    return _token_ce(decoder_states, targets, head)


# --- Combination ---

def combine_losses(components: dict, weights: dict = None) -> LossBundle:
    """total = sum of weight * value over the given components, in canonical objective order."""
    weights = weights or {}
    total = None
    records = {}
    for name in sorted(components, key=lambda k: OBJECTIVES.index(k) if k in OBJECTIVES else len(OBJECTIVES)):
        term = components[name]
        weight = float(weights.get(name, 1.0))
        weighted = term.value if weight == 1.0 else nc.scale(term.value, weight)
        total = weighted if total is None else nc.add(total, weighted)
        records[name] = ComponentRecord(value=term.value.item(), weight=weight, token_count=term.token_count)
    if total is None:
        total = nc.Tensor(0.0)
    return LossBundle(total=total, components=records)
