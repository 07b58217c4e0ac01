"""Training, evaluation, checkpointing and forward-latency benchmarking.

A run is a pure function of (config, corpus): batch membership and every
corruption draw come from ``np.random.default_rng([seed, step, ...])``, so two
runs with the same config produce bit-identical checkpoints and metrics (wall
time aside). Steps are 1-based; the update at step s uses
``schedule_lr(s, steps, peak)`` for each parameter group.
"""

import hashlib
import logging
import os
import struct
import time
from collections import Counter, OrderedDict
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

from meter_desk import numcore as nc
from meter_desk import settings
from meter_desk.config import render_config
from meter_desk.datagen import (
    ANSWER_VOCAB, Codebook, Vocabulary, build_vocab, encode_text, extract_patches, fit_codebook,
    generate_corpus, generate_pair, grammar_terminals,
)
from meter_desk.exceptions import (
    CheckpointFormatError, MeterError, NonFiniteError, TrainingDivergedError,
)
from meter_desk.extensions import MetricsWriter, TrainingMonitor
from meter_desk.items import BenchmarkRecord, MetricsRecord
from meter_desk.model import MeterModel
from meter_desk.objectives import (
    LossTerm, combine_losses, itm_loss, mim_dc_loss, mim_ibn_loss, mlm_corrupt, mlm_loss, span_lm_loss,
)
from meter_desk.pipelines import build_pipeline, build_task_pipeline, initial_batch, pipeline_stats, process_batch

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"METR"
CHECKPOINT_VERSION = 1
DIGEST_SIZE = 32


@dataclass
class TrainingData:
    records: list
    vocab: Vocabulary
    codebook: Optional[Codebook] = None


@dataclass
class TrainResult:
    model: MeterModel
    metrics: list = field(default_factory=list)
    stats: Counter = field(default_factory=Counter)


# --- Data ---

def run_vocabulary(records) -> Vocabulary:
    """Vocabulary over the corpus texts and every grammar terminal, so any scene encodes."""
    texts = [r.caption for r in records]
    texts += [r.qa.question for r in records if r.qa is not None]
    texts.append(" ".join(sorted(grammar_terminals())))
    return build_vocab(texts)


def prepare_data(config, records=None, codebook=None) -> TrainingData:
    data = config.data
    if records is None:
        records = generate_corpus(data.seed, data.corpus_size, data.resolution, data.with_qa)
    vocab = run_vocabulary(records)
    if codebook is None and config.has("mim_dc"):
        patches = np.concatenate([extract_patches(r.image, config.vision.patch_size) for r in records])
        logger.info(f"Fitting {data.codebook_k}-centroid codebook on {len(patches)} patches...")
        codebook = fit_codebook(patches, data.codebook_k, data.seed, data.codebook_iters)
    return TrainingData(records=records, vocab=vocab, codebook=codebook)


def rerender(records, resolution: int) -> list:
    """Same pairs (by seed) drawn at another resolution."""
    return [generate_pair(r.id, resolution, with_qa=r.qa is not None) for r in records]


def batch_indices(seed: int, step: int, corpus_size: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step, 0])
    return np.sort(rng.choice(corpus_size, size=min(batch_size, corpus_size), replace=False))


def step_rng(seed: int, step: int):
    return np.random.default_rng([seed, step, 1])


# --- Parameter groups ---

def build_param_groups(model) -> dict:
    """{"bottom": [...], "top": [...]}: disjoint and exhaustive over the model's parameters."""
    named = list(model.named_parameters())
    nc.check_groups(named)
    groups = {group: [] for group in nc.GROUPS}
    for _, p in named:
        groups[p.group].append(p)
    return groups


def optimizer_groups(model, lr_bottom: float, lr_top: float, layered: bool = True, optim=None) -> list:
    """(group name, params, peak lr, AdamWState) per optimizer group.

    ``layered=False`` puts every parameter in one group at ``lr_top``.
    """
    hyper = nc.AdamWHyper(optim.beta1, optim.beta2, optim.eps, optim.weight_decay) if optim else nc.AdamWHyper()
    if not layered:
        params = model.parameters()
        return [("all", params, lr_top, nc.AdamWState.for_params(params, hyper))]
    groups = build_param_groups(model)
    peaks = {"bottom": lr_bottom, "top": lr_top}
    return [(g, groups[g], peaks[g], nc.AdamWState.for_params(groups[g], hyper)) for g in nc.GROUPS if groups[g]]


def _grads_or_zero(params) -> dict:
    # parameters the step's graph never reached (unused heads, the mask embedding without MIM) get 0
    return {p.name: p.grad if p.grad is not None else np.zeros_like(p.data) for p in params}


# --- Losses ---

def pretrain_losses(model, batch, config):
    """Forward passes for the enabled objectives, combined into a LossBundle.

    MLM, MIM and span LM share one pass over the corrupted inputs; ITM runs on
    the relabeled pairs with uncorrupted images.
    """
    heads = model.heads
    components = {}
    if config.has("mlm") or config.has("mim_ibn") or config.has("mim_dc") or config.has("span_lm"):
        masked_vision = config.has("mim_ibn") or config.has("mim_dc")
        out = model(batch.token_ids, batch.text_mask, batch.patches,
                    patch_mask=batch.patch_mask if masked_vision else None,
                    decoder_input_ids=batch.span_decoder_input if config.has("span_lm") else None)
        if config.has("mlm"):
            components["mlm"] = mlm_loss(out.text_states, batch.mlm_targets, heads.mlm)
        if config.has("mim_ibn"):
            components["mim_ibn"] = mim_ibn_loss(out.patch_states, out.patch_projections, batch.patch_mask, heads.mim_ibn)
        if config.has("mim_dc"):
            components["mim_dc"] = mim_dc_loss(out.patch_states, batch.mim_code_targets, heads.mim_dc)
        if config.has("span_lm"):
            components["span_lm"] = span_lm_loss(out.decoder_states, batch.span_targets, heads.span_lm)
    if config.has("itm"):
        out = model(batch.itm_token_ids, batch.itm_text_mask, batch.patches)
        components["itm"] = itm_loss(model.pooled(out), batch.itm_labels, heads.itm)
    return combine_losses(components, config.objective.weights())


def task_losses(model, batch, task: str):
    if task == "vqa":
        out = model(batch.token_ids, batch.text_mask, batch.patches)
        labels = batch.answer_ids
        return combine_losses({"vqa": LossTerm(nc.cross_entropy(model.heads.vqa(model.pooled(out)), labels), len(labels))})
    out = model(batch.itm_token_ids, batch.itm_text_mask, batch.patches)
    return combine_losses({"itm": itm_loss(model.pooled(out), batch.itm_labels, model.heads.itm)})


# --- Loop ---

def _loss_breakdown(model, batch, loss_fn) -> dict:
    """Per-component loss values of a diverged step, recomputed with the barrier off."""
    with nc.check_barrier(False), nc.no_grad():
        return loss_fn(model, batch).values()


def _run_loop(model, config, records, stages, loss_fn, steps, batch_size, lr_bottom, lr_top,
              eval_fn=None, metrics_path=None, name="pretrain") -> TrainResult:
    result = TrainResult(model=model)
    if steps == 0:
        logger.info(f"{name}: 0 steps requested, model unchanged")
        return result
    train = config.train
    groups = optimizer_groups(model, lr_bottom, lr_top, layered=train.layered_lr, optim=config.optim)
    stats = Counter()
    monitor = TrainingMonitor(stats, steps, interval=train.eval_every, name=name)
    monitor.run_opened()
    sink = MetricsWriter(metrics_path) if metrics_path else nullcontext()
    try:
        with sink as writer:
            for step in tqdm(range(1, steps + 1), desc=name, disable=steps < 50):
                started = time.perf_counter()
                idx = batch_indices(train.seed, step, len(records), batch_size)
                batch = process_batch([records[i] for i in idx], stages, step_rng(train.seed, step),
                                      config.vision.patch_size)
                try:
                    bundle = loss_fn(model, batch)
                except NonFiniteError as e:
                    raise TrainingDivergedError(step, _loss_breakdown(model, batch, loss_fn)) from e
                if not np.isfinite(bundle.total.item()):
                    raise TrainingDivergedError(step, bundle.values())
                nc.backward(bundle.total)
                lrs = {}
                for group, params, peak, state in groups:
                    lrs[group] = nc.schedule_lr(step, steps, peak, train.warmup_ratio)
                    nc.adamw_step(params, state, lrs[group], grads=_grads_or_zero(params))
                model.zero_grad()
                wall_ms = (time.perf_counter() - started) * 1000.0
                monitor.step_done(step, bundle.values())
                if step % train.eval_every == 0 or step == steps:
                    record = MetricsRecord(
                        step=step,
                        losses=bundle.values(),
                        loss_total=bundle.total.item(),
                        lr_bottom=lrs.get("bottom", lrs.get("all")),
                        lr_top=lrs.get("top", lrs.get("all")),
                        wall_ms=wall_ms,
                        eval=eval_fn(model) if eval_fn else {},
                    )
                    result.metrics.append(record)
                    if writer:
                        writer.write(record.to_json())
    except MeterError:
        monitor.run_closed("error")
        raise
    stats.update(pipeline_stats(stages))
    result.stats = stats
    monitor.run_closed()
    return result


def train(config, data: TrainingData, model: MeterModel, metrics_path: str = None, steps: int = None) -> TrainResult:
    """Pretrain ``model`` in place with the enabled objectives."""
    stages = build_pipeline(config, data.vocab, data.codebook)
    eval_records = data.records[:settings.EVAL_SUBSET_SIZE]

    def eval_fn(m):
        metrics = {}
        if config.has("itm"):
            metrics.update(evaluate(m, eval_records, "itm", config, data.vocab))
        if config.has("mlm"):
            metrics.update(evaluate(m, eval_records, "mlm", config, data.vocab))
        return metrics

    return _run_loop(
        model, config, data.records, stages,
        loss_fn=lambda m, batch: pretrain_losses(m, batch, config),
        steps=config.train.steps if steps is None else steps,
        batch_size=config.train.batch_size,
        lr_bottom=config.train.lr_bottom, lr_top=config.train.lr_top,
        eval_fn=eval_fn, metrics_path=metrics_path, name="pretrain",
    )


def finetune(config, data: TrainingData, model: MeterModel, task: str = None, metrics_path: str = None) -> TrainResult:
    """Train a task head (and the rest of the model) at the finetune resolution and learning rates."""
    task = task or config.finetune.task
    records = data.records
    resolution = config.finetune_resolution
    if records and records[0].image.shape[0] != resolution:
        records = rerender(records, resolution)
    model.resize_vision_grid(resolution // config.vision.patch_size)
    if task == "vqa" and any(r.qa is None for r in records):
        raise MeterError("vqa finetuning needs a corpus generated with questions (data.with_qa = true)")
    stages = build_task_pipeline(config, data.vocab, task)
    eval_records = records[:settings.EVAL_SUBSET_SIZE]
    ft = config.finetune
    return _run_loop(
        model, config, records, stages,
        loss_fn=lambda m, batch: task_losses(m, batch, task),
        steps=ft.steps, batch_size=ft.batch_size, lr_bottom=ft.lr_bottom, lr_top=ft.lr_top,
        eval_fn=lambda m: evaluate(m, eval_records, task, config, data.vocab),
        metrics_path=metrics_path, name=f"finetune-{task}",
    )


# --- Evaluation ---

def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def evaluate(model, records, task: str, config, vocab: Vocabulary, seed: int = 0, batch_size: int = 32) -> dict:
    """Side-effect-free accuracy for one task: itm, mlm, vqa or retrieval."""
    if task == "retrieval":
        return evaluate_retrieval(model, records, config, vocab, batch_size=batch_size)
    rng = np.random.default_rng([seed, 2])
    correct = total = 0
    patch_size = config.vision.patch_size
    with nc.no_grad():
        for chunk in _chunks(list(records), batch_size):
            if task == "itm":
                if len(chunk) < 2:
                    continue
                batch = process_batch(chunk, build_task_pipeline(config, vocab, "itm"), rng, patch_size)
                out = model(batch.itm_token_ids, batch.itm_text_mask, batch.patches)
                predicted = model.heads.itm(model.pooled(out)).data.argmax(axis=-1)
                correct += int((predicted == batch.itm_labels).sum())
                total += len(predicted)
            elif task == "mlm":
                batch = initial_batch(chunk, patch_size)
                ids, mask = _encode_captions(batch.captions, vocab, config.data.max_text_len)
                corrupted, targets = mlm_corrupt(ids, mask, config.objective.mlm_ratio, rng, len(vocab),
                                                 config.objective.count_rule)
                out = model(corrupted, mask, batch.patches)
                predicted = model.heads.mlm(out.text_states).data.argmax(axis=-1)
                scored = targets >= 0
                correct += int((predicted[scored] == targets[scored]).sum())
                total += int(scored.sum())
            elif task == "vqa":
                batch = process_batch(chunk, build_task_pipeline(config, vocab, "vqa"), rng, patch_size)
                out = model(batch.token_ids, batch.text_mask, batch.patches)
                predicted = model.heads.vqa(model.pooled(out)).data.argmax(axis=-1)
                correct += int((predicted == batch.answer_ids).sum())
                total += len(predicted)
            else:
                raise MeterError(f"unknown evaluation task '{task}'")
    return {f"{task}_acc": correct / total if total else 0.0}


def _encode_captions(captions, vocab, max_len):
    encoded = [encode_text(c, vocab, max_len) for c in captions]
    return np.stack([i for i, _ in encoded]), np.stack([m for _, m in encoded])


def itm_match_scores(model, records, config, vocab, batch_size: int = 32) -> np.ndarray:
    """[images, captions] matrix of ITM match probabilities."""
    captions = [r.caption for r in records]
    ids, mask = _encode_captions(captions, vocab, config.data.max_text_len)
    patches = np.stack([extract_patches(r.image, config.vision.patch_size) for r in records])
    n = len(records)
    pairs = [(i, j) for i in range(n) for j in range(n)]
    scores = np.zeros((n, n))
    with nc.no_grad():
        for chunk in _chunks(pairs, batch_size):
            img = np.array([i for i, _ in chunk])
            cap = np.array([j for _, j in chunk])
            out = model(ids[cap], mask[cap], patches[img])
            probs = nc.softmax(model.heads.itm(model.pooled(out)), axis=-1).data
            scores[img, cap] = probs[:, 1]
    return scores


def evaluate_retrieval(model, records, config, vocab, batch_size: int = 32) -> dict:
    """Zero-shot recall@1 from ITM scores; pairs with duplicate captions are dropped first."""
    unique = []
    seen = set()
    for r in records:
        if r.caption not in seen:
            seen.add(r.caption)
            unique.append(r)
    unique = unique[:settings.RETRIEVAL_SUBSET_SIZE]
    scores = itm_match_scores(model, unique, config, vocab, batch_size)
    target = np.arange(len(unique))
    return {
        "ir_r1": float((scores.argmax(axis=0) == target).mean()),
        "tr_r1": float((scores.argmax(axis=1) == target).mean()),
    }


# --- Checkpoints ---

def config_digest(config) -> bytes:
    return hashlib.sha256(render_config(config, with_grid=False).encode("utf-8")).digest()


def write_tensors(filepath: str, tensors: dict, digest: bytes) -> None:
    """Little-endian container: magic, version, count, then (name, rank, dims, float64 payload) per tensor, then the digest."""
    if len(digest) != DIGEST_SIZE:
        raise CheckpointFormatError(f"config digest must be {DIGEST_SIZE} bytes")
    with open(filepath, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            array = np.asarray(array, dtype="<f8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            f.write(np.ascontiguousarray(array).tobytes())
        f.write(digest)


def save_checkpoint(model: MeterModel, filepath: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    write_tensors(filepath, model.state_dict(), config_digest(model.config))
    logger.info(f"Successfully saved checkpoint to '{filepath}'")


def read_checkpoint(filepath: str):
    """(OrderedDict name -> array, config digest); CheckpointFormatError on any malformed byte."""
    with open(filepath, "rb") as f:
        payload = f.read()
    pos = 0

    def take(size, what):
        nonlocal pos
        if pos + size > len(payload):
            raise CheckpointFormatError(f"'{filepath}' is truncated while reading {what}")
        chunk = payload[pos:pos + size]
        pos += size
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"'{filepath}' is not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"tensor name is not UTF-8 in '{filepath}'") from e
        (rank,) = struct.unpack("<I", take(4, f"rank of '{name}'"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of '{name}'"))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size, f"payload of '{name}'"), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    digest = take(DIGEST_SIZE, "config digest")
    if pos != len(payload):
        raise CheckpointFormatError(f"'{filepath}' has {len(payload) - pos} trailing bytes")
    return tensors, digest


def load_checkpoint(filepath: str, model: MeterModel) -> MeterModel:
    logger.info(f"Loading checkpoint from '{filepath}'...")
    tensors, digest = read_checkpoint(filepath)
    if digest != config_digest(model.config):
        logger.warning(f"Checkpoint '{filepath}' was written under a different config")
    model.load_state_dict(tensors)
    return model


def model_from_checkpoint(config, vocab_size: int, filepath: str) -> MeterModel:
    """Build a model shaped like the checkpoint (its patch grid may differ after finetuning) and load it."""
    logger.info(f"Loading checkpoint from '{filepath}'...")
    tensors, digest = read_checkpoint(filepath)
    pos = tensors.get("vision_encoder.pos_embed")
    if pos is None:
        raise CheckpointFormatError(f"'{filepath}' has no vision positional table")
    grid = int(round(np.sqrt(pos.shape[0] - 1)))
    model = MeterModel(config, vocab_size, len(ANSWER_VOCAB), grid=grid)
    if digest != config_digest(config):
        logger.warning(f"Checkpoint '{filepath}' was written under a different config")
    model.load_state_dict(tensors)
    return model


# --- Benchmark ---

def benchmark_forward(named_configs, repeats: int = 10, warmup: int = 2, batch_size: int = 1, seed: int = 0) -> list:
    """Median/p90 wall-clock of one forward pass per config on a toy VQA batch."""
    if repeats < 3:
        raise MeterError("benchmark needs at least 3 timed repeats")
    reports = []
    for name, config in named_configs:
        records = generate_corpus(seed, batch_size, config.data.resolution, with_qa=True)
        vocab = run_vocabulary(records)
        model = MeterModel(config, len(vocab), len(ANSWER_VOCAB))
        batch = process_batch(records, build_task_pipeline(config, vocab, "vqa"), np.random.default_rng(seed),
                              config.vision.patch_size)
        times = []
        layer_times = []
        with nc.no_grad():
            for i in range(warmup + repeats):
                timings = {}
                started = time.perf_counter()
                model(batch.token_ids, batch.text_mask, batch.patches, timings=timings)
                elapsed = (time.perf_counter() - started) * 1000.0
                if i >= warmup:
                    times.append(elapsed)
                    layer_times.append(timings)
        median = float(np.median(times))
        p90 = float(np.percentile(times, 90))
        per_layer = {key: float(np.median([t[key] for t in layer_times])) for key in layer_times[0]}
        record = BenchmarkRecord(
            config_name=name,
            params=model.parameter_count(),
            median_ms=median,
            p90_ms=p90,
            repeats=repeats,
            noise_ms=p90 - median,
            per_layer_ms=per_layer,
        )
        logger.info(f"Benchmark {name}: {record.params} params, median {median:.3f} ms, p90 {p90:.3f} ms")
        reports.append(record)
    return reports
