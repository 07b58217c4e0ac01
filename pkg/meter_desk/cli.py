"""Command-line entry point.

    meter.py <command> [--config meter.cfg] [--set key=value ...]

Commands: gen-data, pretrain, finetune, eval, ablate, benchmark, export-attn.
The config is validated before any work; every command writes a resolved
config snapshot into ``paths.out_dir``. Exit status: 0 success, 1 config
error, 2 runtime error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd
from tqdm import tqdm

from meter_desk import numcore as nc
from meter_desk import settings
from meter_desk.config import expand_grid, load_config, render_config
from meter_desk.datagen import (
    encode_text, extract_patches, generate_corpus, generate_pair, read_manifest, save_codebook, save_json,
    write_manifest, write_pgm,
)
from meter_desk.exceptions import ConfigError, DataError, IndexRangeError, MeterError
from meter_desk.model import MeterModel
from meter_desk.trainer import (
    TrainingData, benchmark_forward, evaluate, finetune, model_from_checkpoint, prepare_data, run_vocabulary,
    save_checkpoint, train,
)

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "ablate", "benchmark", "export-attn")
EVAL_TASKS = ("itm", "mlm", "vqa", "retrieval")


# --- Helpers ---

def _out_path(config, name: str) -> str:
    return os.path.join(config.paths.out_dir, name)


def write_snapshot(config) -> str:
    os.makedirs(config.paths.out_dir, exist_ok=True)
    path = _out_path(config, settings.RESOLVED_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_config(config))
    logger.info(f"Successfully saved resolved config to '{path}'")
    return path


def load_records(config):
    if config.paths.manifest:
        records = read_manifest(config.paths.manifest)
        if not records:
            raise DataError(f"manifest '{config.paths.manifest}' holds no usable pairs")
        return records
    return generate_corpus(config.data.seed, config.data.corpus_size, config.data.resolution, config.data.with_qa)


def _checkpoint_path(config) -> str:
    return config.paths.checkpoint or _out_path(config, settings.CHECKPOINT_NAME)


# --- Commands ---

def cmd_gen_data(config, args):
    records = generate_corpus(config.data.seed, config.data.corpus_size, config.data.resolution, config.data.with_qa)
    write_manifest(records, config.paths.out_dir)
    data = prepare_data(config, records)
    save_json(data.vocab.to_json(), _out_path(config, settings.VOCAB_NAME))
    if data.codebook is not None:
        save_codebook(data.codebook, _out_path(config, settings.CODEBOOK_NAME))


def run_pretrain(config) -> dict:
    """Pretrain one config into its out_dir; returns the final metrics row."""
    write_snapshot(config)
    data = prepare_data(config, load_records(config))
    save_json(data.vocab.to_json(), _out_path(config, settings.VOCAB_NAME))
    model = MeterModel(config, len(data.vocab))
    result = train(config, data, model, metrics_path=_out_path(config, settings.METRICS_LOG_NAME))
    save_checkpoint(model, _out_path(config, settings.CHECKPOINT_NAME))
    final = result.metrics[-1].to_json() if result.metrics else {}
    final["params"] = model.parameter_count()
    return final


def cmd_pretrain(config, args):
    run_pretrain(config)


def cmd_finetune(config, args):
    records = load_records(config)
    data = TrainingData(records=records, vocab=run_vocabulary(records))
    model = model_from_checkpoint(config, len(data.vocab), _checkpoint_path(config))
    finetune(config, data, model, metrics_path=_out_path(config, f"finetune_{config.finetune.task}.jsonl"))
    save_checkpoint(model, _out_path(config, f"finetune_{config.finetune.task}.ckpt"))


def cmd_eval(config, args):
    records = load_records(config)
    vocab = run_vocabulary(records)
    model = model_from_checkpoint(config, len(vocab), _checkpoint_path(config))
    resolution = model.grid * config.vision.patch_size
    if records[0].image.shape[0] != resolution:
        records = [generate_pair(r.id, resolution, with_qa=r.qa is not None) for r in records]
    tasks = args.task or [t for t in EVAL_TASKS if t != "vqa" or config.data.with_qa]
    metrics = {}
    for task in tasks:
        metrics.update(evaluate(model, records, task, config, vocab))
    for key, value in metrics.items():
        logger.info(f"{key}: {value:.4f}")
    save_json(metrics, _out_path(config, "eval.json"))


def ablate(config, sort_by: str = "itm_acc") -> pd.DataFrame:
    """Run every grid point; a failing point is recorded and the grid continues."""
    rows = []
    points = expand_grid(config)
    for name, point in tqdm(points, desc="Ablation grid"):
        point.paths.out_dir = os.path.join(config.paths.out_dir, name)
        row = {"point": name}
        try:
            row.update(run_pretrain(point))
            timing = benchmark_forward([(name, point)], point.bench.repeats, point.bench.warmup, point.bench.batch_size)[0]
            row["median_ms"] = timing.median_ms
            row["status"] = "ok"
        except MeterError as e:
            logger.error(f"Grid point '{name}' failed: {e}")
            row["status"] = "failed"
            row["error"] = str(e)
        rows.append(row)
    os.makedirs(config.paths.out_dir, exist_ok=True)
    summary_path = os.path.join(config.paths.out_dir, settings.SUMMARY_NAME)
    with open(summary_path, "w", encoding="utf-8") as f:
        f.writelines(json.dumps(row) + "\n" for row in rows)
    table = pd.DataFrame(rows)
    if sort_by in table.columns:
        table = table.sort_values(sort_by, ascending=False, kind="stable")
    with open(os.path.join(config.paths.out_dir, settings.SUMMARY_TABLE_NAME), "w", encoding="utf-8") as f:
        f.write(table.to_string(index=False) + "\n")
    logger.info(f"Successfully saved {len(rows)} grid rows to '{summary_path}'")
    return table


def cmd_ablate(config, args):
    write_snapshot(config)
    table = ablate(config, args.sort)
    print(table.to_string(index=False))


def cmd_benchmark(config, args):
    bench = config.bench
    reports = benchmark_forward(expand_grid(config), bench.repeats, bench.warmup, bench.batch_size)
    path = _out_path(config, settings.BENCHMARK_NAME)
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(pd.Series(r.to_json()).to_json() + "\n" for r in reports)
    logger.info(f"Successfully saved {len(reports)} benchmark records to '{path}'")
    print(pd.DataFrame([r.to_json() for r in reports]).drop(columns="per_layer_ms").to_string(index=False))


def normalize_attention_map(row, grid: int) -> np.ndarray:
    """Min-max scale one attention row to 0..255 on the patch grid; an all-equal row maps to 0."""
    values = np.asarray(row, dtype=np.float64).reshape(grid, grid)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros((grid, grid), dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_attention(model, record, vocab, config, out_dir: str, layers=None, token_indices=None) -> list:
    """Write one PGM per (fusion layer, head, content token) of the text-to-vision cross-attention."""
    ids, mask = encode_text(record.caption, vocab, config.data.max_text_len)
    patches = extract_patches(record.image, config.vision.patch_size)[None]
    with nc.no_grad():
        output = model(ids[None], mask[None], patches, trace=True)
    length = int(mask.sum())
    content = list(range(1, length - 1))
    if token_indices is None:
        token_indices = content
    for idx in token_indices:
        if idx not in content:
            raise IndexRangeError(f"token index {idx} is outside the caption's content tokens 1..{length - 2}")
    available = range(len(output.attention_record))
    selected = available if not layers else [int(layer) for layer in layers]
    for layer in selected:
        if layer not in available:
            raise IndexRangeError(f"fusion layer {layer} does not exist (model has {len(available)})")
    os.makedirs(out_dir, exist_ok=True)
    grid = model.grid
    written = []
    for layer in selected:
        weights = output.attention_record[layer]["text_to_vision"][0]  # [heads, T, V], [CLS_V] first
        for head in range(weights.shape[0]):
            for idx in token_indices:
                token = vocab.token_of(int(ids[idx]))
                pixels = normalize_attention_map(weights[head, idx, 1:], grid)
                path = os.path.join(out_dir, f"attn_L{layer}_H{head}_T{idx}_{token}.pgm")
                write_pgm(path, pixels)
                written.append(path)
    logger.info(f"Successfully saved {len(written)} attention maps to '{out_dir}'")
    return written


def cmd_export_attn(config, args):
    vocab = run_vocabulary([])
    model = model_from_checkpoint(config, len(vocab), _checkpoint_path(config))
    record = generate_pair(config.export.pair_seed, model.grid * config.vision.patch_size)
    export_attention(model, record, vocab, config, _out_path(config, "attention"),
                     layers=config.export.layers, token_indices=args.token)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "benchmark": cmd_benchmark,
    "export-attn": cmd_export_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meter", description="Desk-scale vision-language transformer pretraining.")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="Flat 'section.key = value' config file.")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override one config key (repeatable; wins over the file).")
        if command == "eval":
            p.add_argument("--task", action="append", choices=EVAL_TASKS)
        if command == "ablate":
            p.add_argument("--sort", default="itm_acc", help="Summary column to sort the table by.")
        if command == "export-attn":
            p.add_argument("--token", action="append", type=int, help="Content-token index to export (repeatable).")
    return parser


def run(command: str, config_path: str = None, overrides=(), args=None) -> int:
    try:
        config = load_config(config_path, list(overrides))
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return 1
    if args is None:
        args = build_parser().parse_args([command])
    try:
        if command != "ablate" and command != "pretrain":
            write_snapshot(config)
        HANDLERS[command](config, args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return 1
    except (MeterError, OSError) as e:
        logger.error(f"{command} failed: {e}")
        return 2
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=settings.LOG_FORMAT)
    config_path = args.config
    if config_path is None and os.path.exists(settings.DEFAULT_CONFIG_PATH):
        config_path = settings.DEFAULT_CONFIG_PATH
    return run(args.command, config_path, args.overrides, args)


if __name__ == "__main__":
    sys.exit(main())
