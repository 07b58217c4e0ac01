import os

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

PROJECT_NAME = "meter_desk"

LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

# Default project config, read when --config is not given
DEFAULT_CONFIG_PATH = os.path.join(BASE_DIR, "meter.cfg")

# Artifact file names inside a run's out_dir
RESOLVED_CONFIG_NAME = "resolved.cfg"
METRICS_LOG_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "model.ckpt"
MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.json"
CODEBOOK_NAME = "codebook.npz"
SUMMARY_NAME = "summary.jsonl"
SUMMARY_TABLE_NAME = "summary.txt"
BENCHMARK_NAME = "benchmark.jsonl"
IMAGE_DIR_NAME = "images"

# Vocabulary layout: specials first, then sentinels, then sorted words
PAD_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN)
PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
NUM_SENTINELS = 32
SENTINEL_OFFSET = len(SPECIAL_TOKENS)
FIRST_WORD_ID = SENTINEL_OFFSET + NUM_SENTINELS
DECODER_START_ID = CLS_ID

# Procedural scenes
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
LAYOUT_GRID = 4
MAX_OBJECTS = 3
SUPPORTED_RESOLUTIONS = (32, 64)
COUNT_WORDS = ("one", "two", "three")

# Pairs scored by the periodic in-training evaluation and by retrieval
EVAL_SUBSET_SIZE = 64
RETRIEVAL_SUBSET_SIZE = 16

# Attention masking fill; exp() of it underflows to exactly 0 in float64
MASK_FILL_VALUE = -1e30

# Presets are flat config keys applied before any file or override key.
PRESETS = {
    "toy": {
        "text.hidden": "64", "text.heads": "4", "text.layers": "2", "text.ffn_mult": "4.0",
        "text.max_positions": "32",
        "vision.hidden": "64", "vision.heads": "4", "vision.layers": "2", "vision.ffn_mult": "4.0",
        "vision.patch_size": "8", "vision.max_positions": "0",
        "fusion.hidden": "64", "fusion.heads": "4", "fusion.ffn_mult": "4.0", "fusion.dec_layers": "2", "fusion.coattn_depth": "2",
        "train.steps": "2000", "train.batch_size": "16",
        "train.lr_bottom": "2e-4", "train.lr_top": "1e-3",
        "data.codebook_k": "64",
    },
    "paper-base": {
        "text.hidden": "768", "text.heads": "12", "text.layers": "12", "text.ffn_mult": "4.0",
        "text.max_positions": "64",
        "vision.hidden": "768", "vision.heads": "12", "vision.layers": "12", "vision.ffn_mult": "4.0",
        "vision.patch_size": "8", "vision.max_positions": "0",
        "fusion.hidden": "768", "fusion.heads": "12", "fusion.ffn_mult": "4.0", "fusion.dec_layers": "3", "fusion.coattn_depth": "6",
        "train.steps": "100000", "train.batch_size": "4096",
        "train.lr_bottom": "1e-5", "train.lr_top": "5e-5",
        "data.codebook_k": "64",
    },
}

