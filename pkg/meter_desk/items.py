from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple  # (row, col) on the layout grid


@dataclass(frozen=True)
class Scene:
    # Objects are kept in reading order (row, then column).
    objects: tuple
    seed: int


@dataclass(frozen=True)
class QuestionAnswer:
    question: str
    answer_id: int


@dataclass
class PairRecord:
    id: int
    image: np.ndarray  # H x W x 3, float64 in [0, 1]
    caption: str
    qa: Optional[QuestionAnswer] = None
    scene: Optional[Scene] = None


@dataclass
class Batch:
    """One training step's worth of model inputs and targets.

    Targets use -1 for "not scored". ``span_*`` fields are only filled for the
    encoder-decoder architecture; ``mlm_*`` / ``mim_*`` only when the objective
    is enabled.
    """

    token_ids: np.ndarray          # [B, T] (possibly MLM- or span-corrupted)
    text_mask: np.ndarray          # [B, T] 1 = real token
    patches: np.ndarray            # [B, V-1, patch_dim]
    captions: list = field(default_factory=list)
    questions: list = field(default_factory=list)
    itm_token_ids: Optional[np.ndarray] = None
    itm_text_mask: Optional[np.ndarray] = None
    itm_labels: Optional[np.ndarray] = None       # [B] in {0, 1}
    mlm_targets: Optional[np.ndarray] = None      # [B, T]
    patch_mask: Optional[np.ndarray] = None       # [B, V-1] bool
    mim_code_targets: Optional[np.ndarray] = None  # [B, V-1]
    span_decoder_input: Optional[np.ndarray] = None   # [B, S]
    span_targets: Optional[np.ndarray] = None         # [B, S]
    answer_ids: Optional[np.ndarray] = None           # [B]


@dataclass
class MetricsRecord:
    step: int
    losses: dict
    loss_total: float
    lr_bottom: float
    lr_top: float
    wall_ms: float
    eval: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        row = {"step": self.step, "loss_total": self.loss_total}
        for name, value in self.losses.items():
            # only one MIM variant is active per run
            key = "loss_mim" if name.startswith("mim_") else f"loss_{name}"
            row[key] = value
        row["lr_bottom"] = self.lr_bottom
        row["lr_top"] = self.lr_top
        row["wall_ms"] = self.wall_ms
        row.update(self.eval)
        return row


@dataclass
class BenchmarkRecord:
    config_name: str
    params: int
    median_ms: float
    p90_ms: float
    repeats: int
    noise_ms: float
    per_layer_ms: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config_name": self.config_name,
            "params": self.params,
            "median_ms": self.median_ms,
            "p90_ms": self.p90_ms,
            "repeats": self.repeats,
            "noise_ms": self.noise_ms,
            "per_layer_ms": self.per_layer_ms,
        }
